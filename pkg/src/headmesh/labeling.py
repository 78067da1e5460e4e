"""Solid-angle compartment labelling of tetrahedral meshes.

A node is inside a compartment surface when its enclosure ratio (solid angle
subtended by the surface over 4*pi) reaches the threshold ``T``. A
tetrahedron takes the innermost compartment whose surface holds all four of
its nodes, and label 0 when there is none.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .geometry import solid_angle_ratio
from .mesh import TetrahedralMesh
from .surfaces import SurfaceSegmentation, TriSurface

logger = logging.getLogger(__name__)


class NonConvergence(RuntimeWarning):
    pass


@dataclass(frozen=True)
class SolidAngleParams:
    threshold: float = 0.5
    workers: int = 1
    max_iters: int = 64

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"threshold must lie in (0, 1), got {self.threshold}")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")


@dataclass
class NodeEnclosure:
    """Per-surface enclosure ratios and inside flags, shape ``(surfaces, nodes)``."""

    ratios: np.ndarray
    inside: np.ndarray


@dataclass
class RelabelResult:
    labels: np.ndarray
    passes: int
    changed: int
    evaluated: int
    converged: bool


def enclosure_ratio(point, surface: TriSurface) -> float | np.ndarray:
    """Enclosure ratio of one point (or an array of points) with respect to a closed surface."""
    pts = np.asarray(point, dtype=float)
    vals = solid_angle_ratio(pts.reshape(-1, 3), surface.triangle_points())
    return float(vals[0]) if pts.ndim == 1 else vals


def _max_incident_edge(mesh: TetrahedralMesh) -> np.ndarray:
    e = mesh.edges
    ln = np.linalg.norm(mesh.nodes[e[:, 0]] - mesh.nodes[e[:, 1]], axis=1)
    out = np.zeros(mesh.n_nodes)
    np.maximum.at(out, e[:, 0], ln)
    np.maximum.at(out, e[:, 1], ln)
    return out


def surface_ratios(mesh: TetrahedralMesh, surface: TriSurface, workers: int = 1) -> np.ndarray:
    """Enclosure ratio of every mesh node.

    Nodes farther from the surface than their longest incident edge cannot be
    separated from each other by it along mesh edges, so the ratio is constant
    on each connected set of such nodes. One exact evaluation per set covers
    the far field; every remaining node is evaluated directly.
    """
    tri = surface.triangle_points()
    centroids = tri.mean(axis=1)
    radius = np.linalg.norm(tri - centroids[:, None, :], axis=2).max()
    dist, _ = cKDTree(centroids).query(mesh.nodes)
    lower = dist - radius
    far = lower > _max_incident_edge(mesh)

    ratios = np.empty(mesh.n_nodes)
    near = np.flatnonzero(~far)
    ratios[near] = solid_angle_ratio(mesh.nodes[near], tri, workers=workers)
    if far.any():
        e = mesh.edges
        keep = far[e[:, 0]] & far[e[:, 1]]
        n = mesh.n_nodes
        g = coo_matrix((np.ones(int(keep.sum())), (e[keep, 0], e[keep, 1])), shape=(n, n))
        _, comp = connected_components(g, directed=False)
        far_idx = np.flatnonzero(far)
        fc = comp[far_idx]
        uniq, first = np.unique(fc, return_index=True)
        reps = far_idx[first]
        rep_vals = solid_angle_ratio(mesh.nodes[reps], tri, workers=workers)
        lookup = dict(zip(uniq.tolist(), rep_vals.tolist()))
        ratios[far_idx] = np.array([lookup[c] for c in fc.tolist()])
    return ratios


def labels_from_inside(tets: np.ndarray, inside: np.ndarray, comp_labels) -> np.ndarray:
    """Innermost compartment containing all four nodes of each tet; 0 otherwise."""
    labels = np.zeros(len(tets), dtype=np.int64)
    done = np.zeros(len(tets), dtype=bool)
    for k, lab in enumerate(comp_labels):
        full = inside[k][tets].all(axis=1) & ~done
        labels[full] = lab
        done |= full
    return labels


def node_compartments(inside: np.ndarray, comp_labels) -> np.ndarray:
    """Innermost compartment containing each node (0 when none)."""
    out = np.zeros(inside.shape[1], dtype=np.int64)
    done = np.zeros(inside.shape[1], dtype=bool)
    for k, lab in enumerate(comp_labels):
        hit = inside[k] & ~done
        out[hit] = lab
        done |= hit
    return out


def label_nodes(mesh: TetrahedralMesh, seg: SurfaceSegmentation, params: SolidAngleParams) -> NodeEnclosure:
    tissue = seg.tissue
    ratios = np.vstack([surface_ratios(mesh, c.surface, params.workers) for c in tissue])
    return NodeEnclosure(ratios=ratios, inside=ratios >= params.threshold)


def initial_label(mesh: TetrahedralMesh, seg: SurfaceSegmentation, params: SolidAngleParams | None = None) -> np.ndarray:
    """Label every tetrahedron by evaluating every node against every tissue surface."""
    params = params or SolidAngleParams()
    enc = label_nodes(mesh, seg, params)
    return labels_from_inside(mesh.tets, enc.inside, [c.label for c in seg.tissue])


def _inherited_inside(mesh: TetrahedralMesh, seg: SurfaceSegmentation, labels: np.ndarray) -> np.ndarray:
    tissue = seg.tissue
    inside = np.zeros((len(tissue), mesh.n_nodes), dtype=bool)
    for k, c in enumerate(tissue):
        held = np.isin(labels, seg.inner_labels(c.label))
        inside[k, mesh.tets[held].reshape(-1)] = True
    return inside


def _boundary_ring_nodes(mesh: TetrahedralMesh, region: np.ndarray) -> np.ndarray:
    """Nodes of every tet touching a face between ``region`` and the rest."""
    adj = mesh.face_adjacency
    t0, t1 = adj.tets[:, 0], adj.tets[:, 1]
    interior = t1 >= 0
    cross = interior & (region[t0] != region[np.maximum(t1, 0)])
    face_nodes = np.unique(adj.faces[cross])
    if len(face_nodes) == 0:
        return face_nodes
    touch = np.zeros(mesh.n_nodes, dtype=bool)
    touch[face_nodes] = True
    tets_touch = touch[mesh.tets].any(axis=1)
    return np.unique(mesh.tets[tets_touch])


def relabel_recursive(
    mesh: TetrahedralMesh,
    seg: SurfaceSegmentation,
    params: SolidAngleParams | None,
    prev_labels: np.ndarray,
) -> RelabelResult:
    """Re-evaluate only nodes around current label boundaries until no node changes status.

    Node status is first inherited from ``prev_labels`` (a node lies inside a
    surface when any incident tet carries a label enclosed by it). Each pass
    evaluates the not-yet-evaluated nodes of tetrahedra touching a label
    boundary, then rebuilds the labels; the loop stops at the first pass in
    which no evaluated node flips.
    """
    params = params or SolidAngleParams()
    prev_labels = np.asarray(prev_labels, dtype=np.int64)
    if len(prev_labels) != mesh.n_tets:
        raise ValueError("prev_labels length does not match the mesh")
    tissue = seg.tissue
    comp_labels = [c.label for c in tissue]
    tris = [c.surface.triangle_points() for c in tissue]
    inside = _inherited_inside(mesh, seg, prev_labels)
    evaluated = np.zeros_like(inside)
    labels = labels_from_inside(mesh.tets, inside, comp_labels)
    total_eval = 0
    changed_last = 0
    for it in range(1, params.max_iters + 1):
        changed_last = 0
        any_candidates = False
        for k, c in enumerate(tissue):
            region = np.isin(labels, seg.inner_labels(c.label))
            ring = _boundary_ring_nodes(mesh, region)
            cand = ring[~evaluated[k, ring]]
            if len(cand) == 0:
                continue
            any_candidates = True
            vals = solid_angle_ratio(mesh.nodes[cand], tris[k], workers=params.workers) >= params.threshold
            changed_last += int(np.count_nonzero(vals != inside[k, cand]))
            inside[k, cand] = vals
            evaluated[k, cand] = True
            total_eval += len(cand)
        labels = labels_from_inside(mesh.tets, inside, comp_labels)
        logger.debug("relabel pass %d: %d node changes", it, changed_last)
        if changed_last == 0 or not any_candidates:
            return RelabelResult(labels, it, 0, total_eval, True)
    logger.warning("recursive relabelling did not converge in %d passes", params.max_iters)
    return RelabelResult(labels, params.max_iters, changed_last, total_eval, False)
