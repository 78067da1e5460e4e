"""Linear finite elements for the EEG forward problem.

The stiffness matrix discretises ``div(sigma grad u) = div J_p`` with zero
normal current on the outer boundary. Dipoles enter through the partial
integration load ``b_i = q . grad(phi_i)(r0)`` of the element containing the
dipole. Lead fields use the adjoint approach: one solve per electrode with the
average-referenced restriction row as right-hand side.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree

from ..mesh import TetrahedralMesh
from .solver import SolveInfo, make_preconditioner, pcg

logger = logging.getLogger(__name__)


class MissingConductivity(KeyError):
    pass


class PositionOutsideActive(ValueError):
    pass


def p1_gradients(nodes: np.ndarray, tets: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of the four barycentric basis functions per element and element volumes.

    Returns ``(grads, vol)`` with ``grads`` of shape ``(M, 4, 3)``.
    """
    p0 = nodes[tets[:, 0]]
    jac = np.stack([nodes[tets[:, 1]] - p0, nodes[tets[:, 2]] - p0, nodes[tets[:, 3]] - p0], axis=1)
    inv = np.linalg.inv(jac)
    g = np.empty((len(tets), 4, 3))
    g[:, 1:] = np.transpose(inv, (0, 2, 1))
    g[:, 0] = -g[:, 1:].sum(axis=1)
    vol = np.linalg.det(jac) / 6.0
    return g, vol


def element_conductivity(mesh: TetrahedralMesh, conductivity) -> np.ndarray:
    cond = {int(k): float(v) for k, v in dict(conductivity).items()}
    labs = np.unique(mesh.labels)
    missing = [int(v) for v in labs if int(v) not in cond]
    if missing:
        raise MissingConductivity(f"no conductivity for labels {missing}")
    lut = np.zeros(int(labs.max()) + 1)
    for k, v in cond.items():
        if 0 <= k < len(lut):
            lut[k] = v
    return lut[mesh.labels]


def assemble_system(mesh: TetrahedralMesh, conductivity) -> sparse.csr_matrix:
    """P1 stiffness matrix ``A_ij = sum_T sigma_T V_T grad(phi_i) . grad(phi_j)``."""
    sig = element_conductivity(mesh, conductivity)
    g, vol = p1_gradients(mesh.nodes, mesh.tets)
    local = np.einsum("mid,mjd->mij", g, g) * (sig * np.abs(vol))[:, None, None]
    rows = np.repeat(mesh.tets, 4, axis=1).reshape(-1)
    cols = np.tile(mesh.tets, (1, 4)).reshape(-1)
    a = sparse.csr_matrix((local.reshape(-1), (rows, cols)), shape=(mesh.n_nodes, mesh.n_nodes))
    a.sum_duplicates()
    return a


class PointLocator:
    """Containing-element queries through a k-d tree on element centroids."""

    def __init__(self, mesh: TetrahedralMesh, k: int = 32):
        self.mesh = mesh
        self.k = min(k, mesh.n_tets)
        self.tree = cKDTree(mesh.nodes[mesh.tets].mean(axis=1))
        self._grads, _ = p1_gradients(mesh.nodes, mesh.tets)

    def barycentric(self, tet: int, point) -> np.ndarray:
        t = self.mesh.tets[tet]
        g = self._grads[tet]
        p = np.asarray(point, dtype=float)
        lam = g @ (p - self.mesh.nodes[t[0]])
        lam[0] = 1.0 + lam[0]
        return lam

    def locate(self, points, tol: float = 1e-9) -> np.ndarray:
        """Index of the element containing each point, ``-1`` when none is found."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        _, cand = self.tree.query(pts, k=self.k)
        cand = np.atleast_2d(cand)
        out = np.full(len(pts), -1, dtype=np.int64)
        for i, p in enumerate(pts):
            best, best_val = -1, -np.inf
            for t in cand[i]:
                lam = self.barycentric(t, p)
                if lam.min() > best_val:
                    best, best_val = t, lam.min()
                if best_val >= -tol:
                    break
            if best_val >= -tol:
                out[i] = best
            else:
                lam_all = np.einsum("mid,md->mi", self._grads, p - self.mesh.nodes[self.mesh.tets[:, 0]])
                lam_all[:, 0] += 1.0
                mins = lam_all.min(axis=1)
                j = int(np.argmax(mins))
                if mins[j] >= -tol:
                    out[i] = j
        return out


def dipole_rhs(mesh: TetrahedralMesh, position, moment, active_labels=None, locator: PointLocator | None = None,
               tet: int | None = None) -> np.ndarray:
    """Partial-integration load vector of a point dipole (entries sum to zero)."""
    locator = locator or PointLocator(mesh)
    if tet is None:
        tet = int(locator.locate(position)[0])
    if tet < 0:
        raise PositionOutsideActive(f"dipole position {np.asarray(position).tolist()} lies outside the mesh")
    if active_labels is not None and int(mesh.labels[tet]) not in set(int(v) for v in active_labels):
        raise PositionOutsideActive(f"dipole lies in compartment {int(mesh.labels[tet])}, not an active one")
    b = np.zeros(mesh.n_nodes)
    np.add.at(b, mesh.tets[tet], locator._grads[tet] @ np.asarray(moment, dtype=float))
    return b


@dataclass
class ElectrodeSet:
    positions: np.ndarray
    nodes: np.ndarray | None = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        if len(self.positions) < 2:
            raise ValueError("need at least two electrodes")

    def snap(self, mesh: TetrahedralMesh) -> "ElectrodeSet":
        """Attach every electrode to its nearest node on the outer mesh boundary."""
        adj = mesh.face_adjacency
        outer = np.unique(adj.faces[adj.tets[:, 1] < 0])
        _, idx = cKDTree(mesh.nodes[outer]).query(self.positions)
        return ElectrodeSet(self.positions, outer[idx])


@dataclass
class SourceSpace:
    """Source positions with either Cartesian triplets or fixed orientations per position."""

    positions: np.ndarray
    orientations: np.ndarray | None = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        if self.orientations is not None:
            self.orientations = np.asarray(self.orientations, dtype=float).reshape(-1, 3)
            if len(self.orientations) != len(self.positions):
                raise ValueError("one orientation per position is required")

    @property
    def n_positions(self) -> int:
        return len(self.positions)

    @property
    def components(self) -> int:
        return 3 if self.orientations is None else 1

    def moments(self) -> np.ndarray:
        """``(columns, 3)`` unit moments in column order."""
        if self.orientations is None:
            return np.tile(np.eye(3), (self.n_positions, 1))
        return self.orientations


def active_mask(mesh: TetrahedralMesh, positions, active_labels=None, locator: PointLocator | None = None) -> np.ndarray:
    """True for positions inside an element whose label is active (any element when unset)."""
    locator = locator or PointLocator(mesh)
    tets = locator.locate(np.asarray(positions, dtype=float).reshape(-1, 3))
    ok = tets >= 0
    if active_labels is not None:
        ok &= np.isin(mesh.labels[np.maximum(tets, 0)], np.asarray(list(active_labels)))
    return ok


def restrict_sources(sources: SourceSpace, mesh: TetrahedralMesh, active_labels=None, locator=None):
    """Subset of ``sources`` lying in active elements, with the kept indices."""
    keep = np.flatnonzero(active_mask(mesh, sources.positions, active_labels, locator))
    ori = None if sources.orientations is None else sources.orientations[keep]
    return SourceSpace(sources.positions[keep], ori), keep


@dataclass
class LeadField:
    matrix: np.ndarray
    electrodes: ElectrodeSet
    sources: SourceSpace
    mesh_checksum: str = ""
    solve_info: list[SolveInfo] = field(default_factory=list, repr=False)

    @property
    def components(self) -> int:
        return self.sources.components

    def block(self, i: int) -> np.ndarray:
        c = self.components
        return self.matrix[:, c * i:c * (i + 1)]

    def save(self, path) -> tuple[Path, Path]:
        """Write ``<path>.npy`` plus a ``<path>.json`` sidecar."""
        path = Path(path)
        base = path.with_suffix("")
        npy, meta = base.with_suffix(".npy"), base.with_suffix(".json")
        base.parent.mkdir(parents=True, exist_ok=True)
        np.save(npy, self.matrix)
        doc = {
            "shape": list(self.matrix.shape),
            "reference": "average",
            "units": "potential per unit moment, lengths in mm, conductivity in S/m",
            "electrode_positions_mm": self.electrodes.positions.tolist(),
            "electrode_nodes": None if self.electrodes.nodes is None else self.electrodes.nodes.tolist(),
            "source_positions_mm": self.sources.positions.tolist(),
            "source_orientations": None if self.sources.orientations is None else self.sources.orientations.tolist(),
            "mesh_checksum": self.mesh_checksum,
        }
        meta.write_text(json.dumps(doc, indent=1) + "\n")
        return npy, meta

    @classmethod
    def load(cls, path) -> "LeadField":
        base = Path(path).with_suffix("")
        mat = np.load(base.with_suffix(".npy"))
        doc = json.loads(base.with_suffix(".json").read_text())
        nodes = doc.get("electrode_nodes")
        el = ElectrodeSet(np.asarray(doc["electrode_positions_mm"]), None if nodes is None else np.asarray(nodes))
        ori = doc.get("source_orientations")
        src = SourceSpace(np.asarray(doc["source_positions_mm"]), None if ori is None else np.asarray(ori))
        return cls(mat, el, src, doc.get("mesh_checksum", ""))


def mesh_checksum(mesh: TetrahedralMesh) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(mesh.nodes).tobytes())
    h.update(np.ascontiguousarray(mesh.tets).tobytes())
    h.update(np.ascontiguousarray(mesh.labels).tobytes())
    return h.hexdigest()


def source_matrix(mesh: TetrahedralMesh, sources: SourceSpace, active_labels=None,
                  locator: PointLocator | None = None) -> sparse.csc_matrix:
    """Sparse ``G`` whose columns are the dipole loads of all source components."""
    locator = locator or PointLocator(mesh)
    tets = locator.locate(sources.positions)
    bad = np.flatnonzero(tets < 0)
    if len(bad):
        raise PositionOutsideActive(f"{len(bad)} source positions lie outside the mesh")
    if active_labels is not None:
        off = ~np.isin(mesh.labels[tets], np.asarray(list(active_labels)))
        if off.any():
            raise PositionOutsideActive(f"{int(off.sum())} source positions lie outside the active compartments")
    c = sources.components
    mom = sources.moments().reshape(sources.n_positions, c, 3)
    g = locator._grads[tets]  # (P, 4, 3)
    vals = np.einsum("pkd,pcd->pck", g, mom)  # (P, c, 4)
    rows = np.repeat(mesh.tets[tets][:, None, :], c, axis=1)
    cols = np.broadcast_to(np.arange(sources.n_positions * c).reshape(-1, c)[:, :, None], rows.shape)
    return sparse.csc_matrix(
        (vals.reshape(-1), (rows.reshape(-1), cols.reshape(-1))),
        shape=(mesh.n_nodes, sources.n_positions * c),
    )


def compute_lead_field(
    mesh: TetrahedralMesh,
    conductivity,
    electrodes: ElectrodeSet,
    sources: SourceSpace,
    active_labels=None,
    tol: float = 1e-9,
    preconditioner: str = "amg",
    system: sparse.csr_matrix | None = None,
) -> LeadField:
    """Average-referenced lead field ``L = R A^-1 G`` via one adjoint solve per electrode."""
    a = assemble_system(mesh, conductivity) if system is None else system
    el = electrodes if electrodes.nodes is not None else electrodes.snap(mesh)
    g = source_matrix(mesh, sources, active_labels)
    m = make_preconditioner(a, preconditioner)
    n_el = len(el.positions)
    rows = np.zeros((n_el, g.shape[1]))
    infos = []
    # transfer vectors for distinct electrode nodes only; duplicates share rows
    uniq, inv = np.unique(el.nodes, return_inverse=True)
    cache: dict[int, np.ndarray] = {}
    for j, node in enumerate(uniq):
        rhs = np.full(mesh.n_nodes, 0.0)
        rhs[node] = 1.0
        w, info = pcg(a, rhs, m, tol=tol)
        infos.append(info)
        cache[j] = np.asarray(g.T @ w).reshape(-1)
    for e in range(n_el):
        rows[e] = cache[int(inv[e])]
    rows -= rows.mean(axis=0, keepdims=True)
    logger.info("lead field: %d electrodes (%d solves), %d columns, max PCG iterations %d",
                n_el, len(uniq), g.shape[1], max(i.iterations for i in infos))
    return LeadField(rows, el, sources, mesh_checksum(mesh), infos)
