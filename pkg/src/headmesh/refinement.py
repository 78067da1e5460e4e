"""Conforming volume and boundary refinement of tetrahedral meshes.

Selected tetrahedra are split into eight through their edge midpoints. The
surrounding elements are split according to how many of their edges carry a
new midpoint: one edge gives two children, two edges on a common face give
three, a full face gives four. Any other pattern is escalated to the full
eight-way split and the closure is repeated until it is stable.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .mesh import TET_EDGES, TetrahedralMesh, _group_rows, orient_tetrahedra

logger = logging.getLogger(__name__)


class InvalidSelection(IndexError):
    pass


# local edge index for an unordered local vertex pair
_LE = -np.ones((4, 4), dtype=np.int64)
for _k, (_a, _b) in enumerate(TET_EDGES):
    _LE[_a, _b] = _LE[_b, _a] = _k

_FACE_EDGE_MASKS = {
    0b111000: 0,  # edges 12,13,23 -> face opposite vertex 0
    0b100110: 1,  # edges 02,03,23
    0b010101: 2,  # edges 01,03,13
    0b001011: 3,  # edges 01,02,12
}


def _mask_bits(mask6: np.ndarray) -> np.ndarray:
    return (mask6.astype(np.int64) * (1 << np.arange(6))).sum(axis=1)


def _build_tables():
    """Per 6-bit split mask: pattern kind and canonical local vertex order (a, b, c, d)."""
    kind = np.full(64, -1, dtype=np.int64)
    order = np.zeros((64, 4), dtype=np.int64)
    for bits in range(64):
        edges = [k for k in range(6) if bits >> k & 1]
        n = len(edges)
        if n == 0:
            kind[bits] = 0
            order[bits] = [0, 1, 2, 3]
        elif n == 1:
            a, b = TET_EDGES[edges[0]]
            c, d = [v for v in range(4) if v not in (a, b)]
            kind[bits] = 1
            order[bits] = [a, b, c, d]
        elif n == 2:
            s0, s1 = set(TET_EDGES[edges[0]]), set(TET_EDGES[edges[1]])
            shared = s0 & s1
            if shared:
                a = shared.pop()
                b = (s0 - {a}).pop()
                c = (s1 - {a}).pop()
                d = [v for v in range(4) if v not in (a, b, c)][0]
                kind[bits] = 2
                order[bits] = [a, b, c, d]
            else:
                kind[bits] = 8
        elif n == 3 and bits in _FACE_EDGE_MASKS:
            d = _FACE_EDGE_MASKS[bits]
            a, b, c = [v for v in range(4) if v != d]
            kind[bits] = 3
            order[bits] = [a, b, c, d]
        else:
            kind[bits] = 8
    return kind, order


_KIND, _ORDER = _build_tables()


def tet_edge_ids(mesh: TetrahedralMesh) -> tuple[np.ndarray, np.ndarray]:
    """Unique sorted edges and the ``(M, 6)`` edge id of each local tet edge."""
    pairs = np.sort(mesh.tets[:, TET_EDGES].reshape(-1, 2), axis=1)
    edges, inverse, _, _ = _group_rows(pairs)
    return edges, inverse.reshape(-1, 6)


def refine_volume(mesh: TetrahedralMesh, element_set) -> TetrahedralMesh:
    """Eight-way split of the selected tetrahedra with a conforming transition layer."""
    sel = np.zeros(mesh.n_tets, dtype=bool)
    idx = np.asarray(element_set)
    if idx.dtype == bool:
        if len(idx) != mesh.n_tets:
            raise InvalidSelection("boolean selection length does not match the mesh")
        sel |= idx
    elif idx.size:
        idx = idx.astype(np.int64).reshape(-1)
        if idx.min() < 0 or idx.max() >= mesh.n_tets:
            raise InvalidSelection("element index out of range")
        sel[idx] = True
    if not sel.any():
        return mesh

    edges, te = tet_edge_ids(mesh)
    while True:
        split = np.zeros(len(edges), dtype=bool)
        split[te[sel].reshape(-1)] = True
        bits = _mask_bits(split[te])
        kind = _KIND[bits]
        escalate = (kind == 8) & ~sel
        if not escalate.any():
            break
        sel |= escalate
    kind = np.where(sel, 8, kind)

    n0 = mesh.n_nodes
    split_ids = np.flatnonzero(split)
    mid_of = np.full(len(edges), -1, dtype=np.int64)
    mid_of[split_ids] = n0 + np.arange(len(split_ids))
    mids = 0.5 * (mesh.nodes[edges[split_ids, 0]] + mesh.nodes[edges[split_ids, 1]])
    nodes = np.vstack([mesh.nodes, mids])

    tets = mesh.tets
    midl = mid_of[te]  # (M, 6) midpoint node per local edge (or -1)
    children: list[np.ndarray] = []
    parents: list[np.ndarray] = []

    def mid(rows, ordr, x, y):
        return midl[rows, _LE[ordr[:, x], ordr[:, y]]]

    def glob(rows, ordr, x):
        return tets[rows, ordr[:, x]]

    # untouched
    r = np.flatnonzero(kind == 0)
    children.append(tets[r])
    parents.append(r)

    # one split edge (a, b)
    r = np.flatnonzero(kind == 1)
    if len(r):
        o = _ORDER[bits[r]]
        a, b, c, d = (glob(r, o, k) for k in range(4))
        m = mid(r, o, 0, 1)
        children.append(np.stack([np.stack([a, m, c, d], 1), np.stack([m, b, c, d], 1)], 1).reshape(-1, 4))
        parents.append(np.repeat(r, 2))

    # two split edges (a, b) and (a, c) on face abc
    r = np.flatnonzero(kind == 2)
    if len(r):
        o = _ORDER[bits[r]]
        a, b, c, d = (glob(r, o, k) for k in range(4))
        mab = mid(r, o, 0, 1)
        mac = mid(r, o, 0, 2)
        low_b = b < c
        t1 = np.stack([a, mab, mac, d], 1)
        t2 = np.where(low_b[:, None], np.stack([mab, b, mac, d], 1), np.stack([mab, b, c, d], 1))
        t3 = np.where(low_b[:, None], np.stack([b, c, mac, d], 1), np.stack([mab, c, mac, d], 1))
        children.append(np.stack([t1, t2, t3], 1).reshape(-1, 4))
        parents.append(np.repeat(r, 3))

    # full face abc split, d opposite
    r = np.flatnonzero(kind == 3)
    if len(r):
        o = _ORDER[bits[r]]
        a, b, c, d = (glob(r, o, k) for k in range(4))
        mab, mac, mbc = mid(r, o, 0, 1), mid(r, o, 0, 2), mid(r, o, 1, 2)
        kids = [
            np.stack([a, mab, mac, d], 1),
            np.stack([b, mbc, mab, d], 1),
            np.stack([c, mac, mbc, d], 1),
            np.stack([mab, mbc, mac, d], 1),
        ]
        children.append(np.stack(kids, 1).reshape(-1, 4))
        parents.append(np.repeat(r, 4))

    # eight-way split
    r = np.flatnonzero(kind == 8)
    if len(r):
        v = tets[r]
        m = midl[r]  # columns: 01 02 03 12 13 23
        corners = [
            np.stack([v[:, 0], m[:, 0], m[:, 1], m[:, 2]], 1),
            np.stack([v[:, 1], m[:, 0], m[:, 3], m[:, 4]], 1),
            np.stack([v[:, 2], m[:, 1], m[:, 3], m[:, 5]], 1),
            np.stack([v[:, 3], m[:, 2], m[:, 4], m[:, 5]], 1),
        ]
        diag_pairs = [(0, 5), (1, 4), (2, 3)]
        rings = [(1, 2, 4, 3), (0, 2, 5, 3), (0, 1, 5, 4)]
        dlen = np.stack(
            [np.linalg.norm(nodes[m[:, p]] - nodes[m[:, q]], axis=1) for p, q in diag_pairs], 1
        )
        choice = np.argmin(dlen, axis=1)
        inner = np.zeros((len(r), 4, 4), dtype=np.int64)
        for ci, ((p, q), ring) in enumerate(zip(diag_pairs, rings)):
            rows = choice == ci
            if not rows.any():
                continue
            mm = m[rows]
            for j in range(4):
                inner[rows, j] = np.stack(
                    [mm[:, p], mm[:, q], mm[:, ring[j]], mm[:, ring[(j + 1) % 4]]], 1
                )
        kids = np.concatenate([np.stack(corners, 1), inner], axis=1)
        children.append(kids.reshape(-1, 4))
        parents.append(np.repeat(r, 8))

    par = np.concatenate(parents)
    kids = np.concatenate(children)
    order = np.argsort(par, kind="stable")
    par = par[order]
    kids = orient_tetrahedra(nodes, kids[order])
    logger.debug("refine_volume: %d selected, %d -> %d tets", int(sel.sum()), mesh.n_tets, len(kids))
    return TetrahedralMesh(nodes, kids, mesh.labels[par])


def interface_layer(mesh: TetrahedralMesh, labels: np.ndarray, pair, hierarchy=None) -> np.ndarray:
    """Tetrahedra on both sides of the interface named by ``pair``.

    Without ``hierarchy`` the interface is the set of faces between labels
    ``pair[0]`` and ``pair[1]`` and only tets with those labels are returned.
    With ``hierarchy`` (labels ordered innermost to outermost) it is the nested
    boundary of ``pair[0]``: every face between a label at or inside
    ``pair[0]`` and one outside it. A thin layer missing in places then still
    gets refined where the inner region touches a farther compartment.
    """
    a, b = pair
    labels = np.asarray(labels)
    adj = mesh.face_adjacency
    t0, t1 = adj.tets[:, 0], adj.tets[:, 1]
    ok = t1 >= 0
    l0 = labels[t0]
    l1 = np.where(ok, labels[np.maximum(t1, 0)], -1)
    if hierarchy is None:
        shared = ok & (((l0 == a) & (l1 == b)) | ((l0 == b) & (l1 == a)))
        keep = np.isin(labels, [a, b])
    else:
        hierarchy = [int(v) for v in hierarchy]
        inner = hierarchy[: hierarchy.index(a) + 1]
        in0, in1 = np.isin(l0, inner), np.isin(l1, inner)
        shared = ok & (in0 != in1)
        keep = labels != 0 if b != 0 else np.ones(len(labels), dtype=bool)
    if not shared.any():
        return np.zeros(mesh.n_tets, dtype=bool)
    on_face = np.zeros(mesh.n_nodes, dtype=bool)
    on_face[adj.faces[shared].reshape(-1)] = True
    return on_face[mesh.tets].any(axis=1) & keep


def refine_boundary(
    mesh: TetrahedralMesh, labels, compartment_pair, relabel: Callable | None = None, hierarchy=None
) -> TetrahedralMesh:
    """Refine the one-element layers on both sides of the interface between two labels.

    ``relabel``, when given, is called with the refined mesh and must return
    the updated label array. ``hierarchy`` switches to nested-boundary
    semantics, see :func:`interface_layer`.
    """
    labels = np.asarray(labels, dtype=np.int64)
    present = set(np.unique(labels).tolist())
    for lab in compartment_pair:
        if lab not in present:
            raise InvalidSelection(f"label {lab} not present in mesh")
    base = mesh.with_labels(labels) if labels is not mesh.labels else mesh
    layer = interface_layer(base, labels, compartment_pair, hierarchy)
    if not layer.any():
        return base
    out = refine_volume(base, layer)
    if relabel is not None:
        out = out.with_labels(relabel(out))
    return out


@dataclass
class RefinementPlan:
    """Ordered refinement steps, e.g. ``[{"boundary": [1, 2], "times": 1}, {"volume": 1, "times": 1}]``."""

    steps: list[dict] = field(default_factory=list)
    hierarchy: list[int] | None = None

    def __post_init__(self):
        for s in self.steps:
            if int(s.get("times", 1)) < 0:
                raise ValueError("refinement counts must be >= 0")
            if ("boundary" in s) == ("volume" in s):
                raise ValueError(f"step needs exactly one of 'boundary' or 'volume': {s}")

    def execute(self, mesh: TetrahedralMesh, relabel: Callable | None = None) -> TetrahedralMesh:
        for s in self.steps:
            for _ in range(int(s.get("times", 1))):
                if "boundary" in s:
                    pair = tuple(int(v) for v in s["boundary"])
                    if not set(pair) <= set(np.unique(mesh.labels).tolist()):
                        logger.warning("skipping boundary refinement %s: label missing", pair)
                        break
                    mesh = refine_boundary(mesh, mesh.labels, pair, hierarchy=self.hierarchy)
                else:
                    mesh = refine_volume(mesh, mesh.labels == int(s["volume"]))
                if relabel is not None:
                    mesh = mesh.with_labels(relabel(mesh))
        return mesh
