"""Tetrahedral mesh container, topology queries and integrity checks.

Node positions are in millimetres. Tetrahedra are stored as zero-based node
index quadruples oriented so that the signed volume is positive; label ``0``
is reserved for the removable bounding-box compartment.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

# Local faces of a positively oriented tet, listed with outward winding.
# Row k is the face opposite local vertex k.
TET_FACES = np.array([[1, 2, 3], [0, 3, 2], [0, 1, 3], [0, 2, 1]])
TET_EDGES = np.array([[0, 1], [0, 2], [0, 3], [1, 2], [1, 3], [2, 3]])

MESH_HEADER = "tetmesh v1"


class MeshError(Exception):
    """Raised for malformed mesh input."""


class UnknownLabel(MeshError):
    """Requested compartment label is not carried by any tetrahedron."""


def signed_volume(tet) -> float:
    """Signed volume of a tetrahedron given as four 3D points.

    Positive when the vertices ``(p1 - p0, p2 - p0, p3 - p0)`` form a
    right-handed triple. Degenerate tetrahedra give 0.
    """
    p = np.asarray(tet, dtype=float)
    return float(np.linalg.det(np.stack([p[1] - p[0], p[2] - p[0], p[3] - p[0]])) / 6.0)


def tet_volumes(nodes: np.ndarray, tets: np.ndarray) -> np.ndarray:
    """Vectorised signed volumes for every tetrahedron."""
    p0 = nodes[tets[:, 0]]
    a = nodes[tets[:, 1]] - p0
    b = nodes[tets[:, 2]] - p0
    c = nodes[tets[:, 3]] - p0
    # explicit triple product; np.cross carries large per-call overhead on small batches
    return (
        a[:, 0] * (b[:, 1] * c[:, 2] - b[:, 2] * c[:, 1])
        + a[:, 1] * (b[:, 2] * c[:, 0] - b[:, 0] * c[:, 2])
        + a[:, 2] * (b[:, 0] * c[:, 1] - b[:, 1] * c[:, 0])
    ) / 6.0


def orient_tetrahedra(nodes: np.ndarray, tets: np.ndarray) -> np.ndarray:
    """Return a copy of ``tets`` with negatively oriented rows fixed by swapping two indices."""
    tets = np.array(tets, dtype=np.int64, copy=True)
    if len(tets) == 0:
        return tets.reshape(0, 4)
    neg = tet_volumes(nodes, tets) < 0
    tets[neg, 2], tets[neg, 3] = tets[neg, 3], tets[neg, 2].copy()
    return tets


def _group_rows(keys: np.ndarray):
    """Group identical integer rows.

    Returns ``(unique_rows, inverse, counts, order)`` where ``order`` sorts the
    input so that equal rows are contiguous.
    """
    if len(keys) == 0:
        return keys, np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    order = np.lexsort(keys.T[::-1])
    sk = keys[order]
    new = np.ones(len(sk), dtype=bool)
    new[1:] = np.any(sk[1:] != sk[:-1], axis=1)
    group = np.cumsum(new) - 1
    inverse = np.empty(len(keys), dtype=np.int64)
    inverse[order] = group
    counts = np.bincount(group)
    return sk[new], inverse, counts, order


@dataclass
class FaceAdjacency:
    """Sorted face triples with their incident tetrahedra.

    ``tets`` has two columns; the second is ``-1`` for faces with a single
    incident element. ``counts`` records the true incidence, which exceeds 2
    only on broken meshes.
    """

    faces: np.ndarray
    tets: np.ndarray
    counts: np.ndarray
    local: np.ndarray  # local face index (0..3) within tets[:, 0]

    def __len__(self) -> int:
        return len(self.faces)

    def __getitem__(self, triple) -> list[int]:
        key = np.sort(np.asarray(triple, dtype=np.int64))
        hit = np.flatnonzero(np.all(self.faces == key, axis=1))
        if len(hit) == 0:
            raise KeyError(tuple(int(k) for k in triple))
        row = self.tets[hit[0]]
        return [int(t) for t in row if t >= 0]

    def as_dict(self) -> dict[tuple[int, int, int], list[int]]:
        return {
            tuple(int(v) for v in f): [int(t) for t in row if t >= 0]
            for f, row in zip(self.faces, self.tets)
        }

    @property
    def interior(self) -> np.ndarray:
        return self.tets[:, 1] >= 0


@dataclass
class CompartmentBoundary:
    """Outward-oriented boundary triangles of a labelled region."""

    label: int | tuple[int, ...]
    triangles: np.ndarray
    nodes: np.ndarray

    def edges(self) -> np.ndarray:
        e = np.concatenate([self.triangles[:, [0, 1]], self.triangles[:, [1, 2]], self.triangles[:, [2, 0]]])
        return np.unique(np.sort(e, axis=1), axis=0)

    def is_watertight(self) -> bool:
        if len(self.triangles) == 0:
            return False
        e = np.concatenate([self.triangles[:, [0, 1]], self.triangles[:, [1, 2]], self.triangles[:, [2, 0]]])
        _, _, counts, _ = _group_rows(np.sort(e, axis=1))
        return bool(np.all(counts == 2))


@dataclass
class ValidationReport:
    """Findings of :func:`validate_mesh`; empty when every invariant holds."""

    index_errors: list[int] = field(default_factory=list)
    inverted: list[int] = field(default_factory=list)
    overshared_faces: list[tuple[int, int, int]] = field(default_factory=list)
    unmatched_boundary_edges: list[tuple[int, int]] = field(default_factory=list)
    orphan_nodes: list[int] = field(default_factory=list)
    label_errors: list[str] = field(default_factory=list)

    @property
    def conformity_violations(self) -> int:
        return len(self.overshared_faces) + len(self.unmatched_boundary_edges)

    def is_empty(self) -> bool:
        return not (
            self.index_errors
            or self.inverted
            or self.overshared_faces
            or self.unmatched_boundary_edges
            or self.orphan_nodes
            or self.label_errors
        )

    def summary(self) -> str:
        if self.is_empty():
            return "mesh valid"
        return (
            f"index_errors={len(self.index_errors)} inverted={len(self.inverted)} "
            f"overshared_faces={len(self.overshared_faces)} "
            f"unmatched_boundary_edges={len(self.unmatched_boundary_edges)} "
            f"orphan_nodes={len(self.orphan_nodes)} label_errors={len(self.label_errors)}"
        )


class TetrahedralMesh:
    """Labelled linear tetrahedral mesh.

    Topology caches (faces, edges, node-to-element maps) are computed lazily and
    shared with meshes derived through :meth:`with_nodes`, which is how the
    post-processing stages move nodes without touching connectivity.
    """

    def __init__(self, nodes, tets, labels=None):
        self.nodes = np.ascontiguousarray(np.asarray(nodes, dtype=float).reshape(-1, 3))
        self.tets = np.ascontiguousarray(np.asarray(tets, dtype=np.int64).reshape(-1, 4))
        if labels is None:
            labels = np.zeros(len(self.tets), dtype=np.int64)
        self.labels = np.ascontiguousarray(np.asarray(labels, dtype=np.int64).reshape(-1))

    @classmethod
    def from_arrays(cls, nodes, tets, labels=None) -> "TetrahedralMesh":
        """Build a mesh with tetrahedron orientation normalised to positive volume."""
        nodes = np.asarray(nodes, dtype=float).reshape(-1, 3)
        return cls(nodes, orient_tetrahedra(nodes, np.asarray(tets).reshape(-1, 4)), labels)

    def __repr__(self) -> str:
        return f"TetrahedralMesh(nodes={self.n_nodes}, tets={self.n_tets}, labels={sorted(set(self.labels.tolist()))})"

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_tets(self) -> int:
        return len(self.tets)

    def copy(self) -> "TetrahedralMesh":
        return TetrahedralMesh(self.nodes.copy(), self.tets.copy(), self.labels.copy())

    def with_nodes(self, nodes: np.ndarray) -> "TetrahedralMesh":
        """Same connectivity and labels, new node positions; topology caches are shared."""
        out = TetrahedralMesh(nodes, self.tets, self.labels)
        for name in ("face_adjacency", "edges", "node_neighbors", "node_tets"):
            if name in self.__dict__:
                out.__dict__[name] = self.__dict__[name]
        return out

    def with_labels(self, labels: np.ndarray) -> "TetrahedralMesh":
        out = TetrahedralMesh(self.nodes, self.tets, labels)
        for name in ("face_adjacency", "edges", "node_neighbors", "node_tets"):
            if name in self.__dict__:
                out.__dict__[name] = self.__dict__[name]
        return out

    def volumes(self) -> np.ndarray:
        return tet_volumes(self.nodes, self.tets)

    @cached_property
    def face_adjacency(self) -> FaceAdjacency:
        m = self.n_tets
        raw = self.tets[:, TET_FACES].reshape(-1, 3)
        keys = np.sort(raw, axis=1)
        faces, inverse, counts, order = _group_rows(keys)
        owner = np.arange(4 * m) // 4
        local = np.arange(4 * m) % 4
        tets2 = np.full((len(faces), 2), -1, dtype=np.int64)
        loc = np.zeros(len(faces), dtype=np.int64)
        # first and second occurrence of every face in sorted order
        so = order
        grp = inverse[so]
        first = np.ones(len(so), dtype=bool)
        first[1:] = grp[1:] != grp[:-1]
        tets2[grp[first], 0] = owner[so[first]]
        loc[grp[first]] = local[so[first]]
        second = np.zeros(len(so), dtype=bool)
        second[1:] = (~first[1:]) & first[:-1]
        tets2[grp[second], 1] = owner[so[second]]
        return FaceAdjacency(faces=faces, tets=tets2, counts=counts, local=loc)

    @cached_property
    def edges(self) -> np.ndarray:
        e = np.sort(self.tets[:, TET_EDGES].reshape(-1, 2), axis=1)
        uniq, _, _, _ = _group_rows(e)
        return uniq

    @cached_property
    def node_neighbors(self) -> list[np.ndarray]:
        """Edge-connected neighbours of every node (sorted)."""
        e = self.edges
        both = np.concatenate([e, e[:, ::-1]])
        order = np.lexsort((both[:, 1], both[:, 0]))
        both = both[order]
        splits = np.searchsorted(both[:, 0], np.arange(self.n_nodes + 1))
        return [both[splits[i]:splits[i + 1], 1] for i in range(self.n_nodes)]

    @cached_property
    def node_tets(self) -> tuple[np.ndarray, np.ndarray]:
        """CSR map node -> incident tetrahedra as ``(offsets, tet_ids)``."""
        flat = self.tets.reshape(-1)
        owner = np.repeat(np.arange(self.n_tets), 4)
        order = np.argsort(flat, kind="stable")
        offsets = np.searchsorted(flat[order], np.arange(self.n_nodes + 1))
        return offsets, owner[order]

    def tets_of_node(self, i: int) -> np.ndarray:
        offsets, ids = self.node_tets
        return ids[offsets[i]:offsets[i + 1]]

    def neighbor_tets(self) -> np.ndarray:
        """Face neighbours per tet as an ``(M, 4)`` array; ``-1`` on the mesh exterior.

        Column ``k`` is the neighbour across the face opposite local vertex ``k``.
        """
        adj = self.face_adjacency
        m = self.n_tets
        keys = np.sort(self.tets[:, TET_FACES].reshape(-1, 3), axis=1)
        _, inverse, _, _ = _group_rows(keys)
        owner = np.arange(4 * m) // 4
        pair = adj.tets[inverse]
        nb = np.where(pair[:, 0] == owner, pair[:, 1], pair[:, 0])
        return nb.reshape(m, 4)


def _outward_faces(tet_rows: np.ndarray, face_keys: np.ndarray) -> np.ndarray:
    """Outward-wound copy of each face key as seen from its tetrahedron."""
    if len(tet_rows) == 0:
        return np.zeros((0, 3), dtype=np.int64)
    member = (tet_rows[:, :, None] == face_keys[:, None, :]).any(axis=2)
    opp = np.argmin(member, axis=1)
    return np.take_along_axis(tet_rows, TET_FACES[opp], axis=1)


def region_boundary(mesh: TetrahedralMesh, mask: np.ndarray, label=None) -> CompartmentBoundary:
    """Outward boundary of the tetrahedra selected by ``mask``.

    A face belongs to the boundary when exactly one of its incident tetrahedra
    is selected (the other is unselected or absent).
    """
    mask = np.asarray(mask, dtype=bool)
    adj = mesh.face_adjacency
    t0, t1 = adj.tets[:, 0], adj.tets[:, 1]
    in0 = mask[t0]
    in1 = np.where(t1 >= 0, mask[np.maximum(t1, 0)], False)
    pick = in0 != in1
    owner = np.where(in0, t0, t1)[pick]
    tri = _outward_faces(mesh.tets[owner], adj.faces[pick])
    nodes = np.unique(tri) if len(tri) else np.zeros(0, dtype=np.int64)
    return CompartmentBoundary(label=label, triangles=tri.astype(np.int64), nodes=nodes)


def extract_compartment_boundary(mesh: TetrahedralMesh, label: int) -> CompartmentBoundary:
    """Boundary of all tetrahedra carrying ``label``, oriented away from the compartment."""
    mask = mesh.labels == label
    if not mask.any():
        raise UnknownLabel(f"no tetrahedron carries label {label}")
    return region_boundary(mesh, mask, label=label)


def validate_mesh(mesh: TetrahedralMesh) -> ValidationReport:
    """Check every :class:`TetrahedralMesh` invariant and report violations as data."""
    rep = ValidationReport()
    n = mesh.n_nodes
    tets = mesh.tets
    if len(mesh.labels) != len(tets):
        rep.label_errors.append(f"labels length {len(mesh.labels)} != tets {len(tets)}")
    elif len(mesh.labels) and mesh.labels.min() < 0:
        rep.label_errors.append("negative labels present")
    bad = np.flatnonzero(np.any((tets < 0) | (tets >= n), axis=1)) if len(tets) else np.zeros(0, int)
    rep.index_errors = bad.tolist()
    if len(bad):
        return rep
    if len(tets) == 0:
        rep.orphan_nodes = list(range(n))
        return rep

    vol = mesh.volumes()
    rep.inverted = np.flatnonzero(vol <= 0).tolist()

    adj = mesh.face_adjacency
    over = adj.counts > 2
    rep.overshared_faces = [tuple(int(v) for v in f) for f in adj.faces[over]]

    # boundary faces (incidence 1) must pair every directed edge with its reverse
    single = adj.counts == 1
    if single.any():
        bnd = region_boundary(mesh, np.ones(len(tets), dtype=bool))
        tri = bnd.triangles
        directed = np.concatenate([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [2, 0]]])
        und = np.sort(directed, axis=1)
        sign = np.where(directed[:, 0] < directed[:, 1], 1, -1)
        uniq, inv, _, _ = _group_rows(und)
        balance = np.bincount(inv, weights=sign, minlength=len(uniq))
        rep.unmatched_boundary_edges = [tuple(int(v) for v in e) for e in uniq[balance != 0]]

    used = np.zeros(n, dtype=bool)
    used[tets.reshape(-1)] = True
    rep.orphan_nodes = np.flatnonzero(~used).tolist()
    return rep


def write_mesh(mesh: TetrahedralMesh, path) -> None:
    """Write the plain-text ``tetmesh v1`` format (positions in mm, zero-based indices)."""
    path = Path(path)
    lines = [MESH_HEADER, f"{mesh.n_nodes} {mesh.n_tets}"]
    lines.extend(f"{x!r} {y!r} {z!r}" for x, y, z in mesh.nodes.tolist())
    lines.extend(f"{a} {b} {c} {d} {lab}" for (a, b, c, d), lab in zip(mesh.tets.tolist(), mesh.labels.tolist()))
    path.write_text("\n".join(lines) + "\n")


def read_mesh(path) -> TetrahedralMesh:
    path = Path(path)
    with path.open() as fh:
        header = fh.readline().strip()
        if header != MESH_HEADER:
            raise MeshError(f"{path}: expected header {MESH_HEADER!r}, got {header!r}")
        counts = fh.readline().split()
        if len(counts) != 2:
            raise MeshError(f"{path}: malformed count line")
        n, m = int(counts[0]), int(counts[1])
        try:
            nodes = np.loadtxt(fh, max_rows=n, ndmin=2) if n else np.zeros((0, 3))
            rows = np.loadtxt(fh, max_rows=m, dtype=np.int64, ndmin=2) if m else np.zeros((0, 5), dtype=np.int64)
        except ValueError as exc:
            raise MeshError(f"{path}: {exc}") from exc
    if nodes.shape != (n, 3) or rows.shape != (m, 5):
        raise MeshError(f"{path}: truncated mesh file")
    return TetrahedralMesh(nodes, rows[:, :4], rows[:, 4])


def write_vtk(mesh: TetrahedralMesh, path) -> None:
    """Legacy ASCII VTK unstructured grid with the compartment label as cell data."""
    out = ["# vtk DataFile Version 3.0", "headmesh tetrahedral mesh", "ASCII", "DATASET UNSTRUCTURED_GRID"]
    out.append(f"POINTS {mesh.n_nodes} double")
    out.extend(f"{x!r} {y!r} {z!r}" for x, y, z in mesh.nodes.tolist())
    out.append(f"CELLS {mesh.n_tets} {5 * mesh.n_tets}")
    out.extend(f"4 {a} {b} {c} {d}" for a, b, c, d in mesh.tets.tolist())
    out.append(f"CELL_TYPES {mesh.n_tets}")
    out.extend(["10"] * mesh.n_tets)
    out.append(f"CELL_DATA {mesh.n_tets}")
    out.append("SCALARS label int 1")
    out.append("LOOKUP_TABLE default")
    out.extend(str(v) for v in mesh.labels.tolist())
    Path(path).write_text("\n".join(out) + "\n")
