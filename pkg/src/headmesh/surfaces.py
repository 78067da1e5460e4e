"""Triangulated compartment surfaces: loading, checking, decimation and boxing."""

from __future__ import annotations

import heapq
import json
import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .mesh import TetrahedralMesh

logger = logging.getLogger(__name__)

MERGE_TOL = 1e-6


class ParseError(ValueError):
    """Surface file could not be parsed."""


class EmptyMesh(ValueError):
    """Surface file holds no triangles."""


class SegmentationError(ValueError):
    """Segmentation manifest or its surfaces violate an invariant."""


class DecimationWarning(UserWarning):
    """Decimation could not keep the surface closed; the input was returned."""


class BoxStripWarning(UserWarning):
    pass


@dataclass
class TriSurface:
    """Triangle surface; positions in mm, triangles wound outward."""

    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def copy(self) -> "TriSurface":
        return TriSurface(self.vertices.copy(), self.triangles.copy())

    def edges(self) -> np.ndarray:
        t = self.triangles
        e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        return np.unique(np.sort(e, axis=1), axis=0)

    def edge_lengths(self) -> np.ndarray:
        e = self.edges()
        return np.linalg.norm(self.vertices[e[:, 0]] - self.vertices[e[:, 1]], axis=1)

    def mean_edge_length(self) -> float:
        return float(self.edge_lengths().mean()) if self.n_triangles else 0.0

    def triangle_points(self) -> np.ndarray:
        """``(T, 3, 3)`` array of triangle corner positions."""
        return self.vertices[self.triangles]

    def areas(self) -> np.ndarray:
        p = self.triangle_points()
        return 0.5 * np.linalg.norm(np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=1)

    def enclosed_volume(self) -> float:
        """Signed volume via the divergence theorem; positive for outward winding."""
        p = self.triangle_points()
        return float(np.einsum("ij,ij->i", p[:, 0], np.cross(p[:, 1], p[:, 2])).sum() / 6.0)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def flipped(self) -> "TriSurface":
        return TriSurface(self.vertices.copy(), self.triangles[:, [0, 2, 1]].copy())

    def oriented_outward(self) -> "TriSurface":
        return self.flipped() if self.enclosed_volume() < 0 else self

    def translated(self, offset) -> "TriSurface":
        return TriSurface(self.vertices + np.asarray(offset, dtype=float), self.triangles.copy())


# --------------------------------------------------------------------- I/O


def merge_duplicate_vertices(vertices: np.ndarray, triangles: np.ndarray, tol: float = MERGE_TOL) -> TriSurface:
    """Merge vertices closer than ``tol`` and drop triangles that collapse."""
    vertices = np.asarray(vertices, dtype=float)
    triangles = np.asarray(triangles, dtype=np.int64)
    n = len(vertices)
    if n == 0:
        return TriSurface(vertices, triangles)
    pairs = cKDTree(vertices).query_pairs(tol, output_type="ndarray")
    if len(pairs):
        g = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
        _, comp = connected_components(g, directed=False)
        # representative = first vertex of each component, kept in input order
        first = np.full(comp.max() + 1, n, dtype=np.int64)
        np.minimum.at(first, comp, np.arange(n))
        rep = first[comp]
    else:
        rep = np.arange(n)
    used = np.unique(rep)
    remap = np.full(n, -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    tri = remap[rep[triangles]]
    keep = (tri[:, 0] != tri[:, 1]) & (tri[:, 1] != tri[:, 2]) & (tri[:, 0] != tri[:, 2])
    return TriSurface(vertices[used], tri[keep])


def _fan(poly: list[int]) -> list[list[int]]:
    return [[poly[0], poly[i], poly[i + 1]] for i in range(1, len(poly) - 1)]


def _read_off(text: str) -> tuple[np.ndarray, np.ndarray]:
    tokens_lines = [ln.split("#")[0].strip() for ln in text.splitlines()]
    lines = [ln for ln in tokens_lines if ln]
    if not lines or not lines[0].startswith("OFF"):
        raise ParseError("missing OFF header")
    head = lines[0][3:].split()
    pos = 1
    if not head:
        head = lines[1].split()
        pos = 2
    try:
        nv, nf = int(head[0]), int(head[1])
        verts = [list(map(float, lines[pos + i].split()[:3])) for i in range(nv)]
        tris: list[list[int]] = []
        for i in range(nf):
            parts = lines[pos + nv + i].split()
            k = int(parts[0])
            poly = [int(p) for p in parts[1 : 1 + k]]
            if len(poly) != k:
                raise ParseError(f"face {i} has {len(poly)} of {k} indices")
            tris.extend(_fan(poly))
    except (IndexError, ValueError) as exc:
        raise ParseError(f"truncated or malformed OFF data: {exc}") from exc
    if any(len(v) != 3 for v in verts):
        raise ParseError("vertex with fewer than 3 coordinates")
    return np.array(verts, dtype=float).reshape(-1, 3), np.array(tris, dtype=np.int64).reshape(-1, 3)


def _read_stl_ascii(text: str) -> tuple[np.ndarray, np.ndarray]:
    if not text.lstrip().lower().startswith("solid"):
        raise ParseError("missing 'solid' header (binary STL is not supported)")
    verts: list[list[float]] = []
    n_facets = 0
    in_loop = 0
    for raw in text.splitlines():
        parts = raw.strip().split()
        if not parts:
            continue
        kw = parts[0].lower()
        if kw == "vertex":
            try:
                verts.append([float(parts[1]), float(parts[2]), float(parts[3])])
            except (IndexError, ValueError) as exc:
                raise ParseError(f"bad vertex line: {raw!r}") from exc
            in_loop += 1
        elif kw == "endloop":
            if in_loop != 3:
                raise ParseError("facet loop without exactly 3 vertices")
            in_loop = 0
            n_facets += 1
        elif kw == "endsolid":
            break
    else:
        raise ParseError("missing 'endsolid' (truncated STL)")
    if len(verts) != 3 * n_facets:
        raise ParseError("truncated STL facet")
    v = np.array(verts, dtype=float).reshape(-1, 3)
    return v, np.arange(len(v), dtype=np.int64).reshape(-1, 3)


def _read_ply_ascii(text: str) -> tuple[np.ndarray, np.ndarray]:
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ParseError("missing ply magic")
    nv = nf = None
    vprops: list[str] = []
    current = None
    i = 1
    try:
        while lines[i].strip() != "end_header":
            parts = lines[i].split()
            if parts[0] == "format" and parts[1] != "ascii":
                raise ParseError("only ASCII PLY is supported")
            if parts[0] == "element":
                current = parts[1]
                if current == "vertex":
                    nv = int(parts[2])
                elif current == "face":
                    nf = int(parts[2])
            elif parts[0] == "property" and current == "vertex":
                vprops.append(parts[-1])
            i += 1
    except IndexError as exc:
        raise ParseError("truncated PLY header") from exc
    if nv is None or nf is None:
        raise ParseError("PLY header lacks vertex or face element")
    try:
        ix = [vprops.index(c) for c in ("x", "y", "z")]
    except ValueError as exc:
        raise ParseError("PLY vertex element lacks x/y/z") from exc
    body = [ln for ln in lines[i + 1 :] if ln.strip()]
    if len(body) < nv + nf:
        raise ParseError("truncated PLY body")
    try:
        verts = [[float(body[k].split()[j]) for j in ix] for k in range(nv)]
        tris: list[list[int]] = []
        for k in range(nf):
            parts = body[nv + k].split()
            cnt = int(parts[0])
            poly = [int(p) for p in parts[1 : 1 + cnt]]
            if len(poly) != cnt:
                raise ParseError("truncated PLY face")
            tris.extend(_fan(poly))
    except (IndexError, ValueError) as exc:
        raise ParseError(f"malformed PLY body: {exc}") from exc
    return np.array(verts, dtype=float).reshape(-1, 3), np.array(tris, dtype=np.int64).reshape(-1, 3)


_READERS = {"off": _read_off, "stl-ascii": _read_stl_ascii, "ply-ascii": _read_ply_ascii}
_SUFFIX = {".off": "off", ".stl": "stl-ascii", ".ply": "ply-ascii"}


def load_surface(path, format: str | None = None) -> TriSurface:
    """Read an ASCII STL, OFF or ASCII PLY surface, merging duplicate vertices."""
    path = Path(path)
    fmt = format or _SUFFIX.get(path.suffix.lower())
    if fmt not in _READERS:
        raise ParseError(f"unsupported surface format for {path}: {fmt!r}")
    try:
        text = path.read_text()
    except UnicodeDecodeError as exc:
        raise ParseError(f"{path}: not an ASCII surface file") from exc
    v, t = _READERS[fmt](text)
    if len(t) == 0:
        raise EmptyMesh(f"{path}: no triangles")
    if len(t) and (t.min() < 0 or t.max() >= len(v)):
        raise ParseError(f"{path}: triangle index out of range")
    return merge_duplicate_vertices(v, t)


def write_surface(surface: TriSurface, path, format: str | None = None) -> None:
    path = Path(path)
    fmt = format or _SUFFIX.get(path.suffix.lower())
    v, t = surface.vertices.tolist(), surface.triangles.tolist()
    if fmt == "off":
        out = ["OFF", f"{len(v)} {len(t)} 0"]
        out += [f"{x!r} {y!r} {z!r}" for x, y, z in v]
        out += [f"3 {a} {b} {c}" for a, b, c in t]
    elif fmt == "ply-ascii":
        out = ["ply", "format ascii 1.0", f"element vertex {len(v)}", "property double x",
               "property double y", "property double z", f"element face {len(t)}",
               "property list uchar int vertex_indices", "end_header"]
        out += [f"{x!r} {y!r} {z!r}" for x, y, z in v]
        out += [f"3 {a} {b} {c}" for a, b, c in t]
    elif fmt == "stl-ascii":
        out = ["solid headmesh"]
        p = surface.triangle_points()
        n = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
        n /= np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)
        for tri, nn in zip(p.tolist(), n.tolist()):
            out.append(f"facet normal {nn[0]!r} {nn[1]!r} {nn[2]!r}")
            out.append("outer loop")
            out += [f"vertex {x!r} {y!r} {z!r}" for x, y, z in tri]
            out += ["endloop", "endfacet"]
        out.append("endsolid headmesh")
    else:
        raise ParseError(f"unsupported surface format {fmt!r}")
    path.write_text("\n".join(out) + "\n")


# ------------------------------------------------------------ closedness


@dataclass
class ClosedCheck:
    open_edges: list[tuple[int, int]] = field(default_factory=list)
    nonmanifold_edges: list[tuple[int, int]] = field(default_factory=list)
    orientation_errors: list[tuple[int, int]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not (self.open_edges or self.nonmanifold_edges or self.orientation_errors)

    def __bool__(self) -> bool:
        return self.ok


def validate_closed(surface: TriSurface) -> ClosedCheck:
    """Every undirected edge must border exactly two triangles traversing it in opposite directions."""
    t = surface.triangles
    directed = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
    und = np.sort(directed, axis=1)
    uniq, inv, counts = np.unique(und, axis=0, return_inverse=True, return_counts=True)
    inv = inv.reshape(-1)
    sign = np.where(directed[:, 0] < directed[:, 1], 1, -1)
    balance = np.bincount(inv, weights=sign, minlength=len(uniq))
    res = ClosedCheck()
    as_list = lambda mask: [tuple(int(a) for a in e) for e in uniq[mask]]  # noqa: E731
    res.open_edges = as_list(counts == 1)
    res.nonmanifold_edges = as_list(counts > 2)
    res.orientation_errors = as_list((counts == 2) & (balance != 0))
    return res


# ------------------------------------------------------------ decimation


def _tri_normal(p0, p1, p2):
    return np.cross(p1 - p0, p2 - p0)


def downsample_surface(surface: TriSurface, target_edge_length: float) -> TriSurface:
    """Coarsen a closed surface by shortest-edge collapse until the mean edge reaches the target.

    Collapses respect the link condition and reject triangle flips, so the
    output stays a closed 2-manifold. Surfaces whose mean edge already meets
    the target are returned unchanged.
    """
    target = float(target_edge_length)
    if target <= 0:
        raise ValueError("target edge length must be positive")
    if surface.mean_edge_length() >= target:
        return surface
    if not validate_closed(surface).ok:
        raise SegmentationError("downsample_surface requires a closed surface")

    V = surface.vertices.copy()
    F = surface.triangles.copy()
    face_alive = np.ones(len(F), dtype=bool)
    vert_alive = np.ones(len(V), dtype=bool)
    vfaces: list[set[int]] = [set() for _ in range(len(V))]
    for fi, tri in enumerate(F.tolist()):
        for v in tri:
            vfaces[v].add(fi)
    n_alive = len(V)

    def neighbors(u: int) -> set[int]:
        out: set[int] = set()
        for fi in vfaces[u]:
            out.update(F[fi].tolist())
        out.discard(u)
        return out

    def elen(u: int, v: int) -> float:
        return float(np.linalg.norm(V[u] - V[v]))

    heap: list[tuple[float, int, int]] = []
    for a, b in surface.edges().tolist():
        heap.append((elen(a, b), a, b))
    heapq.heapify(heap)

    def try_collapse(u: int, v: int) -> bool:
        nonlocal n_alive
        shared = vfaces[u] & vfaces[v]
        if len(shared) != 2 or n_alive <= 4:
            return False
        opp = set()
        for fi in shared:
            opp.update(F[fi].tolist())
        opp -= {u, v}
        if neighbors(u) & neighbors(v) != opp:
            return False
        mid = 0.5 * (V[u] + V[v])
        for w, fs in ((u, vfaces[u] - shared), (v, vfaces[v] - shared)):
            for fi in fs:
                tri = F[fi]
                old = _tri_normal(*V[tri])
                newp = [mid if x in (u, v) else V[x] for x in tri.tolist()]
                new = _tri_normal(*newp)
                if np.dot(old, new) <= 0.2 * np.linalg.norm(old) * np.linalg.norm(new):
                    return False
        V[u] = mid
        for fi in shared:
            face_alive[fi] = False
            for x in F[fi].tolist():
                vfaces[x].discard(fi)
        for fi in list(vfaces[v]):
            F[fi][F[fi] == v] = u
            vfaces[u].add(fi)
        vfaces[v] = set()
        vert_alive[v] = False
        n_alive -= 1
        for w in neighbors(u):
            heapq.heappush(heap, (elen(u, w), min(u, w), max(u, w)))
        return True

    def current_mean() -> float:
        tri = F[face_alive]
        e = np.concatenate([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [2, 0]]])
        e = np.unique(np.sort(e, axis=1), axis=0)
        return float(np.linalg.norm(V[e[:, 0]] - V[e[:, 1]], axis=1).mean())

    for frac in np.arange(0.6, 1.45, 0.05):
        threshold = frac * target
        deferred = []
        while heap and heap[0][0] < threshold:
            length, a, b = heapq.heappop(heap)
            if not (vert_alive[a] and vert_alive[b]):
                continue
            if not (vfaces[a] & vfaces[b]):
                continue
            if abs(elen(a, b) - length) > 1e-12 * max(1.0, length):
                continue
            if not try_collapse(a, b):
                deferred.append((length, a, b))
        for item in deferred:
            heapq.heappush(heap, item)
        if current_mean() >= 0.9 * target:
            break

    keep = np.flatnonzero(vert_alive)
    remap = np.full(len(V), -1, dtype=np.int64)
    remap[keep] = np.arange(len(keep))
    out = TriSurface(V[keep], remap[F[face_alive]])
    if not validate_closed(out).ok:
        warnings.warn("decimation broke closedness; returning the input surface", DecimationWarning, stacklevel=2)
        return surface
    return out


# ------------------------------------------------------------ primitives


def box_surface(lo, hi) -> TriSurface:
    """Axis-aligned box with 12 outward triangles."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    v = np.array([[(hi if (k >> a) & 1 else lo)[a] for a in range(3)] for k in range(8)])
    quads = [(0, 2, 3, 1), (4, 5, 7, 6), (0, 1, 5, 4), (2, 6, 7, 3), (0, 4, 6, 2), (1, 3, 7, 5)]
    tris = []
    for a, b, c, d in quads:
        tris += [(a, b, c), (a, c, d)]
    return TriSurface(v, np.array(tris))


_ICO_T = (1.0 + math.sqrt(5.0)) / 2.0
_ICO_V = np.array(
    [[-1, _ICO_T, 0], [1, _ICO_T, 0], [-1, -_ICO_T, 0], [1, -_ICO_T, 0],
     [0, -1, _ICO_T], [0, 1, _ICO_T], [0, -1, -_ICO_T], [0, 1, -_ICO_T],
     [_ICO_T, 0, -1], [_ICO_T, 0, 1], [-_ICO_T, 0, -1], [-_ICO_T, 0, 1]],
    dtype=float,
)
_ICO_F = np.array(
    [[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11], [1, 5, 9], [5, 11, 4],
     [11, 10, 2], [10, 7, 6], [7, 1, 8], [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8],
     [3, 8, 9], [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]]
)


def icosahedron(radius: float = 1.0, center=(0.0, 0.0, 0.0)) -> TriSurface:
    v = _ICO_V / np.linalg.norm(_ICO_V[0])
    return TriSurface(v * radius + np.asarray(center, dtype=float), _ICO_F.copy())


def geodesic_sphere(radius: float, frequency: int, center=(0.0, 0.0, 0.0)) -> TriSurface:
    """Class-I geodesic sphere: each icosahedron edge split into ``frequency`` segments."""
    n = max(1, int(frequency))
    base = _ICO_V / np.linalg.norm(_ICO_V[0])
    verts: list[np.ndarray] = []
    tris: list[tuple[int, int, int]] = []
    for a, b, c in _ICO_F.tolist():
        A, B, C = base[a], base[b], base[c]
        idx = {}
        for i in range(n + 1):
            for j in range(n + 1 - i):
                idx[i, j] = len(verts)
                verts.append(A + (B - A) * (i / n) + (C - A) * (j / n))
        for i in range(n):
            for j in range(n - i):
                tris.append((idx[i, j], idx[i + 1, j], idx[i, j + 1]))
                if i + j < n - 1:
                    tris.append((idx[i + 1, j], idx[i + 1, j + 1], idx[i, j + 1]))
    surf = merge_duplicate_vertices(np.array(verts), np.array(tris), tol=1e-9)
    v = surf.vertices / np.linalg.norm(surf.vertices, axis=1, keepdims=True)
    return TriSurface(v * radius + np.asarray(center, dtype=float), surf.triangles).oriented_outward()


def sphere_surface(radius: float, edge_length: float, center=(0.0, 0.0, 0.0)) -> TriSurface:
    """Geodesic sphere whose mean edge is close to ``edge_length``."""
    # the mean edge of a frequency-f geodesic sphere is close to 1.203 * radius / f
    freq = max(1, int(round(1.203 * radius / edge_length)))
    return geodesic_sphere(radius, freq, center)


# ----------------------------------------------------------- segmentation


@dataclass
class CompartmentSurface:
    name: str
    label: int
    surface: TriSurface
    conductivity: float
    priority: int
    active: bool = False


@dataclass
class SurfaceSegmentation:
    """Compartments ordered innermost to outermost."""

    compartments: list[CompartmentSurface]
    box_margin: float | None = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.compartments:
            raise SegmentationError("segmentation needs at least one compartment")
        labels = [c.label for c in self.compartments]
        if len(set(labels)) != len(labels):
            raise SegmentationError(f"duplicate compartment labels {labels}")
        pr = [c.priority for c in self.compartments]
        if any(b <= a for a, b in zip(pr, pr[1:])):
            raise SegmentationError(f"priorities must increase innermost to outermost, got {pr}")
        for c in self.compartments:
            if c.label != 0 and not c.conductivity > 0:
                raise SegmentationError(f"compartment {c.name!r}: conductivity must be positive")

    def __iter__(self):
        return iter(self.compartments)

    def __len__(self) -> int:
        return len(self.compartments)

    @property
    def tissue(self) -> list[CompartmentSurface]:
        """Compartments other than the bounding box."""
        return [c for c in self.compartments if c.label != 0]

    def by_label(self, label: int) -> CompartmentSurface:
        for c in self.compartments:
            if c.label == label:
                return c
        raise KeyError(label)

    def conductivities(self) -> dict[int, float]:
        return {c.label: c.conductivity for c in self.tissue}

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        lo = np.min([c.surface.vertices.min(axis=0) for c in self.compartments], axis=0)
        hi = np.max([c.surface.vertices.max(axis=0) for c in self.compartments], axis=0)
        return lo, hi

    def enclosing(self, label: int) -> list[int]:
        """Labels of compartments whose surface encloses compartment ``label`` (itself included)."""
        labs = [c.label for c in self.tissue]
        return labs[labs.index(label):]

    def inner_labels(self, label: int) -> list[int]:
        """Labels lying inside the surface of ``label`` (itself included)."""
        labs = [c.label for c in self.tissue]
        return labs[: labs.index(label) + 1]


def make_segmentation(surfaces, names=None, labels=None, conductivities=None, active=None, box_margin=None):
    """Convenience constructor from surfaces listed innermost first."""
    k = len(surfaces)
    names = names or [f"compartment{i + 1}" for i in range(k)]
    labels = labels or list(range(1, k + 1))
    conductivities = conductivities or [1.0] * k
    active = active or [False] * k
    comps = [
        CompartmentSurface(n, int(lab), s.oriented_outward(), float(c), i + 1, bool(a))
        for i, (n, lab, s, c, a) in enumerate(zip(names, labels, surfaces, conductivities, active))
    ]
    return SurfaceSegmentation(comps, box_margin)


def load_segmentation(manifest_path) -> SurfaceSegmentation:
    """Load a JSON manifest of compartments; surface paths are relative to the manifest."""
    manifest_path = Path(manifest_path)
    try:
        doc = json.loads(manifest_path.read_text())
    except FileNotFoundError as exc:
        raise SegmentationError(f"manifest not found: {manifest_path}") from exc
    except json.JSONDecodeError as exc:
        raise SegmentationError(f"{manifest_path}: invalid JSON ({exc})") from exc
    base = manifest_path.parent
    entries = sorted(doc.get("compartments", []), key=lambda e: e["priority"])
    comps = []
    for e in entries:
        surf = load_surface(base / e["file"], e.get("format"))
        check = validate_closed(surf)
        if not check.ok:
            raise SegmentationError(
                f"surface {e['file']} is not closed: {len(check.open_edges)} open, "
                f"{len(check.nonmanifold_edges)} non-manifold, {len(check.orientation_errors)} misoriented edges"
            )
        comps.append(
            CompartmentSurface(
                name=e["name"],
                label=int(e["label"]),
                surface=surf.oriented_outward(),
                conductivity=float(e["conductivity_S_per_m"]),
                priority=int(e["priority"]),
                active=bool(e.get("active", False)),
            )
        )
    if any(c.label <= 0 for c in comps):
        raise SegmentationError("compartment labels must be positive (0 is the bounding box)")
    return SurfaceSegmentation(comps, doc.get("box_margin_mm"))


def write_segmentation(seg: SurfaceSegmentation, directory, fmt: str = "off") -> Path:
    """Write surfaces plus a manifest into ``directory``; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ext = {"off": ".off", "stl-ascii": ".stl", "ply-ascii": ".ply"}[fmt]
    entries = []
    for c in seg.tissue:
        fname = f"{c.name}{ext}"
        write_surface(c.surface, directory / fname, fmt)
        entries.append(
            {"name": c.name, "file": fname, "label": c.label, "conductivity_S_per_m": c.conductivity,
             "priority": c.priority, "active": c.active}
        )
    doc = {"compartments": entries, "box_margin_mm": seg.box_margin}
    path = directory / "segmentation.json"
    path.write_text(json.dumps(doc, indent=2) + "\n")
    return path


def wrap_bounding_box(seg: SurfaceSegmentation, margin: float | None = None) -> SurfaceSegmentation:
    """Append a label-0 axis-aligned box enclosing every surface with the given margin."""
    margin = seg.box_margin if margin is None else margin
    if margin is None:
        raise SegmentationError("bounding-box margin not set")
    tissue = seg.tissue
    lo = np.min([c.surface.vertices.min(axis=0) for c in tissue], axis=0) - margin
    hi = np.max([c.surface.vertices.max(axis=0) for c in tissue], axis=0) + margin
    box = CompartmentSurface("bounding_box", 0, box_surface(lo, hi), 1.0, tissue[-1].priority + 1, False)
    return SurfaceSegmentation(list(tissue) + [box], margin)


def strip_bounding_box(mesh: TetrahedralMesh) -> tuple[TetrahedralMesh, np.ndarray]:
    """Drop label-0 tetrahedra and unused nodes.

    Returns the compacted mesh and an old-to-new node index map (``-1`` for
    removed nodes).
    """
    keep = mesh.labels != 0
    if keep.all():
        return mesh, np.arange(mesh.n_nodes)
    if not keep.any():
        warnings.warn("every tetrahedron carries label 0; result is empty", BoxStripWarning, stacklevel=2)
    tets = mesh.tets[keep]
    used = np.zeros(mesh.n_nodes, dtype=bool)
    used[tets.reshape(-1)] = True
    remap = np.full(mesh.n_nodes, -1, dtype=np.int64)
    remap[used] = np.arange(int(used.sum()))
    return TetrahedralMesh(mesh.nodes[used], remap[tets], mesh.labels[keep]), remap
