"""Mesh post-processing: Taubin smoothing, inflation and optimisation.

Smoothing applies the forward/backward Laplacian pair
``x <- x + lam * (mean(N_i) - x)`` then ``x <- x - mu * (mean(N_i) - x)``,
where ``N_i`` is the node together with its edge neighbours. Inflation slides
boundary nodes a fraction ``zeta`` of the remaining distance toward the target
surface along their mesh edges. Optimisation first untangles inverted
elements and then flips edges to raise the minimal condition number
``kappa = V / l_max``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .geometry import TriangleGrid
from .mesh import TET_EDGES, CompartmentBoundary, TetrahedralMesh, tet_volumes
from .surfaces import TriSurface

logger = logging.getLogger(__name__)


class MaxItersExceeded(RuntimeWarning):
    pass


class NoIntersectingEdge(RuntimeWarning):
    pass


@dataclass(frozen=True)
class SmoothingParams:
    lam: float = 0.4
    mu: float = 0.4
    xi_volume: float = 0.9
    xi_surface: float = 0.1
    max_iters: int = 50

    def __post_init__(self):
        if not (0.0 <= self.lam < 1.0 and 0.0 <= self.mu < 1.0):
            raise ValueError("smoothing weights must lie in [0, 1)")
        if not (self.xi_volume > 0 and self.xi_surface > 0):
            raise ValueError("stop ratios must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")


@dataclass(frozen=True)
class InflationParams:
    zeta: float = 0.05
    passes: int = 10

    def __post_init__(self):
        if not 0.0 < self.zeta < 1.0:
            raise ValueError("zeta must lie in (0, 1)")
        if self.passes < 0:
            raise ValueError("passes must be >= 0")


@dataclass(frozen=True)
class OptimizationParams:
    """``tau`` in mm^2; ``None`` means ``1e-2 * h^2`` with ``h`` the median edge length."""

    tau: float | None = None
    max_repair_iters: int = 100
    max_turn_sweeps: int = 5

    def __post_init__(self):
        if self.tau is not None and not self.tau > 0:
            raise ValueError("tau must be positive")

    def resolve_tau(self, mesh: TetrahedralMesh) -> float:
        if self.tau is not None:
            return float(self.tau)
        e = mesh.edges
        h = float(np.median(np.linalg.norm(mesh.nodes[e[:, 0]] - mesh.nodes[e[:, 1]], axis=1)))
        return 1e-2 * h * h


# ------------------------------------------------------------ condition


def condition_number(tet) -> float:
    """Volume over longest edge (mm^2); signed, so inverted elements are negative."""
    p = np.asarray(tet, dtype=float).reshape(1, 4, 3)
    return float(condition_numbers(p.reshape(4, 3), np.arange(4).reshape(1, 4))[0])


_EDGE_A = np.array([a for a, _ in TET_EDGES])
_EDGE_B = np.array([b for _, b in TET_EDGES])


def condition_numbers(nodes: np.ndarray, tets: np.ndarray) -> np.ndarray:
    if len(tets) == 0:
        return np.zeros(0)
    vol = tet_volumes(nodes, tets)
    p = nodes[tets]
    d = p[:, _EDGE_A] - p[:, _EDGE_B]
    lmax = np.sqrt((d * d).sum(axis=2).max(axis=1))
    out = np.zeros(len(tets))
    ok = lmax > 0
    out[ok] = vol[ok] / lmax[ok]
    return out


# ------------------------------------------------------------ smoothing


def _adjacency(n: int, edges: np.ndarray) -> sparse.csr_matrix:
    """Edge adjacency with the diagonal set, so row means include the node itself."""
    i = np.concatenate([edges[:, 0], edges[:, 1], np.arange(n)])
    j = np.concatenate([edges[:, 1], edges[:, 0], np.arange(n)])
    a = sparse.csr_matrix((np.ones(len(i)), (i, j)), shape=(n, n))
    a.data[:] = 1.0
    return a


def taubin_smooth(
    mesh: TetrahedralMesh,
    node_set,
    neighbor_mode: str = "volume",
    params: SmoothingParams | None = None,
    boundary: CompartmentBoundary | np.ndarray | None = None,
) -> TetrahedralMesh:
    """Taubin smoothing of ``node_set``; other nodes stay fixed.

    ``neighbor_mode="volume"`` averages over all mesh edge neighbours,
    ``"surface"`` over neighbours along the triangles of ``boundary``. The loop
    stops when the forward step moves the nodes by no more than ``xi`` times
    the norm of their initial positions, or after ``max_iters`` iterations.
    """
    params = params or SmoothingParams()
    idx = np.unique(np.asarray(node_set, dtype=np.int64).reshape(-1))
    if len(idx) == 0:
        return mesh
    if neighbor_mode == "volume":
        edges = mesh.edges
        xi = params.xi_volume
    elif neighbor_mode == "surface":
        if boundary is None:
            raise ValueError("surface mode needs the boundary triangles")
        tri = boundary.triangles if isinstance(boundary, CompartmentBoundary) else np.asarray(boundary)
        edges = np.unique(np.sort(np.concatenate([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [2, 0]]]), axis=1), axis=0)
        xi = params.xi_surface
    else:
        raise ValueError(f"unknown neighbor_mode {neighbor_mode!r}")

    a = _adjacency(mesh.n_nodes, edges)[idx]
    deg = np.asarray(a.sum(axis=1)).reshape(-1, 1)
    x = mesh.nodes.copy()
    norm0 = float(np.linalg.norm(x[idx]))
    if norm0 == 0.0:
        norm0 = 1.0
    for it in range(params.max_iters):
        lap = a @ x / deg - x[idx]
        step = params.lam * lap
        x[idx] += step
        ratio = float(np.linalg.norm(step)) / norm0
        lap = a @ x / deg - x[idx]
        x[idx] -= params.mu * lap
        if ratio <= xi:
            break
    logger.debug("taubin %s: %d nodes, %d iterations", neighbor_mode, len(idx), it + 1)
    return mesh.with_nodes(x)


# ------------------------------------------------------------ inflation


@dataclass
class InflationStats:
    moved: int
    skipped: int
    mean_step: float


def inflation_moves(mesh: TetrahedralMesh, nodes, grid: TriangleGrid, zeta: float):
    """Displacement of every node in ``nodes`` for one inflation pass.

    Among the node's incident edges, the one with the nearest crossing of the
    target surface is chosen; the node moves ``zeta * d`` along it, ``d`` being
    the distance to that crossing. Returns ``(displacements, has_crossing)``.
    """
    nodes = np.asarray(nodes, dtype=np.int64)
    nb = mesh.node_neighbors
    counts = np.array([len(nb[i]) for i in nodes], dtype=np.int64)
    src = np.repeat(nodes, counts)
    dst = np.concatenate([nb[i] for i in nodes]) if len(nodes) else np.zeros(0, dtype=np.int64)
    p0 = mesh.nodes[src]
    vec = mesh.nodes[dst] - p0
    t = grid.first_hit(p0, p0 + vec)
    dist = np.where(t > 0, t * np.linalg.norm(vec, axis=1), np.inf)
    owner = np.repeat(np.arange(len(nodes)), counts)
    best = np.full(len(nodes), np.inf)
    np.minimum.at(best, owner, dist)
    hit = np.isfinite(best)
    # first edge attaining the minimum per node
    is_best = dist == best[owner]
    first = np.full(len(nodes), -1, dtype=np.int64)
    cand = np.flatnonzero(is_best & np.isfinite(dist))
    first[owner[cand[::-1]]] = cand[::-1]
    disp = np.zeros((len(nodes), 3))
    sel = first[hit]
    unit = vec[sel] / np.linalg.norm(vec[sel], axis=1, keepdims=True)
    disp[hit] = zeta * best[hit, None] * unit
    return disp, hit


def inflate(
    mesh: TetrahedralMesh,
    boundary: CompartmentBoundary,
    target: TriSurface,
    params: InflationParams | None = None,
    nodes=None,
    passes: int | None = None,
    grid: TriangleGrid | None = None,
) -> TetrahedralMesh:
    """Slide the boundary nodes toward ``target`` along their mesh edges.

    ``nodes`` restricts the moved set (defaults to all boundary nodes);
    ``passes`` overrides ``params.passes``. Nodes without a crossing edge are
    left in place and counted.
    """
    params = params or InflationParams()
    passes = params.passes if passes is None else passes
    move = boundary.nodes if nodes is None else np.asarray(nodes, dtype=np.int64)
    grid = grid or TriangleGrid(target.triangle_points())
    x = mesh.nodes.copy()
    cur = mesh
    skipped = 0
    for _ in range(passes):
        disp, hit = inflation_moves(cur, move, grid, params.zeta)
        x[move] += disp
        skipped = int((~hit).sum())
        cur = cur.with_nodes(x.copy())
    if skipped:
        logger.debug("inflation: %d of %d nodes without a crossing edge", skipped, len(move))
    return cur


# ------------------------------------------------------------ repair


@dataclass
class RepairResult:
    mesh: TetrahedralMesh
    iterations: int
    survivors: np.ndarray

    @property
    def ok(self) -> bool:
        return len(self.survivors) == 0


def repair_inverted(mesh: TetrahedralMesh, params: OptimizationParams | None = None) -> RepairResult:
    """Pull nodes of inverted elements back toward the centroid of their neighbours.

    Each node touching a non-positive element tries steps ``t`` in
    ``0.25, 0.5, 0.75, 1`` toward its neighbour centroid and keeps the first
    that leaves all its incident elements positive; otherwise it lands on the
    centroid. Passes repeat until no inverted element is left.
    """
    params = params or OptimizationParams()
    x = mesh.nodes.copy()
    tets = mesh.tets
    offsets, ids = mesh.node_tets
    nb = mesh.node_neighbors
    vol = tet_volumes(x, tets)
    it = 0
    while it < params.max_repair_iters:
        bad = np.flatnonzero(vol <= 0)
        if len(bad) == 0:
            break
        it += 1
        cand, nbad = np.unique(tets[bad].reshape(-1), return_counts=True)
        order = np.lexsort((cand, -nbad))
        for n in cand[order]:
            inc = ids[offsets[n]:offsets[n + 1]]
            if np.all(vol[inc] > 0) or len(nb[n]) == 0:
                continue
            c = x[nb[n]].mean(axis=0)
            x0 = x[n].copy()
            for t in (0.25, 0.5, 0.75, 1.0):
                x[n] = x0 + t * (c - x0)
                v = tet_volumes(x, tets[inc])
                if np.all(v > 0):
                    break
            vol[inc] = v
    survivors = np.flatnonzero(vol <= 0)
    if len(survivors):
        logger.warning("repair: %d inverted elements left after %d passes", len(survivors), it)
    return RepairResult(mesh.with_nodes(x), it, survivors)


# ------------------------------------------------------------ flips


def _edge_rings(tets: np.ndarray):
    """Map each undirected edge to the tetrahedra containing it."""
    e = np.sort(tets[:, TET_EDGES].reshape(-1, 2), axis=1)
    owner = np.repeat(np.arange(len(tets)), 6)
    order = np.lexsort((owner, e[:, 1], e[:, 0]))
    e, owner = e[order], owner[order]
    new = np.ones(len(e), dtype=bool)
    new[1:] = np.any(e[1:] != e[:-1], axis=1)
    starts = np.flatnonzero(new)
    ends = np.append(starts[1:], len(e))
    return e[starts], starts, ends, owner


def _cycle(pairs: list[tuple[int, int]]) -> list[int] | None:
    """Order the opposite-edge pairs of the tets around an edge into a closed ring."""
    adj: dict[int, list[int]] = {}
    for a, b in pairs:
        adj.setdefault(a, []).append(b)
        adj.setdefault(b, []).append(a)
    if any(len(v) != 2 for v in adj.values()):
        return None
    start = min(adj)
    ring = [start]
    prev, cur = None, start
    while True:
        nxt = [v for v in adj[cur] if v != prev]
        nxt = nxt[0] if prev is not None else min(adj[cur])
        if nxt == start:
            break
        ring.append(nxt)
        prev, cur = cur, nxt
        if len(ring) > len(adj):
            return None
    return ring if len(ring) == len(adj) else None


def _oriented(nodes, quads):
    q = np.array(quads, dtype=np.int64)
    v = tet_volumes(nodes, q)
    neg = v < 0
    q[neg, 2], q[neg, 3] = q[neg, 3], q[neg, 2].copy()
    return q, np.abs(v), v


@dataclass
class TurnStats:
    flips: int
    sweeps: int
    tau: float
    below_tau_before: int
    below_tau_after: int


def delaunay_turns(mesh: TetrahedralMesh, params: OptimizationParams | None = None, return_stats: bool = False):
    """Edge flips that raise the minimal condition number of low-quality element groups.

    Two moves are used, each only among elements of one label and only when
    the group minimum of ``kappa`` is below ``tau``:

    * 2-2 flip of a flat quadrilateral on the mesh exterior shared by two
      elements (the alternative diagonal of the quad);
    * 4-4 flip of an interior edge shared by exactly four elements, the coupled
      2-2 flip of the two pairs on either side of the quad, which swaps the
      edge for one of the two other octahedron diagonals.

    A flip is kept only if all new elements are positive, the covered volume
    is unchanged, and the minimal ``kappa`` strictly increases.
    """
    params = params or OptimizationParams()
    tau = params.resolve_tau(mesh)
    nodes = mesh.nodes
    tets = mesh.tets.copy()
    labels = mesh.labels
    kappa = condition_numbers(nodes, tets)
    below0 = int((kappa < tau).sum())
    flips = 0
    sweeps = 0
    for sweeps in range(1, params.max_turn_sweeps + 1):
        edges, starts, ends, owner = _edge_rings(tets)
        sizes = ends - starts
        touched = np.zeros(len(tets), dtype=bool)
        n_sweep = 0
        # static filters for the sweep; kappa only changes on touched groups
        gmin = np.minimum.reduceat(kappa[owner], starts)
        lab = labels[owner]
        uniform = np.minimum.reduceat(lab, starts) == np.maximum.reduceat(lab, starts)
        for k in np.flatnonzero(((sizes == 4) | (sizes == 2)) & (gmin < tau) & uniform):
            group = owner[starts[k]:ends[k]]
            if touched[group].any():
                continue
            b, c = int(edges[k, 0]), int(edges[k, 1])
            others = [tuple(int(v) for v in tets[t] if v != b and v != c) for t in group]
            old_min = kappa[group].min()
            old_vol = tet_volumes(nodes, tets[group]).sum()
            best = None
            if len(group) == 4:
                ring = _cycle(others)
                if ring is None:
                    continue
                for p, q, rest in ((ring[0], ring[2], (b, ring[1], c, ring[3])),
                                   (ring[1], ring[3], (b, ring[0], c, ring[2]))):
                    quads = [(p, q, rest[i], rest[(i + 1) % 4]) for i in range(4)]
                    cand, vabs, vs = _oriented(nodes, quads)
                    if not (np.all(vs > 0) or np.all(vs < 0)):
                        continue
                    if abs(vabs.sum() - old_vol) > 1e-9 * old_vol:
                        continue
                    kmin = condition_numbers(nodes, cand).min()
                    if kmin > old_min and (best is None or kmin > best[0]):
                        best = (kmin, cand)
            else:
                # exterior pair sharing face (a, b, c); apexes d, e
                common = set(others[0]) & set(others[1])
                if len(common) != 1:
                    continue
                a = common.pop()
                d = [v for v in others[0] if v != a][0]
                e = [v for v in others[1] if v != a][0]
                flat = abs(tet_volumes(nodes, np.array([[b, c, d, e]]))[0])
                scale = np.linalg.norm(nodes[b] - nodes[c]) ** 3
                if flat > 1e-12 * scale:
                    continue
                cand, vabs, vs = _oriented(nodes, [(d, e, a, b), (d, e, a, c)])
                if np.all(vabs > 0) and abs(vabs.sum() - old_vol) <= 1e-9 * old_vol:
                    kmin = condition_numbers(nodes, cand).min()
                    if kmin > old_min:
                        best = (kmin, cand)
            if best is None:
                continue
            tets[group] = best[1]
            kappa[group] = condition_numbers(nodes, best[1])
            touched[group] = True
            n_sweep += 1
        flips += n_sweep
        if n_sweep == 0:
            break
    out = TetrahedralMesh(nodes, tets, labels)
    stats = TurnStats(flips, sweeps, tau, below0, int((kappa < tau).sum()))
    logger.debug("delaunay turns: %d flips in %d sweeps, below tau %d -> %d",
                 flips, sweeps, stats.below_tau_before, stats.below_tau_after)
    return (out, stats) if return_stats else out
