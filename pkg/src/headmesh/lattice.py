"""Regular tetrahedral meshes from a hexahedral lattice (five tets per cell)."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .mesh import TetrahedralMesh, orient_tetrahedra

# Cell corners indexed by (dx, dy, dz) -> dx + 2*dy + 4*dz.
_EVEN = np.array(
    [
        # central tet: (0,0,0) (1,1,0) (1,0,1) (0,1,1)
        [0, 3, 5, 6],
        [1, 0, 3, 5],  # corner (1,0,0)
        [2, 0, 3, 6],  # corner (0,1,0)
        [4, 0, 5, 6],  # corner (0,0,1)
        [7, 3, 5, 6],  # corner (1,1,1)
    ]
)
_ODD = np.array(
    [
        # central tet: (1,0,0) (0,1,0) (0,0,1) (1,1,1)
        [1, 2, 4, 7],
        [0, 1, 2, 4],  # corner (0,0,0)
        [3, 1, 2, 7],  # corner (1,1,0)
        [5, 1, 4, 7],  # corner (1,0,1)
        [6, 2, 4, 7],  # corner (0,1,1)
    ]
)


@dataclass(frozen=True)
class LatticeSpec:
    origin: tuple[float, float, float]
    h: float
    counts: tuple[int, int, int]

    def __post_init__(self):
        if not self.h > 0:
            raise ValueError(f"cell size must be positive, got {self.h}")
        if any(int(c) < 1 for c in self.counts):
            raise ValueError(f"cell counts must be >= 1, got {self.counts}")

    @classmethod
    def covering(cls, lo, hi, h: float, origin=None) -> "LatticeSpec":
        """Smallest lattice with cell size ``h`` covering the box ``[lo, hi]``."""
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        if origin is None:
            origin = lo
        origin = np.asarray(origin, dtype=float)
        extent = hi - origin
        counts = tuple(max(1, int(math.ceil(e / h - 1e-9))) for e in extent)
        return cls(tuple(float(v) for v in origin), float(h), counts)

    @property
    def extent(self) -> np.ndarray:
        return np.asarray(self.counts, dtype=float) * self.h


def generate_lattice_mesh(spec: LatticeSpec) -> TetrahedralMesh:
    """Split every lattice cell into four corner tets and one central tet.

    The split alternates with the parity of ``ix + iy + iz`` so that the face
    diagonals of neighbouring cells coincide and the mesh is conforming. Nodes
    are numbered x-fastest; tets are emitted cell by cell in the same order.
    """
    nx, ny, nz = (int(c) for c in spec.counts)
    h = float(spec.h)
    ox, oy, oz = spec.origin
    xs = ox + h * np.arange(nx + 1)
    ys = oy + h * np.arange(ny + 1)
    zs = oz + h * np.arange(nz + 1)
    gz, gy, gx = np.meshgrid(zs, ys, xs, indexing="ij")
    nodes = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)

    def nid(i, j, k):
        return i + (nx + 1) * (j + (ny + 1) * k)

    ck, cj, ci = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx), indexing="ij")
    ci, cj, ck = ci.ravel(), cj.ravel(), ck.ravel()
    corners = np.stack(
        [nid(ci + dx, cj + dy, ck + dz) for dz in (0, 1) for dy in (0, 1) for dx in (0, 1)],
        axis=1,
    )
    odd = ((ci + cj + ck) % 2).astype(bool)
    tets = np.where(odd[:, None, None], corners[:, _ODD], corners[:, _EVEN]).reshape(-1, 4)
    tets = orient_tetrahedra(nodes, tets)
    return TetrahedralMesh(nodes, tets, np.zeros(len(tets), dtype=np.int64))
