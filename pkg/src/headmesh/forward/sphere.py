"""Concentric-sphere verification fixture (three-layer Ary geometry by default)."""

from __future__ import annotations

import numpy as np

from ..labeling import enclosure_ratio
from ..surfaces import SurfaceSegmentation, make_segmentation, sphere_surface
from .analytic import LayeredSphereModel, fibonacci_sphere
from .fem import ElectrodeSet, SourceSpace

ARY_RADII = (87.0, 92.0, 100.0)
ARY_CONDUCTIVITIES = (0.33, 0.0042, 0.33)
ARY_NAMES = ("brain", "skull", "scalp")


def sphere_segmentation(model: LayeredSphereModel, h: float, names=None, box_margin: float | None = None) -> SurfaceSegmentation:
    """Triangulated spheres with mean edge close to ``h``; only the innermost layer is active."""
    k = len(model.radii)
    names = list(names or (ARY_NAMES if k == 3 else [f"layer{i + 1}" for i in range(k)]))
    surfaces = [sphere_surface(r, h) for r in model.radii]
    return make_segmentation(
        surfaces,
        names=names,
        conductivities=list(model.conductivities),
        active=[True] + [False] * (k - 1),
        box_margin=2.0 * h if box_margin is None else box_margin,
    )


def sample_ball(n: int, radius: float, rng: np.random.Generator, max_ecc: float = 1.0, min_ecc: float = 0.0) -> np.ndarray:
    """Uniform points in the shell ``min_ecc * radius <= |r| <= max_ecc * radius`` by rejection."""
    out = []
    while sum(len(o) for o in out) < n:
        p = rng.uniform(-radius, radius, size=(4 * n + 16, 3))
        r = np.linalg.norm(p, axis=1) / radius
        out.append(p[(r <= max_ecc) & (r >= min_ecc)])
    return np.concatenate(out)[:n]


def build_sphere_fixture(
    h: float,
    model: LayeredSphereModel | None = None,
    n_electrodes: int = 180,
    n_sources: int = 300,
    seed: int = 0,
    max_eccentricity: float = 1.0,
    threshold: float = 0.5,
) -> tuple[SurfaceSegmentation, ElectrodeSet, SourceSpace]:
    """Segmentation, spiral electrode layout and Cartesian-triplet source space for the sphere model.

    Sources are drawn uniformly in the innermost ball and kept only when the
    triangulated innermost surface encloses them (ratio >= ``threshold``).
    """
    if not h > 0:
        raise ValueError("h must be positive")
    model = model or LayeredSphereModel(ARY_RADII, ARY_CONDUCTIVITIES)
    seg = sphere_segmentation(model, h)
    electrodes = ElectrodeSet(fibonacci_sphere(n_electrodes, model.outer_radius))
    rng = np.random.default_rng(seed)
    inner = seg.tissue[0].surface
    kept: list[np.ndarray] = []
    while sum(len(k) for k in kept) < n_sources:
        cand = sample_ball(n_sources, model.brain_radius, rng, max_eccentricity)
        ok = enclosure_ratio(cand, inner) >= threshold
        kept.append(cand[ok])
    sources = SourceSpace(np.concatenate(kept)[:n_sources])
    return seg, electrodes, sources
