"""Layered-sphere verification run: mesh, lead field, forward errors and EMD sweep."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .forward import (
    LayeredSphereModel,
    LeadField,
    build_sphere_fixture,
    compute_lead_field,
    rdm_mag,
    restrict_sources,
    series_potential,
)
from .localize import METHODS, InverseProblemSetup, emd_to_dipole, localize
from .pipeline import PipelineConfig, run_pipeline

logger = logging.getLogger(__name__)

EMD_ECCENTRICITIES = (0.06, 0.29, 0.63, 0.98)


def unit_vectors(n: int, rng: np.random.Generator) -> np.ndarray:
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def forward_errors(lf: LeadField, model: LayeredSphereModel, electrode_points, rng) -> np.ndarray:
    """RDM and MAG of every lead-field position against the series solution.

    Each position gets one random unit moment. Returns ``(P, 2)``.
    """
    out = np.empty((lf.sources.n_positions, 2))
    q = unit_vectors(lf.sources.n_positions, rng)
    for i, p in enumerate(lf.sources.positions):
        ref = series_potential(model, p, q[i], electrode_points)
        ref -= ref.mean()
        col = lf.block(i) @ q[i] if lf.components == 3 else lf.block(i)[:, 0] * (q[i] @ lf.sources.orientations[i])
        out[i] = rdm_mag(col, ref)
    return out


def emd_sweep(
    lf: LeadField,
    model: LayeredSphereModel,
    electrode_points,
    rng,
    eccentricities=EMD_ECCENTRICITIES,
    per_group: int = 20,
    snr_db: float = 30.0,
    methods=METHODS,
) -> dict[str, dict[float, list[float]]]:
    """EMD of each estimator to dipoles placed at fixed eccentricities.

    Data come from the series solution (noise free), the inverse uses the
    FEM lead field. Directions and moments are random per dipole.
    """
    out: dict[str, dict[float, list[float]]] = {m: {} for m in methods}
    for ecc in eccentricities:
        pos = unit_vectors(per_group, rng) * ecc * model.brain_radius
        mom = unit_vectors(per_group, rng)
        for m in methods:
            out[m][float(ecc)] = []
        for p, q in zip(pos, mom):
            y = series_potential(model, p, q, electrode_points)
            y -= y.mean()
            setup = InverseProblemSetup.from_lead_field(lf, y, snr_db)
            for m in methods:
                out[m][float(ecc)].append(emd_to_dipole(localize(setup, m), p))
    return out


@dataclass
class SphereBenchResult:
    h: float
    mode: str
    n_nodes: int
    n_tets: int
    eccentricity: np.ndarray
    rdm: np.ndarray
    mag: np.ndarray
    emd: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)

    def summary(self, max_eccentricity: float = 1.0) -> dict:
        sel = self.eccentricity <= max_eccentricity
        return {
            "n_sources": int(sel.sum()),
            "median_rdm": float(np.median(self.rdm[sel])) if sel.any() else float("nan"),
            "median_abs_mag": float(np.median(np.abs(self.mag[sel]))) if sel.any() else float("nan"),
            "median_mag": float(np.median(self.mag[sel])) if sel.any() else float("nan"),
        }

    def emd_medians(self) -> dict[str, dict[str, float]]:
        return {m: {str(e): float(np.median(v)) for e, v in g.items()} for m, g in self.emd.items()}

    def to_dict(self) -> dict:
        return {
            "h": self.h,
            "mode": self.mode,
            "n_nodes": self.n_nodes,
            "n_tets": self.n_tets,
            "forward": self.summary(),
            "forward_ecc_le_0.9": self.summary(0.9),
            "emd_median_mm": self.emd_medians(),
            "timing_s": self.timing,
            "per_source": {
                "eccentricity": self.eccentricity.tolist(),
                "rdm": self.rdm.tolist(),
                "mag": self.mag.tolist(),
            },
        }

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=1) + "\n")
        return path


def sphere_bench(
    h: float = 8.0,
    model: LayeredSphereModel | None = None,
    regular: bool = False,
    n_sources: int = 300,
    n_electrodes: int = 180,
    max_eccentricity: float = 1.0,
    emd: bool = True,
    per_group: int = 20,
    snr_db: float = 30.0,
    seed: int = 0,
    config: PipelineConfig | None = None,
) -> SphereBenchResult:
    """Full sphere verification at lattice resolution ``h``.

    ``regular`` switches off refinement and post-processing. Sources drawn
    outside the meshed active compartment are dropped before the lead field
    is built.
    """
    model = model or LayeredSphereModel()
    rng = np.random.default_rng(seed)
    timing = {}
    seg, electrodes, sources = build_sphere_fixture(
        h, model, n_electrodes=n_electrodes, n_sources=n_sources, seed=seed, max_eccentricity=max_eccentricity
    )
    if config is None:
        config = PipelineConfig.regular(resolution=h) if regular else PipelineConfig(resolution=h)
    config.seed = seed
    t0 = time.perf_counter()
    art = run_pipeline(config, seg)
    timing["mesh"] = time.perf_counter() - t0
    mesh = art.mesh
    active = [c.label for c in seg.tissue if c.active]
    sources, _ = restrict_sources(sources, mesh, active)
    if sources.n_positions < n_sources:
        logger.info("%d of %d sources lie outside the meshed active region", n_sources - sources.n_positions, n_sources)
    electrodes = electrodes.snap(mesh)
    t0 = time.perf_counter()
    lf = compute_lead_field(mesh, seg.conductivities(), electrodes, sources, active_labels=active)
    timing["lead_field"] = time.perf_counter() - t0
    pts = mesh.nodes[electrodes.nodes]
    err = forward_errors(lf, model, pts, rng)
    ecc = np.linalg.norm(sources.positions, axis=1) / model.brain_radius
    res = SphereBenchResult(h, "regular" if regular else "adapted", mesh.n_nodes, mesh.n_tets, ecc, err[:, 0], err[:, 1])
    if emd:
        t0 = time.perf_counter()
        res.emd = emd_sweep(lf, model, pts, rng, per_group=per_group, snr_db=snr_db)
        timing["emd"] = time.perf_counter() - t0
    res.timing = timing
    s = res.summary()
    logger.info("sphere bench h=%g %s: median RDM %.4f, median |MAG| %.4f", h, res.mode, s["median_rdm"], s["median_abs_mag"])
    return res
