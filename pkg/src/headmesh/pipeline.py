"""End-to-end meshing pipeline with per-stage timing.

Stage order is fixed: ingest, lattice, labelling, refinement with
re-labelling, interleaved surface smoothing and inflation, volume smoothing,
optimisation (repair, then flips), bounding-box removal and quality report.
Disabling a stage skips it without reordering the others.
"""

from __future__ import annotations

import json
import logging
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .geometry import TriangleGrid
from .labeling import SolidAngleParams, initial_label, relabel_recursive
from .lattice import LatticeSpec, generate_lattice_mesh
from .mesh import TetrahedralMesh, region_boundary, validate_mesh, write_mesh
from .postprocess import (
    InflationParams,
    OptimizationParams,
    SmoothingParams,
    condition_numbers,
    delaunay_turns,
    inflate,
    repair_inverted,
    taubin_smooth,
)
from .quality import QualityReport, assess
from .refinement import RefinementPlan
from .surfaces import (
    SurfaceSegmentation,
    downsample_surface,
    load_segmentation,
    strip_bounding_box,
    wrap_bounding_box,
)

logger = logging.getLogger(__name__)

STAGES = (
    "surface_extraction",
    "labeling",
    "refinement",
    "smoothing",
    "inflation",
    "optimization",
    "data_handling",
)


class PipelineError(RuntimeError):
    """A stage failed; ``stage`` names it."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
        self.message = message


@dataclass
class StageToggles:
    downsample: bool = True
    refinement: bool = True
    smoothing: bool = True
    inflation: bool = True
    optimization: bool = True
    strip_box: bool = True
    quality: bool = True


@dataclass
class PipelineConfig:
    segmentation: str | None = None
    resolution: float = 8.0
    origin: tuple[float, float, float] | None = None
    refine: list[dict] | None = None
    labeling: SolidAngleParams = field(default_factory=SolidAngleParams)
    smoothing: SmoothingParams = field(default_factory=SmoothingParams)
    inflation: InflationParams = field(default_factory=InflationParams)
    optimization: OptimizationParams = field(default_factory=OptimizationParams)
    stages: StageToggles = field(default_factory=StageToggles)
    output_dir: str | None = None
    workers: int = 1
    seed: int = 0
    quality_samples: int = 20_000

    def __post_init__(self):
        if not self.resolution > 0:
            raise ValueError("resolution must be positive")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    @property
    def tau(self) -> float:
        t = self.optimization.tau
        return 1e-2 * self.resolution**2 if t is None else float(t)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        sub = {
            "labeling": (SolidAngleParams, {}),
            "smoothing": (SmoothingParams, {"lambda": "lam"}),
            "inflation": (InflationParams, {}),
            "optimization": (OptimizationParams, {}),
            "stages": (StageToggles, {}),
        }
        for key, (typ, rename) in sub.items():
            if key in d and isinstance(d[key], dict):
                d[key] = typ(**{rename.get(k, k): v for k, v in d[key].items()})
        if d.get("origin") is not None:
            d["origin"] = tuple(float(v) for v in d["origin"])
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        path = Path(path)
        d = json.loads(path.read_text())
        if d.get("segmentation"):
            seg = Path(d["segmentation"])
            if not seg.is_absolute():
                d["segmentation"] = str(path.parent / seg)
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["smoothing"]["lambda"] = d["smoothing"].pop("lam")
        return d

    @classmethod
    def regular(cls, **kw) -> "PipelineConfig":
        """No refinement, smoothing, inflation or optimisation."""
        cfg = cls(**kw)
        cfg.stages = StageToggles(refinement=False, smoothing=False, inflation=False, optimization=False,
                                  downsample=cfg.stages.downsample, strip_box=cfg.stages.strip_box,
                                  quality=cfg.stages.quality)
        return cfg


@dataclass
class StageTiming:
    surface_extraction: float = 0.0
    labeling: float = 0.0
    refinement: float = 0.0
    smoothing: float = 0.0
    inflation: float = 0.0
    optimization: float = 0.0
    data_handling: float = 0.0

    @property
    def total(self) -> float:
        return sum(getattr(self, s) for s in STAGES)

    def to_dict(self) -> dict:
        d = {s: getattr(self, s) for s in STAGES}
        d["total"] = self.total
        return d


@dataclass
class PipelineArtifacts:
    mesh: TetrahedralMesh
    segmentation: SurfaceSegmentation
    timing: StageTiming
    quality: QualityReport | None
    diagnostics: dict
    files: dict[str, str] = field(default_factory=dict)


class _Clock:
    def __init__(self):
        self.timing = StageTiming()
        self.current = "data_handling"

    @contextmanager
    def stage(self, name: str):
        prev = self.current
        self.current = name
        t0 = time.perf_counter()
        try:
            yield
        except PipelineError:
            raise
        except Exception as exc:  # attach the stage name
            raise PipelineError(name, f"{type(exc).__name__}: {exc}") from exc
        finally:
            setattr(self.timing, name, getattr(self.timing, name) + time.perf_counter() - t0)
            self.current = prev


def default_refinement(seg: SurfaceSegmentation) -> list[dict]:
    """Refine once on both sides of every active compartment's outer boundary."""
    tissue = seg.tissue
    steps = []
    for i, c in enumerate(tissue):
        if c.active:
            outer = tissue[i + 1].label if i + 1 < len(tissue) else 0
            steps.append({"boundary": [c.label, outer], "times": 1})
    return steps


def claim_boundaries(mesh: TetrahedralMesh, seg: SurfaceSegmentation):
    """Boundary of every tissue region with the nodes it owns.

    A node on several boundaries belongs to the innermost one only.
    """
    claimed = np.zeros(mesh.n_nodes, dtype=bool)
    out = []
    for c in seg.tissue:
        b = region_boundary(mesh, np.isin(mesh.labels, seg.inner_labels(c.label)), label=c.label)
        own = b.nodes[~claimed[b.nodes]]
        claimed[b.nodes] = True
        out.append((c, b, own))
    return out, claimed


def interior_nodes(mesh: TetrahedralMesh, on_boundary: np.ndarray) -> np.ndarray:
    """Tissue nodes off every label boundary and off the mesh exterior."""
    tissue = np.zeros(mesh.n_nodes, dtype=bool)
    tissue[mesh.tets[mesh.labels != 0].reshape(-1)] = True
    ext = np.zeros(mesh.n_nodes, dtype=bool)
    adj = mesh.face_adjacency
    ext[adj.faces[adj.tets[:, 1] < 0].reshape(-1)] = True
    return np.flatnonzero(tissue & ~on_boundary & ~ext)


def run_pipeline(config: PipelineConfig, segmentation: SurfaceSegmentation | None = None) -> PipelineArtifacts:
    """Run every enabled stage and write the artifacts when ``output_dir`` is set."""
    clock = _Clock()
    diag: dict = {}
    h = float(config.resolution)
    lab_params = SolidAngleParams(config.labeling.threshold, config.workers, config.labeling.max_iters)
    logger.info("pipeline start: h=%.3g mm", h)

    with clock.stage("data_handling"):
        if segmentation is None:
            if not config.segmentation:
                raise PipelineError("data_handling", "no segmentation given")
            try:
                seg = load_segmentation(config.segmentation)
            except Exception as exc:
                raise PipelineError("ingest", f"{type(exc).__name__}: {exc}") from exc
        else:
            seg = segmentation
        if config.stages.downsample:
            comps = []
            for c in seg.compartments:
                if c.surface.mean_edge_length() < h:
                    c = type(c)(c.name, c.label, downsample_surface(c.surface, h), c.conductivity, c.priority, c.active)
                comps.append(c)
            seg = SurfaceSegmentation(comps, seg.box_margin)
        margin = seg.box_margin if seg.box_margin is not None else 2.0 * h
        boxed = wrap_bounding_box(seg, margin)
        lo, hi = boxed.bounds()
        spec = LatticeSpec.covering(lo, hi, h, config.origin)
        mesh = generate_lattice_mesh(spec)
        diag["lattice"] = {"origin": list(spec.origin), "counts": list(spec.counts), "h": h}
        logger.info("lattice %s: %d nodes, %d tets", spec.counts, mesh.n_nodes, mesh.n_tets)

    with clock.stage("labeling"):
        mesh = mesh.with_labels(initial_label(mesh, seg, lab_params))

    if config.stages.refinement:
        plan = RefinementPlan(
            config.refine if config.refine is not None else default_refinement(seg),
            hierarchy=[c.label for c in seg.tissue],
        )
        relabel_info = []

        def relabel(m):
            t0 = time.perf_counter()
            r = relabel_recursive(m, seg, lab_params, m.labels)
            dt = time.perf_counter() - t0
            clock.timing.labeling += dt
            clock.timing.refinement -= dt
            relabel_info.append({"passes": r.passes, "evaluated": r.evaluated, "converged": r.converged})
            return r.labels

        with clock.stage("refinement"):
            mesh = plan.execute(mesh, relabel=relabel)
        diag["relabel"] = relabel_info

    with clock.stage("surface_extraction"):
        bounds, on_boundary = claim_boundaries(mesh, seg)

    sm, inf = config.stages.smoothing, config.stages.inflation
    if sm or inf:
        grids = {}
        with clock.stage("inflation"):
            if inf:
                grids = {c.label: TriangleGrid(c.surface.triangle_points()) for c, _, _ in bounds}
        rounds = max(1, config.inflation.passes) if inf else 1
        for _ in range(rounds):
            for c, b, own in bounds:
                if sm:
                    with clock.stage("smoothing"):
                        mesh = taubin_smooth(mesh, own, "surface", config.smoothing, b)
                if inf:
                    with clock.stage("inflation"):
                        mesh = inflate(mesh, b, c.surface, config.inflation, nodes=own, passes=1, grid=grids[c.label])
    if sm:
        with clock.stage("smoothing"):
            mesh = taubin_smooth(mesh, interior_nodes(mesh, on_boundary), "volume", config.smoothing)

    diag["inverted_before_optimization"] = int((mesh.volumes() <= 0).sum())
    if config.stages.optimization:
        with clock.stage("optimization"):
            rep = repair_inverted(mesh, config.optimization)
            mesh = rep.mesh
            opt = OptimizationParams(config.tau, config.optimization.max_repair_iters, config.optimization.max_turn_sweeps)
            mesh, turns = delaunay_turns(mesh, opt, return_stats=True)
        diag["repair"] = {"iterations": rep.iterations, "survivors": int(len(rep.survivors))}
        diag["turns"] = asdict(turns)

    with clock.stage("data_handling"):
        if config.stages.strip_box:
            mesh, _ = strip_bounding_box(mesh)
        report = validate_mesh(mesh)
        diag["validation"] = report.summary()
        quality = None
        if config.stages.quality:
            targets = {c.name: (seg.inner_labels(c.label), c.surface) for c in seg.tissue}
            quality = assess(mesh, targets, h=h, tau=config.tau, samples=config.quality_samples, seed=config.seed)

    if quality is not None:
        quality.timings = clock.timing.to_dict()
    art = PipelineArtifacts(mesh, seg, clock.timing, quality, diag)
    if config.output_dir:
        with clock.stage("data_handling"):
            art.files = emit_report(art, config.output_dir)
    logger.info("pipeline done: %d nodes, %d tets, %.2f s", mesh.n_nodes, mesh.n_tets, clock.timing.total)
    return art


def emit_report(art: PipelineArtifacts, directory, formats=("json", "csv")) -> dict[str, str]:
    """Write the mesh, quality report, timing and diagnostics into ``directory``."""
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
        files = {}
        p = directory / "mesh.tetmesh"
        write_mesh(art.mesh, p)
        files["mesh"] = str(p)
        if art.quality is not None:
            for q in art.quality.write(directory, formats):
                files[q.stem] = str(q)
        if "json" in formats:
            p = directory / "timing.json"
            p.write_text(json.dumps(art.timing.to_dict(), indent=2) + "\n")
            files["timing"] = str(p)
            p = directory / "diagnostics.json"
            p.write_text(json.dumps(art.diagnostics, indent=2, sort_keys=True, default=float) + "\n")
            files["diagnostics"] = str(p)
        if "csv" in formats:
            p = directory / "timing.csv"
            p.write_text("stage,seconds\n" + "".join(f"{k},{v!r}\n" for k, v in art.timing.to_dict().items()))
            files["timing_csv"] = str(p)
    except OSError as exc:
        raise PipelineError("data_handling", f"cannot write artifacts: {exc}") from exc
    return files


def kappa_below(mesh: TetrahedralMesh, tau: float) -> float:
    k = condition_numbers(mesh.nodes, mesh.tets)
    return float((k < tau).mean()) if len(k) else 0.0
