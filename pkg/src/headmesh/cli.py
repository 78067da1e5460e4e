"""Command line entry point: ``headmesh {mesh,quality,forward,localize,sphere-bench}``.

Failures print ``error [stage]: message`` on stderr and exit with status 1.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .pipeline import PipelineConfig, PipelineError, run_pipeline

logger = logging.getLogger("headmesh")


class StageFailure(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(message)
        self.stage = stage


def _stage(stage: str, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except (PipelineError, StageFailure):
        raise
    except Exception as exc:
        raise StageFailure(stage, f"{type(exc).__name__}: {exc}") from exc


def _read_points(path, widths=(3,)) -> np.ndarray:
    """Numeric CSV with an optional header row and one of the allowed column counts."""
    rows = [r for r in Path(path).read_text().splitlines() if r.strip()]
    if rows and not _is_numeric(rows[0]):
        rows = rows[1:]
    arr = np.array([[float(v) for v in r.split(",")] for r in rows], dtype=float)
    if arr.ndim != 2 or arr.shape[1] not in widths:
        raise ValueError(f"{path}: expected {' or '.join(map(str, widths))} columns")
    return arr


def _is_numeric(row: str) -> bool:
    try:
        [float(v) for v in row.split(",")]
        return True
    except ValueError:
        return False


def _read_conductivities(path) -> tuple[dict[int, float], list[int] | None]:
    """JSON ``{label: sigma}`` or a segmentation manifest (which also gives active labels)."""
    doc = json.loads(Path(path).read_text())
    if "compartments" in doc:
        from .surfaces import load_segmentation

        seg = load_segmentation(path)
        return seg.conductivities(), [c.label for c in seg.tissue if c.active]
    return {int(k): float(v) for k, v in doc.items()}, None


def cmd_mesh(args) -> dict:
    cfg = _stage("ingest", PipelineConfig.load, args.config) if args.config else PipelineConfig()
    if args.segmentation:
        cfg.segmentation = args.segmentation
    if args.resolution:
        cfg.resolution = args.resolution
    if args.workers:
        cfg.workers = args.workers
        cfg.labeling.workers = args.workers
    if args.seed is not None:
        cfg.seed = args.seed
    if args.regular:
        cfg = PipelineConfig.regular(**{k: getattr(cfg, k) for k in ("segmentation", "resolution", "origin", "workers", "seed")})
    cfg.output_dir = args.out
    art = run_pipeline(cfg)
    summary = {"nodes": art.mesh.n_nodes, "tets": art.mesh.n_tets, "timing_s": art.timing.to_dict(), "files": art.files}
    if art.quality is not None:
        summary["boundary_distance_median_mm"] = {k: v.median for k, v in art.quality.distances.items()}
    return summary


def cmd_quality(args) -> dict:
    from .mesh import read_mesh
    from .quality import assess
    from .surfaces import load_segmentation

    mesh = _stage("ingest", read_mesh, args.mesh)
    seg = _stage("ingest", load_segmentation, args.segmentation)
    targets = {c.name: (seg.inner_labels(c.label), c.surface) for c in seg.tissue}
    tau = args.tau if args.tau is not None else (1e-2 * args.h**2 if args.h else None)
    rep = _stage("quality", assess, mesh, targets, h=args.h, tau=tau, samples=args.samples, seed=args.seed)
    files = _stage("data_handling", rep.write, args.out) if args.out else []
    return {"n_nodes": rep.n_nodes, "n_tets": rep.n_tets, "tau": rep.tau, "below_tau": rep.below_tau,
            "distance_median_mm": {k: v.median for k, v in rep.distances.items()}, "files": [str(f) for f in files]}


def cmd_forward(args) -> dict:
    from .forward import ElectrodeSet, SourceSpace, compute_lead_field
    from .mesh import read_mesh

    mesh = _stage("ingest", read_mesh, args.mesh)
    cond, active = _stage("ingest", _read_conductivities, args.conductivities)
    if args.active:
        active = [int(v) for v in args.active.split(",")]
    el = _stage("ingest", _read_points, args.electrodes)
    src = _stage("ingest", _read_points, args.sources, (3, 6))
    sources = SourceSpace(src[:, :3], src[:, 3:] if src.shape[1] == 6 else None)
    lf = _stage(
        "forward", compute_lead_field, mesh, cond, ElectrodeSet(el[:, :3]), sources,
        active_labels=active, tol=args.tol, preconditioner=args.preconditioner,
    )
    npy, meta = _stage("data_handling", lf.save, args.out)
    return {"shape": list(lf.matrix.shape), "matrix": str(npy), "sidecar": str(meta),
            "max_iterations": max((i.iterations for i in lf.solve_info), default=0)}


def cmd_localize(args) -> dict:
    from .forward import LeadField
    from .localize import InverseProblemSetup, localize

    lf = _stage("ingest", LeadField.load, args.leadfield)
    y = _stage("ingest", lambda p: np.loadtxt(p, delimiter=",", ndmin=1).reshape(-1), args.data)
    cov = _stage("ingest", np.loadtxt, args.noise_cov, delimiter=",", ndmin=2) if args.noise_cov else None
    setup = _stage("localize", InverseProblemSetup.from_lead_field, lf, y, args.snr_db, cov, args.whiten)
    est = _stage("localize", localize, setup, args.method)
    doc = est.to_dict()
    doc["lam"] = setup.lam
    doc["peak_position_mm"] = est.peak_position().tolist()
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps(doc, indent=1) + "\n")
    return {"method": est.method, "argmax": est.argmax, "peak_position_mm": doc["peak_position_mm"], "lam": setup.lam}


def cmd_sphere_bench(args) -> dict:
    from .bench import sphere_bench

    res = _stage(
        "sphere-bench", sphere_bench, h=args.h, regular=args.regular, n_sources=args.sources,
        max_eccentricity=args.max_eccentricity, emd=not args.no_emd, per_group=args.per_group,
        snr_db=args.snr_db, seed=args.seed,
    )
    if args.out:
        _stage("data_handling", res.write, args.out)
    out = {k: v for k, v in res.to_dict().items() if k != "per_source"}
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="headmesh", description="Tetrahedral head meshing and EEG verification.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    m = sub.add_parser("mesh", help="run the meshing pipeline")
    m.add_argument("--config", help="JSON pipeline config")
    m.add_argument("--segmentation", help="segmentation manifest (overrides the config)")
    m.add_argument("--resolution", type=float, help="lattice spacing in mm")
    m.add_argument("--workers", type=int)
    m.add_argument("--seed", type=int)
    m.add_argument("--regular", action="store_true", help="no refinement or post-processing")
    m.add_argument("--out", required=True, help="output directory")
    m.set_defaults(func=cmd_mesh)

    q = sub.add_parser("quality", help="quality report of an existing mesh")
    q.add_argument("--mesh", required=True)
    q.add_argument("--segmentation", required=True)
    q.add_argument("--h", type=float, help="lattice spacing for histogram scaling")
    q.add_argument("--tau", type=float, help="condition threshold (default 1e-2 h^2)")
    q.add_argument("--samples", type=int, default=20000)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--out")
    q.set_defaults(func=cmd_quality)

    f = sub.add_parser("forward", help="EEG lead field on a mesh")
    f.add_argument("--mesh", required=True)
    f.add_argument("--conductivities", required=True, help="JSON {label: S/m} or a segmentation manifest")
    f.add_argument("--electrodes", required=True, help="CSV x,y,z per electrode")
    f.add_argument("--sources", required=True, help="CSV x,y,z[,nx,ny,nz] per source position")
    f.add_argument("--active", help="comma separated active labels")
    f.add_argument("--tol", type=float, default=1e-9)
    f.add_argument("--preconditioner", choices=("amg", "jacobi"), default="amg")
    f.add_argument("--out", required=True, help="output path; writes .npy and .json")
    f.set_defaults(func=cmd_forward)

    lo = sub.add_parser("localize", help="inverse estimate from one data vector")
    lo.add_argument("--leadfield", required=True)
    lo.add_argument("--data", required=True, help="CSV, one potential per electrode")
    lo.add_argument("--method", choices=("mne", "sloreta", "dipolescan"), required=True)
    lo.add_argument("--snr-db", type=float, default=30.0)
    lo.add_argument("--noise-cov", help="CSV electrodes x electrodes")
    lo.add_argument("--whiten", action="store_true")
    lo.add_argument("--out")
    lo.set_defaults(func=cmd_localize)

    b = sub.add_parser("sphere-bench", help="layered-sphere verification run")
    b.add_argument("--h", type=float, default=8.0)
    b.add_argument("--regular", action="store_true")
    b.add_argument("--sources", type=int, default=300)
    b.add_argument("--max-eccentricity", type=float, default=1.0)
    b.add_argument("--per-group", type=int, default=20)
    b.add_argument("--snr-db", type=float, default=30.0)
    b.add_argument("--no-emd", action="store_true")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out")
    b.set_defaults(func=cmd_sphere_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        result = args.func(args)
    except PipelineError as exc:
        print(f"error [{exc.stage}]: {exc.message}", file=sys.stderr)
        return 1
    except StageFailure as exc:
        print(f"error [{exc.stage}]: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(result, indent=1, default=float))
    return 0


if __name__ == "__main__":
    sys.exit(main())
