"""Mesh quality diagnostics: boundary distances and condition-number histograms."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .geometry import TriangleGrid
from .mesh import CompartmentBoundary, TetrahedralMesh
from .postprocess import condition_numbers
from .surfaces import TriSurface

DEFAULT_SAMPLES = 20_000


@dataclass
class DistanceStats:
    median: float
    q25: float
    q75: float
    mean: float
    max: float
    n: int
    samples: np.ndarray | None = field(default=None, repr=False)

    @classmethod
    def from_samples(cls, d: np.ndarray, keep: bool = True) -> "DistanceStats":
        d = np.asarray(d, dtype=float)
        q25, med, q75 = np.percentile(d, [25, 50, 75])
        return cls(float(med), float(q25), float(q75), float(d.mean()), float(d.max()), len(d), d if keep else None)

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if k != "samples"}


def boundary_surface(mesh: TetrahedralMesh, boundary: CompartmentBoundary) -> TriSurface:
    """Triangle surface of a mesh boundary with its own compact vertex numbering."""
    used, inv = np.unique(boundary.triangles, return_inverse=True)
    return TriSurface(mesh.nodes[used], inv.reshape(-1, 3))


def sample_surface(surface: TriSurface, samples: int, seed: int = 0) -> np.ndarray:
    """Area-uniform random points on a triangle surface."""
    rng = np.random.default_rng(seed)
    tri = surface.triangle_points()
    area = surface.areas()
    pick = rng.choice(len(tri), size=samples, p=area / area.sum())
    r1 = np.sqrt(rng.random(samples))
    r2 = rng.random(samples)
    t = tri[pick]
    return (1 - r1)[:, None] * t[:, 0] + (r1 * (1 - r2))[:, None] * t[:, 1] + (r1 * r2)[:, None] * t[:, 2]


def boundary_distance(
    source: TriSurface,
    target: TriSurface,
    samples: int = DEFAULT_SAMPLES,
    seed: int = 0,
    mode: str = "area",
    keep_samples: bool = True,
) -> DistanceStats:
    """Unsigned distances from points on ``source`` to the ``target`` surface.

    ``mode="area"`` draws ``samples`` area-uniform points with a fixed seed;
    ``mode="nodes"`` uses the source vertices instead.
    """
    if source.n_triangles == 0 or target.n_triangles == 0:
        raise ValueError("boundary_distance needs two non-empty surfaces")
    if mode == "area":
        pts = sample_surface(source, samples, seed)
    elif mode == "nodes":
        pts = source.vertices
    else:
        raise ValueError(f"unknown sampling mode {mode!r}")
    d = TriangleGrid(target.triangle_points()).distance(pts)
    return DistanceStats.from_samples(d, keep_samples)


def lattice_scale(mesh: TetrahedralMesh) -> float:
    """Cell size of a 5-split lattice with the same mean element volume."""
    v = np.abs(mesh.volumes())
    return float((5.0 * v.mean()) ** (1.0 / 3.0)) if len(v) else 1.0


@dataclass
class ConditionHistogram:
    edges: np.ndarray
    counts: np.ndarray
    h: float

    @property
    def frequencies(self) -> np.ndarray:
        total = self.counts.sum()
        return self.counts / total if total else np.zeros_like(self.counts, dtype=float)

    def to_dict(self) -> dict:
        return {"h": self.h, "edges": self.edges.tolist(), "counts": self.counts.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "ConditionHistogram":
        return cls(np.asarray(d["edges"], dtype=float), np.asarray(d["counts"], dtype=np.int64), float(d["h"]))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["kappa_lo_mm2", "kappa_hi_mm2", "count", "frequency"])
            for lo, hi, c, f in zip(self.edges[:-1], self.edges[1:], self.counts, self.frequencies):
                w.writerow([repr(float(lo)), repr(float(hi)), int(c), repr(float(f))])


def condition_histogram(mesh: TetrahedralMesh, h: float | None = None, bins: int = 60) -> ConditionHistogram:
    """Histogram of ``kappa`` on log-spaced bins over ``[1e-6, 1] * h^2``.

    Values outside the range, including inverted elements, are counted in the
    end bins so that the counts add up to the element count. ``h`` defaults to
    :func:`lattice_scale`.
    """
    h = lattice_scale(mesh) if h is None else float(h)
    edges = np.logspace(-6, 0, bins + 1) * h * h
    if mesh.n_tets == 0:
        return ConditionHistogram(edges, np.zeros(bins, dtype=np.int64), h)
    k = condition_numbers(mesh.nodes, mesh.tets)
    idx = np.clip(np.searchsorted(edges, k, side="right") - 1, 0, bins - 1)
    return ConditionHistogram(edges, np.bincount(idx, minlength=bins).astype(np.int64), h)


@dataclass
class QualityReport:
    n_nodes: int
    n_tets: int
    label_counts: dict[str, int]
    distances: dict[str, DistanceStats]
    histogram: ConditionHistogram
    tau: float | None = None
    below_tau: int | None = None
    timings: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "n_nodes": self.n_nodes,
            "n_tets": self.n_tets,
            "label_counts": dict(self.label_counts),
            "distances": {k: v.to_dict() for k, v in self.distances.items()},
            "histogram": self.histogram.to_dict(),
            "tau": self.tau,
            "below_tau": self.below_tau,
            "timings": dict(self.timings),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QualityReport":
        return cls(
            n_nodes=int(d["n_nodes"]),
            n_tets=int(d["n_tets"]),
            label_counts={str(k): int(v) for k, v in d["label_counts"].items()},
            distances={k: DistanceStats(**v) for k, v in d["distances"].items()},
            histogram=ConditionHistogram.from_dict(d["histogram"]),
            tau=d.get("tau"),
            below_tau=d.get("below_tau"),
            timings={k: float(v) for k, v in d.get("timings", {}).items()},
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "QualityReport":
        return cls.from_dict(json.loads(text))

    def write(self, directory, formats=("json", "csv")) -> list[Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        out = []
        if "json" in formats:
            p = directory / "quality.json"
            p.write_text(self.to_json() + "\n")
            out.append(p)
        if "csv" in formats:
            p = directory / "kappa_histogram.csv"
            self.histogram.write_csv(p)
            out.append(p)
            p = directory / "boundary_distance.csv"
            with open(p, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["compartment", "median_mm", "q25_mm", "q75_mm", "mean_mm", "max_mm", "n"])
                for k, s in self.distances.items():
                    w.writerow([k, repr(s.median), repr(s.q25), repr(s.q75), repr(s.mean), repr(s.max), s.n])
            out.append(p)
        return out


def assess(
    mesh: TetrahedralMesh,
    targets: dict[str, tuple[np.ndarray, TriSurface]],
    h: float | None = None,
    tau: float | None = None,
    samples: int = DEFAULT_SAMPLES,
    seed: int = 0,
) -> QualityReport:
    """Quality report of ``mesh``.

    ``targets`` maps a compartment name to ``(label_set, target_surface)``: the
    boundary of the elements whose label is in ``label_set`` is compared with
    the surface.
    """
    from .mesh import region_boundary

    dist = {}
    for name, (labs, surf) in targets.items():
        mask = np.isin(mesh.labels, np.asarray(labs))
        if not mask.any():
            continue
        b = region_boundary(mesh, mask)
        dist[name] = boundary_distance(boundary_surface(mesh, b), surf, samples, seed)
    hist = condition_histogram(mesh, h)
    below = None
    if tau is not None:
        below = int((condition_numbers(mesh.nodes, mesh.tets) < tau).sum())
    labs, cnt = np.unique(mesh.labels, return_counts=True)
    return QualityReport(
        n_nodes=mesh.n_nodes,
        n_tets=mesh.n_tets,
        label_counts={str(int(a)): int(b) for a, b in zip(labs, cnt)},
        distances=dist,
        histogram=hist,
        tau=tau,
        below_tau=below,
    )
