import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from headmesh.mesh import TetrahedralMesh
from headmesh.pipeline import PipelineConfig, run_pipeline
from headmesh.postprocess import condition_numbers
from headmesh.quality import (
    QualityReport,
    assess,
    boundary_distance,
    condition_histogram,
    sample_surface,
)
from headmesh.refinement import refine_volume
from headmesh.surfaces import geodesic_sphere, make_segmentation, sphere_surface

from conftest import lattice

K_SMALL = (1 / 6) / math.sqrt(2)
K_LARGE = (1 / 3) / math.sqrt(2)


def test_identical_surfaces():
    s = sphere_surface(10.0, 1.5)
    d = boundary_distance(s, s, 5000)
    assert d.max < 1e-9


def test_concentric_spheres():
    a = geodesic_sphere(10.0, 16)
    b = geodesic_sphere(11.0, 16)
    d = boundary_distance(a, b, 20_000)
    # chordal sag of the outer facets is about R * (1 - cos(edge / 2R)), well under 0.05
    assert d.median == pytest.approx(1.0, abs=0.05)
    assert d.q25 <= d.median <= d.q75


def test_distance_symmetric_for_coincident_surfaces():
    a = sphere_surface(10.0, 1.0)
    b = geodesic_sphere(10.0, 12)
    ab = boundary_distance(a, b, 20_000, seed=1).median
    ba = boundary_distance(b, a, 20_000, seed=2).median
    assert abs(ab - ba) < 0.02


def test_sampling_is_area_uniform():
    # a unit square split into a large and a small triangle
    from headmesh.surfaces import TriSurface

    s = TriSurface([[0, 0, 0], [3, 0, 0], [0, 1, 0], [1, 0, 0]], [[0, 3, 2], [3, 1, 2]])
    p = sample_surface(s, 40_000, seed=5)
    left = (p[:, 0] + p[:, 1] <= 1.0 + 1e-12).mean()
    assert left == pytest.approx(0.5 / 1.5, abs=0.01)
    assert np.array_equal(p, sample_surface(s, 40_000, seed=5))


def test_empty_inputs_rejected():
    from headmesh.surfaces import TriSurface

    empty = TriSurface(np.zeros((0, 3)), np.zeros((0, 3), dtype=int))
    with pytest.raises(ValueError):
        boundary_distance(empty, sphere_surface(1, 0.5))


def test_processed_sphere_within_half_cell():
    r, h = 30.0, 6.0
    seg = make_segmentation([sphere_surface(r, h / 2)])
    art = run_pipeline(PipelineConfig(resolution=h, quality_samples=20_000), seg)
    med = next(iter(art.quality.distances.values())).median
    assert med < h / 2


def test_lattice_histogram():
    m = lattice((3, 3, 3))
    hist = condition_histogram(m, h=1.0)
    occupied = np.flatnonzero(hist.counts)
    assert len(occupied) == 2
    assert hist.counts.sum() == m.n_tets
    # four corner tets for each central tet
    assert hist.counts[occupied[0]] == 4 * hist.counts[occupied[1]]
    for i, k in zip(occupied, (K_SMALL, K_LARGE)):
        assert hist.edges[i] <= k < hist.edges[i + 1]
    k = np.unique(np.round(condition_numbers(m.nodes, m.tets), 12))
    assert np.allclose(k, [K_SMALL, K_LARGE])


def test_half_spacing_lattice_scales_by_a_quarter():
    fine = lattice((4, 4, 4), 0.5)
    k = np.unique(np.round(condition_numbers(fine.nodes, fine.tets), 12))
    assert np.allclose(k, [K_SMALL / 4, K_LARGE / 4])
    a = condition_histogram(lattice((2, 2, 2)), h=1.0)
    b = condition_histogram(fine, h=0.5)
    assert np.array_equal(np.flatnonzero(a.counts), np.flatnonzero(b.counts))


def test_full_refinement_corner_children_scale_by_a_quarter():
    # corner children of an 8-split are half-size copies of the parent; the
    # four octahedron children take other shapes
    m = lattice((2, 2, 2))
    out = refine_volume(m, np.ones(m.n_tets, dtype=bool))
    k = np.abs(condition_numbers(out.nodes, out.tets))
    n_small = np.isclose(condition_numbers(m.nodes, m.tets), K_SMALL).sum()
    assert np.isclose(k, K_SMALL / 4).sum() >= 4 * n_small
    assert np.isclose(k, K_LARGE / 4).sum() >= 4 * (m.n_tets - n_small)
    assert condition_histogram(out, h=1.0).counts.sum() == out.n_tets


def test_empty_mesh_histogram():
    m = TetrahedralMesh(np.zeros((0, 3)), np.zeros((0, 4)))
    hist = condition_histogram(m, h=1.0)
    assert hist.counts.sum() == 0 and np.all(hist.frequencies == 0)


def test_histogram_counts_inverted_elements():
    m = lattice((1, 1, 1))
    flipped = TetrahedralMesh(m.nodes, m.tets[:, [1, 0, 2, 3]])
    assert condition_histogram(flipped, h=1.0).counts.sum() == 5


@settings(max_examples=20, deadline=None)
@given(st.floats(0.1, 20.0))
def test_histogram_is_scale_covariant(s):
    m = lattice((2, 2, 2))
    a = condition_histogram(m, h=1.0)
    b = condition_histogram(m.with_nodes(m.nodes * s), h=s)
    assert np.array_equal(a.counts, b.counts)


def test_csv_rows_match_bins(tmp_path):
    hist = condition_histogram(lattice((2, 2, 2)), h=1.0, bins=25)
    hist.write_csv(tmp_path / "k.csv")
    lines = (tmp_path / "k.csv").read_text().strip().splitlines()
    assert len(lines) == 26


def test_report_json_roundtrip(tmp_path):
    seg = make_segmentation([sphere_surface(3.0, 1.0)])
    m = lattice((8, 8, 8), 1.0, (-4, -4, -4))
    from headmesh.labeling import initial_label

    m = m.with_labels(initial_label(m, seg))
    rep = assess(m, {"ball": ([1], seg.tissue[0].surface)}, h=1.0, tau=0.01, samples=2000)
    rep.timings = {"labeling": 0.25}
    back = QualityReport.from_json(rep.to_json())
    assert back.to_dict() == rep.to_dict()
    assert back.histogram.counts.sum() == m.n_tets
    files = rep.write(tmp_path)
    assert {p.name for p in files} == {"quality.json", "kappa_histogram.csv", "boundary_distance.csv"}
    assert QualityReport.from_json((tmp_path / "quality.json").read_text()).to_dict() == rep.to_dict()
