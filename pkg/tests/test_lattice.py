import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from headmesh.lattice import LatticeSpec, generate_lattice_mesh
from headmesh.mesh import validate_mesh
from headmesh.postprocess import condition_numbers

from conftest import lattice


def test_single_cell_volumes():
    m = lattice((1, 1, 1))
    assert m.n_nodes == 8 and m.n_tets == 5
    v = np.sort(m.volumes())
    assert np.allclose(v, [1 / 6, 1 / 6, 1 / 6, 1 / 6, 1 / 3], atol=1e-15)
    assert v.sum() == pytest.approx(1.0, abs=1e-15)


def test_two_cube_counts():
    m = lattice((2, 2, 2))
    assert (m.n_nodes, m.n_tets) == (27, 40)
    assert validate_mesh(m).is_empty()


@settings(max_examples=30, deadline=None)
@given(
    st.tuples(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5)),
    st.floats(0.05, 20.0),
    st.tuples(*[st.floats(-100, 100)] * 3),
)
def test_partition_of_the_box(counts, h, origin):
    m = generate_lattice_mesh(LatticeSpec(origin, h, counts))
    n = counts[0] * counts[1] * counts[2]
    assert m.n_tets == 5 * n
    assert m.volumes().min() > 0
    assert m.volumes().sum() == pytest.approx(n * h**3, rel=1e-9)


def test_conforming_for_all_small_counts():
    for counts in itertools.product(range(1, 5), repeat=3):
        rep = validate_mesh(lattice(counts))
        assert rep.conformity_violations == 0 and rep.is_empty(), counts


def test_two_condition_values():
    k = condition_numbers(*(lambda m: (m.nodes, m.tets))(lattice((3, 3, 3))))
    vals, counts = np.unique(np.round(k, 12), return_counts=True)
    assert np.allclose(vals, [(1 / 6) / np.sqrt(2), (1 / 3) / np.sqrt(2)])
    assert counts[0] == 4 * counts[1]


def test_covering_spec():
    spec = LatticeSpec.covering([0, 0, 0], [10, 4.5, 3], 2.0)
    assert spec.counts == (5, 3, 2)
    assert np.all(spec.extent >= [10, 4.5, 3])


def test_invalid_spec():
    with pytest.raises(ValueError):
        LatticeSpec((0, 0, 0), 0.0, (1, 1, 1))
    with pytest.raises(ValueError):
        LatticeSpec((0, 0, 0), 1.0, (0, 1, 1))
