import numpy as np
import pytest

from headmesh.lattice import LatticeSpec, generate_lattice_mesh
from headmesh.mesh import TetrahedralMesh
from headmesh.surfaces import make_segmentation, sphere_surface


# acceptance results: criterion -> list of (part, passed, detail)
ACCEPTANCE: dict[int, list[tuple[str, bool, str]]] = {}


def record(criterion: int, part: str, passed: bool, detail: str) -> bool:
    ACCEPTANCE.setdefault(criterion, []).append((part, bool(passed), detail))
    print(f"criterion {criterion} [{part}]: {'PASS' if passed else 'FAIL'} ({detail})")
    return bool(passed)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for c in sorted(ACCEPTANCE):
        parts = ACCEPTANCE[c]
        ok = all(p[1] for p in parts)
        detail = "; ".join(f"{name}: {'ok' if good else 'FAIL'} ({d})" for name, good, d in parts)
        terminalreporter.write_line(f"criterion {c}: {'PASS' if ok else 'FAIL'} - {detail}")


def unit_cube_mesh(label: int = 1) -> TetrahedralMesh:
    m = generate_lattice_mesh(LatticeSpec((0.0, 0.0, 0.0), 1.0, (1, 1, 1)))
    return m.with_labels(np.full(m.n_tets, label))


def lattice(counts=(2, 2, 2), h=1.0, origin=(0.0, 0.0, 0.0)) -> TetrahedralMesh:
    return generate_lattice_mesh(LatticeSpec(tuple(origin), float(h), tuple(counts)))


def two_sphere_segmentation(radius: float, h: float):
    """Spheres of radius ``radius / 2`` and ``radius`` with surface edges close to ``h``."""
    return make_segmentation(
        [sphere_surface(0.5 * radius, h), sphere_surface(radius, h)],
        names=["inner", "outer"],
        conductivities=[1.0, 0.5],
        active=[True, False],
        box_margin=2.0 * h,
    )


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(12345)
