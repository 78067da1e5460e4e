"""Analytic dipole potentials: infinite medium, layered sphere series, Berg sums.

The layered-sphere oracle expands the potential on the outer surface in
Legendre polynomials. For each degree ``n`` the radial coefficients of all
layers are obtained from a small linear system (continuity of potential and
normal current at every interface, no flux through the outer surface), which
gives the surface factor ``c_n`` in

    V = 1 / (4 pi sigma_1 R^2) * sum_n c_n rho^(n-1) [n P_n(u) q.r0_hat + P_n'(u) (q.r_hat - u q.r0_hat)]

with ``rho = |r0| / R`` and ``u = r_hat . r0_hat``. A homogeneous sphere has
``c_n = (2n + 1) / n``. Lengths are in millimetres and conductivities in S/m,
so potentials carry the unit (moment unit) / (S/m * mm^2); for moments in A*m
multiply by 1e6 to obtain volts.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.constants import epsilon_0
from scipy.optimize import least_squares

logger = logging.getLogger(__name__)

MAX_TERMS = 200
SERIES_RTOL = 1e-12


class CoincidentPoints(ValueError):
    pass


class DipoleOutsideBrain(ValueError):
    pass


class FitNotConverged(RuntimeError):
    pass


class ZeroVector(ValueError):
    pass


def analytic_potential_homogeneous(moment, position, field_point, eps_r: float = 1.0):
    """Infinite-medium dipole potential ``q.(r - r0) / (4 pi eps0 eps_r |r - r0|^3)``.

    ``field_point`` may be one point or an ``(N, 3)`` array.
    """
    q = np.asarray(moment, dtype=float)
    r0 = np.asarray(position, dtype=float)
    r = np.asarray(field_point, dtype=float)
    d = r - r0
    n = np.linalg.norm(d, axis=-1)
    if np.any(n == 0):
        raise CoincidentPoints("field point coincides with the dipole position")
    out = (d @ q) / (4.0 * math.pi * epsilon_0 * eps_r * n**3)
    return float(out) if np.ndim(out) == 0 else out


def rdm_mag(j1, j2) -> tuple[float, float]:
    """Relative difference measure and magnitude error of ``j1`` against reference ``j2``."""
    j1 = np.asarray(j1, dtype=float).reshape(-1)
    j2 = np.asarray(j2, dtype=float).reshape(-1)
    if j1.shape != j2.shape:
        raise ValueError("potential vectors differ in length")
    n1 = np.linalg.norm(j1)
    n2 = np.linalg.norm(j2)
    if n1 == 0 or n2 == 0:
        raise ZeroVector("RDM/MAG undefined for a zero potential vector")
    return float(np.linalg.norm(j1 / n1 - j2 / n2)), float(1.0 - n1 / n2)


# ------------------------------------------------------------ layered sphere


@dataclass(frozen=True)
class LayeredSphereModel:
    """Concentric spheres listed innermost first; the dipole lives in layer 1."""

    radii: tuple[float, ...] = (87.0, 92.0, 100.0)
    conductivities: tuple[float, ...] = (0.33, 0.0042, 0.33)
    berg: tuple[tuple[float, float], ...] | None = field(default=None, compare=False)

    def __post_init__(self):
        r = np.asarray(self.radii, dtype=float)
        s = np.asarray(self.conductivities, dtype=float)
        if len(r) == 0 or len(r) != len(s):
            raise ValueError("radii and conductivities must be non-empty and of equal length")
        if np.any(np.diff(r) <= 0) or r[0] <= 0:
            raise ValueError("radii must be positive and strictly increasing")
        if np.any(s <= 0):
            raise ValueError("conductivities must be positive")

    @property
    def outer_radius(self) -> float:
        return float(self.radii[-1])

    @property
    def brain_radius(self) -> float:
        return float(self.radii[0])

    def with_berg(self, params) -> "LayeredSphereModel":
        return replace(self, berg=tuple((float(a), float(b)) for a, b in params))


def surface_coefficients(model: LayeredSphereModel, n_max: int = MAX_TERMS) -> np.ndarray:
    """``c_n`` for ``n = 1..n_max`` (index 0 unused)."""
    rad = np.asarray(model.radii, dtype=float) / model.outer_radius
    sig = np.asarray(model.conductivities, dtype=float)
    nl = len(rad)
    c = np.zeros(n_max + 1)
    for n in range(1, n_max + 1):
        if nl == 1:
            c[n] = (2 * n + 1) / n
            continue
        # unknowns: b1 (regular part in layer 1), then (A_k, B_k) for k = 2..N
        m = 2 * nl - 1
        mat = np.zeros((m, m))
        rhs = np.zeros(m)

        def col_a(k):  # column of A_k (k >= 2) or b1 (k == 1)
            return 0 if k == 1 else 1 + 2 * (k - 2)

        row = 0
        for k in range(1, nl):
            r = rad[k - 1]
            rn, rm = r**n, r ** (-(n + 1))
            drn, drm = n * r ** (n - 1), -(n + 1) * r ** (-(n + 2))
            # inner side: layer k; singular part of layer 1 is the unit source
            if k == 1:
                mat[row, 0] += rn
                rhs[row] -= rm
                mat[row + 1, 0] += sig[0] * drn
                rhs[row + 1] -= sig[0] * drm
            else:
                ca = col_a(k)
                mat[row, ca] += rn
                mat[row, ca + 1] += rm
                mat[row + 1, ca] += sig[k - 1] * drn
                mat[row + 1, ca + 1] += sig[k - 1] * drm
            # outer side: layer k + 1
            ca = col_a(k + 1)
            mat[row, ca] -= rn
            mat[row, ca + 1] -= rm
            mat[row + 1, ca] -= sig[k] * drn
            mat[row + 1, ca + 1] -= sig[k] * drm
            row += 2
        ca = col_a(nl)
        mat[row, ca] = n
        mat[row, ca + 1] = -(n + 1)
        sol = np.linalg.solve(mat, rhs)
        c[n] = sol[ca] + sol[ca + 1]
    return c


def _series(coef: np.ndarray, sigma1: float, big_r: float, position, moment, points) -> np.ndarray:
    r0 = np.asarray(position, dtype=float)
    q = np.asarray(moment, dtype=float)
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    rr = np.linalg.norm(pts, axis=1)
    rhat = pts / rr[:, None]
    rho = np.linalg.norm(r0) / big_r
    if rho == 0.0:
        # only the n = 1 term survives
        return coef[1] * (rhat @ q) / (4.0 * math.pi * sigma1 * big_r**2)
    r0hat = r0 / np.linalg.norm(r0)
    u = np.clip(rhat @ r0hat, -1.0, 1.0)
    qr0 = float(q @ r0hat)
    qt = rhat @ q - u * qr0
    p_prev, p_cur = np.ones_like(u), u.copy()  # P_0, P_1
    d_prev, d_cur = np.zeros_like(u), np.ones_like(u)  # P_0', P_1'
    total = np.zeros_like(u)
    n_max = len(coef) - 1
    scale = abs(qr0) + float(np.linalg.norm(q))
    for n in range(1, n_max + 1):
        term = coef[n] * rho ** (n - 1) * (n * p_cur * qr0 + d_cur * qt)
        total += term
        bound = coef[n] * rho ** (n - 1) * (n + 1) * n * scale
        if n > 2 and bound < SERIES_RTOL * max(np.abs(total).max(), 1e-300):
            break
        # P_{n+1} = ((2n+1) u P_n - n P_{n-1}) / (n+1);  P'_{n+1} = P'_{n-1} + (2n+1) P_n
        p_next = ((2 * n + 1) * u * p_cur - n * p_prev) / (n + 1)
        d_next = d_prev + (2 * n + 1) * p_cur
        p_prev, p_cur = p_cur, p_next
        d_prev, d_cur = d_cur, d_next
    return total / (4.0 * math.pi * sigma1 * big_r**2)


def series_potential(model: LayeredSphereModel, position, moment, points, n_max: int = MAX_TERMS) -> np.ndarray:
    """Exact layered-sphere surface potential (Legendre series, at most ``n_max`` terms)."""
    _check_inside(model, position)
    coef = _coef_cache(model, n_max)
    return _series(coef, model.conductivities[0], model.outer_radius, position, moment, points)


_COEF: dict = {}


def _coef_cache(model: LayeredSphereModel, n_max: int) -> np.ndarray:
    key = (tuple(model.radii), tuple(model.conductivities), n_max)
    if key not in _COEF:
        _COEF[key] = surface_coefficients(model, n_max)
    return _COEF[key]


def _check_inside(model: LayeredSphereModel, position) -> None:
    if np.linalg.norm(position) >= model.brain_radius:
        raise DipoleOutsideBrain(f"dipole at radius {np.linalg.norm(position):.3f} mm is outside the innermost layer")


def homogeneous_sphere_potential(radius: float, sigma: float, position, moment, points) -> np.ndarray:
    """Surface potential of a dipole in a homogeneous sphere."""
    coef = _coef_cache(LayeredSphereModel((radius,), (sigma,)), MAX_TERMS)
    return _series(coef, sigma, radius, position, moment, points)


def berg_potential(model: LayeredSphereModel, params, position, moment, points) -> np.ndarray:
    """``sum_l u_hom(lambda_l q, mu_l r0)`` in a homogeneous sphere of the outer conductivity."""
    r0 = np.asarray(position, dtype=float)
    q = np.asarray(moment, dtype=float)
    total = 0.0
    for lam, mu in params:
        total = total + homogeneous_sphere_potential(
            model.outer_radius, model.conductivities[-1], mu * r0, lam * q, points
        )
    return total


def analytic_potential_layered(model: LayeredSphereModel, position, moment, points, k: int = 3) -> np.ndarray:
    """Berg-sum approximation of the layered-sphere surface potential.

    Uses ``model.berg`` when present, otherwise fits ``k`` parameter pairs.
    """
    _check_inside(model, position)
    params = model.berg if model.berg is not None else fit_berg_parameters(model, k)
    return berg_potential(model, params, position, moment, points)


def fibonacci_sphere(n: int, radius: float = 1.0) -> np.ndarray:
    """Nearly uniform points on a sphere (golden-angle spiral)."""
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    phi = math.pi * (3.0 - math.sqrt(5.0)) * i
    s = np.sqrt(1.0 - z * z)
    return radius * np.stack([s * np.cos(phi), s * np.sin(phi), z], axis=1)


def berg_training_set(model: LayeredSphereModel, eccentricities=None, n_dirs: int = 6, seed: int = 0):
    """Training dipoles: radial and tangential moments at the given eccentricities."""
    ecc = np.linspace(0.1, 0.9, 9) if eccentricities is None else np.asarray(eccentricities, dtype=float)
    rng = np.random.default_rng(seed)
    dipoles = []
    for e in ecc:
        for d in fibonacci_sphere(n_dirs):
            pos = e * model.brain_radius * d
            tang = np.cross(d, rng.normal(size=3))
            tang /= np.linalg.norm(tang)
            dipoles.append((pos, d.copy()))
            dipoles.append((pos, tang))
    return dipoles


def _initial_berg(model: LayeredSphereModel, k: int) -> np.ndarray:
    """Starting values from the coefficient match ``sum lam mu^(n-1) ~ f_n``."""
    coef = _coef_cache(model, 60)
    n = np.arange(1, 61)
    hom = (2 * n + 1) / n
    f = coef[1:] / hom * model.conductivities[-1] / model.conductivities[0]

    def resid(x):
        lam, mu = x[:k], x[k:]
        return (lam[None, :] * mu[None, :] ** (n[:, None] - 1)).sum(1) - f

    x0 = np.concatenate([np.full(k, f[0] / k), np.linspace(0.9, 0.5, k)])
    lb = np.concatenate([np.full(k, -np.inf), np.full(k, 1e-6)])
    ub = np.concatenate([np.full(k, np.inf), np.ones(k)])
    sol = least_squares(resid, x0, bounds=(lb, ub), xtol=1e-14, ftol=1e-14, gtol=1e-14)
    return sol.x


def fit_berg_parameters(model: LayeredSphereModel, k: int = 3, electrodes=None, training=None) -> tuple[tuple[float, float], ...]:
    """Least-squares Berg parameters against the series oracle on surface potentials.

    Returns ``k`` pairs ``(lambda, mu)`` with ``mu`` in ``(0, 1]``, sorted by
    decreasing ``mu``.
    """
    if k < 1:
        raise ValueError("need at least one Berg parameter pair")
    elec = fibonacci_sphere(180, model.outer_radius) if electrodes is None else np.asarray(electrodes, dtype=float)
    training = training or berg_training_set(model)
    refs = [series_potential(model, p, q, elec) for p, q in training]
    norms = [np.linalg.norm(r) for r in refs]
    big_r = model.outer_radius
    sig_n = model.conductivities[-1]
    coef = _coef_cache(LayeredSphereModel((big_r,), (sig_n,)), MAX_TERMS)

    def resid(x):
        lam, mu = x[:k], x[k:]
        out = []
        for (p, q), ref, nr in zip(training, refs, norms):
            est = 0.0
            for j in range(k):
                est = est + _series(coef, sig_n, big_r, mu[j] * p, lam[j] * q, elec)
            out.append((est - ref) / nr)
        return np.concatenate(out)

    x0 = _initial_berg(model, k)
    lb = np.concatenate([np.full(k, -np.inf), np.full(k, 1e-6)])
    ub = np.concatenate([np.full(k, np.inf), np.ones(k)])
    sol = least_squares(resid, x0, bounds=(lb, ub), xtol=1e-12, ftol=1e-12, gtol=1e-12, max_nfev=2000)
    if not sol.success:
        raise FitNotConverged(sol.message)
    pairs = sorted(zip(sol.x[:k], sol.x[k:]), key=lambda t: -t[1])
    logger.debug("Berg fit K=%d cost=%.3e", k, sol.cost)
    return tuple((float(a), float(b)) for a, b in pairs)
