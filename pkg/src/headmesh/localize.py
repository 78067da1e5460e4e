"""Source localization estimators and the earth mover's distance to a dipole.

All estimators work on a dense lead field ``L`` (electrodes x columns) whose
columns are grouped per source position (3 Cartesian components, or 1 for a
fixed orientation). The Tikhonov problem is

    min_x ||L x - y||^2 + ||lam P x||^2

with ``P`` a source-space penalty (identity unless given). The electrode
noise covariance ``C`` enters only when whitening is switched on, in which
case ``L`` and ``y`` are premultiplied by ``C^{-1/2}``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

logger = logging.getLogger(__name__)

METHODS = ("mne", "sloreta", "dipolescan")


class SingularSystem(np.linalg.LinAlgError):
    pass


class ZeroData(ValueError):
    pass


class ZeroMass(ValueError):
    pass


def regularization_from_snr(lead_field: np.ndarray, noise_cov: np.ndarray, snr_db: float) -> float:
    """``lam = ||L||_F / ||C||_F * 10^(-snr/20)``."""
    cn = float(np.linalg.norm(noise_cov))
    if cn == 0.0:
        raise ValueError("noise covariance is zero")
    return float(np.linalg.norm(lead_field)) / cn * 10.0 ** (-float(snr_db) / 20.0)


@dataclass
class InverseProblemSetup:
    """Lead field, data and regularization for one inverse solve.

    Parameters
    ----------
    lead_field : (m, n) array
    data : (m,) array
    lam : float
        Regularization parameter, >= 0.
    noise_cov : (m, m) array, optional
        Symmetric positive definite; identity when omitted.
    components : int
        Columns per source position (3 or 1).
    positions : (n / components, 3) array, optional
        Needed for EMD.
    penalty : array, optional
        Source-space penalty ``P``; a vector is read as a diagonal.
    whiten : bool
        Premultiply the data term by ``C^{-1/2}``.
    """

    lead_field: np.ndarray
    data: np.ndarray
    lam: float
    noise_cov: np.ndarray | None = None
    components: int = 3
    positions: np.ndarray | None = None
    penalty: np.ndarray | None = None
    whiten: bool = False
    _chol: np.ndarray | None = field(default=None, init=False, repr=False)

    def __post_init__(self):
        self.lead_field = np.atleast_2d(np.asarray(self.lead_field, dtype=float))
        self.data = np.asarray(self.data, dtype=float).reshape(-1)
        m, n = self.lead_field.shape
        if len(self.data) != m:
            raise ValueError(f"data has {len(self.data)} entries, lead field {m} rows")
        if self.components not in (1, 3) or n % self.components:
            raise ValueError("lead field columns must group into positions of 1 or 3 components")
        if not (np.isfinite(self.lam) and self.lam >= 0):
            raise ValueError("lam must be finite and non-negative")
        c = np.eye(m) if self.noise_cov is None else np.asarray(self.noise_cov, dtype=float)
        if c.shape != (m, m):
            raise ValueError("noise covariance must be electrodes x electrodes")
        if not np.allclose(c, c.T, rtol=1e-10, atol=1e-14 * np.abs(c).max()):
            raise ValueError("noise covariance is not symmetric")
        try:
            self._chol = np.linalg.cholesky(c)
        except np.linalg.LinAlgError as exc:
            raise ValueError("noise covariance is not positive definite") from exc
        self.noise_cov = c
        if self.positions is not None:
            self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
            if len(self.positions) != self.n_positions:
                raise ValueError("one position per column group is required")
        if self.penalty is not None:
            p = np.asarray(self.penalty, dtype=float)
            if p.shape not in ((n,), (n, n)):
                raise ValueError("penalty must be a length-n vector or an n x n matrix")
            self.penalty = p

    @classmethod
    def from_lead_field(cls, lf, data, snr_db: float, noise_cov=None, whiten: bool = False, penalty=None):
        """Setup from a :class:`~headmesh.forward.LeadField` with PM-SNR in dB."""
        mat = np.asarray(lf.matrix, dtype=float)
        c = np.eye(mat.shape[0]) if noise_cov is None else np.asarray(noise_cov, dtype=float)
        lam = regularization_from_snr(mat, c, snr_db)
        return cls(mat, data, lam, c, lf.components, lf.sources.positions, penalty, whiten)

    @property
    def n_positions(self) -> int:
        return self.lead_field.shape[1] // self.components

    def system(self) -> tuple[np.ndarray, np.ndarray]:
        """``(L, y)`` after optional whitening."""
        if not self.whiten:
            return self.lead_field, self.data
        lw = linalg.solve_triangular(self._chol, self.lead_field, lower=True)
        yw = linalg.solve_triangular(self._chol, self.data, lower=True)
        return lw, yw

    def penalty_gram(self) -> np.ndarray | None:
        """``P^T P``, or None for the identity."""
        if self.penalty is None:
            return None
        if self.penalty.ndim == 1:
            return np.diag(self.penalty**2)
        return self.penalty.T @ self.penalty


@dataclass
class SourceEstimate:
    """Per-position values of one estimator.

    ``values`` is non-negative: amplitude norm (MNE), standardized power
    (sLORETA) or goodness of fit (dipole scan). ``amplitudes`` holds the raw
    column vector when the method produces one.
    """

    values: np.ndarray
    method: str
    positions: np.ndarray | None = None
    amplitudes: np.ndarray | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        self.values = np.asarray(self.values, dtype=float)
        if not np.all(np.isfinite(self.values)):
            raise ValueError("estimate has non-finite values")

    @property
    def argmax(self) -> int:
        return int(np.argmax(self.values))

    def peak_position(self) -> np.ndarray:
        if self.positions is None:
            raise ValueError("estimate has no positions")
        return self.positions[self.argmax]

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "values": self.values.tolist(),
            "argmax": self.argmax,
            "positions_mm": None if self.positions is None else self.positions.tolist(),
        }


def _check_rank(mat: np.ndarray, what: str):
    if np.linalg.matrix_rank(mat) < min(mat.shape):
        raise SingularSystem(f"{what} is rank deficient and lam = 0")


def inverse_operator(setup: InverseProblemSetup) -> np.ndarray:
    """Matrix ``T`` with ``x = T y`` (in whitened coordinates when enabled).

    The primal normal equations are used when ``n <= m``, the electrode-space
    form otherwise; both give the exact minimizer.
    """
    lmat, _ = setup.system()
    m, n = lmat.shape
    lam2 = setup.lam**2
    gram = setup.penalty_gram()
    if n <= m:
        if lam2 == 0:
            _check_rank(lmat, "lead field")
        a = lmat.T @ lmat + lam2 * (np.eye(n) if gram is None else gram)
        try:
            return linalg.solve(a, lmat.T, assume_a="pos")
        except linalg.LinAlgError as exc:
            raise SingularSystem(str(exc)) from exc
    # dual form: x = M L^T (L M L^T + lam^2 I)^-1 y with M = (P^T P)^-1
    if gram is None:
        ml = lmat.T
    else:
        try:
            ml = linalg.solve(gram, lmat.T, assume_a="pos")
        except linalg.LinAlgError as exc:
            raise SingularSystem("penalty is singular") from exc
    k = lmat @ ml
    if lam2 == 0:
        _check_rank(k, "L L^T")
    k = k + lam2 * np.eye(m)
    try:
        return linalg.solve(k, ml.T, assume_a="pos").T
    except linalg.LinAlgError as exc:
        raise SingularSystem(str(exc)) from exc


def _block_norms(x: np.ndarray, c: int) -> np.ndarray:
    return np.linalg.norm(x.reshape(-1, c), axis=1)


def mne_solve(setup: InverseProblemSetup) -> SourceEstimate:
    """Minimum norm estimate; values are per-position amplitude norms."""
    _, y = setup.system()
    x = inverse_operator(setup) @ y
    return SourceEstimate(_block_norms(x, setup.components), "mne", setup.positions, x)


def sloreta_solve(setup: InverseProblemSetup) -> SourceEstimate:
    """MNE standardized by the per-position blocks of the resolution operator.

    The value at position ``i`` is ``x_i^T pinv(R_ii) x_i`` with ``R = T L``;
    the 3 x 3 blocks are pseudo-inverted at relative tolerance 1e-12.
    """
    lmat, y = setup.system()
    t = inverse_operator(setup)
    x = t @ y
    c = setup.components
    p = setup.n_positions
    tb = t.reshape(p, c, -1)
    lb = lmat.T.reshape(p, c, -1)
    r = np.einsum("pim,pjm->pij", tb, lb)
    r = 0.5 * (r + np.transpose(r, (0, 2, 1)))
    xb = x.reshape(p, c)
    if c == 1:
        d = r[:, 0, 0]
        vals = np.where(d > 0, xb[:, 0] ** 2 / np.where(d > 0, d, 1.0), 0.0)
    else:
        rinv = np.linalg.pinv(r, rcond=1e-12, hermitian=True)
        vals = np.einsum("pi,pij,pj->p", xb, rinv, xb)
    return SourceEstimate(np.maximum(vals, 0.0), "sloreta", setup.positions, x)


def dipole_scan(setup: InverseProblemSetup) -> SourceEstimate:
    """Goodness of fit ``1 - ||y - L_i L_i^+ y||^2 / ||y||^2`` per position."""
    lmat, y = setup.system()
    yy = float(y @ y)
    if yy == 0.0:
        raise ZeroData("dipole scan needs non-zero data")
    c = setup.components
    blocks = lmat.T.reshape(setup.n_positions, c, -1).transpose(0, 2, 1)
    u, s, _ = np.linalg.svd(blocks, full_matrices=False)
    keep = s > 1e-12 * np.maximum(s[:, :1], np.finfo(float).tiny)
    proj = np.einsum("pmk,m->pk", u, y) ** 2
    fit = (proj * keep).sum(axis=1) / yy
    return SourceEstimate(np.clip(fit, 0.0, 1.0), "dipolescan", setup.positions)


SOLVERS = {"mne": mne_solve, "sloreta": sloreta_solve, "dipolescan": dipole_scan}


def localize(setup: InverseProblemSetup, method: str) -> SourceEstimate:
    try:
        return SOLVERS[method](setup)
    except KeyError:
        raise ValueError(f"unknown method {method!r}; choose from {', '.join(METHODS)}") from None


def emd_to_dipole(estimate: SourceEstimate | np.ndarray, target, positions=None) -> float:
    """Earth mover's distance (mm) from an estimate to a Dirac mass at ``target``.

    With a single target point every unit of mass has to travel to it, so the
    distance is the mass-weighted mean distance to ``target``.
    """
    if isinstance(estimate, SourceEstimate):
        mass = estimate.values
        positions = estimate.positions if positions is None else positions
    else:
        mass = np.asarray(estimate, dtype=float)
    if positions is None:
        raise ValueError("positions are required")
    positions = np.asarray(positions, dtype=float).reshape(-1, 3)
    if len(mass) != len(positions):
        raise ValueError("one mass per position is required")
    if np.any(mass < 0):
        raise ValueError("masses must be non-negative")
    total = float(mass.sum())
    if not total > 0:
        raise ZeroMass("estimate carries no mass")
    d = np.linalg.norm(positions - np.asarray(target, dtype=float).reshape(1, 3), axis=1)
    return float((mass / total) @ d)
