"""
Numerical kernels: Hermitian whitening, projection residuals, digamma,
monotone root finding and the grid + golden-section DOA minimizer.
"""

from __future__ import annotations

import functools
import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize

from .errors import BracketError, ConfigurationError, DomainError, SingularityError

EIG_FLOOR = 1e-10
_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class HermitianFactor:
    """A Hermitian positive definite matrix with its inverse square root."""

    original: np.ndarray
    inv_sqrt: np.ndarray
    inverse: np.ndarray
    logdet: float

    @property
    def size(self) -> int:
        return self.original.shape[0]


def hermitian_factor(q) -> HermitianFactor:
    """Eigendecomposition-based ``Q^{-1/2}`` and ``Q^{-1}``.

    Raises
    ------
    SingularityError
        If the smallest eigenvalue is at or below ``1e-10 * max eigenvalue``.
        Near-singular matrices are reported, never regularized here.
    """
    q = np.asarray(q, dtype=complex)
    if q.ndim != 2 or q.shape[0] != q.shape[1]:
        raise ConfigurationError(f"expected a square matrix, got shape {q.shape}")
    scale = max(1.0, float(np.max(np.abs(q))))
    if np.max(np.abs(q - q.conj().T)) > 1e-10 * scale:
        raise DomainError("matrix is not Hermitian")
    q = 0.5 * (q + q.conj().T)
    w, u = np.linalg.eigh(q)
    if w[-1] <= 0 or w[0] <= EIG_FLOOR * w[-1]:
        raise SingularityError(
            f"matrix is not positive definite: smallest eigenvalue {w[0]:.3e}, largest {w[-1]:.3e}"
        )
    inv_sqrt = (u / np.sqrt(w)) @ u.conj().T
    inverse = (u / w) @ u.conj().T
    return HermitianFactor(q, inv_sqrt, inverse, float(np.sum(np.log(w))))


def normalize_trace(q) -> np.ndarray:
    """Rescale ``q`` so that its trace equals its dimension."""
    q = np.asarray(q, dtype=complex)
    tr = np.trace(q)
    if not tr.real > 0 or abs(tr.imag) > 1e-12 * abs(tr):
        raise DomainError(f"trace must be real and positive, got {tr}")
    return q * (q.shape[0] / tr.real)


def projection_residual(a_tilde, x_tilde):
    """Squared norm of the component of ``x_tilde`` orthogonal to ``range(a_tilde)``.

    ``x_tilde`` may be a vector or an N x T matrix; for a matrix the residual
    of every column is returned. Uses a QR factorization, the projector is
    never formed.
    """
    A = np.asarray(a_tilde, dtype=complex)
    if A.ndim == 1:
        A = A[:, None]
    x = np.asarray(x_tilde, dtype=complex)
    qmat, rmat = np.linalg.qr(A)
    d = np.abs(np.diag(rmat))
    if d.size == 0 or d.min() <= d.max() * A.shape[0] * np.finfo(float).eps * 16:
        raise SingularityError("whitened steering matrix is rank deficient")
    r = x - qmat @ (qmat.conj().T @ x)
    return np.sum(np.abs(r) ** 2, axis=0)


# Bernoulli-number coefficients B_2k / (2k) of the asymptotic series.
_PSI_SERIES = (1 / 12, -1 / 120, 1 / 252, -1 / 240, 1 / 132, -691 / 32760, 1 / 12)


def digamma(x: float) -> float:
    """Digamma function for ``x > 0``.

    Shifts the argument up to ``x >= 6`` with ``psi(x) = psi(x+1) - 1/x`` and
    evaluates the asymptotic expansion there.
    """
    x = float(x)
    if not x > 0 or not math.isfinite(x):
        raise DomainError(f"digamma is only implemented for finite x > 0, got {x}")
    shift = 0.0
    while x < 6.0:
        shift -= 1.0 / x
        x += 1.0
    inv2 = 1.0 / (x * x)
    series = 0.0
    for c in reversed(_PSI_SERIES):
        series = series * inv2 + c
    return shift + math.log(x) - 0.5 / x - series * inv2


def find_root_monotone(f, lo: float, hi: float, tol: float = 1e-12) -> float:
    """Root of a continuous monotone ``f`` on ``[lo, hi]``.

    Brent's method: bisection guarantees the bracket shrinks, secant and
    inverse quadratic steps accelerate it.
    """
    flo, fhi = f(lo), f(hi)
    if flo == 0:
        return lo
    if fhi == 0:
        return hi
    if np.sign(flo) == np.sign(fhi):
        raise BracketError(f"no sign change on [{lo}, {hi}]: f(lo)={flo:.3e}, f(hi)={fhi:.3e}")
    return optimize.brentq(f, lo, hi, xtol=tol, rtol=4 * np.finfo(float).eps, maxiter=500)


@dataclass(frozen=True)
class GridSpec:
    """Search grid for the DOA minimizer, all values in radians."""

    lo: float = -np.pi / 2
    hi: float = np.pi / 2
    coarse_step: float = np.deg2rad(1.0)
    refine_tolerance: float = np.deg2rad(0.01)
    min_separation: float = np.deg2rad(1.0)
    max_sweeps: int = 50

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ConfigurationError("grid needs lo < hi")
        if self.lo < -np.pi / 2 or self.hi > np.pi / 2:
            raise ConfigurationError("grid must stay within [-pi/2, pi/2]")
        if not self.coarse_step > 0:
            raise ConfigurationError("coarse_step must be positive")
        if not 0 < self.refine_tolerance < self.coarse_step:
            raise ConfigurationError("refine_tolerance must be positive and below coarse_step")
        if self.min_separation < 0:
            raise ConfigurationError("min_separation must be non-negative")

    @classmethod
    def from_degrees(cls, lo=-90.0, hi=90.0, coarse_step=1.0, refine_tolerance=0.01,
                     min_separation=1.0, max_sweeps=50) -> "GridSpec":
        return cls(*np.deg2rad([lo, hi, coarse_step, refine_tolerance, min_separation]),
                   max_sweeps=max_sweeps)

    def points(self) -> np.ndarray:
        """Coarse grid points strictly inside ``(lo, hi)``."""
        pts = np.arange(self.lo + self.coarse_step, self.hi, self.coarse_step)
        return pts[pts < self.hi - 1e-12]


def admissible_tuples(grid: GridSpec, n_sources: int) -> np.ndarray:
    """All ascending ``n_sources``-tuples of grid points respecting the separation."""
    return _admissible_tuples(grid, n_sources).copy()


@functools.lru_cache(maxsize=16)
def _admissible_tuples(grid: GridSpec, n_sources: int) -> np.ndarray:
    pts = grid.points()
    if n_sources == 1:
        tuples = pts[:, None]
        tuples.setflags(write=False)
        return tuples
    combos = np.array(list(itertools.combinations(range(pts.size), n_sources)), dtype=int)
    if combos.size == 0:
        return np.empty((0, n_sources))
    tuples = pts[combos]
    ok = np.all(np.diff(tuples, axis=1) >= grid.min_separation - 1e-12, axis=1)
    tuples = tuples[ok]
    tuples.setflags(write=False)
    return tuples


def golden_section(f, lo: float, hi: float, tol: float):
    """Minimize a scalar function on ``[lo, hi]``; returns ``(x, f(x))``.

    The best evaluated point is returned, so the result never exceeds the
    value at any probed abscissa.
    """
    c = hi - _GOLDEN * (hi - lo)
    d = lo + _GOLDEN * (hi - lo)
    fc, fd = f(c), f(d)
    while hi - lo > tol:
        if fc < fd:
            hi, d, fd = d, c, fc
            c = hi - _GOLDEN * (hi - lo)
            fc = f(c)
        else:
            lo, c, fc = c, d, fd
            d = lo + _GOLDEN * (hi - lo)
            fd = f(d)
    return (c, fc) if fc <= fd else (d, fd)


def _refine(objective, start: np.ndarray, grid: GridSpec, lower: float, upper: float):
    theta = np.array(start, dtype=float)
    best = objective(theta)
    m = theta.size
    for _ in range(grid.max_sweeps):
        moved = 0.0
        for k in range(m):
            left = max(theta[k] - grid.coarse_step, lower)
            right = min(theta[k] + grid.coarse_step, upper)
            if k > 0:
                left = max(left, theta[k - 1] + grid.min_separation)
            if k < m - 1:
                right = min(right, theta[k + 1] - grid.min_separation)
            if right - left <= 0:
                continue

            def along(x, k=k):
                trial = theta.copy()
                trial[k] = x
                return objective(trial)

            x, fx = golden_section(along, left, right, grid.refine_tolerance)
            if fx < best:
                moved = max(moved, abs(x - theta[k]))
                theta[k] = x
                best = fx
        if moved < grid.refine_tolerance:
            break
    return theta, best


def minimize_doa_objective(objective, n_sources: int, grid: GridSpec = GridSpec(),
                           warm_starts=()) -> np.ndarray:
    """Minimize ``objective(theta)`` over ascending, separated DOA tuples.

    An exhaustive scan of the coarse grid picks the best tuple, which is then
    refined by coordinate-wise golden-section search. Each ``warm_starts``
    entry is refined as well and the lowest objective wins. If ``objective``
    has a ``batch`` method taking a ``(K, M)`` array it is used for the scan.
    """
    candidates = _admissible_tuples(grid, n_sources)
    if candidates.shape[0] == 0:
        raise ConfigurationError("the grid has no admissible DOA tuple")
    batch = getattr(objective, "batch", None)
    if batch is not None:
        values = np.asarray(batch(candidates), dtype=float)
    else:
        values = np.array([objective(c) for c in candidates])
    starts = [candidates[int(np.nanargmin(values))]]
    for w in warm_starts:
        w = np.sort(np.asarray(w, dtype=float))
        if w.shape == (n_sources,):
            starts.append(w)
    lower = grid.lo + grid.refine_tolerance
    upper = grid.hi - grid.refine_tolerance
    best_theta, best_value = None, np.inf
    for s in starts:
        theta, value = _refine(objective, s, grid, lower, upper)
        if best_theta is None or value < best_value:
            best_theta, best_value = theta, value
    return np.sort(best_theta)
