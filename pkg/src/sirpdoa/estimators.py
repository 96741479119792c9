"""
DOA estimators for compound-Gaussian noise.

``cmle`` is the conventional white-Gaussian concentrated ML estimator.
``imle`` maximizes the likelihood conditioned on the texture realization,
treating the per-snapshot textures as deterministic unknowns. ``imape``
additionally places a gamma or inverse-gamma prior on the textures and
estimates its shape and scale. Both iterate the same cycle:

1. DOAs from the weighted whitened projection objective, then waveforms by
   whitened least squares;
2. (``imape`` only) texture shape and scale from the current textures;
3. speckle covariance update with trace normalization, then textures.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegenerateResidualError,
    DomainError,
    NumericalError,
    ShapeClampWarning,
    SingularityError,
)
from .noise_model import TextureKind, TextureParams, texture_logpdf
from .numerics import (
    GridSpec,
    HermitianFactor,
    find_root_monotone,
    digamma,
    hermitian_factor,
    minimize_doa_objective,
    normalize_trace,
    projection_residual,
)
from .signal_model import ArrayGeometry, manifold, steering_matrix

TAU_FLOOR = 1e-10
SHAPE_BRACKET = (1e-3, 1e3)


@dataclass(frozen=True)
class StopCriterion:
    """Stop after ``max_iterations`` or when no DOA moves by ``theta_tol`` rad."""

    max_iterations: int = 10
    theta_tol: float = 1e-4

    def __post_init__(self):
        if self.max_iterations < 1:
            raise DomainError("max_iterations must be >= 1")
        if self.theta_tol < 0:
            raise DomainError("theta_tol must be non-negative")


@dataclass(frozen=True)
class CovarianceUpdate:
    """How the speckle covariance step is applied inside the iterations.

    The update built from least-squares residuals has rank at most ``N - M``,
    so ``loading`` adds ``loading * tr(Q)/N`` to its diagonal before trace
    normalization. With ``safeguard`` the step is backtracked towards the
    previous covariance until the texture-profiled likelihood does not drop.
    ``inner_repeats`` applies the fixed-point update that many times with the
    residuals held fixed.
    """

    loading: float = 0.1
    inner_repeats: int = 1
    safeguard: bool = True
    max_backtracks: int = 10

    def __post_init__(self):
        if self.loading < 0:
            raise DomainError("loading must be non-negative")
        if self.inner_repeats < 1:
            raise DomainError("inner_repeats must be >= 1")


@dataclass
class EstimatorState:
    iteration: int
    theta: np.ndarray
    waveforms: np.ndarray
    q_normalized: np.ndarray
    taus: np.ndarray
    shape_a: float | None = None
    scale_b: float | None = None


@dataclass
class EstimateReport:
    state: EstimatorState
    theta_trace: list = field(default_factory=list)
    ll_trace: list = field(default_factory=list)
    iterations_used: int = 0
    converged: bool = False
    tau_floor_hits: int = 0
    shape_clamps: int = 0
    covariance_backtracks: int = 0
    covariance_rejections: int = 0

    @property
    def theta(self) -> np.ndarray:
        return self.state.theta


def _residuals(geom: ArrayGeometry, X, theta, S) -> np.ndarray:
    theta = np.atleast_1d(theta)
    S = np.asarray(S).reshape(theta.size, -1)
    return np.atleast_2d(X) - manifold(geom.positions, theta) @ S


def _quad_forms(R: np.ndarray, q_inv: np.ndarray) -> np.ndarray:
    """``r_t^H Q^{-1} r_t`` for every column of ``R``."""
    return np.real(np.einsum("it,ij,jt->t", R.conj(), q_inv, R))


def _as_columns(x):
    x = np.asarray(x, dtype=complex)
    return (x[:, None], True) if x.ndim == 1 else (x, False)


def _texture_params(kind, a, b) -> TextureParams:
    return TextureParams(TextureKind.parse(kind), a, b)


# --------------------------------------------------------------------------
# likelihoods


def conditional_log_likelihood(geom, X, theta, S, q_factor: HermitianFactor, taus) -> float:
    """Log-likelihood of the snapshots given the texture realization."""
    X = np.atleast_2d(X)
    n, t = X.shape
    taus = np.asarray(taus, dtype=float)
    if taus.shape != (t,) or np.any(taus <= 0):
        raise DomainError("need one positive texture per snapshot")
    rho = q_factor.inv_sqrt @ _residuals(geom, X, theta, S)
    energy = np.sum(np.abs(rho) ** 2, axis=0)
    return float(-t * n * math.log(math.pi) - t * q_factor.logdet
                 - n * np.sum(np.log(taus)) - np.sum(energy / taus))


def joint_log_likelihood(geom, X, state: EstimatorState, texture_kind) -> float:
    """Conditional log-likelihood plus the texture log-prior at ``state``."""
    if state.shape_a is None or state.scale_b is None:
        raise DomainError("joint likelihood needs the texture shape and scale")
    params = _texture_params(texture_kind, state.shape_a, state.scale_b)
    factor = hermitian_factor(state.q_normalized)
    lc = conditional_log_likelihood(geom, X, state.theta, state.waveforms, factor, state.taus)
    return lc + float(np.sum(texture_logpdf(params, state.taus)))


# --------------------------------------------------------------------------
# closed-form concentration steps


def estimate_tau_ml(geom, x, theta, s, q_inv):
    """Texture maximizing the conditional likelihood: ``r^H Q^{-1} r / N``.

    Accepts a single snapshot (vectors) or a block (N x T, M x T).
    """
    x, single = _as_columns(x)
    R = _residuals(geom, x, theta, s)
    tau = _quad_forms(R, np.asarray(q_inv)) / x.shape[0]
    tau = np.maximum(tau, 0.0)
    return float(tau[0]) if single else tau


def _tau_map_from_quad(q, n, a, b, kind):
    q = np.maximum(np.asarray(q, dtype=float), 0.0)
    if kind is TextureKind.GAMMA:
        c = (a - n - 1) * b
        root = np.sqrt(c * c + 4 * b * q)
        if c >= 0:
            return 0.5 * (c + root)
        # same root, written without cancellation for c < 0
        return 2 * b * q / (root - c)
    return (q + b) / (a + n + 1)


def estimate_tau_map(geom, x, theta, s, q_inv, a, b, kind):
    """Texture maximizing the joint likelihood under a gamma / inverse-gamma prior."""
    params = _texture_params(kind, a, b)
    x, single = _as_columns(x)
    R = _residuals(geom, x, theta, s)
    tau = _tau_map_from_quad(_quad_forms(R, np.asarray(q_inv)), x.shape[0], params.a, params.b, params.kind)
    return float(tau[0]) if single else tau


def covariance_given_textures(geom, X, theta, S, taus) -> np.ndarray:
    """Speckle covariance maximizing the conditional likelihood for fixed textures."""
    X = np.atleast_2d(X)
    taus = np.asarray(taus, dtype=float)
    if np.any(taus <= 0):
        raise DomainError("textures must be positive")
    R = _residuals(geom, X, theta, S)
    return (R / taus) @ R.conj().T / X.shape[1]


def _weighted_outer(R: np.ndarray, weights: np.ndarray) -> np.ndarray:
    C = (R * weights) @ R.conj().T / R.shape[1]
    return 0.5 * (C + C.conj().T)


def _checked_quad(R, q_prev_inv):
    q = _quad_forms(R, np.asarray(q_prev_inv))
    if np.any(q <= 0):
        bad = np.flatnonzero(q <= 0)
        raise DegenerateResidualError(f"zero residual at snapshot(s) {bad.tolist()}")
    return q


def update_q_ml(geom, X, theta, S, q_prev_inv) -> np.ndarray:
    """One fixed-point step ``(N/T) sum r r^H / (r^H Q_prev^{-1} r)`` (not normalized)."""
    X = np.atleast_2d(X)
    R = _residuals(geom, X, theta, S)
    q = _checked_quad(R, q_prev_inv)
    return _weighted_outer(R, X.shape[0] / q)


def update_q_map(geom, X, theta, S, q_prev_inv, a, b, kind) -> np.ndarray:
    """Covariance step with the MAP textures substituted (not normalized)."""
    params = _texture_params(kind, a, b)
    X = np.atleast_2d(X)
    n = X.shape[0]
    R = _residuals(geom, X, theta, S)
    q = _checked_quad(R, q_prev_inv)
    a, b = params.a, params.b
    if params.kind is TextureKind.GAMMA:
        c = (a - n - 1) * b
        root = np.sqrt(4 * b * q + c * c)
        if c >= 0:
            weights = 2.0 / (root + c)
        else:
            weights = 2.0 * (root - c) / (4 * b * q)
    else:
        weights = (a + n + 1) / (b + q)
    return _weighted_outer(R, weights)


def estimate_waveforms(geom, X, theta, q_factor: HermitianFactor) -> np.ndarray:
    """Whitened least-squares waveforms, one column per snapshot."""
    A = steering_matrix(geom, theta)
    W = q_factor.inv_sqrt
    S, *_ = np.linalg.lstsq(W @ A, W @ np.atleast_2d(X), rcond=None)
    return S


def estimate_b(taus, a: float, kind) -> float:
    kind = TextureKind.parse(kind)
    taus = np.asarray(taus, dtype=float)
    if not a > 0 or np.any(taus <= 0):
        raise DomainError("need a > 0 and positive textures")
    if kind is TextureKind.GAMMA:
        return float(np.sum(taus) / (taus.size * a))
    return float(taus.size * a / np.sum(1.0 / taus))


def _shape_target(taus, kind: TextureKind) -> float:
    z = taus if kind is TextureKind.GAMMA else 1.0 / taus
    return float(math.log(np.mean(z)) - np.mean(np.log(z)))


def _solve_shape(taus, kind, bracket=SHAPE_BRACKET):
    """Shape estimate and whether it was clamped to the bracket."""
    taus = np.asarray(taus, dtype=float)
    if np.any(taus <= 0):
        raise DomainError("textures must be positive")
    kind = TextureKind.parse(kind)
    target = _shape_target(taus, kind)
    lo, hi = bracket

    def f(a):
        return math.log(a) - digamma(a) - target

    # log(a) - digamma(a) decreases strictly from +inf to 0
    if f(hi) >= 0:
        return hi, True
    if f(lo) <= 0:
        return lo, True
    return find_root_monotone(f, lo, hi, tol=1e-14), False


def estimate_a(taus, kind, bracket=SHAPE_BRACKET) -> float:
    """Texture shape maximizing the prior likelihood with the scale profiled out.

    Solves ``log a - digamma(a) = log(mean z) - mean(log z)`` with ``z = tau``
    (gamma) or ``z = 1/tau`` (inverse gamma). Roots outside ``bracket`` are
    clamped to its edge with a :class:`ShapeClampWarning`.
    """
    a, clamped = _solve_shape(taus, kind, bracket)
    if clamped:
        warnings.warn(f"texture shape clamped to {a:g}", ShapeClampWarning, stacklevel=2)
    return a


# --------------------------------------------------------------------------
# DOA step


class ConcentratedObjective:
    """``sum_t w_t ||P_perp(A~(theta)) x~(t)||^2`` for fixed weights and whitening."""

    def __init__(self, geom: ArrayGeometry, X, weights, q_factor: HermitianFactor):
        self.positions = geom.positions
        self.W = q_factor.inv_sqrt
        self.Xw = self.W @ np.atleast_2d(X)
        self.weights = np.asarray(weights, dtype=float)
        self._cov = (self.Xw * self.weights) @ self.Xw.conj().T

    def __call__(self, theta) -> float:
        At = self.W @ manifold(self.positions, np.atleast_1d(theta))
        return float(self.weights @ projection_residual(At, self.Xw))

    def batch(self, thetas) -> np.ndarray:
        # normal-equation form; only used to rank coarse grid tuples.
        # Gram blocks are built once per distinct angle and gathered per tuple.
        thetas = np.asarray(thetas, dtype=float)
        angles, inv = np.unique(thetas, return_inverse=True)
        inv = inv.reshape(thetas.shape)
        Au = self.W @ manifold(self.positions, angles)
        gram = Au.conj().T @ Au
        cross = Au.conj().T @ self._cov @ Au
        rows, cols = inv[:, :, None], inv[:, None, :]
        explained = np.real(np.trace(np.linalg.solve(gram[rows, cols], cross[rows, cols]),
                                     axis1=-2, axis2=-1))
        return np.real(np.trace(self._cov)) - explained


def estimate_theta(geom, X, taus, q_factor: HermitianFactor, n_sources: int,
                   grid: GridSpec = GridSpec(), warm_starts=()) -> np.ndarray:
    """DOAs minimizing the texture-weighted whitened projection residual."""
    taus = np.asarray(taus, dtype=float)
    if np.any(taus <= 0):
        raise DomainError("textures must be positive")
    if n_sources >= geom.n_sensors:
        raise DomainError(f"need fewer sources than sensors, got M={n_sources}")
    objective = ConcentratedObjective(geom, X, 1.0 / taus, q_factor)
    return minimize_doa_objective(objective, n_sources, grid, warm_starts=warm_starts)


def cmle(geom, X, n_sources: int, grid: GridSpec = GridSpec()) -> np.ndarray:
    """Conventional ML DOAs assuming uniform white Gaussian noise."""
    X = np.atleast_2d(X)
    identity = hermitian_factor(np.eye(geom.n_sensors))
    return estimate_theta(geom, X, np.ones(X.shape[1]), identity, n_sources, grid)


# --------------------------------------------------------------------------
# iterative estimators


def imle(geom, X, n_sources: int, stop: StopCriterion = StopCriterion(),
         grid: GridSpec = GridSpec(), covariance: CovarianceUpdate = CovarianceUpdate()) -> EstimateReport:
    """Iterative ML DOA estimation; textures start at one and Q at identity."""
    X = np.atleast_2d(np.asarray(X, dtype=complex))
    return _concentrate(geom, X, n_sources, None, np.ones(X.shape[1]), stop, grid, covariance)


def imape(geom, X, n_sources: int, kind, stop: StopCriterion = StopCriterion(),
          grid: GridSpec = GridSpec(), rng=None,
          covariance: CovarianceUpdate = CovarianceUpdate()) -> EstimateReport:
    """Iterative MAP DOA estimation under a gamma or inverse-gamma texture prior.

    Textures start at absolute values of standard normal draws from ``rng``.
    """
    X = np.atleast_2d(np.asarray(X, dtype=complex))
    kind = TextureKind.parse(kind)
    init = np.abs(np.random.default_rng(rng).standard_normal(X.shape[1]))
    return _concentrate(geom, X, n_sources, kind, np.maximum(init, TAU_FLOOR), stop, grid, covariance)


class _Profile:
    """Texture-profiled likelihood of a covariance with theta and S held fixed."""

    def __init__(self, geom, X, theta, S, kind, params):
        self.X = X
        self.n, self.t = X.shape
        self.R = _residuals(geom, X, theta, S)
        self.kind = kind
        self.params = params
        self.floor_hits = 0

    def textures(self, factor: HermitianFactor) -> np.ndarray:
        q = _quad_forms(self.R, factor.inverse)
        if self.kind is None:
            tau = np.maximum(q, 0.0) / self.n
        else:
            tau = _tau_map_from_quad(q, self.n, self.params.a, self.params.b, self.kind)
        hits = tau < TAU_FLOOR
        self.floor_hits = int(np.count_nonzero(hits))
        return np.where(hits, TAU_FLOOR, tau)

    def value(self, factor: HermitianFactor, taus: np.ndarray) -> float:
        energy = np.sum(np.abs(factor.inv_sqrt @ self.R) ** 2, axis=0)
        ll = (-self.t * self.n * math.log(math.pi) - self.t * factor.logdet
              - self.n * np.sum(np.log(taus)) - np.sum(energy / taus))
        if self.params is not None:
            ll += float(np.sum(texture_logpdf(self.params, taus)))
        return float(ll)

    def evaluate(self, q):
        factor = hermitian_factor(q)
        taus = self.textures(factor)
        return self.value(factor, taus), factor, taus


def _covariance_candidate(geom, X, theta, S, factor, kind, params, cfg: CovarianceUpdate):
    n = X.shape[0]
    q = None
    for _ in range(cfg.inner_repeats):
        if q is not None:
            factor = hermitian_factor(q)
        if kind is None:
            raw = update_q_ml(geom, X, theta, S, factor.inverse)
        else:
            raw = update_q_map(geom, X, theta, S, factor.inverse, params.a, params.b, kind)
        raw = raw + cfg.loading * (np.trace(raw).real / n) * np.eye(n)
        q = normalize_trace(raw)
    return q


def _concentrate(geom, X, n_sources, kind, taus, stop, grid, cfg) -> EstimateReport:
    n, t = X.shape
    if n != geom.n_sensors:
        raise DomainError(f"snapshots have {n} rows, array has {geom.n_sensors} sensors")
    if n_sources >= n:
        raise DomainError(f"need fewer sources than sensors, got M={n_sources}")
    q = np.eye(n, dtype=complex)
    factor = hermitian_factor(q)
    report = EstimateReport(state=None)
    prev = None
    for i in range(stop.max_iterations):
        warm = () if prev is None else (prev,)
        theta = estimate_theta(geom, X, taus, factor, n_sources, grid, warm_starts=warm)
        S = estimate_waveforms(geom, X, theta, factor)
        params = None
        if kind is not None:
            a, clamped = _solve_shape(taus, kind)
            report.shape_clamps += int(clamped)
            params = TextureParams(kind, a, estimate_b(taus, a, kind))
        profile = _Profile(geom, X, theta, S, kind, params)
        ll = profile.value(factor, taus)
        report.state = EstimatorState(i, theta, S, q, taus,
                                      None if params is None else params.a,
                                      None if params is None else params.b)
        report.theta_trace.append(theta)
        report.ll_trace.append(ll)
        report.iterations_used = i + 1
        if prev is not None and np.max(np.abs(theta - prev)) < stop.theta_tol:
            report.converged = True
            break
        if i == stop.max_iterations - 1:
            break
        prev = theta

        try:
            candidate = _covariance_candidate(geom, X, theta, S, factor, kind, params, cfg)
        except (DegenerateResidualError, DomainError, SingularityError):
            if not cfg.safeguard:
                raise
            candidate = None
            report.covariance_rejections += 1

        if not cfg.safeguard:
            q = candidate
            factor = hermitian_factor(q)
            taus = profile.textures(factor)
        else:
            accepted = None
            if candidate is not None:
                alpha = 1.0
                for _ in range(cfg.max_backtracks + 1):
                    trial = normalize_trace((1 - alpha) * q + alpha * candidate)
                    try:
                        value, f_trial, tau_trial = profile.evaluate(trial)
                    except NumericalError:
                        value = -np.inf
                    if value >= ll:
                        accepted = (trial, f_trial, tau_trial)
                        break
                    report.covariance_backtracks += 1
                    alpha *= 0.5
                else:
                    report.covariance_rejections += 1
            if accepted is None:
                taus = profile.textures(factor)
            else:
                q, factor, taus = accepted
        report.tau_floor_hits += profile.floor_hits
    return report
