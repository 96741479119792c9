"""
Brute-force cross-checks of the closed-form concentration steps.

Each suite draws random small instances, solves the corresponding
likelihood maximization with a generic derivative-free optimizer (no
closed form involved) and reports the worst relative disagreement.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import optimize
from scipy.special import gammaln

from . import estimators as est
from .noise_model import TextureKind
from .numerics import hermitian_factor
from .signal_model import ArrayGeometry, manifold

LOG_TAU_RANGE = (np.log(1e-8), np.log(1e8))


@dataclass
class OracleResult:
    suite: str
    instances: int
    max_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.max_error <= self.tolerance)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.suite:<16} instances={self.instances:<4d} max_err={self.max_error:.3e} tol={self.tolerance:.0e}"


def random_instance(rng, n_sensors=None, n_sources=None, n_snapshots=None):
    """Random array, DOAs, waveforms, snapshots and trace-normalized speckle covariance."""
    n = int(n_sensors or rng.integers(3, 7))
    m = int(n_sources or rng.integers(1, min(3, n)))
    t = int(n_snapshots or rng.integers(2, 6))
    geom = ArrayGeometry.ula(n)
    while True:
        theta = np.sort(rng.uniform(-1.2, 1.2, m))
        if m == 1 or np.min(np.diff(theta)) > 0.15:
            break
    S = rng.standard_normal((m, t)) + 1j * rng.standard_normal((m, t))
    X = rng.standard_normal((n, t)) + 1j * rng.standard_normal((n, t))
    B = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    Q = B @ B.conj().T + n * np.eye(n)
    Q *= n / np.trace(Q).real
    return geom, theta, S, X, Q


def _quad_solve(geom, X, theta, S, Q):
    """``r^H Q^{-1} r`` via a linear solve (no inverse, no whitening)."""
    R = X - manifold(geom.positions, theta) @ S
    return np.real(np.sum(R.conj() * np.linalg.solve(Q, R), axis=0))


def _argmax_log_tau(objective) -> float:
    """Maximize ``objective(tau)`` over ``log tau``; coarse scan then bounded Brent."""
    grid = np.linspace(*LOG_TAU_RANGE, 801)
    values = objective(np.exp(grid))
    k = int(np.argmax(values))
    lo, hi = grid[max(k - 1, 0)], grid[min(k + 1, grid.size - 1)]
    res = optimize.minimize_scalar(lambda u: -objective(np.exp(u)), bounds=(lo, hi),
                                   method="bounded", options={"xatol": 1e-13, "maxiter": 2000})
    return float(np.exp(res.x))


def _rel(a, b) -> float:
    a = np.asarray(a)
    b = np.asarray(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def _log_prior(kind, a, b, tau):
    # written out here rather than reusing the library densities
    if kind is TextureKind.GAMMA:
        return (a - 1) * np.log(tau) - tau / b - gammaln(a) - a * np.log(b)
    return -(a + 1) * np.log(tau) - b / tau - gammaln(a) + a * np.log(b)


def tau_ml_suite(instances=100, seed=0) -> OracleResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        geom, theta, S, X, Q = random_instance(rng)
        n = geom.n_sensors
        q = _quad_solve(geom, X, theta, S, Q)
        closed = est.estimate_tau_ml(geom, X, theta, S, np.linalg.inv(Q))
        for t in range(X.shape[1]):
            brute = _argmax_log_tau(lambda tau: -n * np.log(tau) - q[t] / tau)
            worst = max(worst, abs(closed[t] - brute) / brute)
    return OracleResult("tau-ml", instances, worst, 1e-6)


def tau_map_suite(kind, instances=100, seed=0) -> OracleResult:
    kind = TextureKind.parse(kind)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        geom, theta, S, X, Q = random_instance(rng)
        n = geom.n_sensors
        a, b = rng.uniform(0.5, 4.0), rng.uniform(0.5, 4.0)
        q = _quad_solve(geom, X, theta, S, Q)
        closed = est.estimate_tau_map(geom, X, theta, S, np.linalg.inv(Q), a, b, kind)
        for t in range(X.shape[1]):
            def joint(tau, t=t):
                return -n * np.log(tau) - q[t] / tau + _log_prior(kind, a, b, tau)
            brute = _argmax_log_tau(joint)
            worst = max(worst, abs(closed[t] - brute) / brute)
    name = "tau-map-k" if kind is TextureKind.GAMMA else "tau-map-t"
    return OracleResult(name, instances, worst, 1e-6)


def waveforms_suite(instances=100, seed=0) -> OracleResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        geom, theta, _, X, Q = random_instance(rng, n_snapshots=2)
        taus = rng.uniform(0.2, 5.0, X.shape[1])
        m = theta.size
        A = manifold(geom.positions, theta)
        closed = est.estimate_waveforms(geom, X, theta, hermitian_factor(Q))
        for t in range(X.shape[1]):
            def cost(v, t=t):
                r = X[:, t] - A @ (v[:m] + 1j * v[m:])
                return float(np.real(r.conj() @ np.linalg.solve(Q, r))) / taus[t]
            v = np.zeros(2 * m)
            for _ in range(20):
                nxt = optimize.minimize(cost, v, method="Powell",
                                        options={"xtol": 1e-13, "ftol": 1e-16, "maxfev": 200000}).x
                done = np.allclose(nxt, v, rtol=0, atol=1e-12)
                v = nxt
                if done:
                    break
            worst = max(worst, _rel(v[:m] + 1j * v[m:], closed[:, t]))
    return OracleResult("waveforms", instances, worst, 1e-6)


def scale_suite(kind, instances=100, seed=0) -> OracleResult:
    kind = TextureKind.parse(kind)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        a = rng.uniform(0.5, 4.0)
        taus = rng.uniform(0.05, 10.0, int(rng.integers(3, 30)))
        closed = est.estimate_b(taus, a, kind)
        res = optimize.minimize_scalar(lambda u: -np.sum(_log_prior(kind, a, np.exp(u), taus)),
                                       bounds=(np.log(1e-6), np.log(1e6)), method="bounded",
                                       options={"xatol": 1e-13, "maxiter": 2000})
        brute = float(np.exp(res.x))
        worst = max(worst, abs(closed - brute) / brute)
    name = "scale-k" if kind is TextureKind.GAMMA else "scale-t"
    return OracleResult(name, instances, worst, 1e-6)


def shape_suite(kind, instances=100, seed=0) -> OracleResult:
    """Shape from the digamma equation vs a 2-D Nelder-Mead fit of (log a, log b)."""
    kind = TextureKind.parse(kind)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        taus = rng.gamma(rng.uniform(0.8, 4.0), 1.0, int(rng.integers(20, 60)))
        if kind is TextureKind.INVERSE_GAMMA:
            taus = 1.0 / taus
        closed = est.estimate_a(taus, kind)

        def nll(v):
            return -float(np.sum(_log_prior(kind, np.exp(v[0]), np.exp(v[1]), taus)))
        v = np.zeros(2)
        for _ in range(3):
            v = optimize.minimize(nll, v, method="Nelder-Mead",
                                  options={"xatol": 1e-12, "fatol": 1e-14, "maxiter": 20000}).x
        worst = max(worst, abs(closed - np.exp(v[0])) / np.exp(v[0]))
    name = "shape-k" if kind is TextureKind.GAMMA else "shape-t"
    return OracleResult(name, instances, worst, 1e-5)


def q_ml_identity_suite(instances=100, seed=0) -> OracleResult:
    """Fixed-point covariance step equals the fixed-texture covariance at ML textures."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        geom, theta, S, X, Q = random_instance(rng)
        q_inv = np.linalg.inv(Q)
        direct = est.update_q_ml(geom, X, theta, S, q_inv)
        taus = est.estimate_tau_ml(geom, X, theta, S, q_inv)
        composed = est.covariance_given_textures(geom, X, theta, S, taus)
        worst = max(worst, float(np.linalg.norm(direct - composed)))
    return OracleResult("q-ml-identity", instances, worst, 1e-10)


def q_map_identity_suite(kind, instances=100, seed=0) -> OracleResult:
    kind = TextureKind.parse(kind)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        geom, theta, S, X, Q = random_instance(rng)
        a, b = rng.uniform(0.5, 4.0), rng.uniform(0.5, 4.0)
        q_inv = np.linalg.inv(Q)
        direct = est.update_q_map(geom, X, theta, S, q_inv, a, b, kind)
        taus = est.estimate_tau_map(geom, X, theta, S, q_inv, a, b, kind)
        composed = est.covariance_given_textures(geom, X, theta, S, taus)
        worst = max(worst, float(np.linalg.norm(direct - composed)))
    name = "q-map-identity-k" if kind is TextureKind.GAMMA else "q-map-identity-t"
    return OracleResult(name, instances, worst, 1e-10)


SUITES = {
    "tau-ml": tau_ml_suite,
    "tau-map-k": lambda **kw: tau_map_suite("gamma", **kw),
    "tau-map-t": lambda **kw: tau_map_suite("inverse-gamma", **kw),
    "waveforms": waveforms_suite,
    "scale-k": lambda **kw: scale_suite("gamma", **kw),
    "scale-t": lambda **kw: scale_suite("inverse-gamma", **kw),
    "shape-k": lambda **kw: shape_suite("gamma", **kw),
    "shape-t": lambda **kw: shape_suite("inverse-gamma", **kw),
    "q-ml-identity": q_ml_identity_suite,
    "q-map-identity-k": lambda **kw: q_map_identity_suite("gamma", **kw),
    "q-map-identity-t": lambda **kw: q_map_identity_suite("inverse-gamma", **kw),
}


def run_suite(name: str, instances: int = 100, seed: int = 0) -> list:
    if name == "all":
        return [fn(instances=instances, seed=seed) for fn in SUITES.values()]
    try:
        fn = SUITES[name]
    except KeyError:
        raise KeyError(f"unknown oracle suite {name!r}; choose from {sorted(SUITES)} or 'all'") from None
    return [fn(instances=instances, seed=seed)]
