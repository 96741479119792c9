"""
Compound-Gaussian (SIRP) sensor noise.

Each noise snapshot is ``sqrt(tau(t)) * sigma(t)``: a positive scalar
texture times a circular complex Gaussian speckle with covariance ``Q``.
Gamma textures give K-distributed noise, inverse-gamma textures give
t-distributed noise.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DomainError, SingularityError


class TextureKind(enum.Enum):
    GAMMA = "gamma"
    INVERSE_GAMMA = "inverse-gamma"

    @classmethod
    def parse(cls, value) -> "TextureKind":
        if isinstance(value, cls):
            return value
        aliases = {"k": cls.GAMMA, "gamma": cls.GAMMA,
                   "t": cls.INVERSE_GAMMA, "inverse-gamma": cls.INVERSE_GAMMA,
                   "inverse_gamma": cls.INVERSE_GAMMA, "invgamma": cls.INVERSE_GAMMA}
        try:
            return aliases[str(value).lower()]
        except KeyError:
            raise ConfigurationError(f"unknown texture kind {value!r}") from None


@dataclass(frozen=True)
class TextureParams:
    """Texture distribution: ``kind`` with shape ``a`` and scale ``b``."""

    kind: TextureKind
    a: float
    b: float

    def __post_init__(self):
        object.__setattr__(self, "kind", TextureKind.parse(self.kind))
        if not (self.a > 0 and self.b > 0 and math.isfinite(self.a) and math.isfinite(self.b)):
            raise DomainError(f"texture shape and scale must be positive, got a={self.a}, b={self.b}")


@dataclass(frozen=True)
class NoiseBlock:
    noise: np.ndarray
    textures: np.ndarray


def texture_logpdf(params: TextureParams, tau):
    tau = np.asarray(tau, dtype=float)
    if np.any(tau <= 0):
        raise DomainError("texture density is only defined for tau > 0")
    a, b = params.a, params.b
    if params.kind is TextureKind.GAMMA:
        return -math.lgamma(a) - a * math.log(b) + (a - 1) * np.log(tau) - tau / b
    return -math.lgamma(a) + a * math.log(b) - (a + 1) * np.log(tau) - b / tau


def texture_pdf(params: TextureParams, tau):
    """Gamma or inverse-gamma density of the texture at ``tau``."""
    return np.exp(texture_logpdf(params, tau))


def texture_mean(params: TextureParams) -> float:
    if params.kind is TextureKind.GAMMA:
        return params.a * params.b
    if params.a <= 1:
        raise DomainError(f"inverse-gamma mean is undefined for a <= 1 (a={params.a})")
    return params.b / (params.a - 1)


def sample_textures(params: TextureParams, n_snapshots: int, rng=None) -> np.ndarray:
    """I.i.d. texture draws.

    Inverse-gamma draws are reciprocals of gamma draws with scale ``1/b``.
    """
    if n_snapshots < 1:
        raise ConfigurationError("need at least one snapshot")
    rng = np.random.default_rng(rng)
    if params.kind is TextureKind.GAMMA:
        return rng.gamma(params.a, params.b, size=n_snapshots)
    return 1.0 / rng.gamma(params.a, 1.0 / params.b, size=n_snapshots)


def build_speckle_covariance(n_sensors: int, sigma2: float = 1.0, correlation: float = 0.9,
                             phase: float = np.pi / 2) -> np.ndarray:
    """``[Q]_{m,n} = sigma2 * correlation**|m-n| * exp(j*phase*(m-n))``."""
    if n_sensors < 1:
        raise ConfigurationError("need at least one sensor")
    if not sigma2 > 0:
        raise DomainError(f"sigma2 must be positive, got {sigma2}")
    d = np.subtract.outer(np.arange(n_sensors), np.arange(n_sensors))
    return sigma2 * correlation ** np.abs(d) * np.exp(1j * phase * d)


def sample_noise(params: TextureParams, q: np.ndarray, n_snapshots: int, rng=None,
                 textures=None) -> NoiseBlock:
    """Draw ``n(t) = sqrt(tau(t)) L g(t)`` with ``L L^H = Q`` and ``g ~ CN(0, I)``.

    ``textures`` overrides the texture draws (e.g. all ones for Gaussian noise).
    """
    q = np.asarray(q, dtype=complex)
    n = q.shape[0]
    if q.shape != (n, n):
        raise ConfigurationError(f"speckle covariance must be square, got {q.shape}")
    if abs(np.trace(q).real - n) > 1e-10 * n:
        raise DomainError("speckle covariance must be trace-normalized (tr Q = N)")
    try:
        chol = np.linalg.cholesky(q)
    except np.linalg.LinAlgError as exc:
        raise SingularityError("speckle covariance is not positive definite") from exc
    rng = np.random.default_rng(rng)
    if textures is None:
        tau = sample_textures(params, n_snapshots, rng)
    else:
        tau = np.asarray(textures, dtype=float)
        if tau.shape != (n_snapshots,) or np.any(tau <= 0):
            raise DomainError("forced textures must be positive with one per snapshot")
    g = (rng.standard_normal((n, n_snapshots)) + 1j * rng.standard_normal((n, n_snapshots))) / np.sqrt(2)
    return NoiseBlock(noise=np.sqrt(tau) * (chol @ g), textures=tau)


def compute_snr(waveforms, params: TextureParams, q) -> float:
    """Linear SNR: total signal energy over ``T * E{tau} * tr(Q)``."""
    S = np.atleast_2d(np.asarray(waveforms))
    energy = float(np.sum(np.abs(S) ** 2))
    return energy / (S.shape[1] * texture_mean(params) * float(np.trace(q).real))


def snr_to_db(snr: float) -> float:
    return 10.0 * math.log10(snr)


def db_to_snr(snr_db: float) -> float:
    return 10.0 ** (snr_db / 10.0)


def scale_waveforms_to_snr(waveforms, target_snr: float, params: TextureParams, q) -> np.ndarray:
    if not target_snr > 0:
        raise DomainError(f"target SNR must be positive, got {target_snr}")
    S = np.atleast_2d(np.asarray(waveforms, dtype=complex))
    current = compute_snr(S, params, q)
    if current == 0:
        raise DomainError("cannot scale all-zero waveforms to a target SNR")
    return S * math.sqrt(target_snr / current)
