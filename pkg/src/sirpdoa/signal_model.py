"""
Array manifold, source waveforms and snapshot synthesis.

Angles are in radians throughout the library. Sensor positions are expressed
in half-wavelengths, so a uniform linear array with half-wavelength spacing
has positions ``0, 1, ..., N-1`` and the steering vector element for sensor
``n`` is ``exp(j*pi*position_n*sin(theta))``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DomainError, SingularityError

HALF_PI = np.pi / 2


@dataclass(frozen=True)
class ArrayGeometry:
    """Sensor positions along the array axis, in half-wavelengths."""

    positions: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=float).ravel()
        if pos.size < 1:
            raise ConfigurationError("array needs at least one sensor")
        if not np.all(np.isfinite(pos)):
            raise ConfigurationError("sensor positions must be finite")
        if pos.size > 1 and np.any(np.diff(pos) <= 0):
            raise ConfigurationError("sensor positions must be strictly increasing")
        pos.setflags(write=False)
        object.__setattr__(self, "positions", pos)

    @classmethod
    def ula(cls, n_sensors: int, spacing: float = 1.0) -> "ArrayGeometry":
        """Uniform linear array; ``spacing=1`` is half-wavelength spacing."""
        if n_sensors < 1:
            raise ConfigurationError(f"n_sensors must be >= 1, got {n_sensors}")
        if spacing <= 0:
            raise ConfigurationError(f"spacing must be positive, got {spacing}")
        return cls(spacing * np.arange(n_sensors, dtype=float))

    @property
    def n_sensors(self) -> int:
        return self.positions.size


def check_doas(doas, *, ordered: bool = True) -> np.ndarray:
    """Validate a DOA vector (radians) and return it as a float array."""
    theta = np.atleast_1d(np.asarray(doas, dtype=float))
    if theta.ndim != 1 or theta.size < 1:
        raise ConfigurationError("DOA vector must be one-dimensional and non-empty")
    if np.any(np.abs(theta) >= HALF_PI) or not np.all(np.isfinite(theta)):
        raise DomainError(f"DOAs must lie in (-pi/2, pi/2), got {theta}")
    if ordered and theta.size > 1 and np.any(np.diff(theta) <= 0):
        raise DomainError(f"DOAs must be strictly ascending, got {theta}")
    return theta


def manifold(positions: np.ndarray, angles) -> np.ndarray:
    """Unchecked steering matrix; broadcasts over leading axes of ``angles``.

    For ``angles`` of shape ``(..., M)`` the result has shape ``(..., N, M)``.
    """
    angles = np.asarray(angles, dtype=float)
    phase = np.pi * positions[:, None] * np.sin(angles)[..., None, :]
    return np.exp(1j * phase)


def steering_vector(geom: ArrayGeometry, angle: float) -> np.ndarray:
    angle = float(angle)
    if not abs(angle) < HALF_PI:
        raise DomainError(f"angle must lie in (-pi/2, pi/2), got {angle}")
    return np.exp(1j * np.pi * geom.positions * np.sin(angle))


def steering_matrix(geom: ArrayGeometry, doas) -> np.ndarray:
    """N x M steering matrix ``[a(theta_1), ..., a(theta_M)]``.

    Raises
    ------
    ConfigurationError
        If ``M >= N`` (the model is not identifiable).
    SingularityError
        If the columns are linearly dependent.
    """
    theta = check_doas(doas, ordered=False)
    n, m = geom.n_sensors, theta.size
    if m >= n:
        raise ConfigurationError(f"need fewer sources than sensors, got M={m}, N={n}")
    A = manifold(geom.positions, theta)
    sv = np.linalg.svd(A, compute_uv=False)
    if sv[-1] <= sv[0] * n * np.finfo(float).eps * 16:
        raise SingularityError(f"steering matrix is rank deficient for DOAs {theta}")
    return A


def generate_waveforms(n_sources: int, n_snapshots: int, rng=None, per_source_power: float = 1.0):
    """Unit-modulus random-phase waveforms scaled to ``per_source_power``.

    Every entry has squared modulus ``per_source_power`` so all sources carry
    the same power. ``rng`` is anything ``numpy.random.default_rng`` accepts.
    """
    if n_sources < 1 or n_snapshots < 1:
        raise ConfigurationError("need at least one source and one snapshot")
    if not per_source_power > 0:
        raise DomainError(f"per_source_power must be positive, got {per_source_power}")
    rng = np.random.default_rng(rng)
    phase = rng.uniform(0.0, 2 * np.pi, size=(n_sources, n_snapshots))
    return np.sqrt(per_source_power) * np.exp(1j * phase)


def synthesize(geom: ArrayGeometry, doas, waveforms, noise_block) -> np.ndarray:
    """Snapshots ``X = A(theta) S + noise``, one column per snapshot."""
    S = np.atleast_2d(np.asarray(waveforms, dtype=complex))
    E = np.atleast_2d(np.asarray(noise_block, dtype=complex))
    A = steering_matrix(geom, doas)
    if S.shape[0] != A.shape[1]:
        raise ConfigurationError(f"waveforms have {S.shape[0]} rows, expected {A.shape[1]}")
    if E.shape != (geom.n_sensors, S.shape[1]):
        raise ConfigurationError(
            f"noise block has shape {E.shape}, expected {(geom.n_sensors, S.shape[1])}"
        )
    if not (np.all(np.isfinite(S)) and np.all(np.isfinite(E))):
        raise DomainError("waveforms and noise must be finite")
    return A @ S + E
