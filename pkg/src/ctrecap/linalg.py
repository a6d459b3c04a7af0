"""Dense matrix algebra for alive/dead chain generators and their exponentials.

All matrices here are small, (M+1) x (M+1), where states 1..M are alive
states and state M+1 is absorbing death.  Rates are per day.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm as _expm

GENERATOR_ROW_SUM_TOL = 1e-12
PROB_ENTRY_TOL = 1e-12
PROB_ROW_SUM_TOL = 1e-10
NEGATIVE_CLAMP = 1e-12


class InvalidIntensityMatrixError(ValueError):
    """The matrix is not a valid generator of an alive/dead chain."""


class InvalidTransitionMatrixError(ValueError):
    """The matrix is not a valid stochastic matrix with absorbing death."""


class UndefinedSojournTimeError(ValueError):
    """Mean sojourn time requested for the death state or a zero-rate state."""


def validate_intensity_entries(entries: np.ndarray) -> None:
    """Raise InvalidIntensityMatrixError unless `entries` is a valid generator.

    Checks: square, finite, off-diagonals >= 0, rows sum to zero within
    GENERATOR_ROW_SUM_TOL, diagonal <= 0, and an identically-zero last row
    (death is absorbing).
    """
    a = np.asarray(entries, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise InvalidIntensityMatrixError(f"expected a square matrix, got shape {a.shape}")
    if a.shape[0] < 2:
        raise InvalidIntensityMatrixError("need at least one alive state plus the death state")
    if not np.all(np.isfinite(a)):
        raise InvalidIntensityMatrixError("non-finite entries in intensity matrix")
    off = a[~np.eye(a.shape[0], dtype=bool)]
    if np.any(off < 0):
        raise InvalidIntensityMatrixError("negative off-diagonal rate")
    if np.any(np.abs(a.sum(axis=1)) > GENERATOR_ROW_SUM_TOL):
        raise InvalidIntensityMatrixError("rows must sum to zero")
    if np.any(np.diag(a) > 0):
        raise InvalidIntensityMatrixError("diagonal entries must be non-positive")
    if np.any(a[-1] != 0.0):
        raise InvalidIntensityMatrixError("death state must be absorbing (last row zero)")


@dataclass(frozen=True, eq=False)
class IntensityMatrix:
    """Validated generator of the alive/dead continuous-time Markov chain."""

    entries: np.ndarray

    def __post_init__(self):
        a = np.array(self.entries, dtype=float)
        validate_intensity_entries(a)
        a.setflags(write=False)
        object.__setattr__(self, "entries", a)

    @property
    def dim(self) -> int:
        return self.entries.shape[0]

    @property
    def n_alive(self) -> int:
        return self.dim - 1


@dataclass(frozen=True, eq=False)
class TransitionMatrix:
    """Validated stochastic matrix over alive states plus absorbing death."""

    entries: np.ndarray

    def __post_init__(self):
        a = np.array(self.entries, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise InvalidTransitionMatrixError(f"expected a square matrix, got shape {a.shape}")
        if not np.all(np.isfinite(a)):
            raise InvalidTransitionMatrixError("non-finite entries")
        if np.any(a < -PROB_ENTRY_TOL) or np.any(a > 1.0 + PROB_ENTRY_TOL):
            raise InvalidTransitionMatrixError("entries outside [0, 1]")
        if np.any(np.abs(a.sum(axis=1) - 1.0) > PROB_ROW_SUM_TOL):
            raise InvalidTransitionMatrixError("rows must sum to one")
        unit = np.zeros(a.shape[0])
        unit[-1] = 1.0
        if np.any(np.abs(a[-1] - unit) > PROB_ENTRY_TOL):
            raise InvalidTransitionMatrixError("death row must be the unit vector on the death state")
        a.setflags(write=False)
        object.__setattr__(self, "entries", a)

    @property
    def dim(self) -> int:
        return self.entries.shape[0]


def expm_stack(scaled: np.ndarray, clamp: bool = True) -> np.ndarray:
    """Exponentials of a stack of generator-times-duration products.

    `scaled` has shape (..., d, d) and every matrix must already be a valid
    generator multiplied by a non-negative duration (zero last row).  Uses
    scaling-and-squaring (scipy's Pade implementation).  With `clamp`,
    floating-point noise is cleaned up: entries in (-NEGATIVE_CLAMP, 0) are
    set to zero, rows renormalised to sum to one, and the absorbing death
    row pinned to its exact unit vector.
    """
    scaled = np.asarray(scaled, dtype=float)
    out = _expm(scaled)
    if out.ndim == 2:
        out = out[None, ...]
        squeeze = True
    else:
        squeeze = False
    if clamp:
        np.clip(out, 0.0, None, out=out)
        out[..., -1, :] = 0.0
        out[..., -1, -1] = 1.0
        out /= out.sum(axis=-1, keepdims=True)
    return out[0] if squeeze else out


def matrix_exponential(Q: IntensityMatrix, dt: float) -> TransitionMatrix:
    """Transition probability matrix exp(Q * dt) over an interval of dt days."""
    dt = float(dt)
    if not np.isfinite(dt):
        raise InvalidIntensityMatrixError("dt must be finite")
    if dt < 0:
        raise InvalidIntensityMatrixError("dt must be non-negative")
    if dt == 0.0:
        return TransitionMatrix(np.eye(Q.dim))
    return TransitionMatrix(expm_stack(Q.entries * dt))


def mean_sojourn_time(Q: IntensityMatrix, j: int) -> float:
    """Mean time spent in alive state j (1-based) before any transition: -1/q_jj."""
    if not 1 <= j <= Q.n_alive:
        raise UndefinedSojournTimeError(
            f"state {j} is not an alive state (valid: 1..{Q.n_alive})"
        )
    qjj = Q.entries[j - 1, j - 1]
    if qjj == 0.0:
        raise UndefinedSojournTimeError(f"state {j} has zero total departure rate")
    return -1.0 / qjj
