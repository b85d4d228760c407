"""Generalized p-means and the helper quantities used by the portfolio algorithms.

All arithmetic is done on logarithms of the utilities; the linear value is only
materialized by :func:`p_mean`.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy.special import logsumexp

# Below this |p| the mean is evaluated as the geometric mean.
NEAR_ZERO_P = 1e-8

# |p| * spread(log x) below which the expm1/log1p form is used.
_SERIES_SWITCH = 1.0


class DomainError(ValueError):
    """Input outside the domain of a welfare function."""


@functools.total_ordering
@dataclass(frozen=True)
class PValue:
    """A point of the extended interval [-inf, 1].

    ``value is None`` encodes negative infinity; it is never stored as a float.
    """

    value: float | None = None

    def __post_init__(self) -> None:
        if self.value is None:
            return
        v = float(self.value)
        if math.isnan(v) or math.isinf(v):
            raise DomainError(f"finite p required, got {self.value!r}")
        if v > 1.0:
            raise DomainError(f"p must be <= 1, got {v}")
        object.__setattr__(self, "value", v + 0.0)  # folds -0.0 into 0.0

    @classmethod
    def neg_inf(cls) -> PValue:
        return cls(None)

    @property
    def is_neg_inf(self) -> bool:
        return self.value is None

    @property
    def key(self) -> str:
        """Canonical cache key: ``"-inf"`` or the float's hex representation."""
        return "-inf" if self.value is None else float.hex(self.value)

    def to_json(self) -> str | float:
        return "-inf" if self.value is None else self.value

    def __lt__(self, other: object) -> bool:
        if not isinstance(other, PValue):
            return NotImplemented
        if self.value is None:
            return other.value is not None
        if other.value is None:
            return False
        return self.value < other.value

    def __float__(self) -> float:
        return -math.inf if self.value is None else self.value

    def __repr__(self) -> str:
        return "PValue(-inf)" if self.value is None else f"PValue({self.value!r})"


PLike = Union[PValue, float, int, str]

NEG_INF = PValue.neg_inf()


def as_pvalue(p: PLike) -> PValue:
    """Normalize user input (PValue, number, or the string ``"-inf"``) to a PValue."""
    if isinstance(p, PValue):
        return p
    if isinstance(p, str):
        if p.strip().lower() in ("-inf", "-infinity"):
            return NEG_INF
        p = float(p)
    v = float(p)
    if v == -math.inf:
        return NEG_INF
    return PValue(v)


def _log_rows(x) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] == 0:
        raise DomainError("utility vectors must be non-empty")
    if not np.all(arr > 0) or not np.all(np.isfinite(arr)):
        raise DomainError("utility vectors must be strictly positive and finite")
    return np.log(arr)


def log_p_mean_from_logs(log_x: np.ndarray, p: PLike) -> np.ndarray:
    """Row-wise ln f(x, p) given ``log_x`` of shape (M, N). Returns shape (M,)."""
    pv = as_pvalue(p)
    y = np.asarray(log_x, dtype=float)
    if pv.is_neg_inf:
        return y.min(axis=1)
    center = y.mean(axis=1)
    q = pv.value
    if abs(q) < NEAR_ZERO_P:
        return center
    z = y - center[:, None]
    spread = np.abs(z).max(axis=1)
    out = np.empty(y.shape[0])
    small = abs(q) * spread < _SERIES_SWITCH
    if np.any(small):
        # mean(exp(q z)) - 1 without cancellation; mean(z) == 0 by construction
        m1 = np.expm1(q * z[small]).mean(axis=1)
        out[small] = center[small] + np.log1p(m1) / q
    if not np.all(small):
        big = ~small
        n = y.shape[1]
        out[big] = center[big] + (logsumexp(q * z[big], axis=1) - math.log(n)) / q
    return out


def log_p_mean(x, p: PLike) -> float:
    """ln f(x, p) for a strictly positive vector ``x``."""
    arr = np.asarray(x, dtype=float)
    if arr.ndim != 1:
        raise DomainError("log_p_mean expects a 1-D vector")
    return float(log_p_mean_from_logs(_log_rows(arr), p)[0])


def p_mean(x, p: PLike) -> float:
    """Generalized p-mean of a strictly positive vector.

    ``p = -inf`` gives the minimum, ``p = 0`` the geometric mean and ``p = 1``
    the arithmetic mean. Raises :class:`DomainError` for non-positive entries
    or ``p > 1``.
    """
    arr = np.asarray(x, dtype=float)
    pv = as_pvalue(p)
    if arr.ndim != 1:
        raise DomainError("p_mean expects a 1-D vector")
    if pv.is_neg_inf:
        _log_rows(arr)
        return float(arr.min())
    val = math.exp(log_p_mean(arr, pv))
    # exp(log(.)) may drift by an ulp outside [min, max]
    return min(max(val, float(arr.min())), float(arr.max()))


def p_mean_rows(x, p: PLike) -> np.ndarray:
    """Vectorized :func:`p_mean` over the rows of a 2-D array."""
    arr = np.asarray(x, dtype=float)
    if arr.ndim != 2:
        raise DomainError("p_mean_rows expects a 2-D array")
    pv = as_pvalue(p)
    if pv.is_neg_inf:
        _log_rows(arr)
        return arr.min(axis=1)
    vals = np.exp(log_p_mean_from_logs(_log_rows(arr), pv))
    return np.clip(vals, arr.min(axis=1), arr.max(axis=1))


def p_floor(n: int, alpha: float) -> float:
    """The cutoff -ln(n) / ln(1/alpha) below which the minimum is alpha-approximated."""
    if not 0.0 < alpha < 1.0:
        raise DomainError(f"alpha must lie in (0, 1), got {alpha}")
    if int(n) != n or n < 1:
        raise DomainError(f"n must be a positive integer, got {n}")
    return -math.log(n) / math.log(1.0 / alpha) + 0.0


def slope_bound(kappa: float) -> float:
    """Upper bound kappa * ln(kappa) on d/dp of ln f(x, p) when max(x)/min(x) <= kappa."""
    if not kappa >= 1.0:
        raise DomainError(f"kappa must be >= 1, got {kappa}")
    return kappa * math.log(kappa)
