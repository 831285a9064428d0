"""Closed-form probabilities of the Bradley-Terry model with and without ties.

Every function accepts Python floats or numpy arrays (broadcast elementwise)
and returns a float for scalar input.  The tie-propensity parameter may be
passed either as a :class:`TieModelParams` or as a bare number; the bias
helpers also take an array of thetas, broadcast against ``x``.

The bias helpers rely on one identity.  Writing ``c = log((1 + theta**2) / (2 * theta))``
for the bias bound, the preference-strength bias is

    bias(x) = softplus(c - x) - softplus(-c - x) - c

which is odd in ``x``, decreasing, and tends to ``-c`` / ``+c`` as
``x -> +inf`` / ``-inf``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np

from .errors import DomainError, InvalidParameterError, NumericalError

ArrayLike = Union[float, np.ndarray]

INVERT_TOL = 1e-10
INVERT_MAX_ITER = 200


@dataclass(frozen=True)
class TieModelParams:
    """Tie propensity ``theta >= 1``; ``theta == 1`` is plain Bradley-Terry."""

    theta: float = 1.0

    def __post_init__(self):
        theta = float(self.theta)
        if not math.isfinite(theta):
            raise InvalidParameterError(f"theta must be finite, got {self.theta!r}")
        if theta < 1.0:
            raise InvalidParameterError(f"theta must be >= 1, got {theta}")
        object.__setattr__(self, "theta", theta)

    @property
    def has_ties(self) -> bool:
        return self.theta > 1.0


def as_params(params: TieModelParams | float) -> TieModelParams:
    if isinstance(params, TieModelParams):
        return params
    return TieModelParams(params)


def _finite(*arrays: ArrayLike) -> list[np.ndarray]:
    out = []
    for a in arrays:
        arr = np.asarray(a, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise DomainError("inputs must be finite")
        out.append(arr)
    return out


def _ret(value: np.ndarray, *inputs):
    if all(isinstance(x, TieModelParams) or np.ndim(x) == 0 for x in inputs):
        return float(value)
    return value


def sigmoid(x: ArrayLike) -> ArrayLike:
    """Logistic function, evaluated on whichever branch cannot overflow."""
    x = np.asarray(x, dtype=np.float64)
    z = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    return _ret(out, x)


def softplus(x: ArrayLike) -> ArrayLike:
    """``log(1 + exp(x))`` without overflow; ``-log sigmoid(-x)``."""
    return _ret(np.logaddexp(0.0, np.asarray(x, dtype=np.float64)), x)


def bt_win_prob(delta_r: ArrayLike) -> ArrayLike:
    """P(first response preferred) under Bradley-Terry for strength ``delta_r``."""
    (d,) = _finite(delta_r)
    return _ret(sigmoid(d), delta_r)


def _shifted_exps(r1: ArrayLike, r2: ArrayLike) -> tuple[np.ndarray, np.ndarray]:
    a, b = _finite(r1, r2)
    m = np.maximum(a, b)
    return np.exp(a - m), np.exp(b - m)


def btt_win_prob(r1: ArrayLike, r2: ArrayLike, params: TieModelParams | float) -> ArrayLike:
    theta = as_params(params).theta
    e1, e2 = _shifted_exps(r1, r2)
    return _ret(e1 / (e1 + theta * e2), r1, r2)


def btt_tie_prob(r1: ArrayLike, r2: ArrayLike, params: TieModelParams | float) -> ArrayLike:
    theta = as_params(params).theta
    e1, e2 = _shifted_exps(r1, r2)
    num = (theta * theta - 1.0) * e1 * e2
    return _ret(num / ((e1 + theta * e2) * (theta * e1 + e2)), r1, r2)


def collapsed_win_prob(r1: ArrayLike, r2: ArrayLike, params: TieModelParams | float) -> ArrayLike:
    """Win probability once ties are split evenly between the two responses."""
    params = as_params(params)
    win = np.asarray(btt_win_prob(r1, r2, params))
    tie = np.asarray(btt_tie_prob(r1, r2, params))
    return _ret(win + 0.5 * tie, r1, r2)


def bias_bound(params: TieModelParams | float) -> float:
    theta = as_params(params).theta
    # log1p form keeps the result exactly 0 at theta == 1
    return math.log1p((theta - 1.0) ** 2 / (2.0 * theta))


def _bounds(params) -> float | np.ndarray:
    if isinstance(params, TieModelParams) or np.ndim(params) == 0:
        return bias_bound(params)
    theta = np.asarray(params, dtype=np.float64)
    if not np.all(np.isfinite(theta)) or np.any(theta < 1.0):
        raise InvalidParameterError("every theta must be finite and >= 1")
    return np.log1p((theta - 1.0) ** 2 / (2.0 * theta))


def bias_term(delta_r_star: ArrayLike, params: TieModelParams | float | np.ndarray) -> ArrayLike:
    """Gap between the BT-fitted strength and the true strength ``delta_r_star``."""
    (x,) = _finite(delta_r_star)
    return _ret(_bias(x, _bounds(params)), delta_r_star, params)


def _bias(x: np.ndarray, c) -> np.ndarray:
    # magnitude on |x| then sign: exactly odd, exactly 0 at x == 0, never above the bound
    a = np.abs(x)
    mag = np.clip(np.logaddexp(c, -a) - np.logaddexp(0.0, c - a), 0.0, c)
    return -np.sign(x) * mag


def bias_term_derivative(delta_r_star: ArrayLike, params: TieModelParams | float) -> ArrayLike:
    (x,) = _finite(delta_r_star)
    c = bias_bound(params)
    return _ret(np.asarray(sigmoid(-c - x)) - np.asarray(sigmoid(c - x)), delta_r_star)


def forward_bias_map(delta_r_star: ArrayLike, params: TieModelParams | float | np.ndarray) -> ArrayLike:
    """Strength a BT fit converges to when the data follow BTT with ``delta_r_star``."""
    (x,) = _finite(delta_r_star)
    return _ret(x + _bias(x, _bounds(params)), delta_r_star, params)


def forward_bias_map_derivative(delta_r_star: ArrayLike, params: TieModelParams | float) -> ArrayLike:
    (x,) = _finite(delta_r_star)
    return _ret(1.0 + np.asarray(bias_term_derivative(x, params)), delta_r_star)


def invert_bias_map(
    delta_r_hat: ArrayLike,
    params: TieModelParams | float | np.ndarray,
    tol: float = INVERT_TOL,
    max_iter: int = INVERT_MAX_ITER,
) -> ArrayLike:
    """Solve ``forward_bias_map(x) == delta_r_hat`` for ``x`` by bisection.

    Since ``|bias| <= bias_bound``, the root lies in
    ``[delta_r_hat - bound, delta_r_hat + bound]``.  All entries of an array
    argument are bisected together.
    """
    (y,) = _finite(delta_r_hat)
    bound = _bounds(params)
    if np.all(bound == 0.0):
        return _ret(np.broadcast_to(y, np.shape(y + bound)).copy(), delta_r_hat, params)

    lo = y - bound
    hi = y + bound
    for _ in range(max_iter):
        # a bracket with no representable interior point counts as converged
        if np.all((hi - lo <= tol) | (np.nextafter(lo, np.inf) >= hi)):
            break
        mid = 0.5 * (lo + hi)
        f = mid + _bias(mid, bound)
        exact = f == y
        hi = np.where((f > y) | exact, mid, hi)
        lo = np.where((f < y) | exact, mid, lo)
    else:
        raise NumericalError(f"bisection did not reach tolerance {tol} in {max_iter} iterations")
    return _ret(0.5 * (lo + hi), delta_r_hat, params)


def bias_ratio_at_zero(params: TieModelParams | float) -> float:
    """Limit of ``bias_term(x) / x`` as ``x -> 0``: ``-((theta - 1) / (theta + 1))**2``."""
    theta = as_params(params).theta
    return -(((theta - 1.0) / (theta + 1.0)) ** 2)
