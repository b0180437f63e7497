"""Bernoulli allocation strategies.

Under strategy ``alpha`` every node is independently treated with
probability ``alpha``. The weights here give the probability of a treated
count ``s`` among ``d`` neighbors, optionally jointly with the node's own
treatment ``z``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln


def _check_alpha(alpha):
    if isinstance(alpha, (float, int)) and not isinstance(alpha, bool):
        if not 0.0 <= alpha <= 1.0:
            raise ValueError(f"allocation probability must lie in [0, 1], got {alpha}")
        return np.asarray(alpha, dtype=float)
    a = np.asarray(alpha, dtype=float)
    if np.any((a < 0) | (a > 1)) or np.any(np.isnan(a)):
        raise ValueError(f"allocation probability must lie in [0, 1], got {alpha}")
    return a


def pi_neighborhood(s, d, alpha):
    """Binomial probability of ``s`` treated out of ``d`` under strategy ``alpha``.

    Evaluated in log space, with exact handling of ``alpha`` in {0, 1}.
    Broadcasts over array inputs.

    Parameters
    ----------
    s, d : int or array of int
        Treated count and neighborhood size, ``0 <= s <= d``.
    alpha : float or array
        Allocation probability in [0, 1].
    """
    s_arr = np.asarray(s)
    d_arr = np.asarray(d)
    a = _check_alpha(alpha)
    if np.any(s_arr < 0) or np.any(s_arr > d_arr):
        raise ValueError("treated count must satisfy 0 <= s <= d")
    s_f, d_f, a = np.broadcast_arrays(s_arr.astype(float), d_arr.astype(float), a)
    with np.errstate(divide="ignore", invalid="ignore"):
        logc = gammaln(d_f + 1) - gammaln(s_f + 1) - gammaln(d_f - s_f + 1)
        logp = logc + s_f * np.log(a) + (d_f - s_f) * np.log1p(-a)
        out = np.exp(logp)
    # endpoints: all mass on s = 0 (alpha = 0) or s = d (alpha = 1)
    out = np.where(a == 0, (s_f == 0).astype(float), out)
    out = np.where(a == 1, (s_f == d_f).astype(float), out)
    return out if out.ndim else float(out)


def pi_joint(z, s, d, alpha):
    """Probability of own treatment ``z`` and ``s`` treated neighbors out of ``d``."""
    z_arr = np.asarray(z)
    if not np.isin(z_arr, (0, 1)).all():
        raise ValueError("z must be 0 or 1")
    a = _check_alpha(alpha)
    own = np.where(z_arr == 1, a, 1 - a)
    out = own * pi_neighborhood(s, d, alpha)
    return out if np.ndim(out) else float(out)


def vector_probability(s, k, alpha):
    """Probability of one specific 0/1 vector of length ``k`` with ``s`` ones.

    Equals ``pi_neighborhood(s, k, alpha) / C(k, s)``; ``0**0`` is taken as 1.
    """
    a = _check_alpha(alpha)
    s = np.asarray(s, dtype=float)
    k = np.asarray(k, dtype=float)
    return np.power(a, s) * np.power(1 - a, k - s)


def expected_exposure(h, sizes, alpha) -> np.ndarray:
    """Exact ``sum_s h(s, d) pi(s; d, alpha)`` for every entry of ``sizes``.

    ``h`` is a vectorised callable ``h(s, d)``. The sum is computed once per
    distinct size.
    """
    sizes = np.asarray(sizes, dtype=np.int64)
    out = np.empty(len(sizes))
    for d in np.unique(sizes):
        s = np.arange(d + 1)
        out[sizes == d] = np.sum(h(s, np.full_like(s, d)) * pi_neighborhood(s, d, alpha))
    return out


@dataclass(frozen=True)
class AllocationPolicy:
    """Bernoulli allocation strategy with treatment probability ``alpha``."""
    alpha: float

    def __post_init__(self):
        _check_alpha(self.alpha)

    def neighborhood(self, s, d):
        return pi_neighborhood(s, d, self.alpha)

    def joint(self, z, s, d):
        return pi_joint(z, s, d, self.alpha)
