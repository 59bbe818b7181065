"""Pure numpy versions of the hot kernels (fallback when the compiled core is absent)."""

from __future__ import annotations

import math

import numpy as np

LOG2E = 1.0 / math.log(2.0)


def entropy_rate_batch(x, mu: float) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if np.any(~(x > 0)):
        raise ValueError("entropy diverges at x <= 0")
    tail = np.exp(-(1.0 - mu) * x)
    p0 = -np.expm1(-(1.0 - mu) * x)
    one_m_ex = -np.expm1(-x)
    with np.errstate(divide="ignore", invalid="ignore"):
        head = np.where(p0 > 0.0, -p0 * np.log2(p0), 0.0)
    bracket = 1.0 + (x / one_m_ex - mu * x - np.log(one_m_ex)) * LOG2E
    return head + tail * bracket


def grid_search(xp, re_term, de, dly, rc_term, dc, ptot, tsend,
                V, rho1, rho2, d_max, d_max_trans, p_max):
    """Exhaustive minimum of the per-slot objective over a (lambda, Q, Pt) grid.

    ``re_term``, ``de`` and ``dly`` are indexed ``[lambda, Q]``; the Pt arrays are
    one-dimensional.  Returns ``(flat_index, objective, n_feasible, n_trans,
    n_delay, n_power)`` where the last three count points violating the
    transmit-delay cap, the end-to-end delay cap and the power budget.  Ties go
    to the first point in C order, i.e. lexicographic (lambda, Q, Pt).
    """
    re_term = np.asarray(re_term, dtype=float)
    de = np.asarray(de, dtype=float)
    dly = np.asarray(dly, dtype=float)
    rc_term = np.asarray(rc_term, dtype=float)
    dc = np.asarray(dc, dtype=float)
    ptot = np.asarray(ptot, dtype=float)
    tsend = np.asarray(tsend, dtype=float)
    nl, nq = re_term.shape
    npt = rc_term.shape[0]

    obj = xp * (re_term[:, :, None] - rc_term[None, None, :]) + V * (
        de[:, :, None] + rho1 * dc[None, None, :] + rho2 * ptot[None, None, :]
    )
    ok_trans = np.broadcast_to((tsend <= d_max_trans)[None, None, :], obj.shape)
    ok_delay = dly[:, :, None] + tsend[None, None, :] <= d_max
    ok_power = np.broadcast_to((ptot <= p_max)[None, None, :], obj.shape)
    feas = ok_trans & ok_delay & ok_power
    n_feas = int(feas.sum())
    counts = (
        int(nl * nq * np.count_nonzero(~(tsend <= d_max_trans))),
        int(obj.size - ok_delay.sum()),
        int(nl * nq * np.count_nonzero(~(ptot <= p_max))),
    )
    if n_feas == 0:
        return -1, math.inf, 0, *counts
    masked = np.where(feas, obj, np.inf)
    idx = int(np.argmin(masked))
    return idx, float(masked.flat[idx]), n_feas, *counts
