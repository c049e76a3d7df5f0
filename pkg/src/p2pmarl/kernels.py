"""Hot numeric kernels with a numba path and a pure-numpy path.

The dispatchers at the bottom pick the implementation once at import time
from :data:`p2pmarl._accel.USE_NUMBA`. Both paths are importable directly so
tests and the benchmark can compare them.
"""
import numpy as np

from ._accel import USE_NUMBA, njit

# Remaining quantity below this is treated as fully cleared.
CLEAR_TOL = 1e-9


def _clear_sorted_loop(bid_p, bid_q, off_p, off_q, tol):
    nb = bid_p.shape[0]
    no = off_p.shape[0]
    max_rounds = nb + no
    round_price = np.zeros(max_rounds)
    round_qty = np.zeros(max_rounds)
    bfill = np.zeros((max_rounds, nb))
    ofill = np.zeros((max_rounds, no))
    rb = bid_q.copy()
    ro = off_q.copy()
    ib = 0
    io = 0
    k = 0
    while True:
        while ib < nb and rb[ib] == 0.0:
            ib += 1
        while io < no and ro[io] == 0.0:
            io += 1
        if ib >= nb or io >= no:
            break
        pb = bid_p[ib]
        po = off_p[io]
        if pb < po:
            break
        eb = ib
        q_td = 0.0
        while eb < nb and bid_p[eb] == pb:
            q_td += rb[eb]
            eb += 1
        eo = io
        q_ts = 0.0
        while eo < no and off_p[eo] == po:
            q_ts += ro[eo]
            eo += 1
        q_k = min(q_td, q_ts)
        p_k = 0.5 * (pb + po)
        for i in range(ib, eb):
            f = rb[i] / q_td * q_k
            rem = rb[i] - f
            if rem < tol:
                f = rb[i]
                rem = 0.0
            bfill[k, i] = f
            rb[i] = rem
        for j in range(io, eo):
            f = ro[j] / q_ts * q_k
            rem = ro[j] - f
            if rem < tol:
                f = ro[j]
                rem = 0.0
            ofill[k, j] = f
            ro[j] = rem
        round_price[k] = p_k
        round_qty[k] = q_k
        k += 1
    return k, round_price, round_qty, bfill, ofill, rb, ro


clear_sorted_numba = njit(_clear_sorted_loop)


def clear_sorted_numpy(bid_p, bid_q, off_p, off_q, tol):
    """Vectorised twin of the numba clearing loop (one numpy pass per round)."""
    nb = bid_p.shape[0]
    no = off_p.shape[0]
    max_rounds = nb + no
    round_price = np.zeros(max_rounds)
    round_qty = np.zeros(max_rounds)
    bfill = np.zeros((max_rounds, nb))
    ofill = np.zeros((max_rounds, no))
    rb = np.array(bid_q, dtype=float)
    ro = np.array(off_q, dtype=float)
    k = 0
    while True:
        act_b = rb > 0.0
        act_o = ro > 0.0
        if not act_b.any() or not act_o.any():
            break
        pb = bid_p[np.argmax(act_b)]
        po = off_p[np.argmax(act_o)]
        if pb < po:
            break
        tier_b = act_b & (bid_p == pb)
        tier_o = act_o & (off_p == po)
        q_td = rb[tier_b].sum()
        q_ts = ro[tier_o].sum()
        q_k = min(q_td, q_ts)

        fb = np.where(tier_b, rb / q_td * q_k, 0.0)
        rem_b = rb - fb
        snap = tier_b & (rem_b < tol)
        fb[snap] = rb[snap]
        rem_b[snap] = 0.0

        fo = np.where(tier_o, ro / q_ts * q_k, 0.0)
        rem_o = ro - fo
        snap = tier_o & (rem_o < tol)
        fo[snap] = ro[snap]
        rem_o[snap] = 0.0

        bfill[k] = fb
        ofill[k] = fo
        rb = rem_b
        ro = rem_o
        round_price[k] = 0.5 * (pb + po)
        round_qty[k] = q_k
        k += 1
    return k, round_price, round_qty, bfill, ofill, rb, ro


def _gae_loop(rewards, values, dones, last_value, gamma, lam):
    n = rewards.shape[0]
    adv = np.zeros(n)
    running = 0.0
    for t in range(n - 1, -1, -1):
        nonterminal = 1.0 - dones[t]
        next_v = last_value if t == n - 1 else values[t + 1]
        delta = rewards[t] + gamma * next_v * nonterminal - values[t]
        running = delta + gamma * lam * nonterminal * running
        adv[t] = running
    return adv


gae_numba = njit(_gae_loop)


def gae_numpy(rewards, values, dones, last_value, gamma, lam):
    # the recursion is inherently sequential; deltas are vectorised
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    nonterminal = 1.0 - np.asarray(dones, dtype=float)
    next_v = np.append(values[1:], last_value)
    deltas = rewards + gamma * next_v * nonterminal - values
    adv = np.zeros_like(deltas)
    running = 0.0
    for t in range(deltas.shape[0] - 1, -1, -1):
        running = deltas[t] + gamma * lam * nonterminal[t] * running
        adv[t] = running
    return adv


if USE_NUMBA:
    _clear_impl = clear_sorted_numba
    _gae_impl = gae_numba
else:
    _clear_impl = clear_sorted_numpy
    _gae_impl = gae_numpy


def clear_sorted(bid_p, bid_q, off_p, off_q, tol=CLEAR_TOL):
    """Run the multi-round tiered double auction on pre-sorted books.

    ``bid_q`` and ``off_q`` are positive magnitudes. Bids must be sorted by
    descending price and offers by ascending price.

    Returns ``(n_rounds, round_price, round_qty, bid_fills, offer_fills,
    bid_remaining, offer_remaining)``; the per-round arrays are sized
    ``len(bids) + len(offers)`` and only the first ``n_rounds`` rows are used.
    """
    bid_p = np.ascontiguousarray(bid_p, dtype=np.float64)
    bid_q = np.ascontiguousarray(bid_q, dtype=np.float64)
    off_p = np.ascontiguousarray(off_p, dtype=np.float64)
    off_q = np.ascontiguousarray(off_q, dtype=np.float64)
    return _clear_impl(bid_p, bid_q, off_p, off_q, float(tol))


def gae(rewards, values, dones, last_value, gamma, lam):
    """Generalised advantage estimates for one trajectory segment."""
    return _gae_impl(
        np.ascontiguousarray(rewards, dtype=np.float64),
        np.ascontiguousarray(values, dtype=np.float64),
        np.ascontiguousarray(dones, dtype=np.float64),
        float(last_value),
        float(gamma),
        float(lam),
    )
