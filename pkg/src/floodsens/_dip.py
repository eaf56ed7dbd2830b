"""Hartigan & Hartigan dip statistic for unimodality.

A port of the classic greatest-convex-minorant / least-concave-majorant
cycling algorithm (Applied Statistics AS 217).  The dip is the sup distance
between the empirical CDF and the closest unimodal CDF; it is at least
1/(2n) and at most 1/4.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def _dip_sorted(xs):
    n = xs.size
    if n < 2 or xs[n - 1] == xs[0]:
        return 0.0
    # 1-based working copies, as in the reference algorithm
    x = np.empty(n + 1)
    x[1:] = xs
    mn = np.zeros(n + 1, np.int64)
    mj = np.zeros(n + 1, np.int64)
    gcm = np.zeros(n + 1, np.int64)
    lcm = np.zeros(n + 1, np.int64)

    # index links for the convex minorant
    mn[1] = 1
    for j in range(2, n + 1):
        mn[j] = j - 1
        while True:
            mnj = mn[j]
            mnmnj = mn[mnj]
            if mnj == 1 or (x[j] - x[mnj]) * (mnj - mnmnj) < (x[mnj] - x[mnmnj]) * (j - mnj):
                break
            mn[j] = mnmnj
    # index links for the concave majorant
    mj[n] = n
    for k in range(n - 1, 0, -1):
        mj[k] = k + 1
        while True:
            mjk = mj[k]
            mjmjk = mj[mjk]
            if mjk == n or (x[k] - x[mjk]) * (mjk - mjmjk) < (x[mjk] - x[mjmjk]) * (k - mjk):
                break
            mj[k] = mjmjk

    dip = 1.0
    low, high = 1, n
    while True:
        ic = 1
        gcm[1] = high
        while gcm[ic] > low:
            ic += 1
            gcm[ic] = mn[gcm[ic - 1]]
        l_gcm = ic
        ic = 1
        lcm[1] = low
        while lcm[ic] < high:
            ic += 1
            lcm[ic] = mj[lcm[ic - 1]]
        l_lcm = ic

        # largest distance between the minorant and the majorant on [low, high]
        ig, ih = l_gcm, l_lcm
        ix, iv = l_gcm - 1, 2
        d = 0.0
        if l_gcm != 2 or l_lcm != 2:
            while True:
                gcmix = gcm[ix]
                lcmiv = lcm[iv]
                if gcmix > lcmiv:
                    gcmi1 = gcm[ix + 1]
                    dx = (lcmiv - gcmi1 + 1) - (x[lcmiv] - x[gcmi1]) * (gcmix - gcmi1) / (x[gcmix] - x[gcmi1])
                    iv += 1
                    if dx >= d:
                        d = dx
                        ig = ix + 1
                        ih = iv - 1
                else:
                    lcmiv1 = lcm[iv - 1]
                    dx = (x[gcmix] - x[lcmiv1]) * (lcmiv - lcmiv1) / (x[lcmiv] - x[lcmiv1]) - (gcmix - lcmiv1 - 1)
                    ix -= 1
                    if dx >= d:
                        d = dx
                        ig = ix + 1
                        ih = iv
                if ix < 1:
                    ix = 1
                if iv > l_lcm:
                    iv = l_lcm
                if gcm[ix] == lcm[iv]:
                    break
        else:
            d = 1.0
        if d < dip:
            break

        # dip of the convex minorant part
        dip_l = 0.0
        for j in range(ig, l_gcm):
            max_t = 1.0
            j0 = gcm[j + 1]
            jb = gcm[j]
            if jb - j0 > 1 and x[jb] != x[j0]:
                c = (jb - j0) / (x[jb] - x[j0])
                for jj in range(j0, jb + 1):
                    t = (jj - j0 + 1) - (x[jj] - x[j0]) * c
                    if t > max_t:
                        max_t = t
            if max_t > dip_l:
                dip_l = max_t
        # dip of the concave majorant part
        dip_u = 0.0
        for j in range(ih, l_lcm):
            max_t = 1.0
            jb = lcm[j]
            je = lcm[j + 1]
            if je - jb > 1 and x[je] != x[jb]:
                c = (je - jb) / (x[je] - x[jb])
                for jj in range(jb, je + 1):
                    t = (x[jj] - x[jb]) * c - (jj - jb - 1)
                    if t > max_t:
                        max_t = t
            if max_t > dip_u:
                dip_u = max_t
        dip = max(dip, dip_l, dip_u)

        if low == gcm[ig] and high == lcm[ih]:
            break
        low = gcm[ig]
        high = lcm[ih]
    return dip / (2.0 * n)


def dip_statistic(values) -> float:
    x = np.sort(np.asarray(values, dtype=np.float64))
    x = x[np.isfinite(x)]
    return float(_dip_sorted(x))


_NULL_CACHE: dict = {}


def dip_threshold(n: int, level: float = 0.95, n_sim: int = 1000, seed: int = 0) -> float:
    """Monte-Carlo quantile of the dip under a uniform null of size n."""
    key = (n, level, n_sim, seed)
    if key not in _NULL_CACHE:
        rng = np.random.default_rng(seed)
        sims = np.array([_dip_sorted(np.sort(rng.random(n))) for _ in range(n_sim)])
        _NULL_CACHE[key] = float(np.quantile(sims, level))
    return _NULL_CACHE[key]
