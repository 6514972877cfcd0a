"""Independent reference implementations used only by the tests."""
from __future__ import annotations

import itertools

import numpy as np


def riemann_fraction_above(times, values, start, end, threshold=500.0, step=1e-4, chunk=2_000_000):
    """Midpoint-rule share of [start, end] with interpolated value >= threshold."""
    n = int(round((end - start) / step))
    h = (end - start) / n
    hits = 0
    for lo in range(0, n, chunk):
        k = np.arange(lo, min(n, lo + chunk))
        t = start + (k + 0.5) * h
        hits += int(np.count_nonzero(np.interp(t, times, values) >= threshold))
    return hits / n


def random_series(rng, n_knots=7, span=365.0, lo=300.0, hi=700.0):
    inner = np.sort(rng.uniform(0, span, size=n_knots - 2))
    times = np.r_[0.0, inner, span]
    while np.any(np.diff(times) <= 1e-3):
        inner = np.sort(rng.uniform(0, span, size=n_knots - 2))
        times = np.r_[0.0, inner, span]
    return times, rng.uniform(lo, hi, size=n_knots)


def ols(z, y):
    """Plain least squares through numpy's SVD-based solver."""
    return np.linalg.lstsq(z, y, rcond=None)[0]


def brute_force_two_stage(env: dict) -> dict:
    """Value of every deterministic policy; returns the best stage-1 action per state.

    Enumerates (a1 for each s1) x (a2 for each (s1, a1, s2)) and scores each
    policy by its expected total reward.
    """
    actions = env["actions"]
    a1s = actions["stage1"] if isinstance(actions, dict) else actions
    a2s = actions.get("stage2", a1s) if isinstance(actions, dict) else actions
    init = env["initial"]
    if not isinstance(init, dict):
        init = {s: 1.0 / len(init) for s in init}
    r2 = env.get("reward2")
    hist = r2 is not None and isinstance(next(iter(next(iter(r2.values())).values())), dict)

    def reward2(s1, a1, s2, a2):
        return r2[s1][a1][s2][a2] if hist else r2[s2][a2]

    def nxt(s1, a1):
        tr = env.get("transition")
        return {s1: 1.0} if tr is None else tr[s1][a1]

    best = {}
    for s1 in init:
        top = -np.inf
        arg = None
        for a1 in a1s:
            if r2 is None:
                val = env["reward1"][s1][a1]
            else:
                succ = list(nxt(s1, a1).items())
                val = -np.inf
                for plan in itertools.product(a2s, repeat=len(succ)):
                    v = env["reward1"][s1][a1] + sum(p * reward2(s1, a1, s2, a2) for (s2, p), a2 in zip(succ, plan))
                    val = max(val, v)
            if val > top:
                top, arg = val, a1
        best[s1] = (arg, top)
    return best
