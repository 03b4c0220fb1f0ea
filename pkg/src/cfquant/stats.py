"""Hypothesis-test primitives used by the map and evaluation stages.

p-values come from the regularized incomplete beta function evaluated by
Lentz continued fractions, so the package needs no external stats library;
the test suite validates against tabulated values and direct-formula
oracles. Voxels where every group has zero variance get p = 1 by
convention (no evidence under a degenerate null).
"""

from __future__ import annotations

import numpy as np

from .errors import AllTies

_MAX_CF_ITER = 300
_CF_EPS = 1e-15
_TINY = 1e-300


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta (Lentz's method)."""
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _TINY:
        d = _TINY
    d = 1.0 / d
    h = d
    for m in range(1, _MAX_CF_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _TINY:
            d = _TINY
        c = 1.0 + aa / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _TINY:
            d = _TINY
        c = 1.0 + aa / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _CF_EPS:
            return h
    return h


def _lgamma(x: float) -> float:
    import math
    return math.lgamma(x)


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta function I_x(a, b)."""
    import math
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (_lgamma(a + b) - _lgamma(a) - _lgamma(b)
                + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_sf_two_sided(t: float, df: float) -> float:
    """Two-sided p-value of a t statistic."""
    if df <= 0:
        return 1.0
    x = df / (df + t * t)
    return betainc(df / 2.0, 0.5, x)


def f_sf(f: float, df1: float, df2: float) -> float:
    """Upper-tail p-value of an F statistic."""
    if f <= 0:
        return 1.0
    x = df2 / (df2 + df1 * f)
    return betainc(df2 / 2.0, df1 / 2.0, x)


def welch_t(a: np.ndarray, b: np.ndarray, axis: int = 0):
    """Welch two-sample t statistic and Satterthwaite df along ``axis``.

    Positions where both group variances are zero get t = 0, df = 1
    (p = 1 under the package convention).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    n1, n2 = a.shape[axis], b.shape[axis]
    if n1 < 2 or n2 < 2:
        raise ValueError("welch_t needs >= 2 samples per group")
    m1, m2 = a.mean(axis=axis), b.mean(axis=axis)
    v1 = a.var(axis=axis, ddof=1)
    v2 = b.var(axis=axis, ddof=1)
    se2 = v1 / n1 + v2 / n2
    degenerate = se2 == 0
    safe = np.where(degenerate, 1.0, se2)
    t = np.where(degenerate, 0.0, (m1 - m2) / np.sqrt(safe))
    df_num = safe ** 2
    df_den = (v1 / n1) ** 2 / (n1 - 1) + (v2 / n2) ** 2 / (n2 - 1)
    df = np.where(degenerate, 1.0, df_num / np.where(df_den == 0, 1.0, df_den))
    return t, df


def welch_t_p(a: np.ndarray, b: np.ndarray, axis: int = 0) -> np.ndarray:
    t, df = welch_t(a, b, axis=axis)
    t = np.atleast_1d(t)
    df = np.atleast_1d(df)
    p = np.array([t_sf_two_sided(float(ti), float(di)) for ti, di in zip(t.ravel(), df.ravel())])
    return p.reshape(t.shape)


def anova_f(groups: list, axis: int = 0):
    """One-way ANOVA F statistic with (df1, df2) along ``axis``.

    Positions with zero within-group variance get F = 0 (p = 1 convention).
    """
    if len(groups) < 3:
        raise ValueError("anova_f needs >= 3 groups")
    groups = [np.asarray(g, dtype=np.float64) for g in groups]
    ns = [g.shape[axis] for g in groups]
    if any(n < 2 for n in ns):
        raise ValueError("anova_f needs >= 2 samples per group")
    n_total = sum(ns)
    k = len(groups)
    grand = sum(g.sum(axis=axis) for g in groups) / n_total
    ss_between = sum(n * (g.mean(axis=axis) - grand) ** 2 for n, g in zip(ns, groups))
    ss_within = sum(((g - np.expand_dims(g.mean(axis=axis), axis)) ** 2).sum(axis=axis) for g in groups)
    df1, df2 = k - 1, n_total - k
    degenerate = ss_within == 0
    f = np.where(degenerate, 0.0, (ss_between / df1) / np.where(degenerate, 1.0, ss_within / df2))
    return f, df1, df2


def anova_p(groups: list, axis: int = 0) -> np.ndarray:
    f, df1, df2 = anova_f(groups, axis=axis)
    f = np.atleast_1d(f)
    p = np.array([f_sf(float(fi), df1, df2) for fi in f.ravel()])
    return p.reshape(f.shape)


def _signed_ranks(diffs: np.ndarray):
    """Average ranks of |diffs| (doubled so ties stay integral)."""
    mags = np.abs(diffs)
    order = np.argsort(mags, kind="stable")
    ranks2 = np.empty(len(mags), dtype=np.int64)
    sorted_mags = mags[order]
    i = 0
    while i < len(mags):
        j = i
        while j + 1 < len(mags) and sorted_mags[j + 1] == sorted_mags[i]:
            j += 1
        # average rank of positions i..j (1-based), times two
        avg2 = (i + 1) + (j + 1)
        ranks2[order[i:j + 1]] = avg2
        i = j + 1
    return ranks2


def wilcoxon_signed_rank(a, b, alternative: str = "two-sided", exact_limit: int = 20) -> float:
    """Wilcoxon signed-rank p-value for paired samples.

    Zero differences are dropped. Exact null distribution (full sign
    enumeration via subset-sum counting) up to ``exact_limit`` non-zero
    pairs; normal approximation with tie correction beyond. Raises AllTies
    when every pair is tied.
    """
    if alternative not in ("two-sided", "greater", "less"):
        raise ValueError(f"bad alternative {alternative}")
    diffs = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    diffs = diffs[diffs != 0]
    n = diffs.size
    if n == 0:
        raise AllTies("all paired differences are zero")
    ranks2 = _signed_ranks(diffs)
    w_plus2 = int(ranks2[diffs > 0].sum())
    total2 = int(ranks2.sum())
    if n <= exact_limit:
        # distribution of doubled W+ over all 2^n sign assignments
        counts = np.zeros(total2 + 1, dtype=np.float64)
        counts[0] = 1.0
        for r in ranks2:
            shifted = np.zeros_like(counts)
            shifted[r:] = counts[:counts.size - r]
            counts = counts + shifted
        denom = counts.sum()
        p_ge = counts[w_plus2:].sum() / denom
        p_le = counts[:w_plus2 + 1].sum() / denom
    else:
        mean = total2 / 2.0
        var = float(np.sum((ranks2 / 2.0) ** 2))   # Var(2 W+) = sum of r_i^2
        sd = np.sqrt(var)
        from math import erfc, sqrt
        # continuity-corrected normal tails on the doubled scale
        z_ge = ((w_plus2 - 1) - mean) / sd if sd else 0.0
        z_le = ((w_plus2 + 1) - mean) / sd if sd else 0.0
        p_ge = 0.5 * erfc(z_ge / sqrt(2.0))
        p_le = 1.0 - 0.5 * erfc(z_le / sqrt(2.0))
    if alternative == "greater":
        return float(min(1.0, p_ge))
    if alternative == "less":
        return float(min(1.0, p_le))
    return float(min(1.0, 2.0 * min(p_ge, p_le)))
