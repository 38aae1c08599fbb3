"""Shapiro-Wilk, Mann-Whitney U, Kruskal-Wallis and one-way ANOVA."""
from __future__ import annotations

import math

import numpy as np

from .special import chi2_sf, f_sf, norm_ppf, norm_sf


def rankdata(values):
    """Midranks (1-based), ties share the average rank."""
    v = np.asarray(values, dtype=float).ravel()
    order = np.argsort(v, kind="mergesort")
    sv = v[order]
    ranks = np.empty(len(v))
    i = 0
    n = len(v)
    while i < n:
        j = i
        while j + 1 < n and sv[j + 1] == sv[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def _tie_sum(values):
    _, counts = np.unique(np.asarray(values, dtype=float), return_counts=True)
    return float(np.sum(counts.astype(float) ** 3 - counts))


def _poly(coefs, x):
    out = 0.0
    for c in reversed(coefs):
        out = out * x + c
    return out


_C1 = (0.0, 0.221157, -0.147981, -2.07119, 4.434685, -2.706056)
_C2 = (0.0, 0.042981, -0.293762, -1.752461, 5.682633, -3.582633)
_C3 = (0.544, -0.39978, 0.025054, -6.714e-4)
_C4 = (1.3822, -0.77857, 0.062767, -0.0020322)
_C5 = (-1.5861, -0.31082, -0.083751, 0.0038915)
_C6 = (-0.4803, -0.082676, 0.0030302)
_G = (-2.273, 0.459)


def shapiro_coefficients(n):
    """Royston's approximation to the Shapiro-Wilk weights (antisymmetric)."""
    half = n // 2
    a = np.zeros(n)
    if n == 3:
        a[0] = math.sqrt(0.5)
    else:
        an25 = n + 0.25
        m = np.array([norm_ppf((i - 0.375) / an25) for i in range(1, half + 1)])
        summ2 = 2.0 * float(np.sum(m * m))
        ssumm2 = math.sqrt(summ2)
        rsn = 1.0 / math.sqrt(n)
        a1 = _poly(_C1, rsn) - m[0] / ssumm2
        if n > 5:
            a2 = -m[1] / ssumm2 + _poly(_C2, rsn)
            fac = math.sqrt((summ2 - 2.0 * m[0] ** 2 - 2.0 * m[1] ** 2) / (1.0 - 2.0 * a1 ** 2 - 2.0 * a2 ** 2))
            a[1] = a2
            first = 2
        else:
            fac = math.sqrt((summ2 - 2.0 * m[0] ** 2) / (1.0 - 2.0 * a1 ** 2))
            first = 1
        a[0] = a1
        for i in range(first, half):
            a[i] = -m[i] / fac
    # a[i] weights x_(n-i) - x_(i+1)
    return a[:half]


def shapiro_wilk(sample):
    """(W, p) for 3 <= n <= 50 using Royston's normalizing transformation."""
    x = np.sort(np.asarray(sample, dtype=float).ravel())
    n = len(x)
    if not 3 <= n <= 50:
        raise ValueError(f"Shapiro-Wilk needs 3 <= n <= 50, got n={n}")
    rng = x[-1] - x[0]
    if rng <= 0:
        raise ValueError("Shapiro-Wilk undefined for a constant sample")
    a = shapiro_coefficients(n)
    half = n // 2
    num = float(np.sum(a * (x[::-1][:half] - x[:half])))
    ssq = float(np.sum((x - x.mean()) ** 2))
    w = min(num * num / ssq, 1.0)
    if n == 3:
        p = (6.0 / math.pi) * (math.asin(math.sqrt(w)) - math.pi / 3.0)
        return w, max(p, 0.0)
    y = math.log(1.0 - w) if w < 1.0 else -math.inf
    if n <= 11:
        gamma = _poly(_G, n)
        if y >= gamma:
            return w, 1e-99
        y = -math.log(gamma - y)
        mean = _poly(_C3, n)
        sd = math.exp(_poly(_C4, n))
    else:
        xx = math.log(n)
        mean = _poly(_C5, xx)
        sd = math.exp(_poly(_C6, xx))
    if y == -math.inf:
        return w, 1.0
    return w, norm_sf((y - mean) / sd)


def mann_whitney_u(a, b):
    """U statistic of ``a`` and the two-sided p-value.

    Normal approximation with tie-corrected variance and a 0.5 continuity
    correction.
    """
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    n1, n2 = len(a), len(b)
    if n1 == 0 or n2 == 0:
        raise ValueError("Mann-Whitney U needs two non-empty samples")
    both = np.concatenate([a, b])
    ranks = rankdata(both)
    u = float(ranks[:n1].sum() - n1 * (n1 + 1) / 2.0)
    n = n1 + n2
    mu = n1 * n2 / 2.0
    var = n1 * n2 / 12.0 * ((n + 1) - _tie_sum(both) / (n * (n - 1))) if n > 1 else 0.0
    if var <= 0:
        return u, 1.0
    z = (abs(u - mu) - 0.5) / math.sqrt(var)
    return u, min(1.0, 2.0 * norm_sf(max(z, 0.0)))


def kruskal_wallis(groups):
    """(H, p): tie-corrected rank statistic, chi-square with k - 1 df."""
    groups = [np.asarray(g, dtype=float).ravel() for g in groups]
    if len(groups) < 2:
        raise ValueError("Kruskal-Wallis needs at least two groups")
    if any(len(g) == 0 for g in groups):
        raise ValueError("Kruskal-Wallis groups must be non-empty")
    both = np.concatenate(groups)
    n = len(both)
    ties = 1.0 - _tie_sum(both) / (n ** 3 - n)
    if ties <= 0:
        raise ValueError("Kruskal-Wallis undefined when all values are identical")
    ranks = rankdata(both)
    h = 0.0
    pos = 0
    for g in groups:
        r = ranks[pos:pos + len(g)].sum()
        h += r * r / len(g)
        pos += len(g)
    h = 12.0 / (n * (n + 1)) * h - 3.0 * (n + 1)
    h /= ties
    return h, chi2_sf(h, len(groups) - 1)


def anova_oneway(groups):
    """(F, p) for the classic one-way ANOVA."""
    groups = [np.asarray(g, dtype=float).ravel() for g in groups]
    if len(groups) < 2:
        raise ValueError("ANOVA needs at least two groups")
    if any(len(g) < 2 for g in groups):
        raise ValueError("ANOVA needs at least two values per group")
    allv = np.concatenate(groups)
    grand = allv.mean()
    k, n = len(groups), len(allv)
    ssb = float(sum(len(g) * (g.mean() - grand) ** 2 for g in groups))
    ssw = float(sum(((g - g.mean()) ** 2).sum() for g in groups))
    if ssw <= 0:
        raise ValueError("ANOVA undefined with zero within-group variance")
    f = (ssb / (k - 1)) / (ssw / (n - k))
    return f, f_sf(f, k - 1, n - k)
