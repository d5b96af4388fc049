"""Independent reference implementations used only by the tests.

Everything here is written the slow, obvious way so that it shares no code
path with the package.
"""
from __future__ import annotations

from datetime import datetime

import numpy as np

from actihist.profiles import CleaningConfig, RawProfile, validate_days


def runs_of_zeros(counts, min_len):
    """Brute-force scan: indices of zeros in maximal runs of length >= min_len.

    Missing values (NaN) end a run.
    """
    out = []
    i, n = 0, len(counts)
    while i < n:
        if counts[i] == 0:
            j = i
            while j < n and counts[j] == 0:
                j += 1
            if j - i >= min_len:
                out.extend(range(i, j))
            i = j
        else:
            i += 1
    return out


def tally_loop(values, edges):
    """Per-value binning loop; the last bin is closed on the right."""
    J = len(edges) - 1
    t = np.zeros(J)
    for v in values:
        for j in range(J):
            last = j == J - 1
            if edges[j] <= v < edges[j + 1] or (last and v == edges[j + 1]):
                t[j] += 1
                break
    return t


def de_boor(x, t, k, i):
    """Cox-de Boor recursion for the i-th B-spline of degree k on knots t."""
    if k == 0:
        return 1.0 if t[i] <= x < t[i + 1] else 0.0
    left = 0.0 if t[i + k] == t[i] else (x - t[i]) / (t[i + k] - t[i]) * de_boor(x, t, k - 1, i)
    right = 0.0
    if t[i + k + 1] != t[i + 1]:
        right = (t[i + k + 1] - x) / (t[i + k + 1] - t[i + 1]) * de_boor(x, t, k - 1, i + 1)
    return left + right


def pearson(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    ma, mb = sum(a) / len(a), sum(b) / len(b)
    num = sum((x - ma) * (y - mb) for x, y in zip(a, b))
    da = sum((x - ma) ** 2 for x in a) ** 0.5
    db = sum((y - mb) ** 2 for y in b) ** 0.5
    return num / (da * db)


def normal_equation_fit(X, y, S_list, lam):
    """Dense solve of (X'X + sum lam_k S_k) b = X'y."""
    A = X.T @ X + sum(l * S for l, S in zip(lam, S_list))
    return np.linalg.solve(A, X.T @ y)


def random_valid_profile(sid, rng, start=datetime(2024, 1, 1), missing_frac=0.2):
    """A cleaned profile that passes every rule, with random intensities.

    Days carry 700-1440 worn minutes of counts in [0, 15000] with a mean well
    above 150, and some minutes missing.
    """
    counts = np.full(7 * 1440, np.nan)
    for d in range(7):
        day = np.where(
            rng.random(1440) < 0.5,
            rng.integers(0, 100, 1440),
            rng.integers(100, 15001, 1440),
        ).astype(float)
        # occasionally land exactly on the cap and on bin edges
        edges = rng.integers(0, 1440, 5)
        day[edges[:2]] = 15000.0
        day[edges[2:]] = 8000.0
        drop = rng.random(1440) < missing_frac * rng.random()
        day[drop] = np.nan
        counts[d * 1440 : (d + 1) * 1440] = day
    raw = RawProfile(sid, start, counts)
    # wide bounds: every day passes the mean rule
    return validate_days(raw, CleaningConfig(), 1000.0, 1e9)
