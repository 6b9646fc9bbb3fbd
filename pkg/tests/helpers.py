"""Independent oracles shared by the test modules."""

import itertools

import numpy as np


def rel_err(got, want):
    got, want = np.asarray(got, dtype=float), np.asarray(want, dtype=float)
    scale = max(np.abs(got).max(initial=0.0), np.abs(want).max(initial=0.0), 1e-12)
    return float(np.abs(got - want).max(initial=0.0) / scale)


def central_diff(f, x, h=1e-5):
    """Central differences of a plain numpy scalar function."""
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2 * h)
    return g


def swd_straight_line(p1, p2, dirs, cost="quadratic"):
    """Project, sort, sum; one direction at a time, no autodiff."""
    total = 0.0
    for theta in np.asarray(dirs):
        a = sorted(float(np.dot(theta, row)) for row in p1)
        b = sorted(float(np.dot(theta, row)) for row in p2)
        for x, y in zip(a, b):
            total += (x - y) ** 2 if cost == "quadratic" else abs(x - y)
    return total


def brute_force_assignment_costs(u, v, cost="quadratic"):
    """Cost of every permutation pairing u[i] with v[perm[i]] (1-D)."""
    out = {}
    for perm in itertools.permutations(range(len(u))):
        d = np.asarray(u) - np.asarray(v)[list(perm)]
        out[perm] = float(np.sum(d ** 2 if cost == "quadratic" else np.abs(d)))
    return out


def min_projected_gap(values):
    """Smallest gap between distinct entries of each row (tie detector)."""
    s = np.sort(np.atleast_2d(values), axis=1)
    if s.shape[1] < 2:
        return np.inf
    return float(np.diff(s, axis=1).min())
