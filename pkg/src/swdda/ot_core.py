"""Sliced Wasserstein discrepancy and exact optimal-transport oracles.

Measures here are equal-size uniform point clouds: an ``N x d`` tensor whose
rows carry weight ``1/N`` each. With equal sizes and uniform weights every
transport plan worth considering is a permutation, so the exact solver
enumerates assignments and the 1-D solver is a pair of sorts.
"""

import itertools
from dataclasses import dataclass
from enum import Enum
from typing import Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

MAX_EXACT_N = 8
_MIN_NORM = 1e-12


class CostKind(str, Enum):
    QUADRATIC = "quadratic"
    ABSOLUTE = "absolute"


@dataclass(frozen=True)
class ProjectionSet:
    directions: np.ndarray  # M x d, unit rows
    seed: int

    @property
    def count(self):
        return self.directions.shape[0]

    @property
    def dim(self):
        return self.directions.shape[1]


@dataclass(frozen=True)
class Coupling:
    assignment: Tuple[int, ...]  # source index i -> target index assignment[i]
    cost: float


def as_measure(points):
    """Validate and wrap an ``N x d`` point cloud as a tensor."""
    t = points if isinstance(points, Tensor) else Tensor(np.asarray(points, dtype=np.float64))
    if t.rows < 1:
        raise ShapeError("a measure needs at least one point")
    if not np.all(np.isfinite(t.data)):
        raise ValueError("measure coordinates must be finite")
    return t


def _paired(p1, p2):
    p1, p2 = as_measure(p1), as_measure(p2)
    if p1.shape != p2.shape:
        raise ShapeError(f"paired measures must share N and d: {p1.shape} vs {p2.shape}")
    return p1, p2


def sample_projections(count, dim, seed):
    """Draw ``count`` directions uniformly on the unit sphere in R^dim.

    Each direction is a normalised vector of iid standard normals; draws whose
    norm falls below 1e-12 are redrawn. Same seed, same directions.
    """
    if count < 1 or dim < 1:
        raise ValueError("need count >= 1 and dim >= 1")
    rng = np.random.default_rng(seed)
    dirs = rng.standard_normal((count, dim))
    norms = np.linalg.norm(dirs, axis=1)
    for m in np.flatnonzero(norms < _MIN_NORM):
        while norms[m] < _MIN_NORM:
            dirs[m] = rng.standard_normal(dim)
            norms[m] = np.linalg.norm(dirs[m])
    return ProjectionSet(dirs / norms[:, None], seed)


def project(points, dirs):
    """Project every point onto every direction: ``out[m, i] = <dir_m, x_i>``."""
    points = as_measure(points)
    directions = dirs.directions if isinstance(dirs, ProjectionSet) else np.asarray(dirs)
    if directions.shape[1] != points.cols:
        raise ShapeError(f"directions live in R^{directions.shape[1]}, points in R^{points.cols}")
    return ad.matmul(Tensor(directions), ad.transpose(points))


def _pair_cost(diff, cost):
    cost = CostKind(cost)
    return ad.square(diff) if cost is CostKind.QUADRATIC else ad.absolute(diff)


def wasserstein_1d(u, v, cost=CostKind.QUADRATIC):
    """Optimal transport cost between two equal-size 1-D samples.

    Sorting both samples and pairing by rank is optimal for any convex ground
    cost; the returned 1x1 tensor is the summed (not averaged) pair cost.
    """
    u, v = ad._as_tensor(u), ad._as_tensor(v)
    if u.rows != 1 or v.rows != 1:
        raise ShapeError("wasserstein_1d takes 1xN tensors")
    if u.cols != v.cols:
        raise ShapeError(f"length mismatch: {u.cols} vs {v.cols}")
    us = ad.gather(u, ad.sort_permutation(u))
    vs = ad.gather(v, ad.sort_permutation(v))
    return ad.total(_pair_cost(us - vs, cost))


def swd(p1, p2, dirs, cost=CostKind.QUADRATIC):
    """Sliced Wasserstein discrepancy summed over projections and samples.

    No 1/M or 1/N normalisation is applied. Gradients flow to both point
    clouds through the sort-gather; the sort order itself is treated as fixed.
    """
    p1, p2 = _paired(p1, p2)
    proj1 = project(p1, dirs)
    proj2 = project(p2, dirs)
    s1 = ad.gather_rows(proj1, ad.sort_permutation_rows(proj1))
    s2 = ad.gather_rows(proj2, ad.sort_permutation_rows(proj2))
    return ad.total(_pair_cost(s1 - s2, cost))


def _ground_cost_matrix(a, b, ground):
    diff = a[:, None, :] - b[None, :, :]
    sq = (diff ** 2).sum(axis=2)
    if ground == "sqeuclidean":
        return sq
    if ground == "euclidean":
        return np.sqrt(sq)
    raise ValueError(f"unknown ground cost {ground!r}")


def emd_exact(p1, p2, ground="sqeuclidean"):
    """Exact optimal assignment by enumerating all N! permutations.

    Permutations are visited in lexicographic order and only a strictly
    smaller cost replaces the incumbent, so ties go to the lexicographically
    smallest assignment. Validation oracle only: N is capped at 8.
    """
    a = np.asarray(p1.data if isinstance(p1, Tensor) else p1, dtype=np.float64)
    b = np.asarray(p2.data if isinstance(p2, Tensor) else p2, dtype=np.float64)
    if a.ndim == 1:
        a, b = a[:, None], b[:, None]
    if a.shape != b.shape:
        raise ShapeError(f"paired measures must share N and d: {a.shape} vs {b.shape}")
    n = a.shape[0]
    if n > MAX_EXACT_N:
        raise ValueError(f"emd_exact enumerates N! plans; N={n} exceeds {MAX_EXACT_N}")
    if n < 1:
        raise ShapeError("empty measure")
    C = _ground_cost_matrix(a, b, ground)
    rows = np.arange(n)
    best, best_cost = None, np.inf
    for perm in itertools.permutations(range(n)):
        c = C[rows, perm].sum()
        if c < best_cost:
            best, best_cost = perm, c
    return Coupling(tuple(int(i) for i in best), float(best_cost))


def monge_map_exists_check(p1, p2):
    """Whether a transport map (no mass splitting) exists between p1 and p2.

    For equal-size uniform measures every bijection pushes p1 onto p2, so the
    answer is always yes. Unequal sizes would need the relaxed plan formulation,
    which this module does not support.
    """
    n1 = np.shape(p1.data if isinstance(p1, Tensor) else p1)[0]
    n2 = np.shape(p2.data if isinstance(p2, Tensor) else p2)[0]
    if n1 != n2:
        raise ValueError(f"only equal-size uniform measures are supported ({n1} vs {n2})")
    return True
