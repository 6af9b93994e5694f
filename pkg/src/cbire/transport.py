"""Exact L1-Wasserstein distances between equal-size point clouds.

The optimal plan between two uniform measures on ``n`` points each is a
permutation, so ``W1`` reduces to a linear assignment problem which
``scipy.optimize.linear_sum_assignment`` solves exactly.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

__all__ = [
    "EmpiricalMeasure",
    "MAX_EXACT",
    "MAX_BRUTEFORCE",
    "cost_matrix",
    "optimal_assignment",
    "w1_exact",
    "w1_with_se",
    "w1_bruteforce",
    "w_dtheta",
    "w1_to_point",
    "coupling_cost",
]

MAX_EXACT = 4096
MAX_BRUTEFORCE = 8


@dataclass
class EmpiricalMeasure:
    """Equal-weight point cloud in the positive quadrant."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1, 2)
        if len(pts) == 0:
            raise ValueError("empirical measure needs at least one point")
        if not np.all(np.isfinite(pts)) or np.any(pts < 0):
            raise ValueError("points must be finite and nonnegative")
        self.points = pts

    def __len__(self) -> int:
        return len(self.points)

    def mean_total_mass(self) -> tuple[float, float]:
        s = self.points.sum(axis=1)
        se = s.std(ddof=1) / np.sqrt(len(s)) if len(s) > 1 else 0.0
        return float(s.mean()), float(se)

    def to_csv(self, path, header: str | None = None) -> None:
        with open(path, "w", newline="") as fh:
            if header:
                fh.write(f"# {header}\n")
            w = csv.writer(fh)
            w.writerow(["x1", "x2"])
            for p in self.points:
                w.writerow([repr(float(p[0])), repr(float(p[1]))])

    @classmethod
    def from_csv(cls, path) -> "EmpiricalMeasure":
        rows = []
        with open(path) as fh:
            for row in csv.reader(line for line in fh if not line.startswith("#")):
                if row and row[0] != "x1":
                    rows.append([float(row[0]), float(row[1])])
        return cls(np.array(rows))


def _points(m) -> np.ndarray:
    return m.points if isinstance(m, EmpiricalMeasure) else EmpiricalMeasure(m).points


def cost_matrix(P, Q) -> np.ndarray:
    p, q = _points(P), _points(Q)
    return np.abs(p[:, None, :] - q[None, :, :]).sum(axis=-1)


def _check_sizes(p, q, limit):
    if len(p) != len(q):
        raise ValueError(f"point clouds differ in size ({len(p)} vs {len(q)})")
    if len(p) > limit:
        raise ValueError(f"n = {len(p)} exceeds the limit {limit}")


def optimal_assignment(P, Q) -> np.ndarray:
    """Permutation ``perm`` with ``P[i]`` matched to ``Q[perm[i]]``."""
    p, q = _points(P), _points(Q)
    _check_sizes(p, q, MAX_EXACT)
    _, cols = linear_sum_assignment(cost_matrix(p, q))
    return cols


def w1_with_se(P, Q) -> tuple[float, float]:
    """``W1`` together with the standard error of the matched costs."""
    p, q = _points(P), _points(Q)
    _check_sizes(p, q, MAX_EXACT)
    C = cost_matrix(p, q)
    rows, cols = linear_sum_assignment(C)
    costs = C[rows, cols]
    se = costs.std(ddof=1) / math.sqrt(len(costs)) if len(costs) > 1 else 0.0
    return float(math.fsum(costs) / len(costs)), float(se)


def w1_exact(P, Q) -> float:
    return w1_with_se(P, Q)[0]


def w1_bruteforce(P, Q) -> float:
    """Minimum over all ``n!`` matchings; test oracle for ``n <= 8``."""
    p, q = _points(P), _points(Q)
    _check_sizes(p, q, MAX_BRUTEFORCE)
    C = cost_matrix(p, q)
    n = len(p)
    idx = np.arange(n)
    best = min(math.fsum(C[idx, list(perm)]) for perm in itertools.permutations(range(n)))
    return float(best / n)


def w_dtheta(P, Q, theta: float) -> float:
    """Distance under the inflated metric ``(1 + theta) |x - y|_1``."""
    if theta < 0:
        raise ValueError("theta must be nonnegative")
    return (1.0 + theta) * w1_exact(P, Q)


def w1_to_point(x, Q) -> tuple[float, float]:
    """``W1(delta_x, Q)``: every coupling with a point mass is the product one."""
    q = _points(Q)
    d = np.abs(q - np.asarray(x, dtype=float)).sum(axis=1)
    se = d.std(ddof=1) / math.sqrt(len(d)) if len(d) > 1 else 0.0
    return float(d.mean()), float(se)


def coupling_cost(samples) -> tuple[float, float]:
    """Mean and standard error of ``|sigma1 - sigma2|_1`` over coupled draws."""
    s1 = np.asarray(samples.sigma1, dtype=float)
    s2 = np.asarray(samples.sigma2, dtype=float)
    if len(s1) == 0:
        raise ValueError("no samples")
    gap = np.abs(s1 - s2).sum(axis=1)
    se = gap.std(ddof=1) / math.sqrt(len(gap)) if len(gap) > 1 else 0.0
    return float(gap.mean()), float(se)
