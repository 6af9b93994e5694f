"""Levy environments with finitely many jump atoms.

The environment is ``xi(t) = a t + sigma W(t) + (compensated jumps)`` where
jumps with ``|z| <= 1`` are compensated by the exact linear drift
``-t * sum_{|z_k| <= 1} z_k rate_k``.

Seeding: a master seed is expanded with ``numpy.random.SeedSequence(seed)``
and ``.spawn(n)`` gives one independent stream per path; path ``i`` always
uses child ``i`` so results do not depend on how paths are scheduled.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

__all__ = [
    "EnvSpec",
    "EnvPath",
    "beta",
    "sample_path",
    "sample_paths",
    "stack_values",
    "spawn_generators",
    "seed_children",
    "verify_exp_moment",
]


@dataclass(frozen=True)
class EnvSpec:
    a: float = 0.0
    sigma: float = 0.0
    jump_sizes: np.ndarray = field(default_factory=lambda: np.zeros(0))
    jump_rates: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        z = np.array(self.jump_sizes, dtype=float).reshape(-1)
        r = np.array(self.jump_rates, dtype=float).reshape(-1)
        if z.shape != r.shape:
            raise ValueError("jump_sizes and jump_rates must have equal length")
        if self.sigma < 0 or not np.isfinite(self.sigma):
            raise ValueError("sigma must be finite and nonnegative")
        if not np.isfinite(self.a):
            raise ValueError("drift a must be finite")
        if np.any(z == 0) or not np.all(np.isfinite(z)):
            raise ValueError("jump sizes must be finite and nonzero")
        if np.any(~(r > 0)) or not np.all(np.isfinite(r)):
            raise ValueError("jump rates must be positive and finite")
        z.setflags(write=False)
        r.setflags(write=False)
        object.__setattr__(self, "a", float(self.a))
        object.__setattr__(self, "sigma", float(self.sigma))
        object.__setattr__(self, "jump_sizes", z)
        object.__setattr__(self, "jump_rates", r)

    @property
    def total_rate(self) -> float:
        return float(self.jump_rates.sum())

    @property
    def small_jump_compensator(self) -> float:
        small = np.abs(self.jump_sizes) <= 1.0
        return float(np.sum(self.jump_sizes[small] * self.jump_rates[small]))

    @property
    def mean_drift(self) -> float:
        """``E[xi(1)]``: small jumps are compensated and contribute nothing."""
        big = np.abs(self.jump_sizes) > 1.0
        return self.a + float(np.sum(self.jump_sizes[big] * self.jump_rates[big]))

    @property
    def is_deterministic(self) -> bool:
        return self.sigma == 0 and len(self.jump_sizes) == 0

    def to_dict(self) -> dict:
        return {
            "a": self.a,
            "sigma": self.sigma,
            "nu": [{"z": float(z), "rate": float(r)} for z, r in zip(self.jump_sizes, self.jump_rates)],
        }

    @classmethod
    def from_dict(cls, d: dict | None) -> "EnvSpec":
        if not d:
            return cls()
        nu = d.get("nu", [])
        return cls(
            a=d.get("a", 0.0),
            sigma=d.get("sigma", 0.0),
            jump_sizes=[j["z"] for j in nu],
            jump_rates=[j["rate"] for j in nu],
        )


@dataclass(frozen=True)
class EnvPath:
    """One environment trajectory on a uniform grid.

    ``values[k]`` includes every jump with time in ``(t_{k-1}, t_k]``.
    """

    times: np.ndarray
    values: np.ndarray
    jump_times: np.ndarray
    jump_sizes: np.ndarray

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    @property
    def n_cells(self) -> int:
        return len(self.times) - 1

    def index_of(self, t: float) -> int:
        """Grid index of time ``t``; ``t`` must sit on the grid."""
        k = int(round(t / self.dt))
        if k < 0 or k > self.n_cells or abs(self.times[k] - t) > 1e-9 * max(1.0, abs(t)):
            raise ValueError(f"time {t} is not a grid point of this path")
        return k

    def to_csv(self, path, header: str | None = None) -> None:
        with open(path, "w", newline="") as fh:
            if header:
                fh.write(f"# {header}\n")
            w = csv.writer(fh)
            w.writerow(["t", "xi"])
            for t, x in zip(self.times, self.values):
                w.writerow([repr(float(t)), repr(float(x))])

    @classmethod
    def constant(cls, value: float, horizon: float, dt: float) -> "EnvPath":
        """Path frozen at ``value`` (``value != 0`` breaks ``xi(0) = 0``; test use only)."""
        times = _grid(horizon, dt)
        return cls(times, np.full(len(times), float(value)), np.zeros(0), np.zeros(0))

    @classmethod
    def from_function(cls, f, horizon: float, dt: float) -> "EnvPath":
        times = _grid(horizon, dt)
        return cls(times, np.asarray([f(t) for t in times], dtype=float), np.zeros(0), np.zeros(0))


def _grid(horizon: float, dt: float) -> np.ndarray:
    if not horizon > 0 or not dt > 0:
        raise ValueError("horizon and dt must be positive")
    if dt > horizon * (1 + 1e-12):
        raise ValueError("dt must not exceed the horizon")
    m = max(1, int(round(horizon / dt)))
    return np.linspace(0.0, horizon, m + 1)


def beta(spec: EnvSpec) -> float:
    """Environment exponent with ``E exp(xi(t)) = exp(beta t)``."""
    z, r = spec.jump_sizes, spec.jump_rates
    small = np.abs(z) <= 1.0
    jumps = np.sum(r[small] * (np.expm1(z[small]) - z[small])) + np.sum(r[~small] * np.expm1(z[~small]))
    return spec.a + 0.5 * spec.sigma**2 + float(jumps)


def seed_children(seed, n: int) -> list[np.random.SeedSequence]:
    """First ``n`` children of ``seed``.

    ``SeedSequence.spawn`` advances an internal counter, so spawning twice
    from the same object gives different children; we always spawn from a
    fresh copy to make the result a pure function of the seed.
    """
    if isinstance(seed, np.random.SeedSequence):
        ss = np.random.SeedSequence(seed.entropy, spawn_key=seed.spawn_key, pool_size=seed.pool_size)
    else:
        ss = np.random.SeedSequence(seed)
    return ss.spawn(n)


def spawn_generators(seed, n: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in seed_children(seed, n)]


def sample_path(spec: EnvSpec, horizon: float, dt: float, rng: np.random.Generator) -> EnvPath:
    """Sample one path on the uniform grid ``0, dt, ..., horizon``.

    If ``horizon / dt`` is not an integer the step is shrunk to
    ``horizon / round(horizon / dt)``.
    """
    times = _grid(horizon, dt)
    values = (spec.a - spec.small_jump_compensator) * times
    if spec.sigma > 0:
        dw = rng.standard_normal(len(times) - 1) * np.sqrt(np.diff(times))
        values[1:] += spec.sigma * np.cumsum(dw)
    jt = np.zeros(0)
    jz = np.zeros(0)
    if spec.total_rate > 0:
        count = rng.poisson(spec.total_rate * horizon)
        if count:
            jt = np.sort(rng.uniform(0.0, horizon, count))
            # uniform() can return exactly 0.0; keep jump times inside (0, T]
            jt[jt <= 0.0] = np.nextafter(0.0, 1.0)
            jz = spec.jump_sizes[rng.choice(len(spec.jump_sizes), size=count, p=spec.jump_rates / spec.total_rate)]
            idx = np.searchsorted(times, jt, side="left")
            values += np.cumsum(np.bincount(idx, weights=jz, minlength=len(times)))
    values[0] = 0.0
    return EnvPath(times, values, jt, jz)


def sample_paths(spec: EnvSpec, horizon: float, dt: float, n: int, seed) -> list[EnvPath]:
    return [sample_path(spec, horizon, dt, g) for g in spawn_generators(seed, n)]


def stack_values(paths: Sequence[EnvPath]) -> np.ndarray:
    """Values of equally gridded paths as an ``(n_paths, n_times)`` array."""
    return np.vstack([p.values for p in paths])


def verify_exp_moment(spec: EnvSpec, t: float, n_paths: int, seed, dt: float | None = None):
    """Monte-Carlo check of ``E exp(xi(t)) = exp(beta t)``.

    Returns ``(estimate, target, standard_error)``.
    """
    if not t > 0:
        raise ValueError("t must be positive")
    if n_paths < 100:
        raise ValueError("need at least 100 paths")
    target = float(np.exp(beta(spec) * t))
    if spec.is_deterministic:
        return float(np.exp(spec.a * t)), target, 0.0
    paths = sample_paths(spec, t, dt or t / 10, n_paths, seed)
    e = np.exp(np.array([p.values[-1] for p in paths]))
    return float(e.mean()), target, float(e.std(ddof=1) / np.sqrt(n_paths))
