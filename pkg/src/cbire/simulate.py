"""Pathwise simulation of two-type CBIRE-processes.

Given the environment, ``Y = e^{-xi} X`` is a time-inhomogeneous CBI whose
mechanism on a cell with frozen value ``k`` is ``e^{k} phi(e^{-k} .)``.
Written back in ``X = e^{k} Y`` this is the plain CBI with mechanisms
``(phi, psi)`` inside the cell, while ``X`` is multiplied by
``exp(xi(t_{j+1}) - xi(t_j))`` when the cell ends.  That is what the stepper
does, so no ``e^{+-xi}`` of a long path is ever formed.

One cell of length ``h`` is a Strang splitting

1. half step of the linear flow ``dX = -(b + M)^T X dt`` (exact; ``M`` is the
   jump compensator, entrywise nonnegative propagator under admissibility),
2. exact Feller step for ``c_i lam_i^2`` (Poisson number of exponential
   clusters), branching jumps at rate ``X_i m_i(R^2_+)``, and immigration
   ``h dt`` plus jumps at rate ``n(R^2_+)``,
3. second linear half step, then the environment multiplier.

Seeding: ``SeedSequence(seed).spawn(2)`` gives an environment stream (itself
split per path, see :mod:`cbire.environment`) and one stream for the
branching noise of the whole batch.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np

from .environment import EnvPath, beta, sample_path, seed_children, spawn_generators, stack_values
from .mechanisms import BranchingMechanism, ImmigrationMechanism, ModelSpec
from .moments import mat_exp
from .transport import EmpiricalMeasure

__all__ = [
    "Trajectory",
    "TrajectorySet",
    "CoupledSamples",
    "EmpiricalMeasure",
    "simulate_batch",
    "simulate_quenched",
    "simulate_annealed",
    "simulate_coupled",
    "sample_stationary",
    "split_seed",
]


def split_seed(seed) -> tuple[np.random.SeedSequence, np.random.SeedSequence]:
    env, noise = seed_children(seed, 2)
    return env, noise


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray  # (M+1, 2)
    env: EnvPath
    seed: object = None


@dataclass
class TrajectorySet:
    times: np.ndarray
    states: np.ndarray  # (P, M+1, 2)
    seed: object = None

    def at(self, t: float) -> np.ndarray:
        k = int(round(t / (self.times[1] - self.times[0])))
        if abs(self.times[k] - t) > 1e-9 * max(1.0, t):
            raise ValueError(f"{t} is not a recorded time")
        return self.states[:, k]

    def to_csv(self, path, header: str | None = None) -> None:
        with open(path, "w", newline="") as fh:
            if header:
                fh.write(f"# {header}\n")
            w = csv.writer(fh)
            w.writerow(["path", "t", "X1", "X2"])
            for p in range(self.states.shape[0]):
                for t, s in zip(self.times, self.states[p]):
                    w.writerow([p, repr(float(t)), repr(float(s[0])), repr(float(s[1]))])


@dataclass
class CoupledSamples:
    """Per-path coupled endpoints; ``sigma1 = eta0 + gamma0 + gamma1`` etc."""

    sigma1: np.ndarray
    sigma2: np.ndarray
    eta0: np.ndarray
    gamma0: np.ndarray
    gamma1: np.ndarray
    gamma2: np.ndarray
    seed: object = None

    def __len__(self) -> int:
        return len(self.sigma1)

    def to_csv(self, path, header: str | None = None) -> None:
        with open(path, "w", newline="") as fh:
            if header:
                fh.write(f"# {header}\n")
            w = csv.writer(fh)
            w.writerow(["path", "sigma1_1", "sigma1_2", "sigma2_1", "sigma2_2"])
            for p, (s1, s2) in enumerate(zip(self.sigma1, self.sigma2)):
                w.writerow([p] + [repr(float(v)) for v in (*s1, *s2)])


def _add_jumps(X, rates, measure, rng):
    # compound Poisson increment with per-entry intensity ``rates``
    counts = rng.poisson(rates)
    total = int(counts.sum())
    if total == 0:
        return
    draws = measure.sample(rng, total)
    owner = np.repeat(np.arange(counts.size), counts.ravel())
    flat = X.reshape(-1, 2)
    flat[:, 0] += np.bincount(owner, weights=draws[:, 0], minlength=counts.size)
    flat[:, 1] += np.bincount(owner, weights=draws[:, 1], minlength=counts.size)


def simulate_batch(
    xi: np.ndarray,
    dt: float,
    x0: np.ndarray,
    mech: BranchingMechanism,
    imm: ImmigrationMechanism,
    immigrate: np.ndarray,
    rng: np.random.Generator,
    record: np.ndarray | None = None,
) -> np.ndarray:
    """Vectorised stepper.

    ``xi`` is ``(P, N+1)``, ``x0`` is ``(P, S, 2)`` (``S`` processes sharing
    each environment row), ``immigrate`` is a length-``S`` mask selecting
    which processes receive immigration.  Returns states at the grid indices
    in ``record`` (default: all), shape ``(len(record), P, S, 2)``.
    """
    xi = np.atleast_2d(xi)
    n_cells = xi.shape[1] - 1
    X = np.array(x0, dtype=float)
    P, S, _ = X.shape
    immigrate = np.asarray(immigrate, dtype=bool)
    record = np.arange(n_cells + 1) if record is None else np.asarray(record)
    slot = {int(k): i for i, k in enumerate(record)}
    out = np.empty((len(record), P, S, 2))
    if 0 in slot:
        out[slot[0]] = X

    A = mech.b + mech.compensator
    half = mat_exp(A, 0.5 * dt)
    if np.any(half < -1e-15):
        raise ValueError("linear propagator has negative entries; mechanism is not admissible")
    half = np.clip(half, 0.0, None)
    mult = np.exp(np.diff(xi, axis=1))
    masses = [m.total_mass for m in mech.measures]
    n_mass = imm.n.total_mass
    c = mech.c
    has_imm = bool(immigrate.any()) and not imm.is_zero

    rate_hint = dt * (max(masses) * float(np.max(X, initial=0.0)) + n_mass)
    if rate_hint > 0.1:
        warnings.warn(f"dt * max jump rate = {rate_hint:.3g} > 0.1; consider a smaller step", RuntimeWarning,
                      stacklevel=2)

    for j in range(n_cells):
        X = X @ half
        for i in range(2):
            if c[i] > 0:
                scale = c[i] * dt
                X[..., i] = rng.gamma(rng.poisson(X[..., i] / scale), scale)
        for i in range(2):
            if masses[i] > 0:
                _add_jumps(X, X[..., i] * masses[i] * dt, mech.measures[i], rng)
        if has_imm:
            X[:, immigrate] += imm.h * dt
            if n_mass > 0:
                sub = X[:, immigrate]
                _add_jumps(sub, np.full(sub.shape[:2], n_mass * dt), imm.n, rng)
                X[:, immigrate] = sub
        X = X @ half
        np.maximum(X, 0.0, out=X)
        X *= mult[:, j, None, None]
        if j + 1 in slot:
            out[slot[j + 1]] = X
    return out


def simulate_quenched(path: EnvPath, mech: BranchingMechanism, imm: ImmigrationMechanism, x, t: float,
                      rng: np.random.Generator) -> Trajectory:
    """One trajectory of ``X`` on the grid of ``path`` restricted to ``[0, t]``."""
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise ValueError("initial state must be nonnegative")
    k = path.index_of(t)
    states = simulate_batch(path.values[None, : k + 1], path.dt, x[None, None, :], mech, imm, [True], rng)
    return Trajectory(path.times[: k + 1], states[:, 0, 0, :], path)


def _environment_rows(model: ModelSpec, horizon: float, dt: float, n: int, env_seed) -> tuple[np.ndarray, float]:
    env = model.environment
    if env.is_deterministic:
        p = sample_path(env, horizon, dt, np.random.default_rng(0))
        return np.broadcast_to(p.values, (n, len(p.values))), p.dt
    paths = [sample_path(env, horizon, dt, g) for g in spawn_generators(env_seed, n)]
    return stack_values(paths), paths[0].dt


def simulate_annealed(model: ModelSpec, x, t: float, n_paths: int, dt: float, seed,
                      record_times=None) -> TrajectorySet:
    """Independent trajectories, each under a fresh environment path."""
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise ValueError("initial state must be nonnegative")
    env_seed, noise_seed = split_seed(seed)
    xi, step = _environment_rows(model, t, dt, n_paths, env_seed)
    times = np.linspace(0.0, t, xi.shape[1])
    record = None
    if record_times is not None:
        record = np.array(sorted({int(round(s / step)) for s in record_times}))
        times = times[record]
    x0 = np.broadcast_to(x, (n_paths, 1, 2))
    states = simulate_batch(xi, step, x0, model.branching, model.immigration, [True],
                            np.random.default_rng(noise_seed), record)
    return TrajectorySet(times, np.transpose(states[:, :, 0, :], (1, 0, 2)), seed)


def simulate_coupled(model: ModelSpec, x, y, t: float, n_paths: int, dt: float, seed) -> CoupledSamples:
    """Three-part branching coupling plus shared immigration, one environment per path."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if np.any(x < 0) or np.any(y < 0):
        raise ValueError("initial states must be nonnegative")
    pos = np.clip(x - y, 0.0, None)
    neg = np.clip(y - x, 0.0, None)
    low = x - pos
    env_seed, noise_seed = split_seed(seed)
    xi, step = _environment_rows(model, t, dt, n_paths, env_seed)
    starts = np.stack([np.zeros(2), low, pos, neg])  # eta0, gamma0, gamma1, gamma2
    x0 = np.broadcast_to(starts, (n_paths, 4, 2))
    end = simulate_batch(xi, step, x0, model.branching, model.immigration, [True, False, False, False],
                         np.random.default_rng(noise_seed), record=[xi.shape[1] - 1])[0]
    eta0, g0, g1, g2 = (end[:, i] for i in range(4))
    return CoupledSamples(eta0 + g0 + g1, eta0 + g0 + g2, eta0, g0, g1, g2, seed)


def sample_stationary(model: ModelSpec, burn_in: float, n_samples: int, thinning: float, dt: float, seed,
                      x0=None, n_chains: int = 1) -> EmpiricalMeasure:
    """States of a long annealed run, taken every ``thinning`` after ``burn_in``.

    With ``n_chains > 1`` several independent chains run side by side and each
    contributes ``ceil(n_samples / n_chains)`` states; the first ``n_samples``
    (chain-major order) are returned.
    """
    if n_samples < 1 or n_chains < 1:
        raise ValueError("n_samples and n_chains must be positive")
    if not thinning > 0 or burn_in < 0:
        raise ValueError("thinning must be positive and burn_in nonnegative")
    b = model.branching.b
    tr = np.trace(b)
    delta = tr**2 - 4 * np.linalg.det(b)
    rho = 0.5 * (tr - np.sqrt(max(delta, 0.0))) - beta(model.environment)
    if rho > 0 and burn_in < 5.0 / rho:
        warnings.warn(f"burn_in {burn_in} < 5/rho = {5.0 / rho:.3g}", RuntimeWarning, stacklevel=2)
    per_chain = -(-n_samples // n_chains)
    stride = max(1, int(round(thinning / dt)))
    first = int(round(burn_in / dt))
    n_cells = first + stride * (per_chain - 1)
    horizon = max(n_cells, 1) * dt
    env_seed, noise_seed = split_seed(seed)
    xi, _ = _environment_rows(model, horizon, dt, n_chains, env_seed)
    x0 = np.zeros(2) if x0 is None else np.asarray(x0, dtype=float)
    record = first + stride * np.arange(per_chain)
    states = simulate_batch(xi, dt, np.broadcast_to(x0, (n_chains, 1, 2)), model.branching, model.immigration,
                            [True], np.random.default_rng(noise_seed), record)
    pts = np.transpose(states[:, :, 0, :], (1, 0, 2)).reshape(-1, 2)[:n_samples]
    return EmpiricalMeasure(pts)
