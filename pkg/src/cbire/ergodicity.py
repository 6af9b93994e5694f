"""Experiment harnesses for the ergodicity statements.

Every experiment is a deterministic function of the model, its parameters
and one master seed.  Sub-streams are obtained with
``SeedSequence(seed).spawn(k)`` in a fixed role order documented per
function.  Bound checks are one-sided with explicit statistical margins.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field

import numpy as np
import scipy

from . import __version__
from .cumulant import SolverOpts, check_condition1, check_domination, vbar_batch
from .environment import beta, sample_path, sample_paths, seed_children, verify_exp_moment
from .mechanisms import ModelSpec, ScalarMechanism
from .moments import mean_total_mass, pi, spectral
from .simulate import sample_stationary, simulate_annealed, simulate_coupled
from .transport import coupling_cost, w1_exact, w1_to_point, w1_with_se

__all__ = [
    "ExperimentReport",
    "first_moment_experiment",
    "coupling_bound_experiment",
    "wasserstein_decay_experiment",
    "tv_decay_experiment",
    "domination_experiment",
    "middle_window",
]


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _jsonable(v):
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return _jsonable(v.tolist())
    if isinstance(v, (np.bool_,)):
        return bool(v)
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, (float, np.floating)):
        f = float(v)
        return f if np.isfinite(f) else str(f)
    return v


@dataclass
class ExperimentReport:
    name: str
    model_hash: str
    seed: object
    params: dict
    columns: list
    records: list = field(default_factory=list)
    passed: bool = True
    message: str = ""
    summary: dict = field(default_factory=dict)
    runtime: float = 0.0

    def first_failure(self) -> dict | None:
        return next((r for r in self.records if not r.get("passed", True)), None)

    def to_dict(self) -> dict:
        return _jsonable({
            "experiment": self.name,
            "config_hash": self.model_hash,
            "seed": self.seed,
            "params": self.params,
            "passed": self.passed,
            "message": self.message,
            "summary": self.summary,
            "records": self.records,
            "runtime_s": self.runtime,
            "versions": {"cbire": __version__, "numpy": np.__version__, "scipy": scipy.__version__},
        })

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(f"# experiment={self.name} config_hash={self.model_hash} seed={self.seed}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.columns)
            for r in self.records:
                w.writerow([_fmt(r.get(c, "")) for c in self.columns])


def _seed_label(seed):
    return seed.entropy if isinstance(seed, np.random.SeedSequence) else seed


def _grid(time_grid) -> np.ndarray:
    g = np.asarray(time_grid, dtype=float).reshape(-1)
    if g.size == 0 or np.any(g < 0) or np.any(np.diff(g) <= 0):
        raise ValueError("time grid must be nonempty, nonnegative and strictly increasing")
    return g


def _snap(grid: np.ndarray, dt: float) -> None:
    k = np.round(grid / dt)
    if np.any(np.abs(k * dt - grid) > 1e-9 * np.maximum(1.0, grid)):
        raise ValueError("time grid points must be multiples of dt")


def middle_window(grid, frac: float = 0.6) -> np.ndarray:
    """Boolean mask of grid points in the central ``frac`` share of the time span."""
    g = np.asarray(grid, dtype=float)
    lo = g[0] + 0.5 * (1 - frac) * (g[-1] - g[0])
    hi = g[-1] - 0.5 * (1 - frac) * (g[-1] - g[0])
    tol = 1e-12 * max(1.0, g[-1])
    return (g >= lo - tol) & (g <= hi + tol)


def _finish(rep: ExperimentReport, start: float) -> ExperimentReport:
    rep.runtime = time.perf_counter() - start
    bad = rep.first_failure()
    if bad is not None and rep.passed:
        rep.passed = False
    if not rep.passed and not rep.message and bad is not None:
        rep.message = "first violated record: " + ", ".join(f"{k}={_fmt(v)}" for k, v in bad.items())
    return rep


def first_moment_experiment(model: ModelSpec, x, time_grid, n_paths: int, seed, dt: float = 0.01,
                            exp_moment_paths: int | None = None) -> ExperimentReport:
    """Annealed mean total mass against the exact first-moment formula.

    Seed roles: 0 simulation, 1 environment exponential moment.  Each time
    point also gets a Monte-Carlo check of ``E e^{xi(t)} = e^{beta t}``.
    """
    start = time.perf_counter()
    x = np.asarray(x, dtype=float)
    grid = _grid(time_grid)
    _snap(grid, dt)
    s_sim, s_env = seed_children(seed, 2)
    b, bt, imm = model.branching.b, beta(model.environment), model.immigration
    rep = ExperimentReport(
        "first-moment", model.config_hash(), _seed_label(seed),
        {"x": x, "time_grid": grid, "n_paths": n_paths, "dt": dt},
        ["kind", "t", "estimate", "se", "target", "tolerance", "passed"],
    )
    ts = simulate_annealed(model, x, float(grid[-1]), n_paths, dt, s_sim, record_times=grid)
    env_seeds = seed_children(s_env, len(grid))
    for k, t in enumerate(grid):
        mass = ts.states[:, k].sum(axis=1)
        est = float(mass.mean())
        se = float(mass.std(ddof=1) / np.sqrt(len(mass))) if len(mass) > 1 else 0.0
        target = mean_total_mass(b, bt, imm, x, float(t))
        tol = 3 * se + 1e-9 * max(1.0, abs(target))
        rep.records.append({"kind": "mean_total_mass", "t": float(t), "estimate": est, "se": se,
                            "target": target, "tolerance": tol, "passed": abs(est - target) <= tol})
        if t > 0:
            e, target_e, se_e = verify_exp_moment(model.environment, float(t), exp_moment_paths or max(n_paths, 100),
                                                  env_seeds[k], dt)
            tol_e = 3 * se_e + 1e-12 * target_e
            rep.records.append({"kind": "exp_moment", "t": float(t), "estimate": e, "se": se_e,
                                "target": target_e, "tolerance": tol_e, "passed": abs(e - target_e) <= tol_e})
    return _finish(rep, start)


def coupling_bound_experiment(model: ModelSpec, x, y, time_grid, n_paths: int, seed, dt: float = 0.01,
                              n_w1: int = 512) -> ExperimentReport:
    """Coupled gap against the upper moment bound, ensemble ``W1`` against the lower one.

    Seed roles: 0 coupled runs (one child per time point), 1 the two
    ensembles.  Both ensembles reuse one seed; ``E W1(P_n, Q_n) >= W1(P, Q)``
    holds for any joint law of the samples, so the lower check stays valid.
    """
    start = time.perf_counter()
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    grid = _grid(time_grid)
    _snap(grid, dt)
    s_cpl, s_ens = seed_children(seed, 2)
    b, bt = model.branching.b, beta(model.environment)
    rep = ExperimentReport(
        "coupling-bound", model.config_hash(), _seed_label(seed),
        {"x": x, "y": y, "time_grid": grid, "n_paths": n_paths, "dt": dt, "n_w1": n_w1},
        ["kind", "t", "estimate", "se", "bound", "passed"],
    )
    tmax = float(grid[-1])
    ex = simulate_annealed(model, x, tmax, n_w1, dt, s_ens, record_times=grid)
    ey = simulate_annealed(model, y, tmax, n_w1, dt, s_ens, record_times=grid)
    cpl_seeds = seed_children(s_cpl, len(grid))
    d = np.abs(x - y)
    for k, t in enumerate(grid):
        p = pi(b, bt, float(t))
        upper = float(d @ p)
        lower = float(abs((x - y) @ p))
        if t > 0:
            cs = simulate_coupled(model, x, y, float(t), n_paths, dt, cpl_seeds[k])
            cost, se = coupling_cost(cs)
        else:
            cost, se = float(d.sum()), 0.0
        rep.records.append({"kind": "coupling_upper", "t": float(t), "estimate": cost, "se": se, "bound": upper,
                            "passed": cost <= upper + 3 * se + 1e-9 * max(1.0, upper)})
        w, wse = w1_with_se(ex.states[:, k], ey.states[:, k])
        rep.records.append({"kind": "w1_lower", "t": float(t), "estimate": w, "se": wse, "bound": lower,
                            "passed": w >= lower - 3 * wse - 1e-9 * max(1.0, lower)})
    return _finish(rep, start)


def wasserstein_decay_experiment(model: ModelSpec, x, time_grid, n: int, seed, dt: float = 0.01,
                                 burn_in: float | None = None, thinning: float = 1.0, n_chains: int = 64,
                                 slope_tol: float = 0.15, stability_tol: float = 0.10,
                                 window: float = 0.6) -> ExperimentReport:
    """Exponential decay of ``W1(delta_x Q_t, mu)`` at the rate ``rho``.

    ``mu`` is approximated by ``2n`` stationary samples and ``delta_x Q_t`` by
    ``2n`` annealed runs.  Each point is estimated from the first ``n`` and
    from all ``2n`` samples; their gap is the bias allowance and must stay
    within ``stability_tol`` relative.  The fitted slope of ``log W1`` over
    the central ``window`` of the grid must not exceed ``-rho (1 - slope_tol)``.
    Seed roles: 0 stationary sample, 1 ensemble.
    """
    start = time.perf_counter()
    x = np.asarray(x, dtype=float)
    grid = _grid(time_grid)
    _snap(grid, dt)
    sd = spectral(model.branching.b, beta(model.environment))
    rho, theta = sd.rho, sd.theta
    if not rho > 0:
        raise ValueError("model is outside the ergodic regime (rho <= 0)")
    burn_in = 10.0 / rho if burn_in is None else burn_in
    s_mu, s_ens = seed_children(seed, 2)
    rep = ExperimentReport(
        "wasserstein-decay", model.config_hash(), _seed_label(seed),
        {"x": x, "time_grid": grid, "n": n, "dt": dt, "burn_in": burn_in, "thinning": thinning,
         "n_chains": n_chains, "slope_tol": slope_tol, "stability_tol": stability_tol, "window": window},
        ["t", "estimate", "se", "estimate_n", "bias_allowance", "bound", "tolerance", "stable", "passed"],
    )
    mu = sample_stationary(model, burn_in, 2 * n, thinning, dt, s_mu, n_chains=n_chains).points
    ens = simulate_annealed(model, x, float(grid[-1]), 2 * n, dt, s_ens, record_times=grid).states
    w0, se0 = w1_to_point(x, mu)
    w0_n, _ = w1_to_point(x, mu[:n])
    right0 = (1 + theta) * w0
    est = []
    for k, t in enumerate(grid):
        w2, se2 = w1_with_se(ens[:, k], mu)
        wn = w1_exact(ens[:n, k], mu[:n])
        bias = abs(wn - w2)
        decay = np.exp(-rho * t)
        bound = right0 * decay
        tol = 3 * np.hypot(se2, (1 + theta) * se0 * decay) + bias + (1 + theta) * abs(w0_n - w0) * decay
        stable = bias <= stability_tol * w2
        rep.records.append({"t": float(t), "estimate": w2, "se": se2, "estimate_n": wn, "bias_allowance": bias,
                            "bound": bound, "tolerance": tol, "stable": bool(stable),
                            "passed": bool(w2 <= bound + tol and stable)})
        est.append(w2)
    est = np.array(est)
    mask = middle_window(grid, window)
    slope = np.nan
    slope_ok = False
    if mask.sum() >= 2 and np.all(est[mask] > 0):
        slope = float(np.polyfit(grid[mask], np.log(est[mask]), 1)[0])
        slope_ok = slope <= -rho * (1 - slope_tol)
    rep.summary = {"rho": rho, "theta": theta, "lambda1": sd.lambda1, "beta": sd.beta, "case": sd.case_tag,
                   "w_dtheta_x_mu": right0, "w_dtheta_se": (1 + theta) * se0, "fitted_slope": slope,
                   "slope_threshold": -rho * (1 - slope_tol), "slope_ok": slope_ok,
                   "window": [float(grid[mask][0]), float(grid[mask][-1])] if mask.any() else []}
    if not slope_ok:
        rep.passed = False
        rep.message = f"fitted slope {slope:.4g} exceeds {-rho * (1 - slope_tol):.4g}"
    return _finish(rep, start)


def _monotone(values, ses, rel: float = 0.0) -> np.ndarray:
    ok = np.ones(len(values), dtype=bool)
    for k in range(1, len(values)):
        slack = 3 * np.hypot(ses[k], ses[k - 1]) + rel * abs(values[k - 1]) + 1e-12
        ok[k] = values[k] <= values[k - 1] + slack
    return ok


def tv_decay_experiment(model: ModelSpec, x, time_grid, n_paths: int, seed, dt: float = 0.01,
                        n_stationary: int = 256, burn_in: float | None = None, thinning: float = 1.0,
                        n_chains: int = 32, threshold: float = 0.05, grey_tol: float = 0.01,
                        opts: SolverOpts | None = None) -> ExperimentReport:
    """Total-variation bound ``2 E[1 - exp(-<|y - x|, vbar_{0,t}>)]`` with ``y ~ mu``.

    The expectation runs over environment paths and the stationary sample
    (product coupling with the point mass at ``x``).  The bound must be
    nonincreasing within noise and end below ``threshold``.
    Seed roles: 0 stationary sample, 1 environment paths.
    """
    start = time.perf_counter()
    x = np.asarray(x, dtype=float)
    grid = _grid(time_grid)
    _snap(grid, dt)
    if grid[0] <= 0:
        raise ValueError("time grid must be strictly positive for the extinction functional")
    s_mu, s_env = seed_children(seed, 2)
    rep = ExperimentReport(
        "tv-decay", model.config_hash(), _seed_label(seed),
        {"x": x, "time_grid": grid, "n_paths": n_paths, "dt": dt, "n_stationary": n_stationary,
         "thinning": thinning, "n_chains": n_chains, "threshold": threshold},
        ["t", "estimate", "se", "vbar1_mean", "vbar2_mean", "infinite_fraction", "passed"],
    )
    if model.immigration.is_zero:
        mu = np.zeros((1, 2))
    else:
        sd = spectral(model.branching.b, beta(model.environment))
        bi = 10.0 / sd.rho if burn_in is None else burn_in
        mu = sample_stationary(model, bi, n_stationary, thinning, dt, s_mu, n_chains=n_chains).points
    gaps = np.abs(mu - x)
    env = model.environment
    tmax = float(grid[-1])
    if env.is_deterministic:
        paths = [sample_path(env, tmax, dt, np.random.default_rng(0))]
    else:
        paths = sample_paths(env, tmax, dt, n_paths, s_env)
    est, ses = [], []
    for t in grid:
        vb = vbar_batch(paths, model.branching, float(t), opts)
        inf = ~np.all(np.isfinite(vb), axis=1)
        with np.errstate(invalid="ignore"):
            expo = gaps @ np.where(np.isfinite(vb), vb, 0.0).T  # (m, P)
        term = 1.0 - np.exp(-expo)
        # an infinite vbar contributes the trivial bound wherever the gap is nonzero
        term[:, inf] = (gaps.sum(axis=1)[:, None] > 0).astype(float)
        per_path = 2.0 * term.mean(axis=0)
        val = float(per_path.mean())
        se = float(per_path.std(ddof=1) / np.sqrt(len(per_path))) if len(per_path) > 1 else 0.0
        finite = vb[~inf]
        rep.records.append({"t": float(t), "estimate": val, "se": se,
                            "vbar1_mean": float(finite[:, 0].mean()) if len(finite) else np.inf,
                            "vbar2_mean": float(finite[:, 1].mean()) if len(finite) else np.inf,
                            "infinite_fraction": float(inf.mean()), "passed": True})
        est.append(val)
        ses.append(se)
        if inf.mean() > grey_tol:
            rep.passed = False
            rep.message = f"Grey-type condition fails: vbar infinite on {inf.mean():.1%} of paths at t={t}"
            rep.records[-1]["passed"] = False
            return _finish(rep, start)
    mono = _monotone(np.array(est), np.array(ses))
    for r, m in zip(rep.records, mono):
        r["passed"] = bool(m)
    final_ok = est[-1] < threshold
    rep.summary = {"final_bound": est[-1], "threshold": threshold, "final_ok": final_ok,
                   "monotone": bool(mono.all()), "n_paths": len(paths), "n_stationary": len(mu)}
    if not final_ok:
        rep.passed = False
        rep.message = f"bound {est[-1]:.4g} at t={grid[-1]} is not below {threshold}"
    return _finish(rep, start)


def domination_experiment(model: ModelSpec, varphi: ScalarMechanism, t_grid, lam_grid, n_paths: int, seed,
                          dt: float = 0.01, extinction_grid=None, extinction_tol: float = 1e-3,
                          opts: SolverOpts | None = None, tol_factor: float = 10.0) -> ExperimentReport:
    """``u <= U~ <= w(|lam|_1)`` on sampled paths, then extinction of ``|vbar_{0,t}|_1``.

    The comparison mechanism must satisfy Condition 1 (``phi*_i >= varphi``
    on a log grid and ``c0 > 0``); otherwise the experiment stops at the gate
    and reports ``condition1 = false``.  Seed role: 0 environment paths.
    """
    start = time.perf_counter()
    opts = opts or SolverOpts()
    grid = _grid(t_grid)
    _snap(grid, dt)
    lam_grid = np.atleast_2d(np.asarray(lam_grid, dtype=float))
    ext = None if extinction_grid is None else _grid(extinction_grid)
    if ext is not None:
        _snap(ext, dt)
    rep = ExperimentReport(
        "domination", model.config_hash(), _seed_label(seed),
        {"varphi": varphi.to_dict(), "t_grid": grid, "lam_grid": lam_grid, "n_paths": n_paths, "dt": dt,
         "extinction_grid": ext, "extinction_tol": extinction_tol, "tol_factor": tol_factor},
        ["kind", "path", "t", "estimate", "bound", "passed"],
    )
    ok, margin = check_condition1(model.branching, varphi)
    rep.summary = {"condition1": ok, "condition1_margin": margin}
    if not ok:
        rep.passed = False
        rep.message = "Condition 1 fails for the comparison mechanism; domination not attempted"
        return _finish(rep, start)
    (s_env,) = seed_children(seed, 1)
    env = model.environment
    horizon = float(max(grid[-1], ext[-1] if ext is not None else 0.0))
    if env.is_deterministic:
        paths = [sample_path(env, horizon, dt, np.random.default_rng(0))]
    else:
        paths = sample_paths(env, horizon, dt, n_paths, s_env)
    limit = tol_factor * opts.abs_tol
    worst = 0.0
    for p, path in enumerate(paths):
        for t in grid:
            if t == 0:
                continue
            d = check_domination(path, model.branching, varphi, float(t), lam_grid, opts)
            worst = max(worst, d.max_violation)
            rep.records.append({"kind": "domination", "path": p, "t": float(t), "estimate": d.max_violation,
                                "bound": limit, "passed": d.max_violation <= limit})
    rep.summary["max_violation"] = worst
    if ext is not None:
        norms = np.array([vbar_batch(paths, model.branching, float(t), opts).sum(axis=1) for t in ext])  # (T, P)
        for p in range(norms.shape[1]):
            mono = np.all(np.diff(norms[:, p]) <= 1e-9 * norms[:-1, p] + 1e-15)
            rep.records.append({"kind": "vbar_monotone", "path": p, "t": float(ext[-1]),
                                "estimate": float(norms[-1, p]), "bound": extinction_tol, "passed": bool(mono)})
        for k, t in enumerate(ext):
            m = float(np.mean(norms[k]))
            rep.records.append({"kind": "vbar_mean_norm", "path": -1, "t": float(t), "estimate": m,
                                "bound": extinction_tol,
                                "passed": bool(np.isfinite(m)) and (k < len(ext) - 1 or m < extinction_tol)})
        rep.summary["final_vbar_norm"] = float(np.mean(norms[-1]))
    return _finish(rep, start)
