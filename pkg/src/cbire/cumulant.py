"""Backward solvers for the random cumulant semigroups.

The environment is frozen on each grid cell at its left-endpoint value.  On a
cell with frozen value ``k`` the conjugate ``v = e^{-k} u`` obeys the plain
equation ``dv/dr = phi(v)``, and crossing a grid point ``t_j`` backwards
multiplies ``v`` by ``exp(xi(t_j) - xi(t_{j-1}))``.  We integrate in these
coordinates (classical RK4 per substep) and recover
``u_{r,t}(lam) = e^{xi(r)} v_{r,t}(e^{-xi(t)} lam)``.  Because RK4 commutes
with linear rescaling this is step-for-step the same scheme as integrating
``u`` directly, but it never forms ``e^{+-xi}`` of a long path.

Substeps are shortened whenever ``step * Lipschitz(phi at v) > stability``,
which keeps large terminal values (the ``lam -> inf`` limit) resolved.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .environment import EnvPath, sample_path, sample_paths, stack_values, spawn_generators
from .mechanisms import (
    BranchingMechanism,
    ImmigrationMechanism,
    ModelSpec,
    ScalarMechanism,
    eval_phi,
    eval_phi_star,
    eval_phi_tilde,
    eval_psi,
)

__all__ = [
    "SolverOpts",
    "CumulantGrid",
    "DominationReport",
    "backward_flow",
    "solve_u",
    "solve_u_tilde",
    "solve_w",
    "solve_v",
    "v_from_u",
    "quenched_laplace",
    "immigration_exponent",
    "annealed_laplace",
    "stationary_laplace",
    "truncation_horizon",
    "vbar",
    "vbar_batch",
    "check_condition1",
    "check_domination",
]


@dataclass(frozen=True)
class SolverOpts:
    substeps_per_cell: int = 1
    abs_tol: float = 1e-9
    max_lambda_cap: float = 2.0**40
    convergence_tol: float = 1e-9
    blowup_ceiling: float = 1e100
    stability: float = 0.05

    def __post_init__(self):
        if self.substeps_per_cell < 1:
            raise ValueError("substeps_per_cell must be >= 1")
        for name in ("abs_tol", "max_lambda_cap", "convergence_tol", "blowup_ceiling", "stability"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


DEFAULT_OPTS = SolverOpts()


@dataclass
class FlowResult:
    v: np.ndarray  # (K+1, P, L, d) at grid points, v[K] is the terminal value
    J: np.ndarray | None  # (K+1, P, L) cumulative int_{t_j}^t psi(v_s) ds
    clamped: int
    blown: np.ndarray  # (P,)


def backward_flow(
    xi: np.ndarray,
    dt: float,
    k_end: int,
    terminal: np.ndarray,
    rhs: Callable,
    lipschitz: Callable,
    opts: SolverOpts = DEFAULT_OPTS,
    psi: Callable | None = None,
) -> FlowResult:
    """Integrate ``v`` backwards from grid index ``k_end`` to 0.

    ``xi`` has shape ``(P, N+1)`` (one row per environment path) and
    ``terminal`` shape ``(P, L, d)``.  If ``psi`` is given, the running
    integral of ``psi(v)`` is carried as an extra RK4 component.
    """
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    v = np.array(terminal, dtype=float)
    P, L, d = v.shape
    out = np.empty((k_end + 1, P, L, d))
    out[k_end] = v
    J = None
    if psi is not None:
        J = np.zeros((k_end + 1, P, L))
        j_acc = np.zeros((P, L))
    blown = np.zeros(P, dtype=bool)
    clamped = 0
    base = dt / opts.substeps_per_cell
    mult = np.exp(xi[:, 1 : k_end + 1] - xi[:, :k_end])

    def deriv(state):
        return -rhs(state)

    for j in range(k_end, 0, -1):
        v = v * mult[:, j - 1, None, None]
        remaining = dt
        while remaining > 0:
            lv = lipschitz(v)
            lip = float(np.nanmax(lv)) if v.size and not np.all(np.isnan(lv)) else 0.0
            step = base if lip * base <= opts.stability else opts.stability / lip
            if step >= remaining * (1 - 1e-12):
                step = remaining
            k1 = deriv(v)
            k2 = deriv(v + 0.5 * step * k1)
            k3 = deriv(v + 0.5 * step * k2)
            k4 = deriv(v + step * k3)
            if psi is not None:
                q1, q2, q3, q4 = (psi(s) for s in (v, v + 0.5 * step * k1, v + 0.5 * step * k2, v + step * k3))
                j_acc = j_acc + step / 6.0 * (q1 + 2 * q2 + 2 * q3 + q4)
            v = v + step / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
            neg = v < 0
            if neg.any():
                clamped += int(neg.sum())
                v[neg] = 0.0
            bad = ~np.isfinite(v) | (v > opts.blowup_ceiling)
            if bad.any():
                newly = bad.reshape(P, -1).any(axis=1)
                blown |= newly
                v[newly] = np.nan
            remaining -= step
        out[j - 1] = v
        if J is not None:
            J[j - 1] = j_acc
    return FlowResult(out, J, clamped, blown)


def _phi_rhs(mech: BranchingMechanism):
    return (lambda v: eval_phi(mech, v)), mech.lipschitz


def _phi_tilde_rhs(mech: BranchingMechanism):
    return (lambda v: eval_phi_tilde(mech, v)), mech.lipschitz


def _scalar_rhs(varphi: ScalarMechanism):
    return (lambda v: varphi(v[..., 0])[..., None]), (lambda v: varphi.lipschitz(v[..., 0]))


@dataclass
class CumulantGrid:
    """Backward solution ``s -> u_{s,t}(xi, lam)`` on the grid of ``[0, t]``."""

    t: float
    lam: np.ndarray
    path: EnvPath = field(repr=False)
    times: np.ndarray
    values: np.ndarray
    opts: SolverOpts
    kind: str = "u"
    clamped: int = 0
    blown_up: bool = False
    source: object = field(default=None, repr=False)

    @property
    def at_zero(self) -> np.ndarray:
        return self.values[0]

    def to_csv(self, path, header: str | None = None) -> None:
        vals = self.values.reshape(len(self.times), -1)
        with open(path, "w", newline="") as fh:
            if header:
                fh.write(f"# {header}\n")
            w = csv.writer(fh)
            w.writerow(["s"] + [f"u{i + 1}" for i in range(vals.shape[1])])
            for s, row in zip(self.times, vals):
                w.writerow([repr(float(s))] + [repr(float(x)) for x in row])


def _solve_u_like(path: EnvPath, rhs, lip, t, lam, opts, kind, source) -> CumulantGrid:
    opts = opts or DEFAULT_OPTS
    if not 0 <= t <= path.horizon * (1 + 1e-12):
        raise ValueError("t must lie in [0, horizon]")
    lam = np.atleast_1d(np.asarray(lam, dtype=float))
    if np.any(lam < 0):
        raise ValueError("lam must be nonnegative")
    k = path.index_of(t)
    xi = path.values
    terminal = (np.exp(-xi[k]) * lam)[None, None, :]
    res = backward_flow(xi[None, :], path.dt, k, terminal, rhs, lip, opts)
    u = np.exp(xi[: k + 1])[:, None] * res.v[:, 0, 0, :]
    return CumulantGrid(
        t=float(t), lam=lam, path=path, times=path.times[: k + 1], values=u, opts=opts,
        kind=kind, clamped=res.clamped, blown_up=bool(res.blown.any()), source=source,
    )


def solve_u(path: EnvPath, mech: BranchingMechanism, t: float, lam, opts: SolverOpts | None = None) -> CumulantGrid:
    """Solve ``u_{r,t} = lam - int_r^t e^{xi(s)} phi(e^{-xi(s)} u_{s,t}) ds`` on the grid."""
    return _solve_u_like(path, *_phi_rhs(mech), t, lam, opts, "u", mech)


def solve_u_tilde(path: EnvPath, mech: BranchingMechanism, t: float, lam, opts: SolverOpts | None = None) -> CumulantGrid:
    """As :func:`solve_u` with the coordinate-wise jump mechanism."""
    return _solve_u_like(path, *_phi_tilde_rhs(mech), t, lam, opts, "u_tilde", mech)


def solve_w(path: EnvPath, varphi: ScalarMechanism, t: float, lam: float, opts: SolverOpts | None = None) -> CumulantGrid:
    """Scalar cumulant semigroup of a single-type mechanism; ``values`` has shape ``(K+1,)``."""
    if not varphi.grey_condition:
        raise ValueError("varphi needs c0 > 0 (sufficient for int^inf 1/varphi < inf)")
    g = _solve_u_like(path, *_scalar_rhs(varphi), t, [float(lam)], opts, "w", varphi)
    g.values = g.values[:, 0]
    return g


def solve_v(paths, mech: BranchingMechanism, t: float, lams, opts: SolverOpts | None = None,
            imm: ImmigrationMechanism | None = None) -> FlowResult:
    """Batch solve of ``v_{s,t}(xi, lam)`` for several paths and terminal values.

    ``lams`` has shape ``(L, 2)``; the result ``v`` has shape ``(K+1, P, L, 2)``.
    With ``imm`` the running immigration exponent ``J_{s,t}`` is returned too.
    """
    opts = opts or DEFAULT_OPTS
    paths = [paths] if isinstance(paths, EnvPath) else list(paths)
    k = paths[0].index_of(t)
    xi = stack_values(paths)
    lams = np.atleast_2d(np.asarray(lams, dtype=float))
    terminal = np.broadcast_to(lams, (len(paths),) + lams.shape).copy()
    rhs, lip = _phi_rhs(mech)
    psi = (lambda v: eval_psi(imm, v)) if imm is not None and not imm.is_zero else None
    res = backward_flow(xi, paths[0].dt, k, terminal, rhs, lip, opts, psi=psi)
    if imm is not None and res.J is None:
        res.J = np.zeros(res.v.shape[:-1])
    return res


def v_from_u(grid: CumulantGrid, r: float, lam) -> np.ndarray:
    """``v_{r,t}(xi, lam) = e^{-xi(r)} u_{r,t}(xi, e^{xi(t)} lam)``; re-solves the scaled problem."""
    path = grid.path
    lam = np.asarray(lam, dtype=float)
    kt = path.index_of(grid.t)
    kr = path.index_of(r)
    if kr > kt:
        raise ValueError("r must not exceed t")
    solver = {"u": solve_u, "u_tilde": solve_u_tilde}[grid.kind]
    g = solver(path, grid.source, grid.t, np.exp(path.values[kt]) * lam, grid.opts)
    if g.blown_up:
        raise FloatingPointError("cumulant solve blew up")
    return np.exp(-path.values[kr]) * g.values[kr]


def quenched_laplace(path: EnvPath, mech: BranchingMechanism, x, lam, t: float, opts: SolverOpts | None = None) -> float:
    """``exp(-<x, v_{0,t}(xi, lam)>)``."""
    res = solve_v(path, mech, t, [lam], opts)
    if res.blown.any():
        raise FloatingPointError("cumulant solve blew up")
    return float(np.exp(-np.asarray(x, dtype=float) @ res.v[0, 0, 0]))


def immigration_exponent(path: EnvPath, mech: BranchingMechanism, imm: ImmigrationMechanism, lam, t: float,
                         opts: SolverOpts | None = None) -> float:
    """``J_{0,t} = int_0^t psi(v_{s,t}(xi, lam)) ds`` integrated alongside ``v``."""
    res = solve_v(path, mech, t, [lam], opts, imm=imm)
    if res.blown.any():
        raise FloatingPointError("cumulant solve blew up")
    return float(res.J[0, 0, 0])


def _env_paths(model: ModelSpec, horizon, dt, n_paths, seed):
    if model.environment.is_deterministic:
        g = spawn_generators(seed, 1)[0]
        return [sample_path(model.environment, horizon, dt, g)]
    return sample_paths(model.environment, horizon, dt, n_paths, seed)


def annealed_laplace(model: ModelSpec, x, lam, t: float, n_paths: int, seed, dt: float = 0.01,
                     opts: SolverOpts | None = None):
    """Monte-Carlo ``E exp(-<x, v_{0,t}> - J_{0,t})`` over environment paths.

    Returns ``(estimate, standard_error)``; a deterministic environment gives
    the exact quenched value with zero error.
    """
    if n_paths < 100:
        raise ValueError("need at least 100 paths")
    x = np.asarray(x, dtype=float)
    paths = _env_paths(model, t, dt, n_paths, seed)
    res = solve_v(paths, model.branching, t, [lam], opts, imm=model.immigration)
    if res.blown.any():
        raise FloatingPointError(f"cumulant solve blew up on {res.blown.mean():.2%} of paths")
    vals = np.exp(-(res.v[0, :, 0, :] @ x) - res.J[0, :, 0])
    if len(vals) == 1:
        return float(vals[0]), 0.0
    return float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(len(vals)))


def truncation_horizon(model: ModelSpec, tol: float = 1e-6) -> float:
    """Horizon ``T`` with ``exp(-rho T) < tol`` for the linearised tail."""
    from .environment import beta
    b = model.branching.b
    tr = np.trace(b)
    delta = tr**2 - 4 * np.linalg.det(b)
    rho = 0.5 * (tr - np.sqrt(delta)) - beta(model.environment)
    if not rho > 0:
        raise ValueError("model is outside the ergodic regime")
    return float(np.log(1.0 / tol) / rho)


def stationary_laplace(model: ModelSpec, lam, truncation_T: float, n_paths: int, seed, dt: float = 0.01,
                       opts: SolverOpts | None = None, tail_tol: float = 1e-6):
    """Monte-Carlo Laplace transform of the stationary law.

    ``int_{-T}^0 psi(v_{s,0}) ds`` depends on the environment only through its
    increments, so it is computed on a path simulated on ``[0, T]`` and read as
    ``int_0^T psi(v_{s,T}) ds``.  Returns ``(estimate, standard_error)``.
    """
    if not truncation_T > 0:
        raise ValueError("truncation_T must be positive")
    paths = _env_paths(model, truncation_T, dt, n_paths, seed)
    res = solve_v(paths, model.branching, truncation_T, [lam], opts, imm=model.immigration)
    if res.blown.any():
        raise FloatingPointError("cumulant solve blew up")
    tail = eval_psi(model.immigration, res.v[0, :, 0, :])
    if np.max(tail) > tail_tol:
        warnings.warn(f"stationary integrand at -T is {np.max(tail):.3g} > {tail_tol}; truncation too short",
                      RuntimeWarning, stacklevel=2)
    vals = np.exp(-res.J[0, :, 0])
    if len(vals) == 1:
        return float(vals[0]), 0.0
    return float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(len(vals)))


def _lambda_ladder(opts: SolverOpts) -> np.ndarray:
    n = int(np.floor(np.log2(opts.max_lambda_cap)))
    return 2.0 ** np.arange(n + 1)


def vbar_batch(paths: Sequence[EnvPath], mech: BranchingMechanism, t: float, opts: SolverOpts | None = None):
    """``lim_{Lambda -> inf} v_{0,t}(xi, (Lambda, Lambda))`` per path.

    ``Lambda`` doubles from 1 to ``max_lambda_cap``; the first value whose
    relative change drops below ``convergence_tol`` is returned.  Paths that
    never settle get ``inf`` in both components.
    """
    opts = opts or DEFAULT_OPTS
    if not t > 0:
        raise ValueError("t must be positive")
    ladder = _lambda_ladder(opts)
    lams = np.repeat(ladder[:, None], 2, axis=1)
    res = solve_v(paths, mech, t, lams, opts)
    v0 = res.v[0]  # (P, L, 2)
    out = np.full((v0.shape[0], 2), np.inf)
    with np.errstate(invalid="ignore", divide="ignore"):
        rel = np.abs(v0[:, 1:] - v0[:, :-1]).max(axis=-1) / np.maximum(np.abs(v0[:, 1:]).max(axis=-1), 1e-300)
    for p in range(v0.shape[0]):
        if res.blown[p]:
            continue
        hit = np.nonzero(rel[p] < opts.convergence_tol)[0]
        if hit.size:
            out[p] = v0[p, hit[0] + 1]
    return out


def vbar(path: EnvPath, mech: BranchingMechanism, t: float, opts: SolverOpts | None = None) -> np.ndarray:
    return vbar_batch([path], mech, t, opts)[0]


def check_condition1(mech: BranchingMechanism, varphi: ScalarMechanism, grid=None):
    """Return ``(ok, margin)`` for ``phi*_i(x) >= varphi(x)`` on ``grid`` and the Grey-type check."""
    grid = np.concatenate([[0.0], np.logspace(-4, 6, 201)]) if grid is None else np.asarray(grid, dtype=float)
    target = varphi(grid)
    margin = min(float(np.min(eval_phi_star(mech, i, grid) - target)) for i in (1, 2))
    # relative slack so that equality cases survive rounding at large x
    scale = 1e-12 * np.max(np.abs(target)) if grid.size else 0.0
    return bool(varphi.grey_condition and margin >= -scale), margin


@dataclass
class DominationReport:
    condition1: bool
    condition1_margin: float
    max_violation: float
    violation_u_tilde: float
    violation_w: float
    clamped: int = 0

    @property
    def ok(self) -> bool:
        return self.condition1 and self.max_violation <= 0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def check_domination(path: EnvPath, mech: BranchingMechanism, varphi: ScalarMechanism, t: float, lam_grid,
                     opts: SolverOpts | None = None, cond_grid=None) -> DominationReport:
    """Verify ``u^(i) <= U~^(i) <= w(|lam|_1)`` at every grid point.

    Violations are reported as the largest positive excess (absolute).
    Condition-1 failure is reported separately and skips the solves.
    """
    ok, margin = check_condition1(mech, varphi, cond_grid)
    if not ok:
        return DominationReport(False, margin, np.nan, np.nan, np.nan)
    lam_grid = np.atleast_2d(np.asarray(lam_grid, dtype=float))
    v1 = v2 = 0.0
    clamped = 0
    for lam in lam_grid:
        gu = solve_u(path, mech, t, lam, opts)
        gt = solve_u_tilde(path, mech, t, lam, opts)
        gw = solve_w(path, varphi, t, lam.sum(), opts)
        if gu.blown_up or gt.blown_up or gw.blown_up:
            raise FloatingPointError("cumulant solve blew up")
        clamped += gu.clamped + gt.clamped + gw.clamped
        v1 = max(v1, float(np.max(gu.values - gt.values)))
        v2 = max(v2, float(np.max(gt.values - gw.values[:, None])))
    return DominationReport(True, margin, max(v1, v2, 0.0), v1, v2, clamped)
