"""Branching and immigration mechanisms of a two-type CBIRE-process.

All jump measures are finite mixtures of point masses and product-exponential
densities, so every Laplace-type integral below has a closed form.  Functions
accept ``lam`` of shape ``(..., 2)`` and broadcast over the leading axes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .environment import EnvSpec, beta as env_beta

__all__ = [
    "JumpMeasure2D",
    "BranchingMechanism",
    "ImmigrationMechanism",
    "ScalarMechanism",
    "ModelSpec",
    "Check",
    "ValidationReport",
    "jump_integral",
    "eval_phi",
    "eval_psi",
    "eval_phi_tilde",
    "eval_phi_star",
    "dominating_mechanism",
    "validate",
    "load_model",
    "dump_model",
]


def _frozen(a, shape=None) -> np.ndarray:
    arr = np.array(a, dtype=float)
    if shape is not None:
        arr = arr.reshape(shape)
    arr.setflags(write=False)
    return arr


def compensated_kernel(x):
    """``exp(-x) - 1 + x`` without cancellation for small ``x``."""
    x = np.asarray(x, dtype=float)
    small = np.abs(x) < 1e-4
    xs = np.where(small, x, 0.0)
    series = xs * xs * (0.5 - xs / 6.0 + xs * xs / 24.0)
    return np.where(small, series, np.expm1(-x) + x)


@dataclass(frozen=True)
class JumpMeasure2D:
    """Finite measure on the closed positive quadrant minus the origin.

    ``points``/``weights`` hold point masses; ``rates``/``masses`` hold
    components ``mass * r1 * r2 * exp(-r1 z1 - r2 z2) dz``.
    """

    points: np.ndarray = field(default_factory=lambda: _frozen(np.zeros((0, 2))))
    weights: np.ndarray = field(default_factory=lambda: _frozen(np.zeros(0)))
    rates: np.ndarray = field(default_factory=lambda: _frozen(np.zeros((0, 2))))
    masses: np.ndarray = field(default_factory=lambda: _frozen(np.zeros(0)))

    def __post_init__(self):
        pts = _frozen(self.points).reshape(-1, 2)
        wts = _frozen(self.weights).reshape(-1)
        rts = _frozen(self.rates).reshape(-1, 2)
        mss = _frozen(self.masses).reshape(-1)
        if len(pts) != len(wts):
            raise ValueError("points and weights must have equal length")
        if len(rts) != len(mss):
            raise ValueError("rates and masses must have equal length")
        if np.any(~np.isfinite(pts)) or np.any(pts < 0):
            raise ValueError("atom points must be finite and nonnegative")
        if np.any(pts.sum(axis=1) <= 0):
            raise ValueError("atom points must be nonzero")
        if np.any(~(wts > 0)) or np.any(~np.isfinite(wts)):
            raise ValueError("atom weights must be positive and finite")
        if np.any(~(rts > 0)) or np.any(~np.isfinite(rts)):
            raise ValueError("exponential rates must be positive and finite")
        if np.any(~(mss > 0)) or np.any(~np.isfinite(mss)):
            raise ValueError("exponential masses must be positive and finite")
        for name, arr in (("points", pts), ("weights", wts), ("rates", rts), ("masses", mss)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def zero(cls) -> "JumpMeasure2D":
        return cls()

    @classmethod
    def atom(cls, point, weight: float = 1.0) -> "JumpMeasure2D":
        return cls(points=[point], weights=[weight])

    @classmethod
    def exponential(cls, rates, mass: float = 1.0) -> "JumpMeasure2D":
        return cls(rates=[rates], masses=[mass])

    def __add__(self, other: "JumpMeasure2D") -> "JumpMeasure2D":
        return JumpMeasure2D(
            np.vstack([self.points, other.points]),
            np.concatenate([self.weights, other.weights]),
            np.vstack([self.rates, other.rates]),
            np.concatenate([self.masses, other.masses]),
        )

    @property
    def is_zero(self) -> bool:
        return len(self.weights) == 0 and len(self.masses) == 0

    @property
    def total_mass(self) -> float:
        return float(self.weights.sum() + self.masses.sum())

    @property
    def first_moments(self) -> np.ndarray:
        """``(int z1 dm, int z2 dm)``."""
        atoms = (self.weights[:, None] * self.points).sum(axis=0)
        expo = (self.masses[:, None] / self.rates).sum(axis=0)
        return atoms + expo

    def tail_norm_moment(self, threshold: float = 1.0) -> float:
        """``int_{|z|_1 >= threshold} |z|_1 dm`` in closed form."""
        s = self.points.sum(axis=1)
        total = float((self.weights * s)[s >= threshold].sum())
        for (r1, r2), w in zip(self.rates, self.masses):
            total += w * _hypoexp_tail_mean(r1, r2, threshold)
        return total

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        """Draw ``size`` points from the normalised measure."""
        if size == 0:
            return np.zeros((0, 2))
        if self.is_zero:
            raise ValueError("cannot sample from the zero measure")
        probs = np.concatenate([self.weights, self.masses])
        probs = probs / probs.sum()
        idx = rng.choice(len(probs), size=size, p=probs)
        out = np.empty((size, 2))
        n_atoms = len(self.weights)
        is_atom = idx < n_atoms
        out[is_atom] = self.points[idx[is_atom]]
        k = idx[~is_atom] - n_atoms
        if k.size:
            out[~is_atom] = rng.exponential(1.0 / self.rates[k])
        return out

    def to_dict(self) -> dict:
        return {
            "atoms": [{"point": p.tolist(), "weight": float(w)} for p, w in zip(self.points, self.weights)],
            "exponential": [{"rates": r.tolist(), "mass": float(w)} for r, w in zip(self.rates, self.masses)],
        }

    @classmethod
    def from_dict(cls, d: dict | None) -> "JumpMeasure2D":
        if not d:
            return cls()
        atoms = d.get("atoms", [])
        expo = d.get("exponential", [])
        return cls(
            points=[a["point"] for a in atoms] or np.zeros((0, 2)),
            weights=[a["weight"] for a in atoms],
            rates=[e["rates"] for e in expo] or np.zeros((0, 2)),
            masses=[e["mass"] for e in expo],
        )


def _hypoexp_tail_mean(r1: float, r2: float, s0: float) -> float:
    # E[S; S >= s0] for S = E1 + E2, Ei ~ Exp(ri)
    def g(r):
        return np.exp(-r * s0) * (s0 / r + 1.0 / r**2)

    if abs(r1 - r2) > 1e-6 * max(r1, r2):
        return float(r1 * r2 / (r2 - r1) * (g(r1) - g(r2)))
    r = 0.5 * (r1 + r2)
    return float(np.exp(-r * s0) * (r * s0**2 + 2.0 * s0 + 2.0 / r))


def jump_integral(measure: JumpMeasure2D, lam, kind: str = "compensated"):
    """Closed-form ``int K(<lam, z>) m(dz)``.

    ``kind="compensated"`` uses ``K(x) = exp(-x) - 1 + x``;
    ``kind="immigration"`` uses ``K(x) = 1 - exp(-x)``.
    """
    lam = np.asarray(lam, dtype=float)
    out = np.zeros(lam.shape[:-1])
    if len(measure.weights):
        x = lam @ measure.points.T
        if kind == "compensated":
            out = out + compensated_kernel(x) @ measure.weights
        elif kind == "immigration":
            out = out + (-np.expm1(-x)) @ measure.weights
        else:
            raise ValueError(f"unknown kind {kind!r}")
    if len(measure.masses):
        # a_i = lam_i / r_i; both kernels written without cancellation
        a = lam[..., None, 0] / measure.rates[:, 0]
        b = lam[..., None, 1] / measure.rates[:, 1]
        denom = (1.0 + a) * (1.0 + b)
        if kind == "compensated":
            num = a * a + a * b + b * b + (a + b) * a * b
        elif kind == "immigration":
            num = a + b + a * b
        else:
            raise ValueError(f"unknown kind {kind!r}")
        out = out + (num / denom) @ measure.masses
    return out


@dataclass(frozen=True)
class BranchingMechanism:
    b: np.ndarray
    c: np.ndarray = field(default_factory=lambda: np.zeros(2))
    m1: JumpMeasure2D = field(default_factory=JumpMeasure2D)
    m2: JumpMeasure2D = field(default_factory=JumpMeasure2D)

    def __post_init__(self):
        b = _frozen(self.b, (2, 2))
        c = _frozen(self.c, (2,))
        if not np.all(np.isfinite(b)):
            raise ValueError("b must be finite")
        if np.any(c < 0) or not np.all(np.isfinite(c)):
            raise ValueError("c must be finite and nonnegative")
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "c", c)

    @property
    def measures(self) -> tuple[JumpMeasure2D, JumpMeasure2D]:
        return (self.m1, self.m2)

    @property
    def compensator(self) -> np.ndarray:
        """Matrix ``M[i, j] = int z_j m_i(dz)``."""
        return np.vstack([self.m1.first_moments, self.m2.first_moments])

    @property
    def is_linear(self) -> bool:
        return bool(np.all(self.c == 0) and self.m1.is_zero and self.m2.is_zero)

    def lipschitz(self, lam) -> np.ndarray:
        """Upper bound on the row-sum norm of the Jacobian of phi at ``lam``."""
        lam = np.asarray(lam, dtype=float)
        base = np.abs(self.b).sum(axis=1).max() + self.compensator.sum(axis=1).max()
        return base + 2.0 * (self.c * lam).max(axis=-1)

    def to_dict(self) -> dict:
        return {"b": self.b.tolist(), "c": self.c.tolist(), "m1": self.m1.to_dict(), "m2": self.m2.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "BranchingMechanism":
        return cls(
            b=d["b"],
            c=d.get("c", [0.0, 0.0]),
            m1=JumpMeasure2D.from_dict(d.get("m1")),
            m2=JumpMeasure2D.from_dict(d.get("m2")),
        )


@dataclass(frozen=True)
class ImmigrationMechanism:
    h: np.ndarray = field(default_factory=lambda: np.zeros(2))
    n: JumpMeasure2D = field(default_factory=JumpMeasure2D)

    def __post_init__(self):
        h = _frozen(self.h, (2,))
        if np.any(h < 0) or not np.all(np.isfinite(h)):
            raise ValueError("h must be finite and nonnegative")
        object.__setattr__(self, "h", h)

    @property
    def is_zero(self) -> bool:
        return bool(np.all(self.h == 0) and self.n.is_zero)

    def to_dict(self) -> dict:
        return {"h": self.h.tolist(), "n": self.n.to_dict()}

    @classmethod
    def from_dict(cls, d: dict | None) -> "ImmigrationMechanism":
        if not d:
            return cls()
        return cls(h=d.get("h", [0.0, 0.0]), n=JumpMeasure2D.from_dict(d.get("n")))


@dataclass(frozen=True)
class ScalarMechanism:
    """Single-type mechanism ``b0 x + c0 x^2 + sum_k w_k (exp(-x z_k) - 1 + x z_k)``."""

    b0: float = 0.0
    c0: float = 0.0
    atoms: tuple = ()

    def __post_init__(self):
        atoms = tuple((float(z), float(w)) for z, w in self.atoms)
        if any(z <= 0 or w <= 0 for z, w in atoms):
            raise ValueError("scalar atoms need positive size and weight")
        if self.c0 < 0:
            raise ValueError("c0 must be nonnegative")
        object.__setattr__(self, "atoms", atoms)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        out = self.b0 * x + self.c0 * x * x
        for z, w in self.atoms:
            out = out + w * compensated_kernel(x * z)
        return out

    @property
    def grey_condition(self) -> bool:
        """Sufficient check for ``int^inf 1/varphi < inf``."""
        return self.c0 > 0

    def lipschitz(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return abs(self.b0) + 2.0 * self.c0 * np.abs(x) + sum(w * z for z, w in self.atoms)

    def to_dict(self) -> dict:
        return {"b0": self.b0, "c0": self.c0, "atoms": [list(a) for a in self.atoms]}

    @classmethod
    def from_dict(cls, d: dict) -> "ScalarMechanism":
        return cls(d.get("b0", 0.0), d.get("c0", 0.0), tuple(tuple(a) for a in d.get("atoms", ())))


@dataclass(frozen=True)
class ModelSpec:
    branching: BranchingMechanism
    immigration: ImmigrationMechanism = field(default_factory=ImmigrationMechanism)
    environment: EnvSpec = field(default_factory=EnvSpec)

    def to_dict(self) -> dict:
        return {
            "branching": self.branching.to_dict(),
            "immigration": self.immigration.to_dict(),
            "environment": self.environment.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        if "branching" not in d:
            raise KeyError("branching")
        return cls(
            branching=BranchingMechanism.from_dict(d["branching"]),
            immigration=ImmigrationMechanism.from_dict(d.get("immigration")),
            environment=EnvSpec.from_dict(d.get("environment")),
        )

    def config_hash(self) -> str:
        import hashlib

        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def load_model(path: str | Path) -> ModelSpec:
    with open(path) as fh:
        return ModelSpec.from_dict(json.load(fh))


def dump_model(model: ModelSpec, path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump(model.to_dict(), fh, indent=2, sort_keys=True)


def eval_phi(mech: BranchingMechanism, lam) -> np.ndarray:
    """Branching mechanism ``(phi_1(lam), phi_2(lam))``."""
    lam = np.asarray(lam, dtype=float)
    linear = lam @ mech.b.T
    quad = mech.c * lam * lam
    jumps = np.stack([jump_integral(m, lam) for m in mech.measures], axis=-1)
    return linear + quad + jumps


def eval_psi(imm: ImmigrationMechanism, lam):
    """Immigration mechanism ``<h, lam> + int (1 - exp(-<lam, z>)) n(dz)``."""
    lam = np.asarray(lam, dtype=float)
    return lam @ imm.h + jump_integral(imm.n, lam, kind="immigration")


def eval_phi_tilde(mech: BranchingMechanism, lam) -> np.ndarray:
    """Like :func:`eval_phi` but the i-th jump term sees only ``lam_i z_i``."""
    lam = np.asarray(lam, dtype=float)
    linear = lam @ mech.b.T
    quad = mech.c * lam * lam
    zero = np.zeros_like(lam[..., 0])
    j1 = jump_integral(mech.m1, np.stack([lam[..., 0], zero], axis=-1))
    j2 = jump_integral(mech.m2, np.stack([zero, lam[..., 1]], axis=-1))
    return linear + quad + np.stack([j1, j2], axis=-1)


def eval_phi_star(mech: BranchingMechanism, i: int, x):
    """Local projection ``phi*_i(x)``; ``i`` is 1 or 2."""
    if i not in (1, 2):
        raise ValueError("type index must be 1 or 2")
    k = i - 1
    x = np.asarray(x, dtype=float)
    zero = np.zeros_like(x)
    lam = np.stack([x, zero] if k == 0 else [zero, x], axis=-1)
    return (
        mech.b[k].sum() * x
        + mech.c[k] * x * x
        + jump_integral(mech.measures[k], lam)
    )


def dominating_mechanism(mech: BranchingMechanism) -> ScalarMechanism:
    """Largest jump-free ``b0 x + c0 x^2`` lying below both local projections.

    Jump terms in ``phi*_i`` are nonnegative, so ``b0 = min_i (b_i1 + b_i2)``
    and ``c0 = min_i c_i`` suffice.
    """
    return ScalarMechanism(b0=float(mech.b.sum(axis=1).min()), c0=float(mech.c.min()))


@dataclass
class Check:
    name: str
    passed: bool
    value: float
    detail: str

    def to_dict(self) -> dict:
        return {"name": self.name, "passed": bool(self.passed), "value": float(self.value), "detail": self.detail}


@dataclass
class ValidationReport:
    checks: list[Check]

    @property
    def ok(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def failures(self) -> list[Check]:
        return [c for c in self.checks if not c.passed]

    def __getitem__(self, name: str) -> Check:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {"ok": self.ok, "checks": [c.to_dict() for c in self.checks]}


def validate(model: ModelSpec) -> ValidationReport:
    """Check the structural and ergodicity hypotheses; never raises."""
    mech, imm, env = model.branching, model.immigration, model.environment
    b = mech.b
    checks = []

    M = mech.compensator
    off = np.array([b[0, 1] + M[0, 1], b[1, 0] + M[1, 0]])
    checks.append(Check(
        "off_diagonal_admissibility", bool(np.all(off <= 0)), float(off.max()),
        "b12 + int z2 m1(dz) <= 0 and b21 + int z1 m2(dz) <= 0",
    ))

    tail = imm.n.tail_norm_moment(1.0)
    checks.append(Check(
        "immigration_tail_moment", bool(np.isfinite(tail)), float(tail),
        "int_{|z|>=1} |z| n(dz) < inf",
    ))

    zmax = float(np.max(env.jump_sizes)) if len(env.jump_sizes) else 0.0
    exp_moment = float(np.sum(env.jump_rates[env.jump_sizes > 1] * np.exp(env.jump_sizes[env.jump_sizes > 1])))
    checks.append(Check(
        "environment_exponential_moment", bool(np.isfinite(zmax) and np.isfinite(exp_moment)), exp_moment,
        "int_1^inf e^z nu(dz) < inf",
    ))

    tr = np.trace(b)
    delta = tr**2 - 4.0 * np.linalg.det(b)
    checks.append(Check("discriminant_positive", bool(delta > 0), float(delta), "(tr b)^2 - 4 det b > 0"))

    bt = env_beta(env)
    gap = 0.5 * (tr - np.sqrt(max(delta, 0.0)))
    checks.append(Check(
        "beta_below_spectral_gap", bool(delta > 0 and bt < gap), float(gap - bt),
        f"beta={bt:.6g} < (tr b - sqrt(Delta))/2={gap:.6g}",
    ))

    neg = min(float(mech.c.min()), float(imm.h.min()))
    checks.append(Check("nonnegative_coefficients", neg >= 0, neg, "c >= 0 and h >= 0"))
    return ValidationReport(checks)
