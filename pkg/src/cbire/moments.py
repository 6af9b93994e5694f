"""First moments and spectral constants of the linear part ``b``.

Orientation: ``pi_prime(b, t)[i]`` is the i-th row sum of ``exp(-b t)``,
matching ``u_{r,t}(lam) = exp(b (r - t)) lam`` for a linear mechanism.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy import integrate

from .mechanisms import ImmigrationMechanism

__all__ = [
    "SpectralData",
    "mat_exp",
    "pi_prime",
    "pi",
    "spectral",
    "case2_pi_prime",
    "closed_form_pi_prime",
    "gamma",
    "mean_total_mass",
    "stationary_mean_total_mass",
    "decay_bound",
]

EXACT = "exact"
UPPER = "upperBound"


def mat_exp(b, t):
    """``exp(-b t)`` for a 2x2 matrix ``b``; ``t`` may be an array.

    Uses ``exp(M) = e^s (cosh(q) I + sinh(q)/q (M - s I))`` with
    ``s = tr(M)/2`` and ``q^2 = s^2 - det(M)``; the ``q -> 0`` and
    complex-``q`` branches are handled by series and trigonometric forms.
    """
    b = np.asarray(b, dtype=float).reshape(2, 2)
    t = np.asarray(t, dtype=float)
    tt = t[..., None, None]
    M = -b * tt
    s = 0.5 * (M[..., 0, 0] + M[..., 1, 1])
    D = M - s[..., None, None] * np.eye(2)
    q2 = D[..., 0, 0] ** 2 + D[..., 0, 1] * D[..., 1, 0]
    small = np.abs(q2) < 1e-6
    pos = q2 > 0
    q = np.sqrt(np.abs(q2))
    qs = np.where(small, 1.0, q)
    with np.errstate(over="ignore", invalid="ignore"):
        # real branch as a difference of exponentials so that e^{s} cosh(q) cannot overflow
        ep, em = np.exp(s + q), np.exp(s - q)
        ch = np.where(pos, 0.5 * (ep + em), np.exp(s) * np.cos(q))
        sh = np.where(pos, 0.5 * (ep - em) / qs, np.exp(s) * np.sin(q) / qs)
    ch_series = np.exp(s) * (1 + q2 / 2 + q2**2 / 24 + q2**3 / 720)
    sh_series = np.exp(s) * (1 + q2 / 6 + q2**2 / 120 + q2**3 / 5040)
    ch = np.where(small, ch_series, ch)
    sh = np.where(small, sh_series, sh)
    out = ch[..., None, None] * np.eye(2) + sh[..., None, None] * D
    return out


def pi_prime(b, t):
    """``(pi'_1(0,t), pi'_2(0,t))`` as an array of shape ``t.shape + (2,)``."""
    return mat_exp(b, t).sum(axis=-1)


def pi(b, beta: float, t):
    """Annealed moment functional ``exp(beta t) pi'(0, t)``."""
    t = np.asarray(t, dtype=float)
    return np.exp(beta * t)[..., None] * pi_prime(b, t)


@dataclass
class SpectralData:
    b: tuple
    beta: float
    delta: float
    lambda1: float
    lambda2: float
    eps: float
    theta: float
    rho: float
    case_tag: str
    theta11: float | None = None
    theta12: float | None = None
    theta21: float | None = None
    theta22: float | None = None

    @property
    def bmat(self) -> np.ndarray:
        return np.array(self.b, dtype=float)

    def to_dict(self) -> dict:
        return asdict(self)


def _eigen_weights(b, lam1, lam2):
    # pi'_i(t) = A_i e^{lam1 t} + (1 - A_i) e^{lam2 t}; A_i from pi'_i'(0) = -rowsum_i
    rs = np.asarray(b).sum(axis=1)
    return (-rs - lam2) / (lam1 - lam2)


def spectral(b, beta: float, eps_tol: float = 1e-12) -> SpectralData:
    b = np.asarray(b, dtype=float).reshape(2, 2)
    tr = np.trace(b)
    delta = float(tr**2 - 4.0 * np.linalg.det(b))
    if not delta > 0:
        raise ValueError(f"discriminant must be positive, got {delta}")
    sd = np.sqrt(delta)
    lam1 = 0.5 * (-tr + sd)
    lam2 = lam1 - sd
    b11, b12, b21, b22 = b[0, 0], b[0, 1], b[1, 0], b[1, 1]
    eps = float(sd + b22 - b11 + 2.0 * b21)
    rho = float(-lam1 - beta)
    kw = {}
    if b12 == 0 and b21 == 0:
        tag, theta = "diagonalCase", 0.0
    elif b12 * b21 == 0:
        tag = "triangularCase"
        theta = float(max(0.0, (_eigen_weights(b, lam1, lam2) - 1.0).max()))
    else:
        th_a = float(-b12 * (2 * sd - eps) / (sd * (sd + b11 - b22)))
        th_b = float((2 * sd - eps) / (2 * sd))
        if abs(eps) <= eps_tol * max(1.0, sd):
            tag, theta = "epsZero", 0.0
        elif eps < 0:
            tag = "epsNeg"
            kw = {"theta11": th_a, "theta12": th_b}
            theta = th_b
        else:
            tag = "epsPos"
            kw = {"theta21": th_a, "theta22": th_b}
            theta = th_a
    return SpectralData(
        b=tuple(map(tuple, b.tolist())), beta=float(beta), delta=delta, lambda1=float(lam1),
        lambda2=float(lam2), eps=eps, theta=float(theta), rho=rho, case_tag=tag, **kw,
    )


def case2_pi_prime(b, t):
    """Two-exponential expressions for ``pi'`` when ``b12 b21 != 0``."""
    b = np.asarray(b, dtype=float).reshape(2, 2)
    b11, b12, b21, b22 = b[0, 0], b[0, 1], b[1, 0], b[1, 1]
    if b12 * b21 == 0:
        raise ValueError("requires b12 * b21 != 0")
    t = np.asarray(t, dtype=float)
    delta = np.trace(b) ** 2 - 4 * np.linalg.det(b)
    sd = np.sqrt(delta)
    lam1 = 0.5 * (-b11 - b22 + sd)
    lam2 = lam1 - sd
    e1, e2 = np.exp(lam1 * t), np.exp(lam2 * t)
    p1 = (
        b12 * (b22 - b11 + 2 * b21 - sd) / (sd * (sd + b11 - b22)) * e1
        - b12 * (sd + b22 - b11 + 2 * b21) / (sd * (-sd + b11 - b22)) * e2
    )
    p2 = (b11 - b22 - 2 * b21 + sd) / (2 * sd) * e1 + (sd + b22 - b11 + 2 * b21) / (2 * sd) * e2
    return np.stack([p1, p2], axis=-1)


def closed_form_pi_prime(spec: SpectralData, t):
    """Case-wise closed forms for ``pi'``.

    Returns ``(values, tags)`` where ``values`` has shape ``t.shape + (2,)``
    and ``tags[i]`` is ``"exact"`` or ``"upperBound"``.
    """
    t = np.asarray(t, dtype=float)
    b = spec.bmat
    e1, e2 = np.exp(spec.lambda1 * t), np.exp(spec.lambda2 * t)
    tag = spec.case_tag
    if tag == "diagonalCase":
        vals = np.stack([np.exp(-b[0, 0] * t), np.exp(-b[1, 1] * t)], axis=-1)
        return vals, (EXACT, EXACT)
    if tag == "triangularCase":
        A = _eigen_weights(b, spec.lambda1, spec.lambda2)
        vals = np.stack([A[i] * e1 + (1 - A[i]) * e2 for i in range(2)], axis=-1)
        return vals, (EXACT, EXACT)
    if tag == "epsZero":
        return np.stack([e1, e1], axis=-1), (EXACT, EXACT)
    if tag == "epsNeg":
        p1 = spec.theta11 * e1 + (1 - spec.theta11) * e2
        p2 = spec.theta12 * e1 + e2
        return np.stack([p1, p2], axis=-1), (EXACT, UPPER)
    p1 = spec.theta21 * e1 + e2
    p2 = spec.theta22 * e1 + (1 - spec.theta22) * e2
    return np.stack([p1, p2], axis=-1), (UPPER, EXACT)


def gamma(imm: ImmigrationMechanism) -> np.ndarray:
    """Mean immigration rate per type: ``h_i + int z_i n(dz)``."""
    return imm.h + imm.n.first_moments


def mean_total_mass(b, beta: float, imm: ImmigrationMechanism, x, t: float) -> float:
    """Annealed ``E[X_1(t) + X_2(t)]`` started from ``x``."""
    x = np.asarray(x, dtype=float)
    start = float(x @ pi(b, beta, t))
    g = gamma(imm)
    if t <= 0 or not np.any(g):
        return start
    val, _ = integrate.quad(lambda s: float(g @ pi(b, beta, t - s)), 0.0, t, epsabs=1e-13, epsrel=1e-12, limit=200)
    return start + val


def stationary_mean_total_mass(b, beta: float, imm: ImmigrationMechanism) -> float:
    """``lim_t`` of :func:`mean_total_mass`: ``<gamma, (b - beta I)^{-1} 1>``.

    Finite when ``beta`` lies below the spectral gap of ``b``.
    """
    g = gamma(imm)
    if not np.any(g):
        return 0.0
    shifted = np.asarray(b, dtype=float) - beta * np.eye(2)
    eig = np.linalg.eigvals(shifted)
    if np.any(eig.real <= 0):
        raise ValueError("beta is not below the spectral gap; the stationary mean is infinite")
    return float(g @ np.linalg.solve(shifted, np.ones(2)))


def decay_bound(spec: SpectralData, x, y, t):
    """``(sum_i |x_i - y_i| pi'_i(0,t), (1 + theta) |x - y|_1 exp(lambda1 t))``."""
    d = np.abs(np.asarray(x, dtype=float) - np.asarray(y, dtype=float))
    lhs = pi_prime(spec.bmat, t) @ d
    rhs = (1.0 + spec.theta) * d.sum() * np.exp(spec.lambda1 * np.asarray(t, dtype=float))
    return lhs, rhs
