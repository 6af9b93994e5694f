import numpy as np
import pytest

from cbire import ImmigrationMechanism, JumpMeasure2D, closed_form_pi_prime, decay_bound, mat_exp, mean_total_mass
from cbire import pi, pi_prime, spectral
from cbire.moments import case2_pi_prime, gamma, stationary_mean_total_mass
from oracles import expm_neg, mean_mass_linear, random_admissible_b

T = np.linspace(0.01, 5, 60)


@pytest.mark.parametrize("b", [
    [[2, -0.5], [-0.5, 3]], [[1, 0], [0, 1]], [[1, -1], [0, 1]], [[0.5, 2], [-3, 1]], [[1, 1e-9], [1e-9, 1]],
])
def test_mat_exp_against_expm(b):
    for t in [0.0, 0.3, 1.0, 4.0]:
        assert np.allclose(mat_exp(b, t), expm_neg(b, t), rtol=1e-12, atol=1e-14)


def test_mat_exp_long_horizon_is_finite():
    b = [[2, -1], [-1, 2]]
    big = mat_exp(b, 800.0)
    assert np.all(np.isfinite(big))
    assert np.allclose(big, 0.5 * np.exp(-800.0) * np.ones((2, 2)), rtol=1e-10)


def test_pi_prime_basic():
    b = [[2, -0.5], [-0.5, 3]]
    assert np.allclose(pi_prime(b, 0.0), [1, 1])
    assert np.allclose(pi_prime(np.eye(2), 1.0), [np.exp(-1)] * 2)
    h = 1e-6
    fd = (pi_prime(b, h) - pi_prime(b, -h)) / (2 * h)
    assert np.allclose(fd, -np.sum(b, axis=1), rtol=1e-7)
    assert np.all(np.diff(pi_prime(b, T), axis=0) < 0)
    assert np.allclose(pi(b, -0.3, 2.0), np.exp(-0.6) * pi_prime(b, 2.0))


def test_spectral_symmetric():
    sd = spectral([[2, -1], [-1, 2]], -3.0)
    assert sd.delta == pytest.approx(4) and sd.lambda1 == pytest.approx(-1) and sd.lambda2 == pytest.approx(-3)
    assert sd.case_tag == "epsZero" and sd.theta == 0 and sd.rho == pytest.approx(4)


def test_spectral_eps_positive_theta():
    sd = spectral([[2, -0.5], [-0.5, 3]], 0.0)
    assert sd.case_tag == "epsPos"
    sdel = np.sqrt(2.0)
    eps = sdel + 3 - 2 - 1
    assert sd.eps == pytest.approx(eps)
    assert sd.theta == pytest.approx(0.5 * (2 * sdel - eps) / (sdel * (sdel + 2 - 3)))
    assert sd.theta == pytest.approx(1.2071, abs=1e-4)


def test_spectral_rejects_nonpositive_discriminant():
    with pytest.raises(ValueError):
        spectral(np.eye(2), 0.0)


def test_case2_formulas_match_matrix_exponential():
    for b in ([[2, -0.5], [-0.5, 3]], [[3, -0.5], [-0.5, 2]], [[1, -2], [-0.1, 4]]):
        assert np.allclose(case2_pi_prime(b, T), pi_prime(b, T), rtol=1e-12)


@pytest.mark.parametrize("b", [[[2, -0.5], [-0.5, 3]], [[3, -0.5], [-0.5, 2]], [[2, -1], [-1, 2]],
                               [[1, 0], [0, 3]], [[1, -1], [0, 3]], [[1, 0], [-1, 3]]])
def test_closed_forms_exact_or_upper(b):
    sd = spectral(b, 0.0)
    vals, tags = closed_form_pi_prime(sd, T)
    ref = pi_prime(b, T)
    for i in range(2):
        if tags[i] == "exact":
            assert np.allclose(vals[:, i], ref[:, i], rtol=1e-10, atol=0)
        else:
            assert np.all(vals[:, i] >= ref[:, i] * (1 - 1e-12))


def test_decay_bound_examples():
    sd = spectral([[2, -1], [-1, 2]], 0.0)
    lhs, rhs = decay_bound(sd, [1, 1], [1, 1], 1.0)
    assert lhs == 0 and rhs == 0
    lhs, rhs = decay_bound(sd, [3, 0], [1, 2], T)
    assert np.allclose(lhs, 4 * np.exp(-T), rtol=1e-12) and np.allclose(lhs, rhs, rtol=1e-12)
    sd = spectral([[2, -0.5], [-0.5, 3]], 0.0)
    lhs, rhs = decay_bound(sd, [1, 0], [0, 0], np.arange(0.1, 5.01, 0.1))
    assert np.all(lhs <= rhs * (1 + 1e-12))


def test_decay_bound_random_models(rng):
    for _ in range(20):
        b = random_admissible_b(rng)
        sd = spectral(b, 0.0)
        x, y = rng.uniform(0, 3, 2), rng.uniform(0, 3, 2)
        lhs, rhs = decay_bound(sd, x, y, T)
        assert np.all(lhs <= rhs * (1 + 1e-12))


def test_mean_total_mass():
    b = [[2, -0.5], [-0.5, 3]]
    imm = ImmigrationMechanism(h=[0.3, 0.2], n=JumpMeasure2D.exponential([1, 2], 0.4))
    assert np.allclose(gamma(imm), [0.3 + 0.4, 0.2 + 0.2])
    assert mean_total_mass(b, -0.2, ImmigrationMechanism(), [1, 2], 1.5) == pytest.approx(
        float(np.dot([1, 2], pi(b, -0.2, 1.5))), rel=1e-14)
    ref = mean_mass_linear(b, -0.2, gamma(imm), [1, 2], 1.5)
    assert mean_total_mass(b, -0.2, imm, [1, 2], 1.5) == pytest.approx(ref, rel=1e-10)
    unit = ImmigrationMechanism(h=[1, 0])
    for t in (0.5, 1, 3):
        assert mean_total_mass(np.eye(2), 0.0, unit, [0, 0], t) == pytest.approx(1 - np.exp(-t), rel=1e-12)
    assert stationary_mean_total_mass(np.eye(2), 0.0, unit) == pytest.approx(1.0, rel=1e-10)
    assert stationary_mean_total_mass(b, -0.2, imm) == pytest.approx(
        mean_total_mass(b, -0.2, imm, [0, 0], 40.0), rel=1e-10)
    with pytest.raises(ValueError):
        stationary_mean_total_mass(b, 5.0, imm)


def test_rho_positive_under_validation(rng):
    for _ in range(10):
        b = random_admissible_b(rng)
        tr = np.trace(b)
        gap = 0.5 * (tr - np.sqrt(tr**2 - 4 * np.linalg.det(b)))
        sd = spectral(b, gap - 0.01)
        assert sd.rho > 0
