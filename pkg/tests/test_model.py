import numpy as np
import pytest

from mixlasso import (
    CovarianceStructure,
    DimensionMismatch,
    Group,
    GroupedDataset,
    InfeasibleFrozenCoefficient,
    ParameterVector,
    PenaltyWeights,
    fisher_diagonal,
    gradient_beta,
    gradient_eta,
    group_covariance,
    marginal_cov_derivative,
    neg_log_likelihood,
    objective,
    penalty_value,
)
from mixlasso.model import LOG_2PI

from conftest import (
    COV_KINDS,
    central_difference,
    dense_marginal_cov,
    dense_nll,
    random_covariance,
    random_instance,
)


# ---------------------------------------------------------------- covariance


@pytest.mark.parametrize("kind,q,expected", [
    ("identity", 3, 1),
    ("diagonal", 3, 3),
    ("general", 3, 6),
    ("general", 1, 1),
])
def test_theta_dimension(kind, q, expected):
    cov = CovarianceStructure(kind, np.ones(expected), q)
    assert cov.n_theta == expected
    assert cov.lower_factor().shape == (q, q)


def test_psi_is_factor_square(rng):
    for kind in COV_KINDS:
        cov = random_covariance(rng, kind, 3)
        L = cov.lower_factor()
        np.testing.assert_allclose(cov.psi(), L @ L.T, atol=1e-12)
        # PSD by construction
        assert np.min(np.linalg.eigvalsh(cov.psi())) >= -1e-12


def test_general_theta_fills_row_major():
    cov = CovarianceStructure("general", np.array([1.0, 2.0, 3.0]), 2)
    np.testing.assert_array_equal(cov.lower_factor(), [[1.0, 0.0], [2.0, 3.0]])


def test_psi_derivative_matches_finite_difference(rng):
    for kind in COV_KINDS:
        cov = random_covariance(rng, kind, 2)
        for j in range(cov.n_theta):
            def psi_at(t):
                return cov.with_theta(t).psi()

            h = 1e-7
            tp = cov.theta.copy(); tp[j] += h
            tm = cov.theta.copy(); tm[j] -= h
            fd = (psi_at(tp) - psi_at(tm)) / (2 * h)
            np.testing.assert_allclose(cov.d_psi(j), fd, atol=1e-6)


def test_identity_requires_random_effects():
    with pytest.raises(ValueError):
        CovarianceStructure("identity", np.ones(1), 0)
    with pytest.raises(ValueError):
        CovarianceStructure("spherical", np.ones(1), 2)


def test_theta_length_checked():
    with pytest.raises(DimensionMismatch):
        CovarianceStructure("general", np.ones(2), 2)


# ---------------------------------------------------------------- parameters


def test_sigma2_is_exp_rho(rng):
    _, phi = random_instance(rng)
    assert phi.sigma2 == pytest.approx(np.exp(phi.rho))
    assert phi.n_variance == phi.cov.n_theta + 1


def test_default_weights_zero_on_random_effect_columns(rng):
    data, _ = random_instance(rng, q=2, p=6)
    w = PenaltyWeights.default_for(data)
    assert w.values[0] == 0.0 and w.values[1] == 0.0
    assert np.all(w.values[2:] == 1.0)
    w2 = PenaltyWeights.default_for(data, unpenalized=(3,))
    assert w2.values[3] == 0.0
    np.testing.assert_array_equal(w.penalized, w.values > 0)


def test_weights_reject_negative():
    with pytest.raises(ValueError):
        PenaltyWeights(np.array([1.0, -0.5]))


# ------------------------------------------------------------------- dataset


def test_z_must_match_designated_columns(rng):
    X = rng.standard_normal((4, 3))
    y = rng.standard_normal(4)
    g = Group("a", y, X, rng.standard_normal((4, 1)))
    with pytest.raises(ValueError):
        GroupedDataset((g,), (0,))


def test_duplicate_group_ids_rejected(rng):
    X = rng.standard_normal((3, 2))
    y = rng.standard_normal(3)
    g1 = Group("a", y, X, X[:, :1])
    with pytest.raises(ValueError):
        GroupedDataset((g1, g1), (0,))


def test_from_arrays_groups_by_first_appearance(rng):
    X = rng.standard_normal((6, 2))
    y = rng.standard_normal(6)
    ids = np.array(["b", "a", "b", "a", "b", "a"])
    data = GroupedDataset.from_arrays(y, X, ids, (0,))
    assert [g.group_id for g in data.groups] == ["b", "a"]
    assert data.n_total == 6
    np.testing.assert_array_equal(data.groups[0].y, y[[0, 2, 4]])


def test_singleton_group_warns(rng):
    X = rng.standard_normal((1, 2))
    g = Group("solo", rng.standard_normal(1), X, X[:, :1])
    with pytest.warns(UserWarning):
        GroupedDataset((g,), (0,))


# ---------------------------------------------------------------- likelihood


@pytest.mark.parametrize("kind", COV_KINDS)
def test_nll_matches_dense_oracle(rng, kind):
    data, phi = random_instance(rng, kind=kind, q=2)
    assert neg_log_likelihood(data, phi) == pytest.approx(dense_nll(data, phi), abs=1e-10)


def test_objective_drops_normalizing_constant(rng):
    data, phi = random_instance(rng)
    w = PenaltyWeights.default_for(data)
    const = 0.5 * data.n_total * LOG_2PI
    assert objective(data, phi, 0.0, w) == pytest.approx(
        neg_log_likelihood(data, phi) - const, rel=1e-12
    )
    lam = 0.7
    assert objective(data, phi, lam, w) == pytest.approx(
        neg_log_likelihood(data, phi) - const + lam * penalty_value(phi, w), rel=1e-12
    )


def test_penalty_infeasible_frozen_coefficient(rng):
    data, phi = random_instance(rng, p=6)
    w = PenaltyWeights(np.where(np.arange(6) == 3, np.inf, 1.0))
    beta = phi.beta.copy()
    beta[3] = 0.5
    with pytest.raises(InfeasibleFrozenCoefficient):
        penalty_value(phi.with_beta(beta), w)
    # frozen at zero is fine, and contributes nothing
    beta[3] = 0.0
    expected = np.sum(np.abs(beta[np.isfinite(w.values)] * w.values[np.isfinite(w.values)]))
    assert penalty_value(phi.with_beta(beta), w) == pytest.approx(expected)


def test_group_covariance_matches_dense_block(rng):
    data, phi = random_instance(rng, q=2)
    g = data.groups[0]
    f = group_covariance(g.Z, phi)
    dense = dense_marginal_cov(data, phi)
    n0 = g.y.shape[0]
    np.testing.assert_allclose(f.lower @ f.lower.T, dense[:n0, :n0], atol=1e-10)


# ----------------------------------------------------------------- gradients


@pytest.mark.parametrize("kind", COV_KINDS)
def test_gradient_beta_matches_finite_difference(rng, kind):
    data, phi = random_instance(rng, kind=kind)

    def f(beta):
        return dense_nll(data, phi.with_beta(beta))

    fd = central_difference(f, phi.beta)
    for k in range(phi.p):
        assert gradient_beta(data, phi, k) == pytest.approx(fd[k], rel=1e-6, abs=1e-8)


@pytest.mark.parametrize("kind", COV_KINDS)
def test_gradient_eta_matches_finite_difference(rng, kind):
    data, phi = random_instance(rng, kind=kind)
    eta = np.append(phi.cov.theta, phi.rho)

    def f(e):
        cov = phi.cov.with_theta(e[:-1])
        return dense_nll(data, ParameterVector(phi.beta, cov, float(e[-1])))

    fd = central_difference(f, eta)
    for r in range(phi.n_variance):
        assert gradient_eta(data, phi, r) == pytest.approx(fd[r], rel=1e-6, abs=1e-8)


def test_marginal_cov_derivative_sigma_slot(rng):
    data, phi = random_instance(rng)
    g = data.groups[0]
    a = marginal_cov_derivative(g.Z, phi.cov, phi.sigma2, phi.n_variance - 1)
    np.testing.assert_allclose(a, phi.sigma2 * np.eye(g.y.shape[0]), atol=1e-12)


def test_fisher_diagonal_beta_slot(rng):
    data, phi = random_instance(rng)
    V = dense_marginal_cov(data, phi)
    X = np.vstack([g.X for g in data.groups])
    for k in range(phi.p):
        expected = X[:, k] @ np.linalg.solve(V, X[:, k])
        assert fisher_diagonal(data, phi, k) == pytest.approx(expected, rel=1e-10)


def test_fisher_diagonal_eta_slot(rng):
    data, phi = random_instance(rng, kind="general")
    psi = phi.cov.psi()
    for r in range(phi.n_variance):
        expected = 0.0
        for g in data.groups:
            V = g.Z @ psi @ g.Z.T + phi.sigma2 * np.eye(g.y.shape[0])
            A = marginal_cov_derivative(g.Z, phi.cov, phi.sigma2, r)
            B = np.linalg.solve(V, A)
            expected += 0.5 * np.trace(B @ B)
        assert fisher_diagonal(data, phi, phi.p + r) == pytest.approx(expected, rel=1e-9)
