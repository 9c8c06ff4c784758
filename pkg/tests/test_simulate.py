import dataclasses
import math

import numpy as np
import pytest
import scipy.linalg

from mixlasso import (
    SimScheme,
    excess_risk,
    generate_design,
    make_scheme,
    run_scheme,
    scheme_from_dict,
    scheme_to_dict,
    simulate_dataset,
    simulate_test_data,
    truth_parameters,
)


# -------------------------------------------------------------------- presets


def test_preset_dimensions():
    cases = {
        "L1": (25, 6, 10, 3), "L2": (30, 6, 15, 3),
        "H1": (25, 6, 300, 2), "H2": (30, 6, 500, 1), "H3": (30, 6, 1000, 3),
        "H4": (25, 6, 300, 3),
    }
    for name, (n_groups, n, p, q) in cases.items():
        s = make_scheme(name)
        assert (s.n_groups, s.group_size, s.p, s.q) == (n_groups, n, p, q), name
        assert s.ar_rho == 0.2
        np.testing.assert_array_equal(np.nonzero(s.beta)[0], range(5))


def test_preset_parameter_values():
    l1 = make_scheme("L1")
    np.testing.assert_allclose(l1.psi, 0.56 * np.eye(3))
    assert l1.sigma2 == 0.25
    np.testing.assert_array_equal(l1.beta[:5], [1, 2, 4, 3, 3])

    l2 = make_scheme("L2")
    np.testing.assert_allclose(
        l2.psi, [[5.0, 2.0, 0.5], [2.0, 2.0, 1.0], [0.5, 1.0, 1.0]]
    )
    assert l2.fit_kind == "general"

    h4 = make_scheme("H4")
    np.testing.assert_allclose(h4.psi, np.diag([3.0, 3.0, 2.0]))
    assert h4.fit_q == 4 and h4.fit_kind == "diagonal"
    assert h4.effective_fit_q == 4
    assert h4.random_effect_columns == (0, 1, 2, 3)


def test_prediction_presets_take_theta2():
    p2 = make_scheme("P2", theta2=0.5)
    assert p2.n_groups == 25 and p2.p == 100
    np.testing.assert_allclose(p2.psi, 0.5 * np.eye(3))
    assert p2.sigma2 == 1.0
    assert p2.test_group_size == 50
    np.testing.assert_array_equal(p2.beta[:5], [1.0, 1.5, 1.2, 1.0, 2.0])
    # zero variance is a legitimate prediction setting
    p1 = make_scheme("P1", theta2=0.0)
    assert np.all(p1.psi == 0.0)


def test_theta2_rejected_outside_prediction_presets():
    with pytest.raises(ValueError):
        make_scheme("L1", theta2=2.0)
    with pytest.raises(KeyError):
        make_scheme("nope")


# --------------------------------------------------------------------- design


def test_design_constant_intercept_and_ar_correlation(rng):
    X = generate_design(6, 0.2, 40_000, rng)
    assert np.all(X[:, 0] == 1.0)
    corr = np.corrcoef(X[:, 1:].T)
    # AR(1): corr between columns j,k is 0.2^|j-k|
    for lag in (1, 2):
        observed = np.diag(corr, k=lag)
        np.testing.assert_allclose(observed, 0.2 ** lag, atol=0.02)


def test_design_validates_arguments(rng):
    with pytest.raises(ValueError):
        generate_design(0, 0.2, 5, rng)
    with pytest.raises(ValueError):
        generate_design(3, 1.0, 5, rng)


# -------------------------------------------------------------------- sampling


def test_dataset_shapes_and_reproducibility():
    scheme = make_scheme("L1")
    data1, truth1 = simulate_dataset(scheme, np.random.default_rng(7))
    data2, truth2 = simulate_dataset(scheme, np.random.default_rng(7))
    assert data1.n_groups == 25 and data1.n_total == 150
    for g in data1.groups:
        assert g.X.shape == (6, 10)
        np.testing.assert_array_equal(g.Z, g.X[:, :3])
    np.testing.assert_array_equal(data1.stacked[0], data2.stacked[0])
    np.testing.assert_array_equal(truth1.b[3], truth2.b[3])
    assert truth1.support == (0, 1, 2, 3, 4)
    assert len(truth1.b) == 25 and truth1.b[0].shape == (3,)


def test_response_assembles_from_parts():
    scheme = make_scheme("L1")
    data, truth = simulate_dataset(scheme, np.random.default_rng(11))
    g = data.groups[4]
    eps = g.y - g.X @ truth.beta - g.Z @ truth.b[4]
    # residual noise should look like N(0, 0.25): crude but effective bound
    assert np.all(np.abs(eps) < 5 * math.sqrt(truth.sigma2))


def test_test_data_reuses_random_effects():
    scheme = make_scheme("P1", theta2=2.0)
    rng = np.random.default_rng(3)
    data, truth = simulate_dataset(scheme, rng)
    test = simulate_test_data(scheme, truth, rng)
    assert test.n_groups == data.n_groups
    assert all(g.n == 50 for g in test.groups)
    g = test.groups[0]
    resid = g.y - g.X @ truth.beta - g.Z @ truth.b[0]
    assert float(np.std(resid)) == pytest.approx(1.0, abs=0.35)


def test_test_data_requires_configuration():
    scheme = make_scheme("L1")
    data, truth = simulate_dataset(scheme, np.random.default_rng(1))
    with pytest.raises(ValueError):
        simulate_test_data(scheme, truth, np.random.default_rng(2))


def test_truth_parameters_round_trip():
    scheme = make_scheme("L2")
    _, truth = simulate_dataset(scheme, np.random.default_rng(5))
    phi = truth_parameters(truth)
    np.testing.assert_allclose(phi.cov.psi(), truth.psi, atol=1e-12)
    assert phi.sigma2 == pytest.approx(truth.sigma2)
    assert phi.cov.kind == "general"
    phi4 = truth_parameters(simulate_dataset(make_scheme("H4"), np.random.default_rng(5))[1])
    assert phi4.cov.kind == "diagonal"


# ----------------------------------------------------------------- excess risk


def test_excess_risk_zero_on_itself():
    scheme = make_scheme("L1")
    data, truth = simulate_dataset(scheme, np.random.default_rng(17))
    phi = truth_parameters(truth)
    assert excess_risk(data, phi, phi) == pytest.approx(0.0, abs=1e-10)


def test_excess_risk_matches_dense_gaussian_kl(rng):
    scheme = make_scheme("L1")
    data, truth = simulate_dataset(scheme, np.random.default_rng(19))
    phi0 = truth_parameters(truth)
    # perturb into a different parameter vector
    beta = phi0.beta.copy()
    beta[2] += 0.4
    phi = dataclasses.replace(
        phi0, beta=beta, rho=phi0.rho + 0.3,
        cov=phi0.cov.with_theta(phi0.cov.theta * 1.2),
    )
    total = 0.0
    for g in data.groups:
        v = g.Z @ phi.cov.psi() @ g.Z.T + phi.sigma2 * np.eye(g.n)
        v0 = g.Z @ phi0.cov.psi() @ g.Z.T + phi0.sigma2 * np.eye(g.n)
        diff = g.X @ (phi0.beta - phi.beta)
        vi = np.linalg.inv(v)
        kl = 0.5 * (
            np.linalg.slogdet(v)[1] - np.linalg.slogdet(v0)[1]
            + np.trace(vi @ v0) + diff @ vi @ diff - g.n
        )
        total += kl
    assert excess_risk(data, phi, phi0) == pytest.approx(total / data.n_groups, rel=1e-9)
    assert excess_risk(data, phi, phi0) > 0.0


def test_excess_risk_with_mismatched_structures():
    # fitted structure wider than the generating one (H4 situation)
    scheme = make_scheme("H4")
    data, truth = simulate_dataset(scheme, np.random.default_rng(23))
    phi0 = truth_parameters(truth)
    from mixlasso import CovarianceStructure, ParameterVector

    wide = ParameterVector(
        truth.beta,
        CovarianceStructure("diagonal", np.array([1.7, 1.7, 1.4, 0.0]), 4),
        math.log(truth.sigma2),
    )
    value = excess_risk(data, wide, phi0, re_columns=(0, 1, 2, 3), re_columns0=(0, 1, 2))
    assert np.isfinite(value) and value > 0.0


# -------------------------------------------------------------------- summary


def test_run_scheme_summary_table_deterministic():
    scheme = make_scheme("L1", runs=2)
    a = run_scheme(scheme, methods=("plainLasso", "adLasso"), grid_size=8)
    b = run_scheme(scheme, methods=("plainLasso", "adLasso"), grid_size=8)
    assert a.to_tsv() == b.to_tsv()
    lines = a.to_tsv().splitlines()
    assert lines[0] == "scheme\tmethod\tmetric\tmean\tsd\tn_runs"
    assert all(line.split("\t")[0] == "L1" for line in lines[1:])
    methods = {line.split("\t")[1] for line in lines[1:]}
    assert methods == {"plainLasso", "adLasso"}


def test_run_scheme_collects_per_run_metrics():
    scheme = make_scheme("L1", runs=2)
    s = run_scheme(scheme, methods=("plainLasso",), grid_size=8)
    assert len(s.per_run["plainLasso"]) == 2
    rec = s.per_run["plainLasso"][0]
    for key in ("active_size", "tp", "sigma2", "beta_1"):
        assert key in rec
    mean, sd, n = s.stats["plainLasso"]["tp"]
    values = [r["tp"] for r in s.per_run["plainLasso"]]
    assert mean == pytest.approx(np.mean(values))
    assert n == 2
    if len(set(values)) > 1:
        assert sd == pytest.approx(np.std(values, ddof=1))


def test_scheme_dict_round_trip():
    scheme = make_scheme("P3", theta2=1.0, runs=7, seed=42)
    payload = scheme_to_dict(scheme)
    back = scheme_from_dict(payload)
    assert scheme_to_dict(back) == payload
    np.testing.assert_array_equal(back.beta, scheme.beta)
    np.testing.assert_array_equal(back.psi, scheme.psi)
    # and the payload is json-serializable
    import json

    json.loads(json.dumps(payload))
