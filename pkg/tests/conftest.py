"""Shared builders and independent oracle routes for the test suite.

The oracles here deliberately avoid the library's own code paths: dense
stacked likelihood instead of block-wise, LU instead of Cholesky, finite
differences instead of analytic gradients. Tests compare the two routes.
"""

from __future__ import annotations

import numpy as np
import pytest
import scipy.linalg

from mixlasso import (
    CovarianceStructure,
    Group,
    GroupedDataset,
    ParameterVector,
    PenaltyWeights,
)

COV_KINDS = ("identity", "diagonal", "general")


def random_covariance(rng: np.random.Generator, kind: str, q: int) -> CovarianceStructure:
    if kind == "identity":
        theta = rng.uniform(0.3, 1.5, size=1)
    elif kind == "diagonal":
        theta = rng.uniform(0.3, 1.5, size=q)
    else:
        # random lower-triangular factor, strong diagonal so Psi is well conditioned
        theta = np.zeros(q * (q + 1) // 2)
        pos = 0
        for i in range(q):
            for j in range(i + 1):
                theta[pos] = rng.uniform(0.5, 1.2) if i == j else rng.uniform(-0.4, 0.4)
                pos += 1
    return CovarianceStructure(kind, theta, q)


def random_instance(
    rng: np.random.Generator,
    n_groups: int = 4,
    group_size: int = 5,
    p: int = 6,
    q: int = 2,
    kind: str = "identity",
) -> tuple[GroupedDataset, ParameterVector]:
    """Small random dataset plus a random (not fitted) parameter point."""
    re_cols = tuple(range(q))
    groups = []
    for i in range(n_groups):
        X = rng.standard_normal((group_size, p))
        X[:, 0] = 1.0
        Z = X[:, list(re_cols)] if q else X[:, :0]
        y = rng.standard_normal(group_size)
        groups.append(Group(str(i), y, X, Z))
    data = GroupedDataset(tuple(groups), re_cols)
    beta = rng.standard_normal(p)
    beta[rng.random(p) < 0.3] = 0.0
    cov = random_covariance(rng, kind, q)
    rho = float(rng.uniform(-1.0, 0.5))
    return data, ParameterVector(beta, cov, rho)


def dense_marginal_cov(data: GroupedDataset, phi: ParameterVector) -> np.ndarray:
    """Stacked N_T x N_T block-diagonal covariance, built group by group."""
    psi = phi.cov.psi()
    blocks = []
    for g in data.groups:
        n = g.y.shape[0]
        blocks.append(g.Z @ psi @ g.Z.T + phi.sigma2 * np.eye(n))
    return scipy.linalg.block_diag(*blocks)


def dense_nll(data: GroupedDataset, phi: ParameterVector) -> float:
    """Gaussian negative log-likelihood from one dense solve (oracle route)."""
    y = np.concatenate([g.y for g in data.groups])
    X = np.vstack([g.X for g in data.groups])
    r = y - X @ phi.beta
    V = dense_marginal_cov(data, phi)
    sign, logdet = np.linalg.slogdet(V)
    assert sign > 0
    quad = float(r @ np.linalg.solve(V, r))
    n = y.shape[0]
    return 0.5 * (n * np.log(2.0 * np.pi) + logdet + quad)


def lu_log_det(a: np.ndarray) -> float:
    """log|A| via LU, independent of any Cholesky code."""
    lu, piv = scipy.linalg.lu_factor(a)
    # permutation sign is +1 for SPD input paired with |diag|, and the
    # determinant of an SPD matrix is positive anyway
    return float(np.sum(np.log(np.abs(np.diag(lu)))))


def central_difference(func, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    for k in range(x.size):
        step = h * max(1.0, abs(x[k]))
        xp = x.copy()
        xm = x.copy()
        xp[k] += step
        xm[k] -= step
        out[k] = (func(xp) - func(xm)) / (2.0 * step)
    return out


def oracle_lasso(
    X: np.ndarray,
    y: np.ndarray,
    lam: float,
    weights: np.ndarray,
    tol: float = 1e-12,
    max_iter: int = 50_000,
) -> np.ndarray:
    """Textbook cyclic coordinate descent for 0.5*||y-Xb||^2 + lam*sum(w|b|).

    Written from the soft-threshold formula alone; shares no code with the
    package.
    """
    n, p = X.shape
    beta = np.zeros(p)
    col_sq = np.einsum("ij,ij->j", X, X)
    resid = y.copy()
    for _ in range(max_iter):
        delta = 0.0
        for j in range(p):
            if col_sq[j] == 0.0:
                continue
            old = beta[j]
            rho_j = X[:, j] @ resid + col_sq[j] * old
            wj = weights[j]
            if wj == 0.0:
                new = rho_j / col_sq[j]
            elif np.isinf(wj):
                new = 0.0
            else:
                t = lam * wj
                new = np.sign(rho_j) * max(abs(rho_j) - t, 0.0) / col_sq[j]
            if new != old:
                resid -= (new - old) * X[:, j]
                delta = max(delta, abs(new - old))
            beta[j] = new
        if delta < tol:
            break
    return beta


def kkt_violation(data, fit_result) -> float:
    """Max stationarity residual of a fit: subgradient condition for beta,
    plain gradient for the variance coordinates."""
    from mixlasso import gradient_beta, gradient_eta

    phi = fit_result.phi_hat
    lam = fit_result.lam
    w = fit_result.weights.values
    worst = 0.0
    for k in range(phi.p):
        if np.isinf(w[k]):
            continue
        g = gradient_beta(data, phi, k)
        if w[k] == 0.0 or phi.beta[k] != 0.0:
            pen = lam * w[k] * np.sign(phi.beta[k]) if w[k] > 0.0 else 0.0
            worst = max(worst, abs(g + pen))
        else:
            worst = max(worst, max(abs(g) - lam * w[k], 0.0))
    for r in range(phi.n_variance):
        worst = max(worst, abs(gradient_eta(data, phi, r)))
    return worst


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240817)


def default_weights(data: GroupedDataset) -> PenaltyWeights:
    return PenaltyWeights.default_for(data)
