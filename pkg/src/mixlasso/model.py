"""Model types and likelihood computations for grouped linear mixed models.

The observation model for group ``i`` with ``n_i`` observations is

    y_i = X_i beta + Z_i b_i + eps_i,
    b_i ~ N(0, Psi),  eps_i ~ N(0, sigma2 * I),

which gives the marginal distribution ``y_i ~ N(X_i beta, V_i)`` with
``V_i = Z_i Psi Z_i' + sigma2 * I``. All likelihood quantities are
computed group by group; the stacked block-diagonal covariance is never
materialized.

Variance parameters are unconstrained: ``Psi = L(theta) L(theta)'`` for
a structured lower factor ``L`` and ``sigma2 = exp(rho)``. The combined
variance coordinate vector ``eta = (theta, rho)`` is indexed with
``theta`` first and ``rho`` last.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np

from .exceptions import DimensionMismatch, InfeasibleFrozenCoefficient
from .linalg import CholeskyFactor, cholesky, log_det, solve_spd

COV_KINDS = ("identity", "diagonal", "general")

LOG_2PI = math.log(2.0 * math.pi)


def _theta_length(kind: str, q: int) -> int:
    if kind == "identity":
        return 1
    if kind == "diagonal":
        return q
    if kind == "general":
        return q * (q + 1) // 2
    raise ValueError(f"unknown covariance kind {kind!r}")


@dataclass(frozen=True)
class CovarianceStructure:
    """Structured random-effect covariance ``Psi = L L'``.

    Parameters
    ----------
    kind : str
        One of ``"identity"`` (``L = theta[0] * I``, one parameter),
        ``"diagonal"`` (``L = diag(theta)``, ``q`` parameters) or
        ``"general"`` (``L`` is a full lower triangle filled row by row,
        ``q (q + 1) / 2`` parameters).
    theta : ndarray
        Unconstrained parameter vector. Sign flips of any entry for the
        identity and diagonal kinds leave ``Psi`` unchanged.
    q : int
        Dimension of the random-effect vector.
    """

    kind: str
    theta: np.ndarray = field(repr=False)
    q: int

    def __post_init__(self):
        object.__setattr__(self, "theta", np.atleast_1d(np.asarray(self.theta, dtype=float)))
        if self.kind not in COV_KINDS:
            raise ValueError(f"unknown covariance kind {self.kind!r}")
        if self.q < 0:
            raise ValueError("q must be non-negative")
        if self.kind == "identity" and self.q == 0:
            raise ValueError("identity covariance requires q >= 1; use diagonal for q = 0")
        expected = _theta_length(self.kind, self.q)
        if self.theta.shape != (expected,):
            raise DimensionMismatch(
                f"{self.kind} covariance with q={self.q} needs {expected} parameters,"
                f" got shape {self.theta.shape}"
            )

    @property
    def n_theta(self) -> int:
        return self.theta.shape[0]

    def lower_factor(self) -> np.ndarray:
        """The q x q lower factor ``L(theta)``."""
        if self.kind == "identity":
            return self.theta[0] * np.eye(self.q)
        if self.kind == "diagonal":
            return np.diag(self.theta)
        out = np.zeros((self.q, self.q))
        out[np.tril_indices(self.q)] = self.theta
        return out

    def lower_basis(self, j: int) -> np.ndarray:
        """Elementwise derivative ``dL / dtheta_j`` (a constant matrix)."""
        if not 0 <= j < self.n_theta:
            raise IndexError(f"theta index {j} out of range for {self.n_theta} parameters")
        if self.kind == "identity":
            return np.eye(self.q)
        out = np.zeros((self.q, self.q))
        if self.kind == "diagonal":
            out[j, j] = 1.0
        else:
            rows, cols = np.tril_indices(self.q)
            out[rows[j], cols[j]] = 1.0
        return out

    def psi(self) -> np.ndarray:
        ell = self.lower_factor()
        return ell @ ell.T

    def d_psi(self, j: int) -> np.ndarray:
        """Derivative ``dPsi / dtheta_j = E_j L' + L E_j'``."""
        ell = self.lower_factor()
        basis = self.lower_basis(j)
        return basis @ ell.T + ell @ basis.T

    def with_theta(self, theta: np.ndarray) -> "CovarianceStructure":
        return replace(self, theta=np.asarray(theta, dtype=float))


@dataclass(frozen=True)
class ParameterVector:
    """Full parameter state ``phi = (beta, theta, rho)``."""

    beta: np.ndarray = field(repr=False)
    cov: CovarianceStructure
    rho: float

    def __post_init__(self):
        object.__setattr__(self, "beta", np.asarray(self.beta, dtype=float))
        object.__setattr__(self, "rho", float(self.rho))
        if self.beta.ndim != 1:
            raise DimensionMismatch("beta must be a vector")

    @property
    def sigma2(self) -> float:
        return math.exp(self.rho)

    @property
    def p(self) -> int:
        return self.beta.shape[0]

    @property
    def n_variance(self) -> int:
        """Number of variance coordinates, ``len(theta) + 1`` for rho."""
        return self.cov.n_theta + 1

    def with_beta(self, beta: np.ndarray) -> "ParameterVector":
        return replace(self, beta=np.asarray(beta, dtype=float))


@dataclass(frozen=True)
class PenaltyWeights:
    """Per-coefficient penalty weights in ``[0, inf]``.

    A weight of 0 leaves the coefficient unpenalized, a finite positive
    weight scales the l1 penalty, and ``inf`` freezes the coefficient
    at exactly zero.
    """

    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float))
        if self.values.ndim != 1:
            raise DimensionMismatch("weights must be a vector")
        if np.any(np.isnan(self.values)) or np.any(self.values < 0):
            raise ValueError("weights must be non-negative (inf allowed, nan not)")

    @classmethod
    def ones(cls, p: int, unpenalized: tuple[int, ...] = ()) -> "PenaltyWeights":
        values = np.ones(p)
        values[list(unpenalized)] = 0.0
        return cls(values)

    @classmethod
    def default_for(cls, data: "GroupedDataset", unpenalized: tuple[int, ...] = ()) -> "PenaltyWeights":
        """Unit weights with the random-effect columns (and any extra
        columns, typically the intercept) left unpenalized."""
        extra = tuple(unpenalized) + tuple(data.random_effect_columns)
        return cls.ones(data.p, unpenalized=extra)

    @property
    def p(self) -> int:
        return self.values.shape[0]

    @property
    def penalized(self) -> np.ndarray:
        """Boolean mask of coordinates with finite positive weight."""
        return (self.values > 0) & np.isfinite(self.values)

    @property
    def frozen(self) -> np.ndarray:
        return np.isinf(self.values)


@dataclass(frozen=True)
class Group:
    """One cluster of observations sharing a random-effect realization."""

    group_id: object
    y: np.ndarray = field(repr=False)
    X: np.ndarray = field(repr=False)
    Z: np.ndarray = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "y", np.asarray(self.y, dtype=float))
        object.__setattr__(self, "X", np.asarray(self.X, dtype=float))
        object.__setattr__(self, "Z", np.asarray(self.Z, dtype=float))
        n = self.y.shape[0]
        if self.y.ndim != 1 or self.X.ndim != 2 or self.Z.ndim != 2:
            raise DimensionMismatch("y must be a vector; X and Z must be matrices")
        if self.X.shape[0] != n or self.Z.shape[0] != n:
            raise DimensionMismatch(
                f"group {self.group_id!r}: y has {n} rows, X has {self.X.shape[0]},"
                f" Z has {self.Z.shape[0]}"
            )

    @property
    def n(self) -> int:
        return self.y.shape[0]


@dataclass(eq=False)
class GroupedDataset:
    """Immutable collection of groups with a shared design layout.

    ``random_effect_columns`` designates the columns of ``X`` that the
    random-effect design ``Z`` mirrors; each ``Z_i`` must equal
    ``X_i[:, random_effect_columns]``. Treat instances as read-only:
    stacked views are cached on first use.
    """

    groups: tuple[Group, ...]
    random_effect_columns: tuple[int, ...]

    def __post_init__(self):
        self.groups = tuple(self.groups)
        self.random_effect_columns = tuple(int(c) for c in self.random_effect_columns)
        if not self.groups:
            raise DimensionMismatch("dataset needs at least one group")
        p = self.groups[0].X.shape[1]
        cols = self.random_effect_columns
        if len(set(cols)) != len(cols):
            raise ValueError("random_effect_columns contains duplicates")
        if any(c < 0 or c >= p for c in cols):
            raise ValueError(f"random_effect_columns out of range for p={p}")
        ids = set()
        for g in self.groups:
            if g.X.shape[1] != p:
                raise DimensionMismatch("all groups must share the same number of columns")
            if g.Z.shape[1] != len(cols):
                raise DimensionMismatch("Z width must match random_effect_columns")
            if cols and not np.array_equal(g.Z, g.X[:, list(cols)]):
                raise ValueError(
                    f"group {g.group_id!r}: Z does not match the designated X columns"
                )
            if g.group_id in ids:
                raise ValueError(f"duplicate group id {g.group_id!r}")
            ids.add(g.group_id)
            if g.n == 1:
                warnings.warn(
                    f"group {g.group_id!r} has a single observation; its random effect"
                    " is weakly identified",
                    stacklevel=3,
                )

    @classmethod
    def from_arrays(
        cls,
        y: np.ndarray,
        X: np.ndarray,
        group_ids: np.ndarray,
        random_effect_columns: tuple[int, ...],
    ) -> "GroupedDataset":
        """Build a dataset from stacked arrays, grouping rows by id in
        order of first appearance and deriving ``Z`` from ``X``."""
        y = np.asarray(y, dtype=float)
        X = np.asarray(X, dtype=float)
        ids = np.asarray(group_ids)
        if y.shape[0] != X.shape[0] or ids.shape[0] != y.shape[0]:
            raise DimensionMismatch("y, X and group_ids must have matching row counts")
        cols = list(random_effect_columns)
        order: dict[object, list[int]] = {}
        for row, gid in enumerate(ids):
            order.setdefault(gid if not isinstance(gid, np.generic) else gid.item(), []).append(row)
        groups = [
            Group(gid, y[rows], X[rows], X[np.ix_(rows, cols)] if cols else X[rows, :0])
            for gid, rows in order.items()
        ]
        return cls(tuple(groups), tuple(random_effect_columns))

    @property
    def p(self) -> int:
        return self.groups[0].X.shape[1]

    @property
    def q(self) -> int:
        return len(self.random_effect_columns)

    @property
    def n_total(self) -> int:
        return sum(g.n for g in self.groups)

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    @property
    def group_ids(self) -> tuple:
        return tuple(g.group_id for g in self.groups)

    @cached_property
    def stacked(self) -> tuple[np.ndarray, np.ndarray, list[slice]]:
        """Stacked ``(y, X, slices)`` with one contiguous slice per group."""
        y = np.concatenate([g.y for g in self.groups])
        X = np.vstack([g.X for g in self.groups])
        slices = []
        start = 0
        for g in self.groups:
            slices.append(slice(start, start + g.n))
            start += g.n
        return y, X, slices


def group_covariance(z: np.ndarray, phi: ParameterVector) -> CholeskyFactor:
    """Cholesky factor of the marginal covariance of one group,
    ``V_i = Z_i Psi Z_i' + sigma2 * I``."""
    z = np.asarray(z, dtype=float)
    if z.ndim != 2 or z.shape[1] != phi.cov.q:
        raise DimensionMismatch(
            f"Z has shape {z.shape}, covariance structure has q={phi.cov.q}"
        )
    v = z @ phi.cov.psi() @ z.T + phi.sigma2 * np.eye(z.shape[0])
    return cholesky(v)


def marginal_cov_derivative(
    z: np.ndarray, cov: CovarianceStructure, sigma2: float, r: int
) -> np.ndarray:
    """Derivative of ``V_i`` in variance coordinate ``r``.

    Coordinates ``0 .. len(theta) - 1`` differentiate through
    ``Psi = L L'``; the final coordinate is ``rho`` with
    ``dV / drho = sigma2 * I``.
    """
    if r < cov.n_theta:
        return z @ cov.d_psi(r) @ z.T
    if r == cov.n_theta:
        return sigma2 * np.eye(z.shape[0])
    raise IndexError(f"variance coordinate {r} out of range")


def _group_factors(data: GroupedDataset, phi: ParameterVector) -> list[CholeskyFactor]:
    return [group_covariance(g.Z, phi) for g in data.groups]


def neg_log_likelihood(data: GroupedDataset, phi: ParameterVector) -> float:
    """Exact negative marginal log-likelihood, including the
    ``(n/2) log(2 pi)`` constant, accumulated group by group."""
    _check_p(data, phi)
    total = data.n_total * LOG_2PI
    for g in data.groups:
        f = group_covariance(g.Z, phi)
        resid = g.y - g.X @ phi.beta
        total += log_det(f) + float(resid @ solve_spd(f, resid))
    return 0.5 * total


def penalty_value(phi: ParameterVector, weights: PenaltyWeights) -> float:
    """The weighted l1 penalty ``sum_k w_k |beta_k|`` over finite weights.

    Raises
    ------
    InfeasibleFrozenCoefficient
        If any coefficient with infinite weight is non-zero.
    """
    values = weights.values
    frozen = np.isinf(values)
    if np.any(frozen & (phi.beta != 0.0)):
        bad = int(np.nonzero(frozen & (phi.beta != 0.0))[0][0])
        raise InfeasibleFrozenCoefficient(
            f"coefficient {bad} has infinite weight but value {phi.beta[bad]:g}"
        )
    finite = ~frozen
    return float(np.abs(phi.beta[finite]) @ values[finite])


def objective(
    data: GroupedDataset, phi: ParameterVector, lam: float, weights: PenaltyWeights
) -> float:
    """Penalized objective: the negative log-likelihood without its
    ``log(2 pi)`` constant, plus ``lam`` times the weighted l1 penalty."""
    _check_p(data, phi)
    if weights.p != phi.p:
        raise DimensionMismatch("weights length must match beta length")
    if lam < 0:
        raise ValueError("lam must be non-negative")
    pen = penalty_value(phi, weights)
    smooth = neg_log_likelihood(data, phi) - 0.5 * data.n_total * LOG_2PI
    return smooth + lam * pen


def gradient_beta(data: GroupedDataset, phi: ParameterVector, k: int) -> float:
    """Partial derivative of the smooth objective part in ``beta_k``:
    ``-sum_i x_ik' V_i^{-1} r_i`` with ``r_i = y_i - X_i beta``."""
    _check_p(data, phi)
    if not 0 <= k < phi.p:
        raise IndexError(f"beta index {k} out of range")
    total = 0.0
    for g in data.groups:
        f = group_covariance(g.Z, phi)
        resid = g.y - g.X @ phi.beta
        total -= float(g.X[:, k] @ solve_spd(f, resid))
    return total


def gradient_eta(data: GroupedDataset, phi: ParameterVector, r: int) -> float:
    """Partial derivative of the smooth objective part in variance
    coordinate ``r``:

        0.5 * sum_i [ tr(V_i^{-1} dV_i) - r_i' V_i^{-1} dV_i V_i^{-1} r_i ].
    """
    _check_p(data, phi)
    if not 0 <= r <= phi.cov.n_theta:
        raise IndexError(f"variance coordinate {r} out of range")
    total = 0.0
    for g in data.groups:
        f = group_covariance(g.Z, phi)
        deriv = marginal_cov_derivative(g.Z, phi.cov, phi.sigma2, r)
        resid = g.y - g.X @ phi.beta
        u = solve_spd(f, resid)
        total += float(np.trace(solve_spd(f, deriv))) - float(u @ deriv @ u)
    return 0.5 * total


def fisher_diagonal(data: GroupedDataset, phi: ParameterVector, j: int) -> float:
    """Diagonal entry of the Fisher information at ``phi``.

    Indices ``0 .. p-1`` address ``beta`` and give
    ``sum_i x_ij' V_i^{-1} x_ij``; indices ``p ..`` address the variance
    coordinates and give ``0.5 * sum_i tr(V_i^{-1} dV_i V_i^{-1} dV_i)``.
    """
    _check_p(data, phi)
    n_var = phi.cov.n_theta + 1
    if not 0 <= j < phi.p + n_var:
        raise IndexError(f"coordinate {j} out of range")
    total = 0.0
    if j < phi.p:
        for g in data.groups:
            f = group_covariance(g.Z, phi)
            col = g.X[:, j]
            total += float(col @ solve_spd(f, col))
        return total
    r = j - phi.p
    for g in data.groups:
        f = group_covariance(g.Z, phi)
        deriv = marginal_cov_derivative(g.Z, phi.cov, phi.sigma2, r)
        b = solve_spd(f, deriv)
        total += 0.5 * float(np.sum(b * b.T))
    return total


def _check_p(data: GroupedDataset, phi: ParameterVector) -> None:
    if phi.p != data.p:
        raise DimensionMismatch(f"beta has length {phi.p}, data has p={data.p}")
    if phi.cov.q != data.q:
        raise DimensionMismatch(f"covariance has q={phi.cov.q}, data has q={data.q}")
