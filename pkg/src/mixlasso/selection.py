"""Regularization paths, BIC model selection and structure search.

The main entry point is :func:`lambda_path`, which fits a geometric
grid of penalty levels from the smallest penalty that zeroes every
penalized coefficient down to a fixed fraction of it, warm-starting
each fit from the previous solution and scoring each with BIC.

Plain (adaptive) lasso baselines reuse the same solver on a copy of
the data with the random effects removed and the variance coordinates
held fixed, so there is exactly one coordinate descent implementation
in the package. The residual variance of a baseline fit is substituted
at its conditional maximum likelihood value afterwards.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import model as _model
from .exceptions import (
    EmptyCandidateSet,
    MixLassoError,
    NoPenalizedCoefficients,
)
from .linalg import cholesky, solve_spd
from .model import (
    CovarianceStructure,
    Group,
    GroupedDataset,
    ParameterVector,
    PenaltyWeights,
    objective,
)
from .optimizer import FitResult, SolverOptions, cgd_cycle, fit

SIGMA2_FLOOR = 1e-8


def bic(fit_result: FitResult, data: GroupedDataset) -> float:
    """Bayesian information criterion of a fit:

        BIC = -2 loglik + log(n_total) * (|active set| + dim(theta)).

    The residual variance does not enter the dimension count.
    """
    df = len(fit_result.active_set) + fit_result.phi_hat.cov.n_theta
    return 2.0 * fit_result.neg_loglik + math.log(data.n_total) * df


@dataclass(frozen=True)
class PathEntry:
    lam: float
    fit: FitResult
    bic: float


@dataclass
class PathResult:
    """A fitted regularization path with its BIC-optimal entry."""

    entries: list[PathEntry]
    lambda_opt: float
    best: FitResult
    failures: list[tuple[float, str]] = field(default_factory=list)
    stopped_early: bool = False

    @property
    def lambdas(self) -> np.ndarray:
        return np.array([e.lam for e in self.entries])

    @property
    def bics(self) -> np.ndarray:
        return np.array([e.bic for e in self.entries])


def lambda_max(
    data: GroupedDataset, weights: PenaltyWeights, phi_init: ParameterVector
) -> float:
    """Smallest penalty level at which every penalized coefficient is
    zero, at the variance state of ``phi_init``:

        lambda_max = max_k |x_k' V^{-1} (y - X_u beta_u)| / w_k

    over penalized ``k``, where ``beta_u`` solves the generalized least
    squares problem on the unpenalized columns alone.

    Raises
    ------
    NoPenalizedCoefficients
        If no coefficient has a finite positive weight.
    """
    w = weights.values
    penalized = np.nonzero((w > 0) & np.isfinite(w))[0]
    if penalized.size == 0:
        raise NoPenalizedCoefficients("all weights are zero or infinite")
    unpen = np.nonzero(w == 0.0)[0]
    y, X, slices = data.stacked
    factors = _model._group_factors(data, phi_init)

    resid = y.copy()
    if unpen.size:
        Xu = X[:, unpen]
        Wu = np.empty_like(Xu)
        for f, sl in zip(factors, slices):
            Wu[sl] = solve_spd(f, Xu[sl])
        gram = cholesky(Xu.T @ Wu)
        beta_u = solve_spd(gram, Wu.T @ y)
        resid = y - Xu @ beta_u

    u = np.empty_like(resid)
    for f, sl in zip(factors, slices):
        u[sl] = solve_spd(f, resid[sl])
    scores = np.abs(X[:, penalized].T @ u) / w[penalized]
    return float(scores.max())


def _soft(u: float, threshold: float) -> float:
    if u > threshold:
        return u - threshold
    if u < -threshold:
        return u + threshold
    return 0.0


def _lasso_cd(
    X: np.ndarray,
    y: np.ndarray,
    lam: float,
    w: np.ndarray,
    beta: np.ndarray,
    col_ss: np.ndarray,
    tol: float = 1e-8,
    max_sweeps: int = 2000,
) -> np.ndarray:
    """Coordinate descent for ``0.5 ||y - X beta||^2 + lam sum w_k |beta_k|``
    with active-set restricted sweeps. Frozen coordinates (infinite
    weight) are pinned at zero."""
    beta = beta.copy()
    frozen = np.isinf(w)
    beta[frozen] = 0.0
    eligible = np.nonzero(~frozen & (col_ss > 0))[0]
    always_on = w == 0.0
    r = y - X @ beta

    def sweep(idx):
        max_delta = 0.0
        for k in idx:
            b = beta[k]
            u = X[:, k] @ r + col_ss[k] * b
            nb = _soft(u, lam * w[k]) / col_ss[k]
            t = nb - b
            if t != 0.0:
                beta[k] = nb
                r[:] -= t * X[:, k]
                max_delta = max(max_delta, abs(t))
        return max_delta

    for _ in range(max_sweeps):
        tol_eff = tol * (1.0 + float(np.abs(beta).max(initial=0.0)))
        if sweep(eligible) < tol_eff:
            break
        active = eligible[(beta[eligible] != 0.0) | always_on[eligible]]
        for _ in range(max_sweeps):
            if sweep(active) < tol_eff:
                break
    return beta


def _cv_lasso(
    data: GroupedDataset,
    weights: PenaltyWeights,
    folds: int = 10,
    grid_size: int = 20,
    lambda_ratio: float = 0.01,
) -> tuple[np.ndarray, float]:
    """Plain lasso (identity covariance) with the penalty level chosen
    by observation-level cross-validated squared prediction error.
    Folds are assigned round-robin over the stacked rows, so the split
    is deterministic and ignores the grouping."""
    y, X, _ = data.stacked
    w = weights.values
    col_ss = np.einsum("ij,ij->j", X, X)
    penalized = (w > 0) & np.isfinite(w) & (col_ss > 0)
    unpen = np.nonzero(w == 0.0)[0]

    resid = y.copy()
    if unpen.size:
        beta_u, *_ = np.linalg.lstsq(X[:, unpen], y, rcond=None)
        resid = y - X[:, unpen] @ beta_u
    if not np.any(penalized):
        beta = _lasso_cd(X, y, 0.0, w, np.zeros(data.p), col_ss)
        return beta, 0.0
    lam_max = float(np.max(np.abs(X[:, penalized].T @ resid) / w[penalized]))
    if lam_max <= 0.0:
        beta = _lasso_cd(X, y, 0.0, w, np.zeros(data.p), col_ss)
        return beta, 0.0
    grid = np.geomspace(lam_max, lambda_ratio * lam_max, grid_size)

    n = y.shape[0]
    folds = max(2, min(folds, n))
    fold_id = np.arange(n) % folds
    sse = np.zeros(grid_size)
    for f in range(folds):
        train = fold_id != f
        Xt, yt = X[train], y[train]
        Xv, yv = X[~train], y[~train]
        css = np.einsum("ij,ij->j", Xt, Xt)
        beta = np.zeros(data.p)
        for j, lam in enumerate(grid):
            beta = _lasso_cd(Xt, yt, lam, w, beta, css)
            err = yv - Xv @ beta
            sse[j] += float(err @ err)
    best = int(np.argmin(sse))

    beta = np.zeros(data.p)
    for lam in grid[: best + 1]:
        beta = _lasso_cd(X, y, lam, w, beta, col_ss)
    return beta, float(grid[best])


def initial_lasso(
    data: GroupedDataset,
    folds: int = 10,
    weights: PenaltyWeights | None = None,
    grid_size: int = 20,
    lambda_ratio: float = 0.01,
) -> np.ndarray:
    """Cross-validated plain lasso coefficients, used as the starting
    value for penalized mixed-model fits and as the screening stage of
    the random-effect structure search."""
    if weights is None:
        weights = PenaltyWeights.default_for(data)
    beta, _ = _cv_lasso(data, weights, folds=folds, grid_size=grid_size,
                        lambda_ratio=lambda_ratio)
    return beta


def adaptive_weights(
    beta_init: np.ndarray, weights: PenaltyWeights | None = None
) -> PenaltyWeights:
    """Adaptive penalty weights ``w_k = 1 / |beta_init_k|``.

    Coordinates unpenalized in ``weights`` stay unpenalized and frozen
    coordinates stay frozen; penalized coordinates whose initial
    estimate is exactly zero are frozen at zero (infinite weight).
    """
    beta_init = np.asarray(beta_init, dtype=float)
    base = weights.values if weights is not None else np.ones(beta_init.shape[0])
    if base.shape != beta_init.shape:
        raise ValueError("weights and beta_init must have the same length")
    with np.errstate(divide="ignore"):
        inv = 1.0 / np.abs(beta_init)
    out = np.where(base == 0.0, 0.0, np.where(np.isinf(base), np.inf, inv))
    return PenaltyWeights(out)


def _theta_filled(kind: str, q: int, fill: float) -> np.ndarray:
    """Parameters giving ``Psi = fill^2 * I`` for the requested kind."""
    if kind == "identity":
        return np.array([fill])
    if kind == "diagonal":
        return np.full(q, fill)
    rows, cols = np.tril_indices(q)
    theta = np.zeros(rows.shape[0])
    theta[rows == cols] = fill
    return theta


def default_start(
    data: GroupedDataset,
    weights: PenaltyWeights | None = None,
    kind: str = "identity",
    folds: int = 10,
    grid_size: int = 20,
) -> ParameterVector:
    """Starting parameters for a penalized mixed-model fit.

    beta starts at the cross-validated lasso coefficients. The variance
    parameters are seeded with the lasso residual variance split as
    ``Psi = 0.1 * sigma2 * I`` and then polished by coordinate updates
    at fixed beta, so the starting covariance already reflects the
    grouped structure the lasso cannot absorb. Without that polish the
    residual variance starts grossly inflated whenever the random
    effects matter, which strands penalized fits at the null model.
    """
    if weights is None:
        weights = PenaltyWeights.default_for(data)
    beta0, _ = _cv_lasso(data, weights)
    y, X, _ = data.stacked
    resid = y - X @ beta0
    sigma2 = max(float(resid @ resid) / y.shape[0], SIGMA2_FLOOR)
    q = data.q
    if q == 0:
        cov = CovarianceStructure("diagonal", np.zeros(0), 0)
    else:
        cov = CovarianceStructure(kind, _theta_filled(kind, q, math.sqrt(0.1 * sigma2)), q)
    phi = ParameterVector(beta0, cov, math.log(sigma2))
    return _polish_variance(data, phi, weights)


def _polish_variance(
    data: GroupedDataset,
    phi: ParameterVector,
    weights: PenaltyWeights,
    max_cycles: int = 100,
) -> ParameterVector:
    """Maximum-likelihood fit of (theta, rho) at fixed beta, by the same
    coordinate updates the main solver uses."""
    coords = list(range(data.p, data.p + phi.cov.n_theta + 1))
    if not coords:
        return phi
    previous = objective(data, phi, 0.0, weights)
    for _ in range(max_cycles):
        phi, change = cgd_cycle(data, phi, 0.0, weights, coords=coords)
        value = objective(data, phi, 0.0, weights)
        if abs(previous - value) / max(1.0, abs(previous)) < 1e-8 and change < 1e-6:
            break
        previous = value
    return phi


def lambda_path(
    data: GroupedDataset,
    weights: PenaltyWeights | None = None,
    kind: str = "identity",
    opts: SolverOptions | None = None,
    grid_size: int = 30,
    lambda_ratio: float = 0.01,
    folds: int = 10,
    phi_init: ParameterVector | None = None,
) -> PathResult:
    """Fit a decreasing geometric grid of penalty levels and select the
    BIC-optimal one.

    The grid runs from ``lambda_max`` (computed at the starting
    variance state) down to ``lambda_ratio * lambda_max``. The
    penalized likelihood is not convex in the variance parameters, and
    stationary points reached from different starts can differ wildly
    (near ``lambda_max`` the all-zero model with an inflated residual
    variance is stationary, and a warm-start chain would coast on it
    for the whole grid). Each grid point is therefore fitted twice,
    once warm-started from the previously kept solution and once from
    the path's initial parameters, and the entry with the lower BIC is
    kept, which also decides the next warm start. The path stops early
    once no candidate at a grid point stays below |S| <= N_T, after
    refining the final bracket by geometric bisection (the usable
    sparsity window can be narrower than the grid spacing). Failed fits
    are recorded and skipped. With no penalized coordinate at all (for
    instance after adaptive weighting froze everything) a single
    unpenalized fit is returned.
    """
    if weights is None:
        weights = PenaltyWeights.default_for(data)
    if phi_init is None:
        phi_init = default_start(data, weights, kind=kind, folds=folds)

    w = weights.values
    if not np.any((w > 0) & np.isfinite(w)):
        single = fit(data, 0.0, weights, phi_init, opts)
        entry = PathEntry(0.0, single, bic(single, data))
        return PathResult([entry], 0.0, single)

    lam_max = lambda_max(data, weights, phi_init)
    if lam_max <= 0.0:
        single = fit(data, 0.0, weights, phi_init, opts)
        entry = PathEntry(0.0, single, bic(single, data))
        return PathResult([entry], 0.0, single)

    grid = np.geomspace(lam_max, lambda_ratio * lam_max, grid_size)
    entries: list[PathEntry] = []
    failures: list[tuple[float, str]] = []

    def attempt(lam: float, warm: ParameterVector) -> tuple[PathEntry | None, bool, bool]:
        """Dual-start fit at one penalty level.

        Returns (entry, all_dense, cold_dense): the lower-BIC candidate
        with |S| <= N_T, or None. A dense candidate interpolates
        (|S| > N_T, sigma2 -> 0, likelihood unbounded) and is discarded;
        all candidates dense is the path's stop signal, and the cold
        start alone going dense flags a sparsity window skipped by the
        grid.
        """
        candidates: list[PathEntry] = []
        cold_dense = False
        dense_seen = False
        # warm start first so ties go to the continuation of the path
        starts = [(False, warm)] if warm is phi_init else [(False, warm), (True, phi_init)]
        for is_cold, start in starts:
            try:
                result = fit(data, lam, weights, start, opts)
            except MixLassoError as err:
                failures.append((lam, f"{type(err).__name__}: {err}"))
                continue
            if len(result.active_set) > data.n_total:
                dense_seen = True
                if is_cold:
                    cold_dense = True
                continue
            candidates.append(PathEntry(lam, result, bic(result, data)))
        if not candidates:
            return None, dense_seen, cold_dense
        return min(candidates, key=lambda e: e.bic), False, cold_dense

    def refine(lo: float, hi: float, warm: ParameterVector) -> ParameterVector:
        """Map a sparse-to-dense bracket by geometric bisection, appending
        any surviving entries (in decreasing-λ order). Returns the warm
        state of the lowest entry found."""
        for _ in range(12):
            if hi / lo <= 1.02:
                break
            mid = float(np.sqrt(lo * hi))
            entry, all_dense, _ = attempt(mid, warm)
            if entry is not None:
                entries.append(entry)
                warm = entry.fit.phi_hat
                hi = mid
            elif all_dense:
                lo = mid
            else:
                break
        return warm

    stopped = False
    prev_cold_dense = False
    warm = phi_init
    for lam in grid:
        entry, all_dense, cold_dense = attempt(float(lam), warm)
        if all_dense:
            # the sparse-to-dense transition can fall entirely between two
            # grid points; map the final bracket before stopping
            stopped = True
            if entries:
                refine(float(lam), entries[-1].lam, entries[-1].fit.phi_hat)
            break
        if entry is None:
            continue
        if cold_dense and not prev_cold_dense and entries:
            # cold start just crossed its own transition while the warm
            # chain survived: the skipped window may hold far better
            # models than the surviving (often null) branch
            warm = refine(float(lam), entries[-1].lam, entries[-1].fit.phi_hat)
            entry, all_dense, cold_dense = attempt(float(lam), warm)
            if all_dense:
                stopped = True
                if entries:
                    refine(float(lam), entries[-1].lam, entries[-1].fit.phi_hat)
                break
            if entry is None:
                continue
        prev_cold_dense = cold_dense
        entries.append(entry)
        warm = entry.fit.phi_hat

    if not entries:
        raise MixLassoError("no penalty level produced a successful fit")
    best = int(np.argmin([e.bic for e in entries]))
    return PathResult(entries, entries[best].lam, entries[best].fit, failures, stopped)


def with_random_effects(data: GroupedDataset, columns: tuple[int, ...]) -> GroupedDataset:
    """Copy of the dataset with a different set of random-effect columns."""
    cols = list(columns)
    groups = tuple(
        Group(g.group_id, g.y, g.X, g.X[:, cols] if cols else g.X[:, :0])
        for g in data.groups
    )
    return GroupedDataset(groups, tuple(columns))


def strip_random_effects(data: GroupedDataset) -> GroupedDataset:
    """Copy of the dataset with no random effects (``q = 0``)."""
    return with_random_effects(data, ())


_EMPTY_COV = CovarianceStructure("diagonal", np.zeros(0), 0)


def _substitute_ml_variance(
    stripped: GroupedDataset, result: FitResult, lam: float, weights: PenaltyWeights
) -> FitResult:
    """Replace the unit residual variance of a fixed-variance lasso fit
    by its conditional maximum likelihood value ``RSS / n`` and update
    the likelihood-based fields accordingly."""
    y, X, _ = stripped.stacked
    resid = y - X @ result.phi_hat.beta
    sigma2 = max(float(resid @ resid) / y.shape[0], SIGMA2_FLOOR)
    phi = ParameterVector(result.phi_hat.beta, _EMPTY_COV, math.log(sigma2))
    return replace(
        result,
        phi_hat=phi,
        neg_loglik=_model.neg_log_likelihood(stripped, phi),
        objective_value=_model.objective(stripped, phi, lam, weights),
    )


def lasso_path_bic(
    data: GroupedDataset,
    weights: PenaltyWeights | None = None,
    opts: SolverOptions | None = None,
    grid_size: int = 30,
    lambda_ratio: float = 0.01,
) -> PathResult:
    """BIC-selected plain lasso baseline.

    Runs the mixed-model solver on a random-effect-free copy of the
    data with the residual variance fixed at one (which makes each fit
    an ordinary weighted lasso), then substitutes the maximum
    likelihood residual variance into every returned fit. By default
    only column 0 (the intercept) is unpenalized.
    """
    stripped = strip_random_effects(data)
    if weights is None:
        weights = PenaltyWeights.ones(data.p, unpenalized=(0,))
    phi0 = ParameterVector(np.zeros(data.p), _EMPTY_COV, 0.0)

    w = weights.values
    if not np.any((w > 0) & np.isfinite(w)):
        raw = fit(stripped, 0.0, weights, phi0, opts, fixed_variance=True)
        adj = _substitute_ml_variance(stripped, raw, 0.0, weights)
        entry = PathEntry(0.0, adj, bic(adj, stripped))
        return PathResult([entry], 0.0, adj)

    lam_max = lambda_max(stripped, weights, phi0)
    if lam_max <= 0.0:
        raw = fit(stripped, 0.0, weights, phi0, opts, fixed_variance=True)
        adj = _substitute_ml_variance(stripped, raw, 0.0, weights)
        entry = PathEntry(0.0, adj, bic(adj, stripped))
        return PathResult([entry], 0.0, adj)

    grid = np.geomspace(lam_max, lambda_ratio * lam_max, grid_size)
    entries: list[PathEntry] = []
    failures: list[tuple[float, str]] = []
    stopped = False
    warm = phi0
    for lam in grid:
        try:
            raw = fit(stripped, float(lam), weights, warm, opts, fixed_variance=True)
        except MixLassoError as err:
            failures.append((float(lam), f"{type(err).__name__}: {err}"))
            continue
        if len(raw.active_set) > stripped.n_total:
            stopped = True
            break
        warm = raw.phi_hat
        adj = _substitute_ml_variance(stripped, raw, float(lam), weights)
        entries.append(PathEntry(float(lam), adj, bic(adj, stripped)))
    if not entries:
        raise MixLassoError("no penalty level produced a successful fit")
    best = int(np.argmin([e.bic for e in entries]))
    return PathResult(entries, entries[best].lam, entries[best].fit, failures, stopped)


@dataclass
class StructureSelection:
    """Outcome of the random-effect structure search."""

    candidates: tuple[int, ...]
    theta_sq: dict[int, float]
    bic_by_candidate: dict[int, float]
    bic_null: float
    lam: float
    kappa: float
    selected: tuple[int, ...]
    joint_fit: FitResult
    joint_psi_diag: np.ndarray
    kept: tuple[int, ...]


def select_random_effects(
    data: GroupedDataset,
    kappa: float = 0.05,
    max_candidates: int | None = None,
    opts: SolverOptions | None = None,
    folds: int = 10,
    grid_size: int = 20,
    unpenalized: tuple[int, ...] = (0,),
) -> StructureSelection:
    """Data-driven search for the random-effect structure.

    1. A cross-validated plain lasso on the pooled data proposes the
       candidate columns (its non-zero coefficients, largest magnitude
       first, optionally capped at ``max_candidates``).
    2. Each candidate gets one mixed-model fit with that single random
       effect at the lasso's penalty level, yielding a variance
       estimate and a BIC.
    3. Candidates are kept when the variance exceeds ``kappa`` and the
       BIC does not exceed the lasso's BIC.
    4. A joint fit with diagonal covariance over the kept candidates
       produces the final model; diagonal entries above ``kappa``
       define the retained random effects. With no kept candidate the
       plain lasso fit is returned unchanged.

    Any random-effect columns already designated on ``data`` are
    ignored; the search works from the raw design.
    """
    base = strip_random_effects(data)
    weights = PenaltyWeights.ones(base.p, unpenalized=unpenalized)
    beta0, lam_cv = _cv_lasso(base, weights, folds=folds, grid_size=grid_size)

    nonzero = np.nonzero(beta0)[0]
    if nonzero.size == 0:
        raise EmptyCandidateSet("the screening lasso selected no coefficients")
    order = nonzero[np.argsort(-np.abs(beta0[nonzero]), kind="stable")]
    if max_candidates is not None:
        order = order[:max_candidates]
    candidates = tuple(int(k) for k in order)

    y, X, _ = base.stacked
    resid = y - X @ beta0
    sigma2_0 = max(float(resid @ resid) / y.shape[0], SIGMA2_FLOOR)
    rho0 = math.log(sigma2_0)
    fill = math.sqrt(0.1 * sigma2_0)

    null_raw = fit(
        base, lam_cv, weights,
        ParameterVector(beta0, _EMPTY_COV, 0.0), opts, fixed_variance=True,
    )
    null_fit = _substitute_ml_variance(base, null_raw, lam_cv, weights)
    bic_null = bic(null_fit, base)

    theta_sq: dict[int, float] = {}
    bic_by_candidate: dict[int, float] = {}
    for cand in candidates:
        data_c = with_random_effects(data, (cand,))
        w_c = PenaltyWeights.ones(
            data.p, unpenalized=tuple(set(unpenalized) | {cand})
        )
        phi_c = ParameterVector(
            beta0, CovarianceStructure("identity", np.array([fill]), 1), rho0
        )
        result = fit(data_c, lam_cv, w_c, phi_c, opts)
        theta_sq[cand] = float(result.phi_hat.cov.theta[0] ** 2)
        bic_by_candidate[cand] = bic(result, data_c)

    selected = tuple(
        sorted(
            cand
            for cand in candidates
            if theta_sq[cand] > kappa and bic_by_candidate[cand] <= bic_null
        )
    )

    if not selected:
        return StructureSelection(
            candidates, theta_sq, bic_by_candidate, bic_null, lam_cv, kappa,
            (), null_fit, np.zeros(0), (),
        )

    data_r = with_random_effects(data, selected)
    w_r = PenaltyWeights.ones(
        data.p, unpenalized=tuple(set(unpenalized) | set(selected))
    )
    phi_r = ParameterVector(
        beta0,
        CovarianceStructure("diagonal", np.full(len(selected), fill), len(selected)),
        rho0,
    )
    joint = fit(data_r, lam_cv, w_r, phi_r, opts)
    psi_diag = joint.phi_hat.cov.theta ** 2
    kept = tuple(
        col for col, value in zip(selected, psi_diag) if value > kappa
    )
    return StructureSelection(
        candidates, theta_sq, bic_by_candidate, bic_null, lam_cv, kappa,
        selected, joint, psi_diag, kept,
    )
