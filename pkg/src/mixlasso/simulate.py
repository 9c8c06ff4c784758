"""Simulation schemes, data generators and the benchmark harness.

Designs are drawn row-wise from a multivariate normal with an AR(1)
correlation profile ``corr(x_k, x_l) = ar_rho^|k - l|``; the first
column is then set to one and acts as the intercept. The random-effect
design of group ``i`` consists of the leading columns of ``X_i``.

The preset schemes cover three regimes: low-dimensional settings with
identity or unstructured random-effect covariance, high-dimensional
settings with up to a thousand columns (one of them fitting a
deliberately overparametrized diagonal covariance), and prediction
settings with a separate test set per group and a tunable
random-effect scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import model as _model
from .exceptions import MixLassoError
from .linalg import cholesky, log_det, solve_spd
from .model import (
    CovarianceStructure,
    Group,
    GroupedDataset,
    ParameterVector,
    PenaltyWeights,
)
from .optimizer import FitResult, SolverOptions
from .predict import predict_random_effects, predict_response
from .selection import (
    adaptive_weights,
    lambda_path,
    lasso_path_bic,
    strip_random_effects,
)

METHODS = ("lmmLasso", "lmmadLasso", "plainLasso", "adLasso")

_LH_BETA = (1.0, 2.0, 4.0, 3.0, 3.0)
_P_BETA = (1.0, 1.5, 1.2, 1.0, 2.0)


@dataclass(frozen=True)
class SimScheme:
    """One simulation configuration.

    ``q`` random effects (the leading columns) generate the data with
    covariance ``psi``; fitting uses the leading ``fit_q`` columns with
    a ``fit_kind`` structured covariance, which allows deliberate
    overparametrization. ``test_group_size`` > 0 adds a per-group test
    set drawn with the same random effects.
    """

    name: str
    n_groups: int
    group_size: int
    p: int
    q: int
    beta: np.ndarray = field(repr=False)
    psi: np.ndarray = field(repr=False)
    sigma2: float
    ar_rho: float = 0.2
    fit_q: int | None = None
    fit_kind: str = "identity"
    runs: int = 20
    seed: int = 1
    test_group_size: int = 0

    def __post_init__(self):
        object.__setattr__(self, "beta", np.asarray(self.beta, dtype=float))
        object.__setattr__(self, "psi", np.atleast_2d(np.asarray(self.psi, dtype=float)))
        if self.beta.shape != (self.p,):
            raise ValueError(f"beta must have length p={self.p}")
        if self.psi.shape != (self.q, self.q):
            raise ValueError(f"psi must be {self.q} x {self.q}")
        if self.sigma2 <= 0:
            raise ValueError("sigma2 must be positive")
        if not 0 <= self.ar_rho < 1:
            raise ValueError("ar_rho must lie in [0, 1)")
        if self.effective_fit_q < 1 or self.effective_fit_q > self.p:
            raise ValueError("fit_q out of range")

    @property
    def effective_fit_q(self) -> int:
        return self.q if self.fit_q is None else self.fit_q

    @property
    def random_effect_columns(self) -> tuple[int, ...]:
        return tuple(range(self.effective_fit_q))


@dataclass(frozen=True)
class SimTruth:
    """Ground truth of one simulated dataset."""

    beta: np.ndarray = field(repr=False)
    psi: np.ndarray = field(repr=False)
    sigma2: float
    q: int
    b: tuple[np.ndarray, ...] = field(repr=False)
    support: tuple[int, ...]


def _padded(head: tuple[float, ...], p: int) -> np.ndarray:
    if p < len(head):
        raise ValueError(f"p={p} too small for the {len(head)} non-zero coefficients")
    beta = np.zeros(p)
    beta[: len(head)] = head
    return beta


def make_scheme(
    name: str,
    runs: int | None = None,
    seed: int | None = None,
    theta2: float | None = None,
) -> SimScheme:
    """Build a preset scheme by name.

    ``theta2`` sets the random-effect variance scale of the prediction
    schemes P1/P2/P3 (default 1.0); the other presets ignore it.
    """
    key = name.strip()
    presets: dict[str, SimScheme] = {}
    presets["L1"] = SimScheme(
        "L1", 25, 6, 10, 3, _padded(_LH_BETA, 10), 0.56 * np.eye(3), 0.25
    )
    presets["L2"] = SimScheme(
        "L2", 30, 6, 15, 3, _padded(_LH_BETA, 15),
        np.array([[5.0, 2.0, 0.5], [2.0, 2.0, 1.0], [0.5, 1.0, 1.0]]),
        0.25, fit_kind="general",
    )
    presets["H1"] = SimScheme(
        "H1", 25, 6, 300, 2, _padded(_LH_BETA, 300), 0.56 * np.eye(2), 0.25
    )
    presets["H2"] = SimScheme(
        "H2", 30, 6, 500, 1, _padded(_LH_BETA, 500), 0.56 * np.eye(1), 0.25
    )
    presets["H3"] = SimScheme(
        "H3", 30, 6, 1000, 3, _padded(_LH_BETA, 1000), 0.56 * np.eye(3), 0.25
    )
    presets["H4"] = SimScheme(
        "H4", 25, 6, 300, 3, _padded(_LH_BETA, 300), np.diag([3.0, 3.0, 2.0]),
        0.25, fit_q=4, fit_kind="diagonal",
    )
    scale = 1.0 if theta2 is None else float(theta2)
    for pname, p in (("P1", 10), ("P2", 100), ("P3", 500)):
        presets[pname] = SimScheme(
            pname, 25, 6, p, 3, _padded(_P_BETA, p), scale * np.eye(3), 1.0,
            test_group_size=50,
        )
    if key not in presets:
        raise KeyError(f"unknown scheme {name!r}; choose from {sorted(presets)}")
    if theta2 is not None and not key.startswith("P"):
        raise ValueError("theta2 only applies to the P schemes")
    scheme = presets[key]
    if runs is not None:
        scheme = replace(scheme, runs=runs)
    if seed is not None:
        scheme = replace(scheme, seed=seed)
    return scheme


_AR_FACTOR_CACHE: dict[tuple[int, float], np.ndarray] = {}


def _ar_factor(p: int, ar_rho: float) -> np.ndarray:
    key = (p, float(ar_rho))
    factor = _AR_FACTOR_CACHE.get(key)
    if factor is None:
        idx = np.arange(p)
        corr = ar_rho ** np.abs(idx[:, None] - idx[None, :])
        factor = np.linalg.cholesky(corr)
        _AR_FACTOR_CACHE[key] = factor
    return factor


def generate_design(p: int, ar_rho: float, rows: int, rng: np.random.Generator) -> np.ndarray:
    """Draw a design block with AR(1) column correlation and a constant
    first column."""
    if p < 1 or rows < 1:
        raise ValueError("p and rows must be positive")
    if not 0 <= ar_rho < 1:
        raise ValueError("ar_rho must lie in [0, 1)")
    X = rng.standard_normal((rows, p)) @ _ar_factor(p, ar_rho).T
    X[:, 0] = 1.0
    return X


def _psd_sqrt(psi: np.ndarray) -> np.ndarray:
    """Symmetric square root of a positive semidefinite matrix; exact
    zeros stay exact (needed for the theta2 = 0 prediction settings)."""
    if not psi.size:
        return psi.copy()
    if not np.any(psi):
        return np.zeros_like(psi)
    vals, vecs = np.linalg.eigh(psi)
    vals = np.clip(vals, 0.0, None)
    return vecs * np.sqrt(vals) @ vecs.T


def simulate_dataset(
    scheme: SimScheme, rng: np.random.Generator
) -> tuple[GroupedDataset, SimTruth]:
    """Generate one dataset. Each group consumes its own child stream
    of ``rng``, so per-group draws do not depend on the group count."""
    sqrt_psi = _psd_sqrt(scheme.psi)
    sd = math.sqrt(scheme.sigma2)
    groups = []
    b_all = []
    cols = list(scheme.random_effect_columns)
    for i, child in enumerate(rng.spawn(scheme.n_groups)):
        X = generate_design(scheme.p, scheme.ar_rho, scheme.group_size, child)
        b = sqrt_psi @ child.standard_normal(scheme.q)
        eps = sd * child.standard_normal(scheme.group_size)
        y = X @ scheme.beta + X[:, : scheme.q] @ b + eps
        groups.append(Group(i, y, X, X[:, cols]))
        b_all.append(b)
    data = GroupedDataset(tuple(groups), scheme.random_effect_columns)
    truth = SimTruth(
        scheme.beta.copy(), scheme.psi.copy(), scheme.sigma2, scheme.q,
        tuple(b_all), tuple(int(k) for k in np.nonzero(scheme.beta)[0]),
    )
    return data, truth


def simulate_test_data(
    scheme: SimScheme, truth: SimTruth, rng: np.random.Generator
) -> GroupedDataset:
    """Generate a test set with ``test_group_size`` fresh observations
    per group, reusing the training random effects."""
    if scheme.test_group_size < 1:
        raise ValueError(f"scheme {scheme.name} has no test set configured")
    cols = list(scheme.random_effect_columns)
    sd = math.sqrt(scheme.sigma2)
    groups = []
    for i, child in enumerate(rng.spawn(scheme.n_groups)):
        X = generate_design(scheme.p, scheme.ar_rho, scheme.test_group_size, child)
        eps = sd * child.standard_normal(scheme.test_group_size)
        y = X @ truth.beta + X[:, : truth.q] @ truth.b[i] + eps
        groups.append(Group(i, y, X, X[:, cols]))
    return GroupedDataset(tuple(groups), scheme.random_effect_columns)


def truth_parameters(truth: SimTruth) -> ParameterVector:
    """Represent the generating parameters as a parameter vector, using
    a diagonal structure when the true covariance is diagonal."""
    psi = truth.psi
    if truth.q == 0:
        cov = CovarianceStructure("diagonal", np.zeros(0), 0)
    elif np.array_equal(psi, np.diag(np.diag(psi))):
        cov = CovarianceStructure("diagonal", np.sqrt(np.diag(psi)), truth.q)
    else:
        cov = CovarianceStructure("general", cholesky(psi).lower[np.tril_indices(truth.q)], truth.q)
    return ParameterVector(truth.beta, cov, math.log(truth.sigma2))


def excess_risk(
    data: GroupedDataset,
    phi: ParameterVector,
    phi0: ParameterVector,
    re_columns: tuple[int, ...] | None = None,
    re_columns0: tuple[int, ...] | None = None,
) -> float:
    """Average Kullback-Leibler divergence per group between the true
    marginal Gaussian and the fitted one:

        (1/N) sum_i 0.5 [ log|V_i| - log|V0_i| + tr(V_i^{-1} V0_i)
                          + (xi0_i - xi_i)' V_i^{-1} (xi0_i - xi_i) - n_i ].

    ``re_columns``/``re_columns0`` override which design columns build
    the fitted and true random-effect designs (needed when the fitted
    structure is wider than the generating one).
    """
    cols = list(re_columns if re_columns is not None else data.random_effect_columns)
    cols0 = list(re_columns0 if re_columns0 is not None else data.random_effect_columns)
    if len(cols) != phi.cov.q or len(cols0) != phi0.cov.q:
        raise ValueError("random-effect column lists must match the covariance sizes")
    psi = phi.cov.psi()
    psi0 = phi0.cov.psi()
    total = 0.0
    for g in data.groups:
        eye = np.eye(g.n)
        z = g.X[:, cols]
        z0 = g.X[:, cols0]
        v = z @ psi @ z.T + phi.sigma2 * eye
        v0 = z0 @ psi0 @ z0.T + phi0.sigma2 * eye
        f = cholesky(v)
        diff = g.X @ (phi0.beta - phi.beta)
        total += 0.5 * (
            log_det(f)
            - float(np.linalg.slogdet(v0)[1])
            + float(np.trace(solve_spd(f, v0)))
            + float(diff @ solve_spd(f, diff))
            - g.n
        )
    return total / data.n_groups


@dataclass
class RunMetrics:
    """Per-run evaluation of one fitted model against the truth."""

    active_size: int
    true_positives: int
    sigma2: float
    cov_kind: str
    psi_diag: np.ndarray = field(repr=False)
    beta_support: dict[int, float] = field(repr=False)
    test_mse: float | None = None
    excess_risk: float | None = None

    def records(self) -> dict[str, float]:
        """Flat metric dictionary with stable key order."""
        out: dict[str, float] = {
            "active_size": float(self.active_size),
            "tp": float(self.true_positives),
            "sigma2": self.sigma2,
        }
        if self.psi_diag.size:
            if self.cov_kind == "identity":
                out["theta2"] = float(self.psi_diag[0])
            else:
                for j, value in enumerate(self.psi_diag, start=1):
                    out[f"psi_{j}"] = float(value)
        for col, value in self.beta_support.items():
            out[f"beta_{col + 1}"] = value
        if self.test_mse is not None:
            out["test_mse"] = self.test_mse
        if self.excess_risk is not None:
            out["excess_risk"] = self.excess_risk
        return out


def evaluate_fit(
    fit_result: FitResult,
    truth: SimTruth,
    data: GroupedDataset,
    test_data: GroupedDataset | None = None,
    include_excess_risk: bool = True,
) -> RunMetrics:
    """Score one fit: selection counts, variance estimates, coefficient
    estimates on the true support, test error and excess risk.

    ``data``/``test_data`` must carry the random-effect layout the
    model was fitted with (for the baselines: none).
    """
    phi = fit_result.phi_hat
    active = set(fit_result.active_set)
    support = set(truth.support)
    psi_diag = np.diag(phi.cov.psi()) if phi.cov.q else np.zeros(0)

    test_mse = None
    if test_data is not None:
        ranef = predict_random_effects(fit_result, data)
        pred = predict_response(fit_result, ranef, test_data)
        y_test = np.concatenate([g.y for g in test_data.groups])
        err = y_test - pred.stacked
        test_mse = float(err @ err) / y_test.shape[0]

    risk = None
    if include_excess_risk:
        risk = excess_risk(
            data, phi, truth_parameters(truth),
            data.random_effect_columns, tuple(range(truth.q)),
        )

    return RunMetrics(
        active_size=len(active),
        true_positives=len(active & support),
        sigma2=phi.sigma2,
        cov_kind=phi.cov.kind,
        psi_diag=psi_diag,
        beta_support={k: float(phi.beta[k]) for k in sorted(support)},
        test_mse=test_mse,
        excess_risk=risk,
    )


@dataclass
class SchemeSummary:
    """Aggregated metrics of a scheme run, with per-run records kept."""

    scheme: SimScheme
    methods: tuple[str, ...]
    runs: int
    seed: int
    stats: dict[str, dict[str, tuple[float, float, int]]]
    per_run: dict[str, list[dict[str, float]]]
    failures: dict[str, list[tuple[int, str]]]

    def to_tsv(self) -> str:
        """Long-format summary table: one row per (method, metric) with
        the mean, the sample standard deviation and the run count."""
        lines = ["scheme\tmethod\tmetric\tmean\tsd\tn_runs"]
        for method in self.methods:
            for metric, (mean, sd, n) in self.stats.get(method, {}).items():
                lines.append(
                    f"{self.scheme.name}\t{method}\t{metric}\t"
                    f"{mean:.10g}\t{sd:.10g}\t{n}"
                )
        return "\n".join(lines) + "\n"


def _aggregate(records: list[dict[str, float]]) -> dict[str, tuple[float, float, int]]:
    keys: list[str] = []
    for rec in records:
        for key in rec:
            if key not in keys:
                keys.append(key)
    out = {}
    for key in keys:
        values = np.array([rec[key] for rec in records if key in rec])
        sd = float(np.std(values, ddof=1)) if values.size > 1 else 0.0
        out[key] = (float(np.mean(values)), sd, int(values.size))
    return out


def _run_methods(
    scheme: SimScheme,
    data: GroupedDataset,
    truth: SimTruth,
    test_data: GroupedDataset | None,
    methods: tuple[str, ...],
    opts: SolverOptions | None,
    grid_size: int,
) -> dict[str, RunMetrics]:
    """Fit every requested method on one dataset. The adaptive variants
    reuse the corresponding first-stage solution."""
    out: dict[str, RunMetrics] = {}
    stripped = strip_random_effects(data)
    stripped_test = strip_random_effects(test_data) if test_data is not None else None
    w_mixed = PenaltyWeights.default_for(data)
    w_plain = PenaltyWeights.ones(data.p, unpenalized=(0,))

    mixed_best: FitResult | None = None
    if "lmmLasso" in methods or "lmmadLasso" in methods:
        path = lambda_path(
            data, w_mixed, kind=scheme.fit_kind, opts=opts, grid_size=grid_size
        )
        mixed_best = path.best
        if "lmmLasso" in methods:
            out["lmmLasso"] = evaluate_fit(mixed_best, truth, data, test_data)
    if "lmmadLasso" in methods:
        w_ad = adaptive_weights(mixed_best.phi_hat.beta, w_mixed)
        path_ad = lambda_path(
            data, w_ad, kind=scheme.fit_kind, opts=opts, grid_size=grid_size,
            phi_init=mixed_best.phi_hat,
        )
        out["lmmadLasso"] = evaluate_fit(path_ad.best, truth, data, test_data)

    plain_best: FitResult | None = None
    if "plainLasso" in methods or "adLasso" in methods:
        plain = lasso_path_bic(data, w_plain, opts=opts, grid_size=grid_size)
        plain_best = plain.best
        if "plainLasso" in methods:
            out["plainLasso"] = evaluate_fit(plain_best, truth, stripped, stripped_test)
    if "adLasso" in methods:
        w_ad = adaptive_weights(plain_best.phi_hat.beta, w_plain)
        plain_ad = lasso_path_bic(data, w_ad, opts=opts, grid_size=grid_size)
        out["adLasso"] = evaluate_fit(plain_ad.best, truth, stripped, stripped_test)
    return out


def run_scheme(
    scheme: SimScheme,
    methods: tuple[str, ...] = METHODS,
    runs: int | None = None,
    seed: int | None = None,
    opts: SolverOptions | None = None,
    grid_size: int = 30,
) -> SchemeSummary:
    """Run a scheme end to end and aggregate per-run metrics.

    Run ``r`` derives its generator from ``SeedSequence((seed, r))``,
    so runs are reproducible individually and independent of how many
    runs execute. A method failing on one run is recorded and excluded
    from that method's averages.
    """
    unknown = [m for m in methods if m not in METHODS]
    if unknown:
        raise ValueError(f"unknown methods {unknown}; choose from {METHODS}")
    runs = scheme.runs if runs is None else runs
    seed = scheme.seed if seed is None else seed
    per_run: dict[str, list[dict[str, float]]] = {m: [] for m in methods}
    failures: dict[str, list[tuple[int, str]]] = {m: [] for m in methods}
    for r in range(runs):
        rng = np.random.default_rng(np.random.SeedSequence((seed, r)))
        data, truth = simulate_dataset(scheme, rng)
        test_data = (
            simulate_test_data(scheme, truth, rng) if scheme.test_group_size else None
        )
        try:
            results = _run_methods(
                scheme, data, truth, test_data, tuple(methods), opts, grid_size
            )
        except MixLassoError as err:
            for m in methods:
                failures[m].append((r, f"{type(err).__name__}: {err}"))
            continue
        for m in methods:
            if m in results:
                per_run[m].append(results[m].records())
            else:
                failures[m].append((r, "method produced no result"))
    stats = {m: _aggregate(per_run[m]) for m in methods}
    return SchemeSummary(
        scheme, tuple(methods), runs, seed, stats, per_run, failures
    )


def scheme_to_dict(scheme: SimScheme) -> dict:
    """JSON-ready representation of a scheme."""
    return {
        "name": scheme.name,
        "n_groups": scheme.n_groups,
        "group_size": scheme.group_size,
        "p": scheme.p,
        "q": scheme.q,
        "beta": scheme.beta.tolist(),
        "psi": scheme.psi.tolist(),
        "sigma2": scheme.sigma2,
        "ar_rho": scheme.ar_rho,
        "fit_q": scheme.fit_q,
        "fit_kind": scheme.fit_kind,
        "runs": scheme.runs,
        "seed": scheme.seed,
        "test_group_size": scheme.test_group_size,
    }


def scheme_from_dict(payload: dict) -> SimScheme:
    """Inverse of :func:`scheme_to_dict`."""
    return SimScheme(
        name=str(payload["name"]),
        n_groups=int(payload["n_groups"]),
        group_size=int(payload["group_size"]),
        p=int(payload["p"]),
        q=int(payload["q"]),
        beta=np.asarray(payload["beta"], dtype=float),
        psi=np.asarray(payload["psi"], dtype=float),
        sigma2=float(payload["sigma2"]),
        ar_rho=float(payload.get("ar_rho", 0.2)),
        fit_q=None if payload.get("fit_q") is None else int(payload["fit_q"]),
        fit_kind=str(payload.get("fit_kind", "identity")),
        runs=int(payload.get("runs", 20)),
        seed=int(payload.get("seed", 1)),
        test_group_size=int(payload.get("test_group_size", 0)),
    )
