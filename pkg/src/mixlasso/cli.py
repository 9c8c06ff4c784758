"""Command-line interface.

Subcommands: ``fit``, ``path``, ``predict``, ``simulate``,
``select-structure``. Input is delimiter-separated text with a header
row and one observation per row. Exit codes: 0 success, 2 malformed
input data, 3 solver non-convergence (artifacts are still written),
4 configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import tempfile

import numpy as np

from . import __version__
from .exceptions import EmptyCandidateSet, MixLassoError
from .model import (
    CovarianceStructure,
    GroupedDataset,
    ParameterVector,
    PenaltyWeights,
)
from .optimizer import FitResult, SolverOptions, fit
from .predict import RandomEffectPrediction, predict_random_effects, predict_response
from .selection import (
    adaptive_weights,
    bic,
    default_start,
    lambda_path,
    select_random_effects,
)
from .simulate import make_scheme, run_scheme, scheme_from_dict, scheme_to_dict

ARTIFACT_VERSION = "mixlasso-model v1"

EXIT_OK = 0
EXIT_BAD_INPUT = 2
EXIT_NOT_CONVERGED = 3
EXIT_BAD_CONFIG = 4


class ConfigError(Exception):
    """Invalid configuration (missing column, bad flag value, ...)."""


class InputError(Exception):
    """Malformed data file (unreadable, non-numeric fields, ...)."""


# --------------------------------------------------------------------- io


def _atomic_write(path: str, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".mixlasso-")
    try:
        with os.fdopen(fd, "w") as handle:
            handle.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class TableData:
    """A parsed input file: group keys, response, covariate matrix."""

    def __init__(self, group_ids, y, X, columns):
        self.group_ids = group_ids  # list of str
        self.y = y                  # (n,) or None when no response column
        self.X = X                  # (n, p)
        self.columns = columns      # covariate names, order defines beta


def read_table(path: str, group_col: str, response_col: str | None,
               columns: list[str] | None = None) -> TableData:
    """Read a delimiter-separated file with a header row.

    ``columns`` pins the covariate set and order (used by predict so the
    design matches the fitted model); otherwise every column except the
    group and response columns is a covariate, in file order.
    """
    try:
        with open(path, newline="") as handle:
            sample = handle.read(4096)
            handle.seek(0)
            try:
                dialect = csv.Sniffer().sniff(sample, delimiters=",\t;")
            except csv.Error:
                dialect = csv.excel
            reader = csv.reader(handle, dialect)
            rows = [row for row in reader if row and any(f.strip() for f in row)]
    except OSError as err:
        raise InputError(f"cannot read {path}: {err}") from None
    if len(rows) < 2:
        raise InputError(f"{path}: need a header row and at least one data row")
    header = [h.strip() for h in rows[0]]
    if group_col not in header:
        raise ConfigError(f"group column {group_col!r} not in header {header}")
    if response_col is not None and response_col not in header:
        raise ConfigError(f"response column {response_col!r} not in header {header}")
    if columns is None:
        columns = [c for c in header if c != group_col and c != response_col]
    missing = [c for c in columns if c not in header]
    if missing:
        raise ConfigError(f"columns {missing} not in header {header}")
    gi = header.index(group_col)
    yi = header.index(response_col) if response_col is not None else None
    xi = [header.index(c) for c in columns]

    group_ids: list[str] = []
    y_vals: list[float] = []
    x_vals: list[list[float]] = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise InputError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        group_ids.append(row[gi].strip())
        try:
            if yi is not None:
                y_vals.append(float(row[yi]))
            x_vals.append([float(row[j]) for j in xi])
        except ValueError as err:
            raise InputError(f"{path}:{lineno}: non-numeric field ({err})") from None
    y = np.asarray(y_vals) if yi is not None else None
    X = np.asarray(x_vals)
    if not np.all(np.isfinite(X)) or (y is not None and not np.all(np.isfinite(y))):
        raise InputError(f"{path}: non-finite values in numeric fields")
    return TableData(group_ids, y, X, list(columns))


def canonicalize(table: TableData) -> TableData:
    """Sort groups by id and rows within each group by content, so any
    row shuffle of the same file produces the identical dataset."""
    n = len(table.group_ids)
    y = table.y if table.y is not None else np.zeros(n)
    keys = np.concatenate([y[:, None], table.X], axis=1)
    order = sorted(
        range(n),
        key=lambda i: (table.group_ids[i], tuple(keys[i])),
    )
    idx = np.asarray(order)
    return TableData(
        [table.group_ids[i] for i in order],
        table.y[idx] if table.y is not None else None,
        table.X[idx],
        table.columns,
    )


def build_dataset(table: TableData, random_cols: list[str]) -> GroupedDataset:
    missing = [c for c in random_cols if c not in table.columns]
    if missing:
        raise ConfigError(f"random-effect columns {missing} not among covariates {table.columns}")
    re_idx = tuple(table.columns.index(c) for c in random_cols)
    if table.y is None:
        raise ConfigError("a response column is required to build a model dataset")
    ids = np.asarray(table.group_ids, dtype=object)
    return GroupedDataset.from_arrays(table.y, table.X, ids, re_idx)


def standardize_table(table: TableData) -> tuple[TableData, np.ndarray, np.ndarray]:
    """Center/scale covariates to mean 0, variance 1. Constant columns
    (intercepts) are left untouched."""
    mean = table.X.mean(axis=0)
    scale = table.X.std(axis=0)
    constant = scale < 1e-12
    mean[constant] = 0.0
    scale[constant] = 1.0
    X = (table.X - mean) / scale
    return TableData(table.group_ids, table.y, X, table.columns), mean, scale


# --------------------------------------------------------------- artifact


def _fmt(x: float) -> str:
    return repr(float(x))


def render_model_artifact(
    result: FitResult,
    data: GroupedDataset,
    config: dict,
    mean: np.ndarray,
    scale: np.ndarray,
    ranef: RandomEffectPrediction,
    columns: list[str],
    random_cols: list[str],
    bic_value: float,
) -> str:
    phi = result.phi_hat
    lines = [ARTIFACT_VERSION, "[meta]"]
    meta = {
        "kind": phi.cov.kind,
        "q": phi.cov.q,
        "lambda": _fmt(result.lam),
        "rho": _fmt(phi.rho),
        "sigma2": _fmt(phi.sigma2),
        "neg_loglik": _fmt(result.neg_loglik),
        "objective": _fmt(result.objective_value),
        "bic": _fmt(bic_value),
        "converged": int(result.converged),
        "cycles": result.cycles_used,
        "n_groups": data.n_groups,
        "n_total": data.n_total,
        "group_col": config["group_col"],
        "response_col": config["response_col"],
        "standardize": config["standardize"],
        "random_cols": ",".join(random_cols),
    }
    for key, value in meta.items():
        lines.append(f"{key}\t{value}")
    lines.append("[theta]")
    for t in phi.cov.theta:
        lines.append(_fmt(t))
    lines.append("[psi]")
    for row in phi.cov.psi():
        lines.append("\t".join(_fmt(v) for v in row))
    lines.append("[columns]")
    lines.append("name\tmean\tscale\tweight\tcoef\tactive")
    active = set(result.active_set)
    for j, name in enumerate(columns):
        lines.append(
            f"{name}\t{_fmt(mean[j])}\t{_fmt(scale[j])}"
            f"\t{_fmt(result.weights.values[j])}\t{_fmt(phi.beta[j])}"
            f"\t{int(j in active)}"
        )
    lines.append("[ranef]")
    lines.append("group\t" + "\t".join(f"b_{c}" for c in random_cols))
    for gid, b in zip(ranef.group_ids, ranef.b):
        lines.append(str(gid) + "".join("\t" + _fmt(v) for v in b))
    lines.append("[trace]")
    for v in result.objective_trace:
        lines.append(_fmt(v))
    return "\n".join(lines) + "\n"


class ModelArtifact:
    """Parsed model file, sufficient to rebuild predictions exactly."""

    def __init__(self, meta, theta, columns, col_stats, weights, beta, ranef, trace):
        self.meta = meta
        self.theta = theta
        self.columns = columns
        self.col_stats = col_stats  # (mean, scale) arrays
        self.weights = weights
        self.beta = beta
        self.ranef = ranef          # dict group -> vector
        self.trace = trace

    @property
    def random_cols(self) -> list[str]:
        raw = self.meta.get("random_cols", "")
        return [c for c in raw.split(",") if c]

    def parameter_vector(self) -> ParameterVector:
        cov = CovarianceStructure(self.meta["kind"], self.theta, int(self.meta["q"]))
        return ParameterVector(self.beta, cov, float(self.meta["rho"]))

    def fit_result(self) -> FitResult:
        phi = self.parameter_vector()
        active = tuple(int(k) for k in np.flatnonzero(self.beta))
        return FitResult(
            phi_hat=phi,
            lam=float(self.meta["lambda"]),
            weights=PenaltyWeights(self.weights),
            active_set=active,
            objective_value=float(self.meta["objective"]),
            neg_loglik=float(self.meta["neg_loglik"]),
            cycles_used=int(self.meta["cycles"]),
            converged=bool(int(self.meta["converged"])),
            objective_trace=tuple(self.trace),
            skipped_coordinates=(),
        )


def parse_model_artifact(path: str) -> ModelArtifact:
    try:
        with open(path) as handle:
            raw = handle.read().splitlines()
    except OSError as err:
        raise InputError(f"cannot read {path}: {err}") from None
    if not raw or raw[0].strip() != ARTIFACT_VERSION:
        raise InputError(f"{path}: not a {ARTIFACT_VERSION} artifact")
    section = None
    meta: dict[str, str] = {}
    theta: list[float] = []
    columns: list[str] = []
    means: list[float] = []
    scales: list[float] = []
    weights: list[float] = []
    beta: list[float] = []
    ranef: dict[str, np.ndarray] = {}
    trace: list[float] = []
    try:
        for line in raw[1:]:
            if not line.strip():
                continue
            if line.startswith("["):
                section = line.strip()
                continue
            if section == "[meta]":
                key, _, value = line.partition("\t")
                meta[key] = value
            elif section == "[theta]":
                theta.append(float(line))
            elif section == "[psi]":
                continue  # derivable from theta; kept for readability
            elif section == "[columns]":
                parts = line.split("\t")
                if parts[0] == "name":
                    continue
                columns.append(parts[0])
                means.append(float(parts[1]))
                scales.append(float(parts[2]))
                weights.append(float(parts[3]))
                beta.append(float(parts[4]))
            elif section == "[ranef]":
                parts = line.split("\t")
                if parts[0] == "group":
                    continue
                ranef[parts[0]] = np.asarray([float(v) for v in parts[1:]])
            elif section == "[trace]":
                trace.append(float(line))
            else:
                raise InputError(f"{path}: content outside any section: {line!r}")
    except (ValueError, IndexError) as err:
        raise InputError(f"{path}: malformed artifact ({err})") from None
    for key in ("kind", "q", "lambda", "rho", "sigma2"):
        if key not in meta:
            raise InputError(f"{path}: missing meta key {key!r}")
    return ModelArtifact(
        meta, np.asarray(theta), columns,
        (np.asarray(means), np.asarray(scales)),
        np.asarray(weights), np.asarray(beta), ranef, trace,
    )


def render_summary(result: FitResult, data: GroupedDataset, columns, bic_value: float) -> str:
    phi = result.phi_hat
    lines = [
        f"groups\t{data.n_groups}",
        f"observations\t{data.n_total}",
        f"lambda\t{result.lam:.6g}",
        f"converged\t{'yes' if result.converged else 'NO'}",
        f"cycles\t{result.cycles_used}",
        f"active_set_size\t{len(result.active_set)}",
        f"sigma2\t{phi.sigma2:.6g}",
        f"bic\t{bic_value:.6g}",
        "",
        "nonzero coefficients:",
    ]
    for k in result.active_set:
        lines.append(f"  {columns[k]}\t{phi.beta[k]:.6g}")
    psi = phi.cov.psi()
    if psi.size:
        lines.append("")
        lines.append("random-effect covariance diagonal:")
        for value in np.diag(psi):
            lines.append(f"  {value:.6g}")
    return "\n".join(lines) + "\n"


def render_path_table(path_result) -> str:
    lines = ["lambda\tactive_size\tneg2loglik\tdf\tbic"]
    for e in path_result.entries:
        df = len(e.fit.active_set) + e.fit.phi_hat.cov.n_theta
        lines.append(
            f"{_fmt(e.lam)}\t{len(e.fit.active_set)}\t{_fmt(2.0 * e.fit.neg_loglik)}"
            f"\t{df}\t{_fmt(e.bic)}"
        )
    return "\n".join(lines) + "\n"


# -------------------------------------------------------------- commands


def _solver_options(args) -> SolverOptions | None:
    if args.max_cycles is None:
        return None
    if args.max_cycles < 1:
        raise ConfigError("--max-cycles must be at least 1")
    return SolverOptions(max_cycles=args.max_cycles)


def _prepare(args, *, need_response=True):
    table = read_table(args.data, args.group_col,
                       args.response_col if need_response else None)
    table = canonicalize(table)
    if args.standardize == "on":
        table, mean, scale = standardize_table(table)
    else:
        mean = np.zeros(table.X.shape[1])
        scale = np.ones(table.X.shape[1])
    random_cols = args.random_cols or []
    data = build_dataset(table, random_cols)
    return table, data, mean, scale, random_cols


def _weights(data: GroupedDataset, table: TableData, unpenalized: list[str]) -> PenaltyWeights:
    missing = [c for c in unpenalized if c not in table.columns]
    if missing:
        raise ConfigError(f"unpenalized columns {missing} not among covariates")
    extra = tuple(table.columns.index(c) for c in unpenalized)
    return PenaltyWeights.default_for(data, unpenalized=extra)


def _write_model(args, result, data, table, mean, scale, random_cols) -> float:
    ranef = predict_random_effects(result, data)
    bic_value = bic(result, data)
    config = {
        "group_col": args.group_col,
        "response_col": args.response_col,
        "standardize": args.standardize,
    }
    artifact = render_model_artifact(
        result, data, config, mean, scale, ranef, table.columns, random_cols, bic_value
    )
    _atomic_write(args.out + ".model.txt", artifact)
    _atomic_write(args.out + ".summary.txt",
                  render_summary(result, data, table.columns, bic_value))
    return bic_value


def cmd_fit(args) -> int:
    table, data, mean, scale, random_cols = _prepare(args)
    weights = _weights(data, table, args.unpenalized or [])
    if args.lam is None:
        raise ConfigError("fit requires --lambda (use the path command to select one)")
    if args.lam < 0:
        raise ConfigError("--lambda must be non-negative")
    opts = _solver_options(args)
    # identity needs q >= 1; with no random effects the covariance is empty
    kind = args.psi if random_cols else "diagonal"
    phi0 = default_start(data, weights, kind=kind)
    result = fit(data, args.lam, weights, phi0, opts)
    if args.adaptive:
        w2 = adaptive_weights(result.phi_hat.beta, weights)
        result = fit(data, args.lam, w2, result.phi_hat, opts)
    _write_model(args, result, data, table, mean, scale, random_cols)
    print(f"fit: lambda={args.lam:g} active={len(result.active_set)} "
          f"sigma2={result.phi_hat.sigma2:.6g} converged={result.converged}")
    return EXIT_OK if result.converged else EXIT_NOT_CONVERGED


def cmd_path(args) -> int:
    if args.grid < 1:
        raise ConfigError("--grid must be at least 1")
    if not 0.0 < args.ratio <= 1.0:
        raise ConfigError("--ratio must be in (0, 1]")
    table, data, mean, scale, random_cols = _prepare(args)
    weights = _weights(data, table, args.unpenalized or [])
    opts = _solver_options(args)
    kind = args.psi if random_cols else "diagonal"
    path_result = lambda_path(
        data, weights, kind=kind, opts=opts,
        grid_size=args.grid, lambda_ratio=args.ratio,
    )
    _atomic_write(args.out + ".path.tsv", render_path_table(path_result))
    best = path_result.best
    if args.adaptive:
        w2 = adaptive_weights(best.phi_hat.beta, weights)
        second = lambda_path(
            data, w2, kind=kind, opts=opts,
            grid_size=args.grid, lambda_ratio=args.ratio,
            phi_init=best.phi_hat,
        )
        _atomic_write(args.out + ".adaptive.path.tsv", render_path_table(second))
        best = second.best
    _write_model(args, best, data, table, mean, scale, random_cols)
    print(f"path: lambda_opt={best.lam:.6g} active={len(best.active_set)} "
          f"sigma2={best.phi_hat.sigma2:.6g}")
    return EXIT_OK if best.converged else EXIT_NOT_CONVERGED


def cmd_predict(args) -> int:
    artifact = parse_model_artifact(args.model)
    table = read_table(args.data, args.group_col, None, columns=artifact.columns)
    mean, scale = artifact.col_stats
    X = (table.X - mean) / scale
    random_cols = artifact.random_cols
    re_idx = [artifact.columns.index(c) for c in random_cols]

    result = artifact.fit_result()
    group_ids = list(dict.fromkeys(table.group_ids))
    rows_by_group = {gid: [] for gid in group_ids}
    for i, gid in enumerate(table.group_ids):
        rows_by_group[gid].append(i)
    ids = np.asarray(table.group_ids, dtype=object)
    newdata = GroupedDataset.from_arrays(np.zeros(len(ids)), X, ids, tuple(re_idx))
    ranef = RandomEffectPrediction(
        tuple(artifact.ranef.keys()),
        tuple(artifact.ranef.values()),
        tuple(np.zeros(0) for _ in artifact.ranef),
    )
    pred = predict_response(result, ranef, newdata)

    y_hat = np.empty(len(table.group_ids))
    known = {}
    for gid, yh, flag in zip(pred.group_ids, pred.y_hat, pred.known_group):
        y_hat[rows_by_group[gid]] = yh
        known[gid] = flag
    lines = ["row\tgroup\ty_hat\tknown_group"]
    for i, gid in enumerate(table.group_ids):
        lines.append(f"{i + 1}\t{gid}\t{_fmt(y_hat[i])}\t{int(known[gid])}")
    _atomic_write(args.out + ".predictions.tsv", "\n".join(lines) + "\n")

    blines = ["group\t" + "\t".join(f"b_{c}" for c in random_cols)]
    for gid, b in artifact.ranef.items():
        blines.append(str(gid) + "".join("\t" + _fmt(v) for v in b))
    _atomic_write(args.out + ".ranef.tsv", "\n".join(blines) + "\n")

    message = f"predict: {len(table.group_ids)} rows, {len(group_ids)} groups"
    if args.response_col:
        with_y = read_table(args.data, args.group_col, args.response_col,
                            columns=artifact.columns)
        mse = float(np.mean((with_y.y - y_hat) ** 2))
        message += f", mse={mse:.6g}"
    print(message)
    return EXIT_OK


def cmd_simulate(args) -> int:
    if args.runs is not None and args.runs < 1:
        raise ConfigError("--runs must be at least 1")
    if args.seed is not None and args.seed < 0:
        raise ConfigError("--seed must be non-negative")
    if args.grid < 1:
        raise ConfigError("--grid must be at least 1")
    if os.path.exists(args.scheme):
        try:
            with open(args.scheme) as handle:
                payload = json.load(handle)
            scheme = scheme_from_dict(payload)
        except (OSError, json.JSONDecodeError) as err:
            raise InputError(f"cannot parse scheme file {args.scheme}: {err}") from None
        except (KeyError, ValueError, TypeError) as err:
            raise ConfigError(f"invalid scheme file {args.scheme}: {err}") from None
    else:
        try:
            scheme = make_scheme(args.scheme, theta2=args.theta2)
        except (KeyError, ValueError) as err:
            # str() of a KeyError is the repr of its argument, quotes and all
            msg = err.args[0] if err.args else err
            raise ConfigError(str(msg)) from None
    methods = tuple(args.methods.split(",")) if args.methods else None
    kwargs = {}
    if methods:
        kwargs["methods"] = methods
    summary = run_scheme(
        scheme, runs=args.runs, seed=args.seed, grid_size=args.grid, **kwargs
    )
    provenance = [
        f"# mixlasso {__version__} simulate",
        f"# scheme={scheme.name} runs={summary.runs} seed={summary.seed}",
        f"# methods={','.join(summary.methods)} grid={args.grid}",
    ]
    failed = sum(len(v) for v in summary.failures.values())
    if failed:
        provenance.append(f"# failed_runs={failed}")
    text = "\n".join(provenance) + "\n" + summary.to_tsv()
    if args.out:
        _atomic_write(args.out + ".summary.tsv", text)
        _atomic_write(args.out + ".scheme.json",
                      json.dumps(scheme_to_dict(scheme), indent=2, sort_keys=True) + "\n")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_select_structure(args) -> int:
    table, data, mean, scale, _ = _prepare(args)
    try:
        selection = select_random_effects(
            data, kappa=args.kappa, max_candidates=args.max_candidates,
            opts=_solver_options(args),
        )
    except EmptyCandidateSet:
        report = "no random effects selected: the screening lasso kept no coefficients\n"
        if args.out:
            _atomic_write(args.out + ".structure.txt", report)
        sys.stdout.write(report)
        return EXIT_OK
    lines = [
        f"screening lasso candidates ({len(selection.candidates)}), by |coefficient|:",
        "\t" + ", ".join(table.columns[c] for c in selection.candidates),
        f"lambda_cv\t{selection.lam:.6g}",
        f"bic_null\t{selection.bic_null:.6g}",
        "",
        "candidate\ttheta_sq\tbic",
    ]
    for cand in selection.candidates:
        lines.append(
            f"{table.columns[cand]}\t{selection.theta_sq[cand]:.6g}"
            f"\t{selection.bic_by_candidate[cand]:.6g}"
        )
    lines.append("")
    lines.append(f"kappa\t{selection.kappa:g}")
    if selection.selected:
        lines.append("selected (variance > kappa, bic <= bic_null):")
        lines.append("\t" + ", ".join(table.columns[c] for c in selection.selected))
        lines.append("joint diagonal fit variances:")
        for col, value in zip(selection.selected, selection.joint_psi_diag):
            lines.append(f"\t{table.columns[col]}\t{value:.6g}")
        if selection.kept:
            lines.append("retained random effects:")
            lines.append("\t" + ", ".join(table.columns[c] for c in selection.kept))
        else:
            lines.append("retained random effects: none")
    else:
        lines.append("no random effects selected: no candidate passed the filters")
    report = "\n".join(lines) + "\n"
    if args.out:
        _atomic_write(args.out + ".structure.txt", report)
    sys.stdout.write(report)
    return EXIT_OK


# ------------------------------------------------------------------ parser


def _add_data_flags(sub, response=True):
    sub.add_argument("--data", required=True, help="input file (csv/tsv with header)")
    sub.add_argument("--group-col", required=True, help="name of the group id column")
    if response:
        sub.add_argument("--response-col", required=True, help="name of the response column")
    sub.add_argument("--standardize", choices=("on", "off"), default="on",
                     help="center/scale covariates (constant columns untouched)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mixlasso",
        description="l1-penalized maximum likelihood for linear mixed-effects models",
    )
    parser.add_argument("--version", action="version", version=f"mixlasso {__version__}")
    commands = parser.add_subparsers(dest="command", required=True)

    fit_p = commands.add_parser("fit", help="one penalized fit at a fixed lambda")
    _add_data_flags(fit_p)
    fit_p.add_argument("--random-cols", nargs="*", default=[],
                       help="covariate columns that get random effects")
    fit_p.add_argument("--unpenalized", nargs="*", default=[],
                       help="extra covariates exempt from the l1 penalty")
    fit_p.add_argument("--psi", choices=("identity", "diagonal", "general"),
                       default="identity")
    fit_p.add_argument("--lambda", dest="lam", type=float, required=False)
    fit_p.add_argument("--adaptive", action="store_true",
                       help="refit with weights 1/|beta| from the first fit")
    fit_p.add_argument("--max-cycles", type=int, default=None)
    fit_p.add_argument("--out", required=True, help="output prefix")
    fit_p.set_defaults(func=cmd_fit)

    path_p = commands.add_parser("path", help="BIC-selected regularization path")
    _add_data_flags(path_p)
    path_p.add_argument("--random-cols", nargs="*", default=[])
    path_p.add_argument("--unpenalized", nargs="*", default=[])
    path_p.add_argument("--psi", choices=("identity", "diagonal", "general"),
                        default="identity")
    path_p.add_argument("--grid", type=int, default=30, help="number of penalty levels")
    path_p.add_argument("--ratio", type=float, default=0.01,
                        help="smallest penalty as a fraction of lambda_max")
    path_p.add_argument("--adaptive", action="store_true",
                        help="run a second, adaptively weighted path")
    path_p.add_argument("--max-cycles", type=int, default=None)
    path_p.add_argument("--out", required=True)
    path_p.set_defaults(func=cmd_path)

    pred_p = commands.add_parser("predict", help="predict from a fitted model artifact")
    pred_p.add_argument("--model", required=True, help="path to a .model.txt artifact")
    pred_p.add_argument("--data", required=True)
    pred_p.add_argument("--group-col", required=True)
    pred_p.add_argument("--response-col", default=None,
                        help="optional; when present an MSE is reported")
    pred_p.add_argument("--out", required=True)
    pred_p.set_defaults(func=cmd_predict)

    sim_p = commands.add_parser("simulate", help="run a simulation scheme")
    sim_p.add_argument("--scheme", required=True,
                       help="preset name (L1..P3) or a scheme json file")
    sim_p.add_argument("--runs", type=int, default=None)
    sim_p.add_argument("--seed", type=int, default=None)
    sim_p.add_argument("--theta2", type=float, default=None,
                       help="random-effect variance for the P schemes")
    sim_p.add_argument("--methods", default=None,
                       help="comma-separated subset of lmmLasso,lmmadLasso,plainLasso,adLasso")
    sim_p.add_argument("--grid", type=int, default=30)
    sim_p.add_argument("--out", default=None, help="output prefix (default: stdout)")
    sim_p.set_defaults(func=cmd_simulate)

    sel_p = commands.add_parser("select-structure",
                                help="data-driven random-effect structure search")
    _add_data_flags(sel_p)
    sel_p.add_argument("--random-cols", nargs="*", default=[],
                       help="ignored by the search; accepted for interface symmetry")
    sel_p.add_argument("--kappa", type=float, default=0.05)
    sel_p.add_argument("--max-candidates", type=int, default=None)
    sel_p.add_argument("--max-cycles", type=int, default=None)
    sel_p.add_argument("--out", default=None)
    sel_p.set_defaults(func=cmd_select_structure)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_BAD_CONFIG
    except InputError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_BAD_INPUT
    except MixLassoError as err:
        # a hard solver failure; no usable result exists to write
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_NOT_CONVERGED


if __name__ == "__main__":
    sys.exit(main())
