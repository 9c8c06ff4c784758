"""Random-effect recovery and response prediction for fitted models.

Given a fitted parameter vector, the posterior mode (equivalently the
posterior mean, by normality) of each group's random effect is

    b_i = (Z_i' Z_i + sigma2 * Psi^{-1})^{-1} Z_i' (y_i - X_i beta),

the minimizer of the penalized group least squares criterion
``||y_i - X_i beta - Z_i b||^2 / sigma2 + b' Psi^{-1} b``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import DimensionMismatch
from .linalg import cholesky, solve_spd
from .model import GroupedDataset
from .optimizer import FitResult


@dataclass(frozen=True)
class RandomEffectPrediction:
    """Per-group random-effect estimates with marginal residuals."""

    group_ids: tuple
    b: tuple[np.ndarray, ...] = field(repr=False)
    residuals: tuple[np.ndarray, ...] = field(repr=False)

    def for_group(self, group_id) -> np.ndarray:
        try:
            return self.b[self.group_ids.index(group_id)]
        except ValueError:
            raise KeyError(f"unknown group id {group_id!r}") from None

    def as_dict(self) -> dict:
        return dict(zip(self.group_ids, self.b))


@dataclass(frozen=True)
class ResponsePrediction:
    """Predicted responses for a dataset, group by group.

    ``known_group`` flags groups that were present at fitting time;
    predictions for unknown groups fall back to the population level
    ``X beta``.
    """

    group_ids: tuple
    y_hat: tuple[np.ndarray, ...] = field(repr=False)
    known_group: tuple[bool, ...]

    @property
    def stacked(self) -> np.ndarray:
        return np.concatenate(self.y_hat) if self.y_hat else np.zeros(0)


def predict_random_effects(fit: FitResult, data: GroupedDataset) -> RandomEffectPrediction:
    """Posterior-mode random effects for every group of the training data.

    A numerically singular ``Psi`` is handled by the factorization
    jitter; far beyond it, ``NotPositiveDefinite`` propagates.
    """
    phi = fit.phi_hat
    if phi.p != data.p or phi.cov.q != data.q:
        raise DimensionMismatch("fit and data dimensions do not match")
    sigma2 = phi.sigma2
    q = data.q
    b_list = []
    resid_list = []
    if q > 0:
        psi_inv = solve_spd(cholesky(phi.cov.psi()), np.eye(q))
    for g in data.groups:
        resid = g.y - g.X @ phi.beta
        resid_list.append(resid)
        if q == 0:
            b_list.append(np.zeros(0))
            continue
        m = g.Z.T @ g.Z + sigma2 * psi_inv
        b_list.append(solve_spd(cholesky(m), g.Z.T @ resid))
    return RandomEffectPrediction(data.group_ids, tuple(b_list), tuple(resid_list))


def predict_response(
    fit: FitResult, ranef: RandomEffectPrediction, newdata: GroupedDataset
) -> ResponsePrediction:
    """Predict responses for ``newdata``.

    Groups whose id appeared at fitting time get the group-level
    prediction ``X beta + Z b_i``; all other groups get the population
    prediction ``X beta``.
    """
    phi = fit.phi_hat
    if newdata.p != phi.p:
        raise DimensionMismatch("newdata has a different number of columns")
    if newdata.q != phi.cov.q:
        raise DimensionMismatch("newdata has a different number of random effects")
    known = ranef.as_dict()
    y_hat = []
    flags = []
    for g in newdata.groups:
        pred = g.X @ phi.beta
        b = known.get(g.group_id)
        if b is not None:
            pred = pred + g.Z @ b
            flags.append(True)
        else:
            flags.append(False)
        y_hat.append(pred)
    return ResponsePrediction(newdata.group_ids, tuple(y_hat), tuple(flags))
