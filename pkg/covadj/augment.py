# -*- coding: UTF-8 -*-
import logging
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from .data_types import (AugmentedFit, FittedMeanModel, Method, SelectionSpec, Structure,
                         TestResult, TrialDataset, WorkingCovariance)
from .errors import AllocationError, CovAdjError, ModelTooRichError, RankDeficientError
from .gee import precision_row_sum, resolve_working
from .regression import fit_model, predict, wald_test
from .utils import CFG

logger = logging.getLogger(__name__)

Selector = Union[None, Sequence[int], SelectionSpec]


def fit_arm_models(data: TrialDataset,
                   selector: Selector = None) -> Tuple[FittedMeanModel, FittedMeanModel]:
    """One OLS working model per arm, treatment never among the regressors.
    A SelectionSpec runs its selection on each arm's units independently."""
    from .select import select_arm  # select imports regression and gee only

    models = []
    for arm in (0, 1):
        if data.allocation[arm] == 0:
            raise AllocationError(f"Arm {arm} holds no clusters")
        if isinstance(selector, SelectionSpec):
            model = select_arm(data, selector._replace(include_treatment=False), arm)
        else:
            model = fit_model(data, tuple(selector or ()), with_treatment=False, arm=arm)
        logger.debug(f"Arm {arm} working model: {model}")
        models.append(model)
    return models[0], models[1]


def correction_factor(n0: int, n1: int, p0: int, p1: int) -> float:
    """C = {(n0-p0-1)^-1 + (n1-p1-1)^-1} / {(n0-1)^-1 + (n1-1)^-1}."""
    if n0 - p0 - 1 <= 0 or n1 - p1 - 1 <= 0:
        raise ModelTooRichError(
            f"arm model too rich for correction factor: n0={n0}, p0={p0}, n1={n1}, p1={p1}")
    if n0 < 2 or n1 < 2:
        raise ModelTooRichError(f"Correction factor needs two units per arm, got n0={n0}, n1={n1}")
    return (1 / (n0 - p0 - 1) + 1 / (n1 - p1 - 1)) / (1 / (n0 - 1) + 1 / (n1 - 1))


def _cluster_sums(data: TrialDataset, values: np.ndarray) -> np.ndarray:
    starts = np.concatenate([[0], np.cumsum(data.sizes)[:-1]])
    return np.add.reduceat(np.asarray(values, dtype=float), starts)


def augmented_solve(data: TrialDataset,
                    arm_models: Tuple[FittedMeanModel, FittedMeanModel],
                    working: Optional[WorkingCovariance] = None) -> AugmentedFit:
    """Solves the augmented estimating equation for g(A; beta) = b0 + b1*A
    with h = (1, A)'. The equation is linear in beta, so it is solved as
    one 2x2 system; for one unit per cluster it reduces to the AIPW means."""
    y, _, A, _ = data.stacked()
    if data.allocation[0] == 0 or data.allocation[1] == 0:
        raise AllocationError(f"Both arms need clusters, got allocation {data.allocation}")
    preds = [predict(model, data) for model in arm_models]

    if working is not None and working.structure is Structure.EXCHANGEABLE:
        resid = y - np.where(A == 1, preds[1], preds[0])
        n_params = arm_models[0].n_params + arm_models[1].n_params
        working = resolve_working(data, resid, n_params, working)
    else:
        working = WorkingCovariance.independence()

    pi = (1 - data.treatment_probability, data.treatment_probability)
    assignment = data.assignment()
    row_sum = np.array([precision_row_sum(m, working) for m in data.sizes])
    s = row_sum * data.sizes  # 1'V^-1 1
    q_y = row_sum * _cluster_sums(data, y)  # 1'V^-1 y
    q_d = [row_sum * _cluster_sums(data, d) for d in preds]

    H = np.column_stack([np.ones(data.n), assignment])
    bread = (H * s[:, None]).T @ H
    rhs = H.T @ q_y
    weights = []
    for a in (0, 1):
        Da = np.array([1.0, a])
        w = (assignment == a) - pi[a]
        weights.append(w)
        bread -= (w @ s) * np.outer(Da, Da)
        rhs -= (w @ q_d[a]) * Da
    try:
        beta = np.linalg.solve(bread, rhs)
    except np.linalg.LinAlgError:
        raise RankDeficientError("Singular augmented estimating equation",
                                 columns=["(intercept)", "treatment"])

    psi = (q_y - s * (H @ beta))[:, None] * H
    for a in (0, 1):
        Da = np.array([1.0, a])
        psi -= (weights[a] * (q_d[a] - s * (Da @ beta)))[:, None] * Da[None, :]

    fit = AugmentedFit(beta, tuple(arm_models), np.zeros((2, 2)), 1.0, working, psi, bread)
    c = _arm_correction(data, arm_models)
    return fit._replace(variance=augmented_variance(data, fit, c), correction_c=c)


def _arm_correction(data: TrialDataset, arm_models) -> float:
    if not data.is_scalar and not CFG["augment"]["correct_clustered"]:
        return 1.0
    m0, m1 = arm_models
    return correction_factor(m0.n_obs, m1.n_obs, len(m0.selected), len(m1.selected))


def augmented_variance(data: TrialDataset, fit: AugmentedFit,
                       correction: Optional[float] = None) -> np.ndarray:
    """C * bread^-1 (sum psi psi') bread^-T, C from the arm models unless given."""
    c = _arm_correction(data, fit.arm_models) if correction is None else correction
    bread_inv = np.linalg.inv(fit.bread)
    variance = c * bread_inv @ (fit.psi.T @ fit.psi) @ bread_inv.T
    return (variance + variance.T) / 2


def augmented_test(data: TrialDataset, selector: Selector = None,
                   working: Optional[WorkingCovariance] = None,
                   adjustment: str = "unadjusted",
                   clustered: Optional[bool] = None) -> TestResult:
    """T_a = b1 / SE(b1). The clustered form is used whenever clusters hold
    more than one unit; clustered=False insists on the scalar form."""
    if clustered is False and not data.is_scalar:
        raise CovAdjError("Scalar augmented form needs one unit per cluster; "
                          "cluster-average the data first")
    models = fit_arm_models(data, selector)
    fit = augmented_solve(data, models, working)
    se = float(np.sqrt(max(fit.variance[1, 1], 0.0)))
    n_selected = len(set(models[0].selected) | set(models[1].selected))
    return wald_test(fit.beta[1], se, Method.AUGMENTED, adjustment,
                     fit.working.structure.value, n_selected)
