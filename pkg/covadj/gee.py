# -*- coding: UTF-8 -*-
import logging
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .data_types import GeeFit, Method, Structure, TestResult, TrialDataset, WorkingCovariance
from .errors import ConvergenceError, CovAdjError, NonPositiveDefiniteError, RankDeficientError
from .regression import check_rank, design_matrix, design_names, wald_test
from .utils import resolved

logger = logging.getLogger(__name__)


def split_clusters(data: TrialDataset, values: np.ndarray,
                   arm: Optional[int] = None) -> List[np.ndarray]:
    """Splits unit-level rows (as ordered by data.stacked) back into clusters."""
    sizes = [c.size for c in data.clusters if arm is None or c.treatment == arm]
    return np.split(np.asarray(values), np.cumsum(sizes)[:-1])


def alpha_bounds(m_max: int) -> Tuple[float, float]:
    lower = -1.0 / (m_max - 1) if m_max > 1 else -np.inf
    return lower, 1.0


def clamp_alpha(alpha: float, m_max: int, margin: Optional[float] = None) -> float:
    margin = resolved(margin, "gee", "alpha_clamp_margin")
    lower, upper = alpha_bounds(m_max)
    clamped = float(np.clip(alpha, lower + margin, upper - margin))
    if clamped != alpha:
        logger.warning(f"Exchangeable correlation {alpha:.6g} outside the positive-definite "
                       f"range ({lower:.6g}, {upper:.6g}) for cluster size {m_max}; "
                       f"clamped to {clamped:.6g}")
    return clamped


def working_matrix(m: int, working: WorkingCovariance) -> np.ndarray:
    """V = phi * [(1 - alpha) I + alpha J]."""
    if working.structure is Structure.INDEPENDENCE:
        return working.dispersion * np.eye(m)
    a = working.exch_alpha
    return working.dispersion * ((1 - a) * np.eye(m) + a * np.ones((m, m)))


def working_inverse(m: int, working: WorkingCovariance) -> np.ndarray:
    phi, a = working.dispersion, working.exch_alpha
    if phi <= 0:
        raise NonPositiveDefiniteError(f"Dispersion must be positive, got {phi}")
    if working.structure is Structure.INDEPENDENCE:
        return np.eye(m) / phi
    lower, upper = alpha_bounds(m)
    if not lower < a < upper:
        raise NonPositiveDefiniteError(
            f"Exchangeable correlation {a} gives a non positive-definite working "
            f"covariance for cluster size {m}; valid range is ({lower:.6g}, {upper})")
    return (np.eye(m) - a / (1 + (m - 1) * a) * np.ones((m, m))) / (phi * (1 - a))


def precision_row_sum(m: int, working: WorkingCovariance) -> float:
    """Common value of the row sums of V^-1, so that 1'V^-1 w = this * sum(w)."""
    if working.structure is Structure.INDEPENDENCE:
        return 1.0 / working.dispersion
    return 1.0 / (working.dispersion * (1 + (m - 1) * working.exch_alpha))


def moment_correlation(residuals: Sequence[np.ndarray], p: int,
                       margin: Optional[float] = None) -> Tuple[float, float]:
    """Moment estimates (phi, alpha) of the exchangeable working covariance
    from per-cluster residual vectors, alpha clamped to the PD range."""
    residuals = [np.asarray(r, dtype=float) for r in residuals]
    sizes = np.array([len(r) for r in residuals])
    if np.all(sizes < 2):
        raise CovAdjError("Exchangeable correlation needs at least one cluster with "
                          "two or more units; all clusters are singletons")
    M = int(sizes.sum())
    ss = sum(float(r @ r) for r in residuals)
    phi = ss / (M - p) if M - p > 0 else ss / M
    if phi <= 0:
        logger.debug("All residuals are zero; using phi=1, alpha=0")
        return 1.0, 0.0

    # sum over j<j' of e_j e_j' is ((sum e)^2 - sum e^2) / 2
    cross = sum((r.sum() ** 2 - r @ r) / 2 for r in residuals)
    pairs = int((sizes * (sizes - 1) // 2).sum())
    denom = pairs - p if pairs - p > 0 else pairs
    alpha = (cross / denom) / phi
    return float(phi), clamp_alpha(float(alpha), int(sizes.max()), margin)


def resolve_working(data: TrialDataset, resid: np.ndarray, n_params: int,
                    working: Optional[WorkingCovariance]) -> WorkingCovariance:
    """Turns a requested working covariance into one with parameters:
    fixed parameters are kept, estimated ones come from moment_correlation
    on the unit-level residuals."""
    if working is None or working.structure is Structure.INDEPENDENCE:
        return WorkingCovariance.independence()
    if data.is_scalar:
        logger.warning("Exchangeable working covariance requested for data without "
                       "clusters; using independence")
        return WorkingCovariance.independence()
    if working.fixed:
        for m in set(data.sizes.tolist()):
            working_inverse(m, working)
        return working
    phi, alpha = moment_correlation(split_clusters(data, resid), n_params)
    return WorkingCovariance(Structure.EXCHANGEABLE, phi, alpha, True)


def _gls(Xs, ys, working):
    k = Xs[0].shape[1]
    bread = np.zeros((k, k))
    rhs = np.zeros(k)
    inverses = {}
    for X, y in zip(Xs, ys):
        m = len(y)
        if m not in inverses:
            inverses[m] = working_inverse(m, working)
        XtV = X.T @ inverses[m]
        bread += XtV @ X
        rhs += XtV @ y
    return np.linalg.solve(bread, rhs), bread


def gee_fit(data: TrialDataset, selected: Sequence[int] = (), with_treatment: bool = True,
            working: Optional[WorkingCovariance] = None, max_iter: Optional[int] = None,
            tol: Optional[float] = None) -> GeeFit:
    """Identity-link GEE for y on [1, (A), X_selected]. Estimated working
    parameters are updated by moments between GLS solves until beta settles."""
    max_iter = resolved(max_iter, "gee", "max_iter")
    tol = resolved(tol, "gee", "tol")
    working = working or WorkingCovariance.independence()
    X, y = design_matrix(data, selected, with_treatment)
    names = design_names(data, selected, with_treatment)
    check_rank(X, names)
    Xs, ys = split_clusters(data, X), split_clusters(data, y)

    if working.structure is Structure.EXCHANGEABLE and data.is_scalar:
        logger.warning("Exchangeable working covariance requested for data without "
                       "clusters; fitting under independence")
        working = WorkingCovariance.independence()

    beta, _ = _gls(Xs, ys, WorkingCovariance.independence())
    iterations, converged = 1, True
    if working.structure is Structure.EXCHANGEABLE:
        if working.fixed:
            beta, _ = _gls(Xs, ys, working)
        else:
            converged = False
            for iterations in range(1, max_iter + 1):
                phi, alpha = moment_correlation(split_clusters(data, y - X @ beta), X.shape[1])
                working = WorkingCovariance(Structure.EXCHANGEABLE, phi, alpha, False)
                new_beta, _ = _gls(Xs, ys, working)
                change = np.max(np.abs(new_beta - beta))
                beta = new_beta
                if change < tol * max(1.0, np.max(np.abs(beta))):
                    converged = True
                    break
            if not converged:
                raise ConvergenceError(
                    f"GEE did not converge in {max_iter} iterations (last change {change:.3g})")
            working = working._replace(fixed=True)
            logger.debug(f"GEE converged after {iterations} iterations, working {working}")

    fit = GeeFit(beta, np.zeros((len(beta), len(beta))), np.zeros((len(beta), len(beta))),
                 iterations, converged, working, 1 if with_treatment else None,
                 tuple(names), tuple(int(k) for k in selected))
    robust, naive = _sandwich(data, fit, working)
    return fit._replace(robust_cov=robust, naive_cov=naive)


def _sandwich(data: TrialDataset, fit: GeeFit, working: WorkingCovariance):
    X, y = design_matrix(data, fit.selected, fit.treatment_index is not None)
    k = X.shape[1]
    bread = np.zeros((k, k))
    meat = np.zeros((k, k))
    inverses = {}
    for Xi, ei in zip(split_clusters(data, X), split_clusters(data, y - X @ fit.beta)):
        m = len(ei)
        if m not in inverses:
            inverses[m] = working_inverse(m, working)
        XtV = Xi.T @ inverses[m]
        bread += XtV @ Xi
        score = XtV @ ei
        meat += np.outer(score, score)
    try:
        bread_inv = np.linalg.inv(bread)
    except np.linalg.LinAlgError:
        raise RankDeficientError(f"Singular bread matrix for columns {list(fit.names)}",
                                 columns=list(fit.names))
    robust = bread_inv @ meat @ bread_inv
    return (robust + robust.T) / 2, bread_inv


def sandwich_variance(data: TrialDataset, fit: GeeFit,
                      working: Optional[WorkingCovariance] = None) -> np.ndarray:
    """B^-1 M B^-1 with B = sum X_i' V_i^-1 X_i and M the summed outer
    products of the cluster scores X_i' V_i^-1 e_i."""
    robust, _ = _sandwich(data, fit, working or fit.working)
    return robust


def cmm_test(data: TrialDataset, selected: Sequence[int] = (),
             working: Optional[WorkingCovariance] = None,
             adjustment: str = "unadjusted") -> TestResult:
    fit = gee_fit(data, selected, with_treatment=True, working=working)
    se = float(np.sqrt(max(fit.robust_cov[1, 1], 0.0)))
    return wald_test(fit.beta[1], se, Method.CMM, adjustment,
                     fit.working.structure.value, len(selected))
