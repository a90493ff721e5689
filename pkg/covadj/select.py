# -*- coding: UTF-8 -*-
import logging
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg

from .data_types import (FittedMeanModel, SelectionMethod, SelectionSpec, Structure,
                         TrialDataset, WhitenedData, WorkingCovariance)
from .errors import CovAdjError, NonPositiveDefiniteError, RankDeficientError
from .gee import gee_fit, split_clusters, working_inverse
from .regression import check_rank, fit_model
from .utils import resolved

logger = logging.getLogger(__name__)


def standardize(X: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Columns to mean 0 and unit sample variance; constant columns are
    centered only. Returns (Z, means, scales)."""
    X = np.asarray(X, dtype=float)
    means = X.mean(axis=0)
    scales = X.std(axis=0, ddof=1) if len(X) > 1 else np.ones(X.shape[1])
    scales = np.where(scales > 0, scales, 1.0)
    return (X - means) / scales, means, scales


def penalty_for(method: SelectionMethod, n_clusters: int, n_obs: int) -> float:
    if method is SelectionMethod.FORWARD_AIC:
        return 2.0
    if method is SelectionMethod.FORWARD_BICN:
        return float(np.log(n_clusters))
    if method is SelectionMethod.FORWARD_BICM:
        return float(np.log(n_obs))
    raise CovAdjError(f"{method.value} is not a forward-selection criterion")


def information_criterion(rss: float, n_obs: int, n_cols: int, penalty: float,
                          floor: float = 0.0) -> float:
    """N log(RSS/N) + penalty * (number of fitted columns); rss below
    `floor` counts as floor."""
    rss = max(rss, floor, 1e-300)
    return n_obs * np.log(rss / n_obs) + penalty * n_cols


def _rss(M: np.ndarray, y: np.ndarray) -> float:
    coef, _, _, _ = linalg.lstsq(M, y, lapack_driver="gelsd")
    resid = y - M @ coef
    return float(resid @ resid)


def _forward_path(forced: np.ndarray, candidates: np.ndarray, y: np.ndarray,
                  penalty: float, names: Optional[Sequence[str]] = None) -> List[int]:
    """Greedy forward selection over the candidate columns, `forced` columns
    always in. Returns candidate positions in order of entry."""
    n_obs = len(y)
    names = names or [f"col{k}" for k in range(candidates.shape[1])]
    floor = 1e-20 * max(float(((y - y.mean()) ** 2).sum()), float(y @ y), 1e-300)
    chosen: List[int] = []
    current = forced
    crit = information_criterion(_rss(current, y), n_obs, current.shape[1], penalty, floor)
    while len(chosen) < candidates.shape[1]:
        if n_obs <= current.shape[1] + 1:
            logger.debug(f"Forward selection stops at {len(chosen)} covariates: "
                         f"{n_obs} rows leave no room for another column")
            break
        best, best_crit = None, crit
        for j in range(candidates.shape[1]):
            if j in chosen:
                continue
            trial = np.column_stack([current, candidates[:, j]])
            try:
                check_rank(trial)
            except RankDeficientError:
                logger.warning(f"Skipping candidate {names[j]}: design would be rank-deficient")
                continue
            value = information_criterion(_rss(trial, y), n_obs, trial.shape[1], penalty, floor)
            if value < best_crit:
                best, best_crit = j, value
        if best is None:
            break
        chosen.append(best)
        current = np.column_stack([current, candidates[:, best]])
        crit = best_crit
        logger.debug(f"Forward selection adds {names[best]}, criterion {crit:.4f}")
    return chosen


def forward_select(data: TrialDataset, spec: SelectionSpec) -> FittedMeanModel:
    """Forward selection under independence, then the OLS fit of the
    selected model (treatment in it when spec.include_treatment)."""
    y, X, A, _ = data.stacked()
    candidates = _candidates(spec, data.p)
    forced = _forced(y, A, spec.include_treatment)
    penalty = penalty_for(spec.method, data.n, len(y))
    names = [data.covariate_names[k] for k in candidates]
    path = _forward_path(forced, X[:, candidates], y, penalty, names)
    return fit_model(data, tuple(candidates[j] for j in path), spec.include_treatment)


def _candidates(spec: SelectionSpec, p: int) -> List[int]:
    candidates = list(spec.candidate_indices) or list(range(p))
    bad = [k for k in candidates if not 0 <= k < p]
    if bad:
        raise CovAdjError(f"Candidate indices {bad} out of range for {p} covariates")
    if not candidates:
        raise CovAdjError("Selection needs at least one candidate covariate")
    return candidates


def _forced(y, A, include_treatment):
    cols = [np.ones(len(y))]
    if include_treatment:
        cols.append(np.asarray(A, dtype=float))
    return np.column_stack(cols)


def coordinate_descent(M: np.ndarray, y: np.ndarray, lam: float, weights: np.ndarray,
                       beta0: Optional[np.ndarray] = None, tol: Optional[float] = None,
                       max_iter: Optional[int] = None) -> np.ndarray:
    """Cyclic coordinate descent for (1/2)||y - M b||^2 + lam * sum w_k |b_k|.
    Columns with weight 0 are unpenalized."""
    tol = resolved(tol, "select", "cd_tol")
    max_iter = resolved(max_iter, "select", "cd_max_iter")
    norms = np.einsum("ij,ij->j", M, M)
    beta = np.zeros(M.shape[1]) if beta0 is None else np.array(beta0, dtype=float)
    resid = y - M @ beta
    thresholds = lam * np.asarray(weights, dtype=float)
    for sweep in range(max_iter):
        max_change = 0.0
        for k in range(M.shape[1]):
            if norms[k] == 0:
                continue
            old = beta[k]
            rho = M[:, k] @ resid + norms[k] * old
            new = np.sign(rho) * max(abs(rho) - thresholds[k], 0.0) / norms[k]
            if new != old:
                resid -= M[:, k] * (new - old)
                beta[k] = new
                max_change = max(max_change, abs(new - old))
        if max_change < tol:
            return beta
    logger.warning(f"Coordinate descent stopped after {max_iter} sweeps "
                   f"(last change {max_change:.3g}) at lambda={lam:.4g}")
    return beta


def adaptive_weights(forced: np.ndarray, Z: np.ndarray, y: np.ndarray,
                     gamma: Optional[float] = None, ridge: Optional[float] = None,
                     zero_tol: Optional[float] = None,
                     names: Optional[Sequence[str]] = None) -> np.ndarray:
    """w_k = 1/|b_k|^gamma from an initial OLS fit on [forced, Z], or a ridge
    fit when rows <= columns + 1. Near-zero initial estimates give an
    infinite weight, i.e. the covariate is excluded."""
    gamma = resolved(gamma, "select", "gamma")
    ridge = resolved(ridge, "select", "initial_ridge")
    zero_tol = resolved(zero_tol, "select", "zero_tol")
    M = np.column_stack([forced, Z])
    k0 = forced.shape[1]
    if M.shape[0] > M.shape[1] + 1:
        coef, _, _, _ = linalg.lstsq(M, y, lapack_driver="gelsd")
    else:
        logger.debug(f"Initial ridge fit ({M.shape[0]} rows, {M.shape[1]} columns)")
        pen = np.r_[np.zeros(k0), np.full(Z.shape[1], ridge)]
        coef = linalg.solve(M.T @ M + np.diag(pen), M.T @ y, assume_a="sym")
    init = np.abs(coef[k0:])
    weights = np.full(Z.shape[1], np.inf)
    keep = init >= zero_tol
    weights[keep] = 1.0 / init[keep] ** gamma
    for k in np.flatnonzero(~keep):
        label = names[k] if names is not None else f"col{k}"
        logger.warning(f"Excluding {label}: initial estimate {init[k]:.3g} is zero")
    return weights


def lambda_grid(forced: np.ndarray, Z: np.ndarray, y: np.ndarray, weights: np.ndarray,
                size: Optional[int] = None, ratio: Optional[float] = None) -> np.ndarray:
    """Log-spaced, descending from the smallest lambda zeroing every
    penalized coefficient down to ratio * that value."""
    size = resolved(size, "select", "grid_size")
    ratio = resolved(ratio, "select", "grid_ratio")
    coef, _, _, _ = linalg.lstsq(forced, y, lapack_driver="gelsd")
    resid = y - forced @ coef
    finite = np.isfinite(weights) & (weights > 0)
    if not finite.any():
        return np.array([0.0])
    lam_max = float(np.max(np.abs(Z[:, finite].T @ resid) / weights[finite]))
    if lam_max <= 0:
        return np.array([0.0])
    return np.geomspace(lam_max, ratio * lam_max, size)


def adaptive_lasso_fit(X: np.ndarray, y: np.ndarray, spec: SelectionSpec, lam: float,
                       forced: Optional[np.ndarray] = None,
                       weights: Optional[np.ndarray] = None,
                       refit: bool = True) -> FittedMeanModel:
    """Penalized fit on a standardized design X with unpenalized `forced`
    columns (intercept by default). `selected` holds the X columns with a
    nonzero coefficient; eta holds the forced then the selected coefficients
    of the OLS refit on that support, or the penalized ones with refit=False."""
    y = np.asarray(y, dtype=float)
    forced = np.ones((len(y), 1)) if forced is None else forced
    if weights is None:
        weights = adaptive_weights(forced, X, y, spec.gamma)
    active = np.isfinite(weights)
    k0 = forced.shape[1]
    M = np.column_stack([forced, X[:, active]])
    beta = coordinate_descent(M, y, lam, np.r_[np.zeros(k0), weights[active]])
    coefs = np.zeros(X.shape[1])
    coefs[active] = beta[k0:]
    selected = tuple(int(k) for k in np.flatnonzero(coefs))
    if refit:
        M = np.column_stack([forced, X[:, list(selected)]])
        check_rank(M)
        eta, _, _, _ = linalg.lstsq(M, y, lapack_driver="gelsd")
    else:
        eta = np.r_[beta[:k0], coefs[list(selected)]]
        M = np.column_stack([forced, X[:, list(selected)]])
    resid = y - M @ eta
    rss = float(resid @ resid)
    tss = float(((y - y.mean()) ** 2).sum())
    r2 = 0.0 if tss == 0 else float(np.clip(1 - rss / tss, 0.0, 1.0))
    return FittedMeanModel(selected, eta, rss, len(y), r2, k0 > 1)


def _fold_ids(groups: np.ndarray, folds: int, seed: int) -> np.ndarray:
    """Fold of every row; rows of one cluster always share a fold."""
    clusters = np.unique(groups)
    if len(clusters) < folds:
        raise CovAdjError(f"{folds}-fold cross-validation needs at least {folds} clusters, "
                          f"got {len(clusters)}")
    order = np.random.default_rng(seed).permutation(clusters)
    fold_of = {c: k % folds for k, c in enumerate(order)}
    return np.array([fold_of[g] for g in groups])


def _refit_error(forced, Z, y, train, test, support):
    M = np.column_stack([forced, Z[:, support]])
    if train.sum() <= M.shape[1]:
        return np.inf
    coef, _, _, _ = linalg.lstsq(M[train], y[train], lapack_driver="gelsd")
    err = y[test] - M[test] @ coef
    return float(err @ err) / max(int(test.sum()), 1)


def cross_validate_lambda(X: np.ndarray, y: np.ndarray, spec: SelectionSpec,
                          groups: Optional[np.ndarray] = None,
                          forced: Optional[np.ndarray] = None,
                          weights: Optional[np.ndarray] = None,
                          grid: Optional[Sequence[float]] = None) -> float:
    """Grid value with the smallest mean held-out squared error of the
    OLS-refit support; ties go to the larger lambda."""
    y = np.asarray(y, dtype=float)
    forced = np.ones((len(y), 1)) if forced is None else forced
    groups = np.arange(len(y)) if groups is None else np.asarray(groups)
    if weights is None:
        weights = adaptive_weights(forced, X, y, spec.gamma)
    if grid is None:
        grid = spec.lambda_grid or lambda_grid(forced, X, y, weights)
    grid = np.asarray(grid, dtype=float)
    if len(grid) == 1:
        return float(grid[0])
    if spec.cv_folds < 2:
        raise CovAdjError(f"Cross-validation needs at least 2 folds, got {spec.cv_folds}")

    active = np.isfinite(weights)
    Z = X[:, active]
    w = np.r_[np.zeros(forced.shape[1]), weights[active]]
    M = np.column_stack([forced, Z])
    k0 = forced.shape[1]
    fold = _fold_ids(groups, spec.cv_folds, spec.seed)
    errors = np.zeros(len(grid))
    for k in range(spec.cv_folds):
        test = fold == k
        train = ~test
        if train.sum() < k0 + 1:
            raise CovAdjError(f"Training fold {k} has {train.sum()} rows; "
                              f"an intercept-only fit needs more")
        beta = None
        for g, lam in enumerate(grid):
            beta = coordinate_descent(M[train], y[train], lam, w, beta0=beta)
            support = np.flatnonzero(beta[k0:])
            errors[g] += _refit_error(forced, Z, y, train, test, support)
    errors /= spec.cv_folds
    best = np.min(errors)
    chosen = int(np.flatnonzero(errors <= best * (1 + 1e-12) + 1e-300)[0])
    logger.debug(f"Cross-validation picks lambda={grid[chosen]:.4g} "
                 f"(index {chosen} of {len(grid)}), held-out MSE {best:.4g}")
    return float(grid[chosen])


def _lasso_path(forced, Z_raw, y, groups, spec, names):
    Z, _, _ = standardize(Z_raw)
    return _lasso_select(forced, Z, y, groups, spec, names)


def _lasso_select(forced, Z, y, groups, spec, names) -> List[int]:
    weights = adaptive_weights(forced, Z, y, spec.gamma, names=names)
    grid = spec.lambda_grid
    if grid is not None and np.any(np.diff(grid) >= 0):
        raise CovAdjError(f"Lambda grid must be strictly descending, got {list(grid)}")
    lam = cross_validate_lambda(Z, y, spec, groups, forced, weights, grid)
    fit = adaptive_lasso_fit(Z, y, spec, lam, forced, weights, refit=False)
    return list(fit.selected)


def adaptive_lasso_select(data: TrialDataset, spec: SelectionSpec) -> FittedMeanModel:
    """Adaptive LASSO on standardized covariates with a cross-validated
    lambda, followed by the OLS refit of the nonzero support."""
    y, X, A, groups = data.stacked()
    candidates = _candidates(spec, data.p)
    forced = _forced(y, A, spec.include_treatment)
    names = [data.covariate_names[k] for k in candidates]
    path = _lasso_path(forced, X[:, candidates], y, groups, spec, names)
    return fit_model(data, tuple(candidates[j] for j in path), spec.include_treatment)


def _select_arrays(forced, Xc, y, groups, spec, n_clusters, names) -> List[int]:
    if spec.method is SelectionMethod.ADAPTIVE_LASSO:
        return _lasso_path(forced, Xc, y, groups, spec, names)
    return _forward_path(forced, Xc, y, penalty_for(spec.method, n_clusters, len(y)), names)


def select_arm(data: TrialDataset, spec: SelectionSpec, arm: int) -> FittedMeanModel:
    """Selection on the units of one arm; the returned OLS model has no
    treatment term."""
    y, X, _, groups = data.stacked(arm=arm)
    candidates = _candidates(spec, data.p)
    names = [data.covariate_names[k] for k in candidates]
    path = _select_arrays(np.ones((len(y), 1)), X[:, candidates], y, groups, spec,
                          data.allocation[arm], names)
    return fit_model(data, tuple(candidates[j] for j in path), False, arm=arm)


def symmetric_sqrt(matrix: np.ndarray) -> np.ndarray:
    values, vectors = linalg.eigh(matrix)
    if np.min(values) <= 0:
        raise NonPositiveDefiniteError(
            f"Matrix is not positive definite (smallest eigenvalue {np.min(values):.3g})")
    return (vectors * np.sqrt(values)) @ vectors.T


def whiten_clusters(data: TrialDataset, working: WorkingCovariance,
                    include_treatment: bool = False, standardized: bool = False,
                    provenance: str = "") -> WhitenedData:
    """Premultiplies each cluster's outcomes, covariates and forced columns
    by the symmetric square root of V_i^-1."""
    y, X, A, _ = data.stacked()
    if standardized:
        X, _, _ = standardize(X)
    forced = _forced(y, A, include_treatment)
    roots = {}
    out_y, out_x, out_f = [], [], []
    for yi, Xi, Fi in zip(split_clusters(data, y), split_clusters(data, X),
                          split_clusters(data, forced)):
        m = len(yi)
        if m not in roots:
            roots[m] = symmetric_sqrt(working_inverse(m, working))
        out_y.append(roots[m] @ yi)
        out_x.append(roots[m] @ Xi)
        out_f.append(roots[m] @ Fi)
    return WhitenedData(tuple(out_y), tuple(out_x), tuple(out_f), provenance, working)


def select_correlated(data: TrialDataset, spec: SelectionSpec,
                      working: WorkingCovariance) -> FittedMeanModel:
    """Selection that accounts for within-cluster correlation: select under
    independence, fit that model by GEE to estimate V, whiten by
    V^-1/2 and select again, then refit the final set by OLS on raw data."""
    initial = select_model(data, spec)
    if working.structure is Structure.INDEPENDENCE or data.is_scalar:
        return initial
    fit = gee_fit(data, initial.selected, spec.include_treatment, working)
    provenance = (f"{spec.method.value} under independence selected "
                  f"{[data.covariate_names[k] for k in initial.selected]}; V from GEE {fit.working}")
    lasso = spec.method is SelectionMethod.ADAPTIVE_LASSO
    whitened = whiten_clusters(data, fit.working, spec.include_treatment, lasso, provenance)
    y_w, X_w, forced_w = whitened.stacked()
    _, _, _, groups = data.stacked()
    candidates = _candidates(spec, data.p)
    names = [data.covariate_names[k] for k in candidates]
    if lasso:
        path = _lasso_select(forced_w, X_w[:, candidates], y_w, groups, spec, names)
    else:
        path = _forward_path(forced_w, X_w[:, candidates], y_w,
                             penalty_for(spec.method, data.n, len(y_w)), names)
    logger.debug(f"Whitened selection: {provenance}")
    return fit_model(data, tuple(candidates[j] for j in path), spec.include_treatment)


def select_model(data: TrialDataset, spec: SelectionSpec,
                 working: Optional[WorkingCovariance] = None) -> FittedMeanModel:
    if working is not None and working.structure is Structure.EXCHANGEABLE \
            and not data.is_scalar:
        return select_correlated(data, spec, working)
    if spec.method is SelectionMethod.ADAPTIVE_LASSO:
        return adaptive_lasso_select(data, spec)
    return forward_select(data, spec)
