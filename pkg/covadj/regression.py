# -*- coding: UTF-8 -*-
import logging
from typing import Optional, Sequence

import numpy as np
from scipy import linalg, stats

from .data_types import FittedMeanModel, Method, TestResult, TrialDataset
from .errors import CovAdjError, RankDeficientError
from .utils import resolved

logger = logging.getLogger(__name__)


def design_matrix(data: TrialDataset, selected: Sequence[int] = (),
                  with_treatment: bool = False, arm: Optional[int] = None):
    """Unit-level design [1, (A), X_selected] and response, optionally for a
    single arm."""
    y, X, A, _ = data.stacked(arm=arm)
    _check_indices(selected, data.p)
    cols = [np.ones(len(y))]
    if with_treatment:
        cols.append(A.astype(float))
    design = np.column_stack(cols + [X[:, list(selected)]]) if len(selected) \
        else np.column_stack(cols)
    return design, y


def design_names(data: TrialDataset, selected: Sequence[int],
                 with_treatment: bool = False):
    names = ["(intercept)"] + (["treatment"] if with_treatment else [])
    return names + [data.covariate_names[k] for k in selected]


def _check_indices(selected, p):
    bad = [k for k in selected if not 0 <= k < p]
    if bad:
        raise CovAdjError(f"Covariate indices {bad} out of range for {p} covariates")


def check_rank(X: np.ndarray, names: Optional[Sequence[str]] = None,
               rank_tol: Optional[float] = None):
    """Raises RankDeficientError naming the columns a pivoted QR leaves
    without support when the singular values spread past rank_tol."""
    rank_tol = resolved(rank_tol, "regression", "rank_tol")
    if X.shape[0] <= X.shape[1]:
        raise RankDeficientError(
            f"Design has {X.shape[0]} rows for {X.shape[1]} columns; need rows > columns")
    sv = np.linalg.svd(X, compute_uv=False)
    if sv[-1] >= rank_tol * sv[0]:
        return
    _, R, piv = linalg.qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    weak = piv[diag < rank_tol * diag[0]]
    names = list(names) if names is not None else [f"col{k}" for k in range(X.shape[1])]
    offending = [names[k] for k in sorted(weak)]
    raise RankDeficientError(
        f"Rank-deficient design; offending columns: {offending}", columns=offending)


def ols_fit(X: np.ndarray, y: np.ndarray, selected: Sequence[int] = (),
            with_treatment: bool = False, names: Sequence[str] = (),
            rank_tol: Optional[float] = None) -> FittedMeanModel:
    """OLS of y on X (X carries its own intercept column, first)."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    check_rank(X, names or None, rank_tol)
    eta, _, _, _ = linalg.lstsq(X, y, lapack_driver="gelsd")
    resid = y - X @ eta
    rss = float(resid @ resid)
    tss = float(((y - y.mean()) ** 2).sum())
    r2 = 0.0 if tss == 0 else float(np.clip(1 - rss / tss, 0.0, 1.0))
    return FittedMeanModel(tuple(int(k) for k in selected), eta, rss, len(y), r2,
                           with_treatment, tuple(names))


def fit_model(data: TrialDataset, selected: Sequence[int] = (),
              with_treatment: bool = False, arm: Optional[int] = None) -> FittedMeanModel:
    X, y = design_matrix(data, selected, with_treatment, arm)
    return ols_fit(X, y, selected, with_treatment,
                   design_names(data, selected, with_treatment))


def predict(model: FittedMeanModel, data: TrialDataset,
            treatment: Optional[int] = None) -> np.ndarray:
    """d(x; eta) for every unit; with a treatment term, `treatment` fixes A
    for all units (observed A when None)."""
    y, X, A, _ = data.stacked()
    _check_indices(model.selected, data.p)
    fitted = np.full(len(y), model.eta[0])
    offset = 1
    if model.with_treatment:
        a = A if treatment is None else np.full(len(y), treatment)
        fitted = fitted + model.eta[1] * a
        offset = 2
    if model.selected:
        fitted = fitted + X[:, list(model.selected)] @ model.eta[offset:]
    return fitted


def residuals(model: FittedMeanModel, data: TrialDataset) -> np.ndarray:
    y, _, _, _ = data.stacked()
    return y - predict(model, data)


def wald_test(estimate: float, std_error: float, method: Method,
              adjustment: str = "unadjusted", working: str = "indep",
              n_selected: int = 0) -> TestResult:
    if not std_error > 0:
        raise CovAdjError(f"Standard error must be positive, got {std_error}")
    z = estimate / std_error
    p = float(min(1.0, 2 * stats.norm.sf(abs(z))))
    return TestResult(method, float(estimate), float(std_error), float(z), p,
                      adjustment, working, n_selected)
