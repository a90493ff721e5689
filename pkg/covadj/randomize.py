# -*- coding: UTF-8 -*-
import logging
from itertools import combinations
from typing import Iterator, Optional, Sequence

import numpy as np
from scipy import optimize, special, stats
from toolz.itertoolz import partition_all

from .data_types import (FittedMeanModel, Method, PermutationPlan, PlanMode, Reference,
                         ScoreSet, Structure, TestResult, TrialDataset, WorkingCovariance)
from .errors import AllocationError, CovAdjError, DegenerateScoresError, EnumerationCapError
from .gee import precision_row_sum, resolve_working
from .regression import fit_model, residuals, wald_test
from .utils import resolved

logger = logging.getLogger(__name__)

NULL_FITS = ("pooled", "control")


def fit_null_model(data: TrialDataset, selected: Sequence[int] = (),
                   null_fit: str = "pooled") -> FittedMeanModel:
    """Working model without the treatment term, fitted on all units
    ("pooled") or on control units only ("control") and applied to all."""
    if null_fit not in NULL_FITS:
        raise CovAdjError(f"Unknown null fit [{null_fit}]. Available: {list(NULL_FITS)}")
    arm = 0 if null_fit == "control" else None
    return fit_model(data, selected, with_treatment=False, arm=arm)


def build_scores(data: TrialDataset, adjustment: Optional[FittedMeanModel] = None,
                 working: Optional[WorkingCovariance] = None) -> ScoreSet:
    """Per-cluster scores u_i = 1'V_i^-1 w_i. w holds residuals of the
    adjustment model, or the outcomes themselves without one. An estimated
    V comes from these null residuals once and is then shared by every
    permutation."""
    y, _, _, _ = data.stacked()
    if adjustment is None:
        w = y
        resid, n_params = y - y.mean(), 1
    else:
        if adjustment.with_treatment:
            raise CovAdjError("Adjustment model for randomization scores must exclude "
                              "the treatment column")
        w = residuals(adjustment, data)
        resid, n_params = w, adjustment.n_params
    working = resolve_working(data, resid, n_params, working)

    starts = np.concatenate([[0], np.cumsum(data.sizes)[:-1]])
    row_sum = np.array([precision_row_sum(m, working) for m in data.sizes])
    u = row_sum * np.add.reduceat(w, starts)
    n0, n1 = data.allocation
    if working.structure is Structure.EXCHANGEABLE:
        logger.debug(f"Scores built under {working}")
    return ScoreSet(u, n1 / data.n, (n0, n1))


def _check_assignment(scores: ScoreSet, assignment) -> np.ndarray:
    a = np.asarray(assignment, dtype=int)
    if a.shape != (scores.n,) or not np.isin(a, (0, 1)).all():
        raise AllocationError(f"Assignment must be a 0/1 vector of length {scores.n}")
    if a.sum() != scores.allocation[1]:
        raise AllocationError(
            f"Assignment treats {a.sum()} clusters; fixed allocation has {scores.allocation[1]}")
    return a


def score_statistic(scores: ScoreSet, assignment) -> float:
    """S = sum (a_i - pi) u_i."""
    a = _check_assignment(scores, assignment)
    return float((a - scores.pi) @ scores.u)


def q_coefficient(n: int, pi: float) -> float:
    """Cov(a_i, a_j) for i != j under fixed allocation with pi = n1/n.
    Equal to pi(n/2 - 1)/(n - 1) - pi^2 when pi = 1/2."""
    return -pi * (1 - pi) / (n - 1)


def randomization_variance(scores: ScoreSet) -> float:
    """pi(1-pi) sum u^2 + Q sum_{i != i'} u_i u_i'."""
    if scores.n < 2:
        raise CovAdjError(f"Randomization variance needs n >= 2, got {scores.n}")
    u = scores.u
    ss = float(u @ u)
    cross = float(u.sum() ** 2 - ss)
    pi = scores.pi
    return pi * (1 - pi) * ss + q_coefficient(scores.n, pi) * cross


def _falling(n: int, n1: int, r: int) -> float:
    if n < r:
        return 0.0
    return float(np.prod([(n1 - k) / (n - k) for k in range(r)]))


def permutation_cumulants(scores: ScoreSet):
    """Exact (k2, k3, k4) of S over all fixed-allocation assignments, from
    power sums of the centered scores."""
    c = scores.centered
    p2, p3, p4 = (float(np.sum(c ** k)) for k in (2, 3, 4))
    n, n1 = scores.n, scores.allocation[1]
    f1, f2, f3, f4 = (_falling(n, n1, r) for r in (1, 2, 3, 4))
    m2 = p2 * (f1 - f2)
    m3 = p3 * (f1 - 3 * f2 + 2 * f3)
    m4 = (p4 * f1 - 4 * p4 * f2 + 3 * (p2 ** 2 - p4) * f2
          + 6 * (2 * p4 - p2 ** 2) * f3 + (3 * p2 ** 2 - 6 * p4) * f4)
    return m2, m3, m4 - 3 * m2 ** 2


def _check_degenerate(scores: ScoreSet):
    u = scores.u
    if np.ptp(u) <= 1e-12 * max(1.0, float(np.max(np.abs(u)))):
        raise DegenerateScoresError("degenerate score set: all scores are equal")


def bz_distribution(scores: ScoreSet, t: float, clamp: Optional[float] = None) -> float:
    """P(T < t) for the standardized score statistic, Edgeworth-corrected
    with exact permutation skewness and kurtosis. The bracketed correction
    is limited to +-clamp and the probability to [0, 1]."""
    clamp = resolved(clamp, "randomize", "edgeworth_clamp")
    if np.isinf(t):
        return 1.0 if t > 0 else 0.0
    k2, k3, k4 = permutation_cumulants(scores)
    if k2 <= 0:
        raise DegenerateScoresError("degenerate score set: zero randomization variance")
    g1, g2 = k3 / k2 ** 1.5, k4 / k2 ** 2
    he2 = t ** 2 - 1
    he3 = t ** 3 - 3 * t
    he5 = t ** 5 - 10 * t ** 3 + 15 * t
    bracket = g1 / 6 * he2 + g2 / 24 * he3 + g1 ** 2 / 72 * he5
    bracket = float(np.clip(bracket, -clamp, clamp))
    prob = stats.norm.cdf(t) - stats.norm.pdf(t) * bracket
    return float(np.clip(prob, 0.0, 1.0))


def bz_quantile(scores: ScoreSet, alpha: float = 0.05) -> float:
    """Root of bz_distribution(t) = 1 - alpha/2."""
    target = 1 - alpha / 2
    return float(optimize.brentq(lambda t: bz_distribution(scores, t) - target, -40.0, 40.0,
                                 xtol=1e-12))


def approx_exact_test(scores: ScoreSet, assignment, reference: Reference = Reference.NORMAL,
                      adjustment: str = "unadjusted", working: str = "indep",
                      n_selected: int = 0) -> TestResult:
    """T_s = S / sqrt(Var S), referred to N(0, 1) or the corrected distribution."""
    _check_degenerate(scores)
    stat = score_statistic(scores, assignment)
    var = randomization_variance(scores)
    if var <= 0:
        raise DegenerateScoresError("degenerate score set: zero randomization variance")
    se = float(np.sqrt(var))
    if reference is Reference.NORMAL:
        return wald_test(stat, se, Method.APPROX_EXACT, adjustment, working, n_selected)
    z = stat / se
    p = bz_distribution(scores, -abs(z)) + 1 - bz_distribution(scores, abs(z))
    return TestResult(Method.APPROX_EXACT_BZ, stat, se, z, float(np.clip(p, 0.0, 1.0)),
                      adjustment, working, n_selected)


def enumerate_assignments(n: int, n1: int, cap: Optional[int] = None) -> Iterator[np.ndarray]:
    """Every fixed-allocation assignment once, in lexicographic order of the
    treated index sets."""
    cap = resolved(cap, "randomize", "exhaustive_cap")
    if not 0 <= n1 <= n:
        raise AllocationError(f"Cannot treat {n1} of {n} clusters")
    total = special.comb(n, n1, exact=True)
    if total > cap:
        raise EnumerationCapError(
            f"C({n}, {n1}) = {total} assignments exceeds the enumeration cap {cap}; "
            f"use Monte Carlo permutations")
    for treated in combinations(range(n), n1):
        a = np.zeros(n, dtype=int)
        a[list(treated)] = 1
        yield a


def sample_assignments(n: int, n1: int, B: int, seed: int) -> np.ndarray:
    """B fixed-allocation assignments (rows) from a seeded partial
    Fisher-Yates shuffle."""
    rng = np.random.default_rng(seed)
    perm = np.tile(np.arange(n), (B, 1))
    rows = np.arange(B)
    for j in range(n1):
        swap = rng.integers(j, n, size=B)
        picked = perm[rows, swap]
        perm[rows, swap] = perm[:, j].copy()
        perm[:, j] = picked
    out = np.zeros((B, n), dtype=int)
    out[rows[:, None], perm[:, :n1]] = 1
    return out


def _exhaustive_sums(c: np.ndarray, n1: int, cap: int, block: int) -> np.ndarray:
    total = special.comb(len(c), n1, exact=True)
    if total > cap:
        raise EnumerationCapError(
            f"C({len(c)}, {n1}) = {total} assignments exceeds the enumeration cap {cap}; "
            f"use Monte Carlo permutations")
    sums = [c[np.array(chunk, dtype=int).reshape(len(chunk), n1)].sum(axis=1)
            for chunk in partition_all(block, combinations(range(len(c)), n1))]
    return np.concatenate(sums)


def exact_permutation_test(scores: ScoreSet, assignment, plan: PermutationPlan = PermutationPlan(),
                           adjustment: str = "unadjusted", working: str = "indep",
                           n_selected: int = 0, block_size: Optional[int] = None) -> TestResult:
    """Two-sided permutation test on |S|. Monte Carlo p = (1 + #{|S_b| >= |S|})/(B + 1),
    exhaustive p = #{|S_b| >= |S|} / C(n, n1)."""
    block_size = resolved(block_size, "randomize", "block_size")
    a = _check_assignment(scores, assignment)
    stat = score_statistic(scores, a)
    c = scores.centered
    observed = abs(float(c @ a))
    tol = resolved(None, "randomize", "tie_tol") * float(np.abs(c).sum())
    n1 = scores.allocation[1]

    if plan.mode is PlanMode.EXHAUSTIVE:
        cap = resolved(plan.cap, "randomize", "exhaustive_cap")
        null = np.abs(_exhaustive_sums(c, n1, cap, block_size))
        p = float(np.mean(null >= observed - tol))
        logger.debug(f"Exhaustive permutation test over {len(null)} assignments, p={p:.4g}")
    else:
        if plan.B < 1:
            raise CovAdjError(f"Number of permutations must be at least 1, got {plan.B}")
        n_blocks = -(-plan.B // block_size)
        seeds = np.random.SeedSequence(plan.seed).spawn(n_blocks)
        count = 0
        for k, child in enumerate(seeds):
            size = min(block_size, plan.B - k * block_size)
            sampled = sample_assignments(scores.n, n1, size, child)
            count += int(np.sum(np.abs(sampled @ c) >= observed - tol))
        p = (1 + count) / (plan.B + 1)
    return TestResult(Method.EXACT, stat, None, None, p, adjustment, working, n_selected)
