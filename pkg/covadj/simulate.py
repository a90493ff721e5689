# -*- coding: UTF-8 -*-
import logging
from multiprocessing import Pool
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from toolz.itertoolz import concat, partition_all

from .data import make_dataset
from .data_types import (AdjustKind, Adjustment, AnalysisCell, CellSummary, ClusterRecord,
                         DesignKind, Method, MonteCarloReport, PermutationPlan, SelectionMethod,
                         SimulationDesign, Structure, TrialDataset)
from .errors import CovAdjError, NonPositiveDefiniteError, StudyAbortedError
from .pipeline import CellRunner, build_cells
from .utils import CFG, derive_seeds, resolved, use_config

logger = logging.getLogger(__name__)

N_COVARIATES = 25
# covariates carrying eta[2:] in the outcome model, by design kind
OUTCOME_TERMS = {
    DesignKind.INDEPENDENT: (0, 1, 9, 10, 11),
    DesignKind.CLUSTERED: (0, 10, 2, 11, 14),
}


def independent_log_covariance() -> np.ndarray:
    """Correlation 0.5 among covariates 1-10, 0.2 between 1-10 and 11-20,
    0 otherwise; unit variances."""
    cov = np.eye(N_COVARIATES)
    cov[:10, :10] = 0.5
    cov[:10, 10:20] = 0.2
    cov[10:20, :10] = 0.2
    np.fill_diagonal(cov, 1.0)
    return _checked(cov)


def cluster_log_covariance() -> np.ndarray:
    """Cluster-level covariates 1-10: 0.5 within the blocks 1-5 and 6-10,
    0.2 across them."""
    cov = np.full((10, 10), 0.2)
    cov[:5, :5] = 0.5
    cov[5:, 5:] = 0.5
    np.fill_diagonal(cov, 1.0)
    return _checked(cov)


def _checked(cov: np.ndarray) -> np.ndarray:
    try:
        np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise NonPositiveDefiniteError("Covariate covariance is not positive definite")
    return cov


def lognormal_variance(var: float) -> float:
    """Var(exp(Z)) for Z ~ N(0, var)."""
    return float(np.expm1(var) * np.exp(var))


def expected_r2(design: SimulationDesign) -> float:
    """Share of Var(Y | A) explained by covariates under the independent
    design's outcome model, from lognormal moments."""
    if design.kind is not DesignKind.INDEPENDENT or design.misspecified:
        raise CovAdjError("Closed-form r2 is available for the linear independent design only")
    coef = np.zeros(N_COVARIATES)
    coef[list(OUTCOME_TERMS[DesignKind.INDEPENDENT])] = design.eta[2:]
    cov = np.e * np.expm1(independent_log_covariance())
    signal = float(coef @ cov @ coef)
    return signal / (signal + lognormal_variance(design.error_var))


def expected_icc(design: SimulationDesign) -> float:
    """corr(Y_ij, Y_ij' | X, A) implied by the cluster effect and error."""
    between = lognormal_variance(design.rho * design.error_var)
    return between / (between + lognormal_variance(design.error_var))


def _assignment(rng, n_per_arm: int) -> np.ndarray:
    return rng.permutation(np.r_[np.ones(n_per_arm, dtype=int), np.zeros(n_per_arm, dtype=int)])


def gen_independent(design: SimulationDesign, seed: Optional[int] = None) -> TrialDataset:
    """One unit per cluster, lognormal covariates and errors, fixed equal
    allocation."""
    if design.kind is not DesignKind.INDEPENDENT:
        raise CovAdjError(f"Design {design.name} is {design.kind.value}, not independent")
    rng = np.random.default_rng(design.seed if seed is None else seed)
    n = 2 * design.n_per_arm
    A = _assignment(rng, design.n_per_arm)
    X = np.exp(rng.multivariate_normal(np.zeros(N_COVARIATES), independent_log_covariance(),
                                       size=n, method="cholesky"))
    eps = np.exp(rng.normal(0.0, np.sqrt(design.error_var), size=n))
    eta = design.eta
    terms = X[:, list(OUTCOME_TERMS[DesignKind.INDEPENDENT])]
    coef = np.array(eta[2:], dtype=float)
    if design.misspecified:
        coef[0] = CFG["simulate"]["misspecified_x1"]
    y = eta[0] + eta[1] * A + terms @ coef + eps
    if design.misspecified:
        y = y + eta[2] * X[:, 0] ** 2 + eta[4] * X[:, 9] ** 2
    clusters = [ClusterRecord(str(i + 1), int(A[i]), y[i:i + 1], X[i:i + 1])
                for i in range(n)]
    return make_dataset(clusters)


def _cluster_sizes(rng, design: SimulationDesign, A: np.ndarray) -> np.ndarray:
    if design.cluster_size_range is not None:
        lo, hi = design.cluster_size_range
        sizes = rng.integers(lo, hi + 1, size=len(A))
    else:
        sizes = np.full(len(A), design.cluster_size)
    return sizes + design.size_shift * A


def gen_clustered(design: SimulationDesign, seed: Optional[int] = None) -> TrialDataset:
    """Clusters sharing covariates 1-10, unit covariates 11-20 correlated
    0.2 on the log scale within a cluster, independent covariates 21-25,
    a lognormal cluster effect and lognormal errors."""
    if design.kind is not DesignKind.CLUSTERED:
        raise CovAdjError(f"Design {design.name} is {design.kind.value}, not clustered")
    rng = np.random.default_rng(design.seed if seed is None else seed)
    n = 2 * design.n_per_arm
    A = _assignment(rng, design.n_per_arm)
    sizes = _cluster_sizes(rng, design, A)
    shared = rng.multivariate_normal(np.zeros(10), cluster_log_covariance(), size=n,
                                     method="cholesky")
    log_b = rng.normal(0.0, np.sqrt(design.rho * design.error_var), size=n)
    eta = design.eta
    terms = list(OUTCOME_TERMS[DesignKind.CLUSTERED])
    clusters = []
    for i in range(n):
        m = int(sizes[i])
        common = rng.normal(size=10)
        unit_level = np.sqrt(0.2) * common + np.sqrt(0.8) * rng.normal(size=(m, 10))
        noise_cov = rng.normal(0.0, 5.0, size=(m, 5))
        X = np.exp(np.column_stack([np.tile(shared[i], (m, 1)), unit_level, noise_cov]))
        eps = np.exp(rng.normal(0.0, np.sqrt(design.error_var), size=m))
        y = eta[0] + eta[1] * A[i] + X[:, terms] @ np.array(eta[2:]) + np.exp(log_b[i]) + eps
        clusters.append(ClusterRecord(str(i + 1), int(A[i]), y, X))
    return make_dataset(clusters)


def generate(design: SimulationDesign, seed: Optional[int] = None) -> TrialDataset:
    if design.kind is DesignKind.CLUSTERED:
        return gen_clustered(design, seed)
    return gen_independent(design, seed)


def design_folds(value, n_per_arm: int) -> Optional[int]:
    """Cross-validation folds of a design: a count, None for the config
    default, or 'n/<k>' for one fold per k clusters (at least 2)."""
    if value is None or isinstance(value, int):
        return value
    text = str(value).strip()
    if text in ("", "None"):
        return None
    if text.startswith("n/"):
        try:
            per_fold = int(text[2:])
        except ValueError:
            per_fold = 0
        if per_fold < 1:
            raise CovAdjError(f"Invalid fold rule [{text}]. Use a count or 'n/<clusters per fold>'")
        return max(2, 2 * n_per_arm // per_fold)
    try:
        return int(text)
    except ValueError:
        raise CovAdjError(f"Invalid fold rule [{text}]. Use a count or 'n/<clusters per fold>'")


def list_designs(cfg: Optional[dict] = None) -> List[str]:
    return sorted((cfg or CFG)["simulate"]["designs"])


def named_design(name: str, seed: int = 0, cfg: Optional[dict] = None,
                 **overrides) -> SimulationDesign:
    designs = (cfg or CFG)["simulate"]["designs"]
    if name not in designs:
        raise CovAdjError(f"Unknown design [{name}]. Available designs: {list_designs(cfg)}")
    raw = dict(designs[name])
    kind = DesignKind(raw.pop("kind"))
    raw["eta"] = tuple(raw["eta"])
    if raw.get("cluster_size_range") is not None:
        raw["cluster_size_range"] = tuple(raw["cluster_size_range"])
    raw.update({k: v for k, v in overrides.items() if v is not None})
    raw["cv_folds"] = design_folds(raw.get("cv_folds"), raw["n_per_arm"])
    return SimulationDesign(name=name, kind=kind, seed=seed, **raw)


def design_to_text(design: SimulationDesign) -> str:
    """Flat key=value lines."""
    lines = []
    for key, value in design._asdict().items():
        if isinstance(value, DesignKind):
            value = value.value
        elif isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"


def design_from_text(text: str) -> SimulationDesign:
    raw = {}
    for line in filter(None, (ln.strip() for ln in text.splitlines())):
        if line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        raw[key.strip()] = value.strip()
    unknown = set(raw) - set(SimulationDesign._fields)
    if unknown:
        raise CovAdjError(f"Unknown design keys {sorted(unknown)}. "
                          f"Available keys: {list(SimulationDesign._fields)}")
    try:
        size_range = raw.get("cluster_size_range", "None")
        return SimulationDesign(
            name=raw.get("name", "custom"),
            kind=DesignKind(raw["kind"]),
            n_per_arm=int(raw["n_per_arm"]),
            eta=tuple(float(v) for v in raw["eta"].split(",")),
            error_var=float(raw["error_var"]),
            cluster_size=int(raw.get("cluster_size", 1)),
            cluster_size_range=None if size_range in ("", "None")
            else tuple(int(v) for v in size_range.split(",")),
            size_shift=int(raw.get("size_shift", 0)),
            rho=float(raw.get("rho", 0.0)),
            misspecified=raw.get("misspecified", "False") in ("True", "true", "1"),
            seed=int(raw.get("seed", 0)),
            n_covariates=int(raw.get("n_covariates", N_COVARIATES)),
            cv_folds=design_folds(raw.get("cv_folds"), int(raw["n_per_arm"])))
    except (KeyError, ValueError) as e:
        raise CovAdjError(f"Invalid design description: {e}")


def prespecified(kind: DesignKind, name: str, cfg: Optional[dict] = None) -> Adjustment:
    models = (cfg or CFG)["simulate"]["prespecified"][kind.value]
    if name not in models:
        raise CovAdjError(f"Unknown prespecified model [{name}]. Available: {sorted(models)}")
    return Adjustment(AdjustKind.FIXED, name, columns=tuple(models[name]))


def default_cells(design: SimulationDesign, methods: Optional[Sequence[Method]] = None,
                  cfg: Optional[dict] = None) -> List[AnalysisCell]:
    """Every method with no adjustment, each selection rule and both
    prespecified models; clustered designs add exchangeable working cells."""
    methods = methods or list(Method)
    if design.kind is DesignKind.CLUSTERED:
        selections = [SelectionMethod.FORWARD_AIC, SelectionMethod.FORWARD_BICN,
                      SelectionMethod.FORWARD_BICM, SelectionMethod.ADAPTIVE_LASSO]
        workings = [Structure.INDEPENDENCE, Structure.EXCHANGEABLE]
    else:
        # one unit per cluster makes BICn and BICm the same rule
        selections = [SelectionMethod.FORWARD_AIC, SelectionMethod.FORWARD_BICM,
                      SelectionMethod.ADAPTIVE_LASSO]
        workings = [Structure.INDEPENDENCE]
    adjustments = [Adjustment.none()]
    whiten = design.kind is DesignKind.CLUSTERED
    adjustments += [Adjustment(AdjustKind.SELECT, s.value, selection=s, whiten=whiten,
                               cv_folds=design.cv_folds)
                    for s in selections]
    adjustments += [prespecified(design.kind, name, cfg) for name in ("correct", "incorrect")]
    return build_cells(methods, adjustments, workings)


def analyze_replicate(data: TrialDataset, cells: Sequence[AnalysisCell], seed: int,
                      permutations: int, alpha: float):
    """(rejected or None, n_selected, error) per cell for one dataset."""
    runner = CellRunner(data, PermutationPlan(B=permutations, seed=seed), seed)
    rows = []
    for outcome in runner.run_all(cells):
        if outcome.result is None:
            rows.append((None, 0, outcome.error))
        else:
            rows.append((outcome.result.p_value < alpha, outcome.result.n_selected, None))
    return rows


def _run_chunk(task):
    design, cells, chunk, permutations, alpha, analyze, cfg = task
    use_config(cfg)
    out = []
    for rep, rep_seed in chunk:
        data_seed, analysis_seed = derive_seeds(rep_seed, 2)
        data = generate(design, data_seed)
        out.append(analyze(data, cells, analysis_seed, permutations, alpha))
    return out


def monte_carlo_study(design: SimulationDesign, cells: Sequence[AnalysisCell], reps: int,
                      alpha: Optional[float] = None, permutations: Optional[int] = None,
                      workers: int = 1, chunk_size: int = 10,
                      analyze: Callable = analyze_replicate,
                      smoke: bool = False) -> MonteCarloReport:
    """Rejection rates of every cell over `reps` generated datasets. All
    cells of a replicate see the same dataset; replicate k depends only on
    (design.seed, k), so any worker count gives the same report.

    Fewer than simulate.min_reps replicates is an error unless `smoke` is
    set, for quick checks of a configuration."""
    alpha = resolved(alpha, "simulate", "alpha")
    permutations = resolved(permutations, "randomize", "permutations")
    if reps < 1:
        raise CovAdjError(f"Number of replicates must be at least 1, got {reps}")
    if not 0 < alpha < 1:
        raise CovAdjError(f"alpha must lie in (0, 1), got {alpha}")
    min_reps = resolved(None, "simulate", "min_reps")
    if reps < min_reps:
        if not smoke:
            raise CovAdjError(f"A study needs at least {min_reps} replicates, got {reps}. "
                              f"Use a smoke run for fewer")
        logger.warning(f"Smoke run with {reps} replicates; Monte Carlo standard errors "
                       f"will be large")

    seeds = derive_seeds(design.seed, reps)
    tasks = [(design, list(cells), chunk, permutations, alpha, analyze, CFG)
             for chunk in partition_all(chunk_size, enumerate(seeds))]
    if workers > 1:
        with Pool(processes=workers) as pool:
            results = pool.map(_run_chunk, tasks)
    else:
        results = [_run_chunk(task) for task in tasks]
    replicates = list(concat(results))
    logger.debug(f"Finished {len(replicates)} replicates of {design.name}")
    return MonteCarloReport(design, tuple(summarize(cells, replicates, reps)), reps, alpha,
                            design.seed)


def summarize(cells: Sequence[AnalysisCell], replicates: List[list], reps: int,
              abort_fraction: Optional[float] = None) -> List[CellSummary]:
    abort_fraction = resolved(abort_fraction, "simulate", "abort_fraction")
    summaries, failed = [], {}
    for k, cell in enumerate(cells):
        column = [rep[k] for rep in replicates]
        errors = [err for _, _, err in column if err is not None]
        if len(errors) > abort_fraction * reps:
            failed["/".join(cell.key)] = {"errors": len(errors), "first": errors[0]}
        done = [(rejected, size) for rejected, size, err in column if err is None]
        rate = float(np.mean([r for r, _ in done])) if done else float("nan")
        se = float(np.sqrt(rate * (1 - rate) / len(done))) if done else float("nan")
        mean_size = float(np.mean([s for _, s in done])) if done else float("nan")
        summaries.append(CellSummary(cell.method.value, cell.adjustment.label,
                                     cell.working.value, rate, se, mean_size, len(done),
                                     len(errors)))
    if failed:
        raise StudyAbortedError(
            f"{len(failed)} cells failed on more than {abort_fraction:.0%} of replicates: "
            f"{sorted(failed)}", diagnostics=failed)
    return summaries


def report_frame(report: MonteCarloReport) -> pd.DataFrame:
    return pd.DataFrame.from_records(report.to_records(), columns=list(CellSummary._fields))


def cluster_config_designs(base: SimulationDesign, config_name: str,
                           cfg: Optional[dict] = None) -> List[SimulationDesign]:
    """Every (clusters per arm, cluster size) pair of a named configuration."""
    configs: Dict[str, dict] = (cfg or CFG)["simulate"]["cluster_configs"]
    if config_name not in configs:
        raise CovAdjError(f"Unknown cluster configuration [{config_name}]. "
                          f"Available: {sorted(configs)}")
    conf = configs[config_name]
    return [base._replace(name=f"{base.name}-n{n}-m{m}", n_per_arm=n, cluster_size=m)
            for n in conf["n_per_arm"] for m in conf["cluster_size"]]
