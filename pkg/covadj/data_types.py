from enum import Enum
from typing import NamedTuple, List, Optional, Tuple

import numpy as np


class Method(Enum):
    CMM = "cmm"
    AUGMENTED = "augmented"
    APPROX_EXACT = "approx-exact"
    APPROX_EXACT_BZ = "approx-exact-bz"
    EXACT = "exact"


class Structure(Enum):
    INDEPENDENCE = "indep"
    EXCHANGEABLE = "exch"


class SelectionMethod(Enum):
    FORWARD_AIC = "aic"
    FORWARD_BICN = "bicn"
    FORWARD_BICM = "bicm"
    ADAPTIVE_LASSO = "alasso"


class AdjustKind(Enum):
    NONE = "none"
    SELECT = "select"
    FIXED = "fixed"


class Reference(Enum):
    NORMAL = "normal"
    BZ = "bz"


class PlanMode(Enum):
    EXHAUSTIVE = "exhaustive"
    MONTE_CARLO = "monte-carlo"


class DesignKind(Enum):
    INDEPENDENT = "independent"
    CLUSTERED = "clustered"


class ClusterRecord(NamedTuple):
    id: str
    treatment: int
    outcomes: np.ndarray  # (m,)
    covariates: np.ndarray  # (m, p)

    @property
    def size(self) -> int:
        return len(self.outcomes)

    @property
    def units(self) -> List[Tuple[float, np.ndarray]]:
        return list(zip(self.outcomes, self.covariates))

    def __repr__(self):
        return f"Cluster {self.id}: A={self.treatment}, m={self.size}"


class TrialDataset(NamedTuple):
    clusters: Tuple[ClusterRecord, ...]
    treatment_probability: float
    allocation: Tuple[int, int]  # (n0, n1)
    covariate_names: Tuple[str, ...]

    @property
    def n(self) -> int:
        return len(self.clusters)

    @property
    def p(self) -> int:
        return len(self.covariate_names)

    @property
    def sizes(self) -> np.ndarray:
        return np.array([c.size for c in self.clusters])

    @property
    def total_units(self) -> int:
        return int(self.sizes.sum())

    @property
    def is_scalar(self) -> bool:
        """True when every cluster holds a single unit."""
        return bool(np.all(self.sizes == 1))

    def assignment(self) -> np.ndarray:
        return np.array([c.treatment for c in self.clusters], dtype=int)

    def stacked(self, arm: Optional[int] = None):
        """Unit-level arrays (y, X, A, cluster index), optionally restricted
        to one treatment arm. Cluster index refers to positions in
        self.clusters."""
        picked = [(i, c) for i, c in enumerate(self.clusters)
                  if arm is None or c.treatment == arm]
        if not picked:
            return (np.zeros(0), np.zeros((0, self.p)), np.zeros(0, dtype=int),
                    np.zeros(0, dtype=int))
        y = np.concatenate([c.outcomes for _, c in picked])
        X = np.vstack([c.covariates for _, c in picked])
        A = np.concatenate([np.full(c.size, c.treatment) for _, c in picked])
        groups = np.concatenate([np.full(c.size, i) for i, c in picked])
        return y, X, A, groups

    def __repr__(self):
        return f"TrialDataset(n={self.n}, units={self.total_units}, p={self.p}, " + \
            f"allocation={self.allocation})"


class FittedMeanModel(NamedTuple):
    selected: Tuple[int, ...]
    eta: np.ndarray  # intercept first, then treatment (if any), then selected
    rss: float
    n_obs: int
    r2: float
    with_treatment: bool = False
    names: Tuple[str, ...] = ()

    @property
    def n_params(self) -> int:
        return len(self.eta)

    def __repr__(self):
        return f"FittedMeanModel(selected={list(self.names or self.selected)}, " + \
            f"rss={self.rss:.4g}, r2={self.r2:.3f})"


class TestResult(NamedTuple):
    method: Method
    statistic: float
    std_error: Optional[float]
    z_value: Optional[float]
    p_value: float
    adjustment: str
    working: str = Structure.INDEPENDENCE.value
    n_selected: int = 0

    def to_row(self) -> dict:
        return {
            "method": self.method.value,
            "adjustment": self.adjustment,
            "working": self.working,
            "statistic": self.statistic,
            "std_error": self.std_error,
            "z_value": self.z_value,
            "p_value": self.p_value,
            "n_selected": self.n_selected,
        }


class WorkingCovariance(NamedTuple):
    structure: Structure
    dispersion: float = 1.0  # phi
    exch_alpha: float = 0.0
    fixed: bool = False  # use parameters as given instead of estimating them

    @classmethod
    def independence(cls):
        return cls(Structure.INDEPENDENCE, 1.0, 0.0, True)

    @classmethod
    def exchangeable(cls, exch_alpha=None, dispersion=1.0):
        if exch_alpha is None:
            return cls(Structure.EXCHANGEABLE, dispersion, 0.0, False)
        return cls(Structure.EXCHANGEABLE, dispersion, exch_alpha, True)

    def __repr__(self):
        return f"{self.structure.value}(phi={self.dispersion:.4g}, alpha={self.exch_alpha:.4g})"


class GeeFit(NamedTuple):
    beta: np.ndarray
    robust_cov: np.ndarray
    naive_cov: np.ndarray
    iterations: int
    converged: bool
    working: WorkingCovariance
    treatment_index: Optional[int] = None
    names: Tuple[str, ...] = ()
    selected: Tuple[int, ...] = ()


class AugmentedFit(NamedTuple):
    beta: np.ndarray  # (beta0, beta1)
    arm_models: Tuple[FittedMeanModel, FittedMeanModel]
    variance: np.ndarray
    correction_c: float
    working: WorkingCovariance
    psi: np.ndarray  # per-cluster estimating function contributions, (n, 2)
    bread: np.ndarray


class ScoreSet(NamedTuple):
    u: np.ndarray
    pi: float
    allocation: Tuple[int, int]

    @property
    def n(self) -> int:
        return len(self.u)

    @property
    def centered(self) -> np.ndarray:
        """S = sum(a_i c_i) for any fixed-allocation a when c = u - mean(u)."""
        return self.u - self.u.mean()


class PermutationPlan(NamedTuple):
    mode: PlanMode = PlanMode.MONTE_CARLO
    B: int = 1000
    seed: int = 0
    cap: Optional[int] = None


class SelectionSpec(NamedTuple):
    method: SelectionMethod
    include_treatment: bool = False
    candidate_indices: Tuple[int, ...] = ()
    cv_folds: int = 5
    gamma: float = 1.0
    lambda_grid: Optional[Tuple[float, ...]] = None
    seed: int = 0


class WhitenedData(NamedTuple):
    outcomes: Tuple[np.ndarray, ...]
    covariates: Tuple[np.ndarray, ...]
    forced: Tuple[np.ndarray, ...]  # whitened intercept (and treatment) columns
    lambda_matrix_provenance: str
    working: WorkingCovariance

    def stacked(self):
        return (np.concatenate(self.outcomes), np.vstack(self.covariates),
                np.vstack(self.forced))


class Adjustment(NamedTuple):
    kind: AdjustKind
    label: str
    selection: Optional[SelectionMethod] = None
    columns: Tuple[int, ...] = ()
    whiten: bool = False
    cv_folds: Optional[int] = None  # None: select.cv_folds from config

    @classmethod
    def none(cls):
        return cls(AdjustKind.NONE, "unadjusted")


class AnalysisCell(NamedTuple):
    method: Method
    adjustment: Adjustment
    working: Structure = Structure.INDEPENDENCE
    center: bool = False
    null_fit: str = "pooled"

    @property
    def key(self) -> Tuple[str, str, str]:
        return (self.method.value, self.adjustment.label, self.working.value)


class SimulationDesign(NamedTuple):
    name: str
    kind: DesignKind
    n_per_arm: int
    eta: Tuple[float, ...]
    error_var: float
    cluster_size: int = 1
    cluster_size_range: Optional[Tuple[int, int]] = None
    size_shift: int = 0  # extra units per treated cluster
    rho: float = 0.0
    misspecified: bool = False
    seed: int = 0
    n_covariates: int = 25
    cv_folds: Optional[int] = None


class CellSummary(NamedTuple):
    method: str
    adjustment: str
    working: str
    rejection_rate: float
    mc_se: float
    mean_selected: float
    replicates: int
    errors: int


class MonteCarloReport(NamedTuple):
    design: SimulationDesign
    cells: Tuple[CellSummary, ...]
    reps: int
    alpha: float
    seed: int

    def to_records(self) -> List[dict]:
        return [c._asdict() for c in self.cells]


class CsvSchema(NamedTuple):
    cluster: str = "cluster"
    treatment: str = "treatment"
    outcome: str = "outcome"
    exclude: Tuple[str, ...] = ()
    nominal: Tuple[str, ...] = ()
