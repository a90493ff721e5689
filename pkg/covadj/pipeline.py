# -*- coding: UTF-8 -*-
import logging
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

from .augment import augmented_test
from .data import center_outcomes
from .data_types import (AdjustKind, Adjustment, AnalysisCell, FittedMeanModel, Method,
                         PermutationPlan, Reference, SelectionMethod, SelectionSpec, Structure,
                         TestResult, TrialDataset, WorkingCovariance)
from .errors import CovAdjError
from .gee import cmm_test
from .randomize import (NULL_FITS, approx_exact_test, build_scores, exact_permutation_test,
                        fit_null_model)
from .select import select_arm, select_model
from .utils import CFG, parse_columns

logger = logging.getLogger(__name__)


class CellOutcome(NamedTuple):
    cell: AnalysisCell
    result: Optional[TestResult]
    error: Optional[str] = None

    def to_row(self) -> dict:
        if self.result is not None:
            row = self.result.to_row()
        else:
            row = {"method": self.cell.method.value, "adjustment": self.cell.adjustment.label,
                   "working": self.cell.working.value, "statistic": None, "std_error": None,
                   "z_value": None, "p_value": None, "n_selected": None}
        row["error"] = self.error or ""
        return row


def parse_adjustment(text: str, names: Sequence[str]) -> Adjustment:
    """'none', a selection method ('aic', 'bicn', 'bicm', 'alasso') or
    'fixed:<cols>' with covariate names or indices."""
    text = text.strip()
    if text in ("none", "unadjusted"):
        return Adjustment.none()
    if text.startswith("fixed:"):
        columns = tuple(parse_columns(text[len("fixed:"):], names))
        return Adjustment(AdjustKind.FIXED, text, columns=columns)
    try:
        method = SelectionMethod(text)
    except ValueError:
        valid = ["none", "fixed:<cols>"] + [m.value for m in SelectionMethod]
        raise CovAdjError(f"Unknown adjustment [{text}]. Available adjustments: {valid}")
    return Adjustment(AdjustKind.SELECT, text, selection=method)


def working_for(structure: Structure) -> WorkingCovariance:
    if structure is Structure.EXCHANGEABLE:
        return WorkingCovariance.exchangeable()
    return WorkingCovariance.independence()


def selection_spec(method: SelectionMethod, include_treatment: bool,
                   seed: int = 0, cfg: Optional[dict] = None,
                   cv_folds: Optional[int] = None) -> SelectionSpec:
    cfg = cfg or CFG
    folds = cv_folds or cfg["select"]["cv_folds"]
    return SelectionSpec(method, include_treatment, (), folds,
                         cfg["select"]["gamma"], None, seed)


class CellRunner:
    """Runs analysis cells on one dataset. Selections and score sets are
    shared between cells that need the same ones, so every method sees the
    same selected model."""

    def __init__(self, data: TrialDataset, plan: PermutationPlan = PermutationPlan(),
                 seed: int = 0):
        self.data = data
        self.plan = plan
        self.seed = seed
        self.selections: Dict[Tuple, FittedMeanModel] = {}
        self.scores: Dict[Tuple, object] = {}
        self.logger = logging.getLogger(name="CellRunner")

    def _selected(self, adjustment: Adjustment, include_treatment: bool,
                  working: Structure, arm: Optional[int] = None) -> Tuple[int, ...]:
        if adjustment.kind is AdjustKind.NONE:
            return ()
        if adjustment.kind is AdjustKind.FIXED:
            return adjustment.columns
        # whitening only applies to pooled selection under an exchangeable working V
        if not adjustment.whiten or arm is not None:
            working = Structure.INDEPENDENCE
        key = (adjustment.selection, include_treatment, working, arm, adjustment.cv_folds)
        if key not in self.selections:
            spec = selection_spec(adjustment.selection, include_treatment, self.seed,
                                  cv_folds=adjustment.cv_folds)
            if arm is None:
                model = select_model(self.data, spec, working_for(working))
            else:
                model = select_arm(self.data, spec, arm)
            self.logger.debug(f"{adjustment.label} selected {list(model.selected)}")
            self.selections[key] = model
        return self.selections[key].selected

    def _score_set(self, cell: AnalysisCell):
        key = (cell.adjustment.label, cell.working, cell.center, cell.null_fit)
        if key in self.scores:
            return self.scores[key]
        if cell.null_fit not in NULL_FITS:
            raise CovAdjError(f"Unknown null fit [{cell.null_fit}]. Available: {list(NULL_FITS)}")
        data = self.data
        if cell.adjustment.kind is AdjustKind.NONE:
            if cell.center:
                data = center_outcomes(data)
            model, selected = None, ()
        else:
            arm = 0 if cell.null_fit == "control" else None
            selected = self._selected(cell.adjustment, False, cell.working, arm)
            model = fit_null_model(data, selected, cell.null_fit)
        scores = build_scores(data, model, working_for(cell.working))
        self.scores[key] = (scores, len(selected))
        return self.scores[key]

    def run(self, cell: AnalysisCell) -> TestResult:
        data, adj, working = self.data, cell.adjustment, cell.working
        label = adj.label
        if cell.method is Method.CMM:
            selected = self._selected(adj, True, working)
            return cmm_test(data, selected, working_for(working), label)
        if cell.method is Method.AUGMENTED:
            if adj.kind is AdjustKind.SELECT:
                selector = selection_spec(adj.selection, False, self.seed,
                                          cv_folds=adj.cv_folds)
            else:
                selector = adj.columns
            return augmented_test(data, selector, working_for(working), label)
        scores, n_selected = self._score_set(cell)
        assignment = data.assignment()
        if cell.method is Method.EXACT:
            return exact_permutation_test(scores, assignment, self.plan, label,
                                          working.value, n_selected)
        reference = Reference.BZ if cell.method is Method.APPROX_EXACT_BZ else Reference.NORMAL
        return approx_exact_test(scores, assignment, reference, label, working.value,
                                 n_selected)

    def run_all(self, cells: Sequence[AnalysisCell]) -> List[CellOutcome]:
        outcomes = []
        for cell in cells:
            try:
                outcomes.append(CellOutcome(cell, self.run(cell)))
            except CovAdjError as e:
                self.logger.error(f"{'/'.join(cell.key)}: {e}")
                outcomes.append(CellOutcome(cell, None, str(e)))
        return outcomes


def build_cells(methods: Sequence[Method], adjustments: Sequence[Adjustment],
                workings: Sequence[Structure], center: bool = False,
                null_fit: str = "pooled") -> List[AnalysisCell]:
    return [AnalysisCell(m, a, w, center, null_fit)
            for m in methods for a in adjustments for w in workings]


def run_cells(data: TrialDataset, cells: Sequence[AnalysisCell],
              plan: PermutationPlan = PermutationPlan(), seed: int = 0) -> List[CellOutcome]:
    return CellRunner(data, plan, seed).run_all(cells)
