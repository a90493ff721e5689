# -*- coding: UTF-8 -*-
import json
import logging
from typing import List, Optional, Sequence

import arrow
import pandas as pd

from . import __version__
from .data_types import (AnalysisCell, MonteCarloReport, PermutationPlan,
                         SimulationDesign, TrialDataset)
from .pipeline import CellOutcome, CellRunner
from .simulate import design_to_text, monte_carlo_study, report_frame
from .utils import fmt_number

RESULT_COLUMNS = ["method", "adjustment", "working", "statistic", "std_error", "z_value",
                  "p_value", "n_selected", "error"]


def metadata_line(seed, cfg, params=None) -> str:
    """First line of every result file: enough to rerun bit for bit."""
    resolved = {"config": cfg, "run": params or {}}
    return f"# covadj {__version__} seed={seed} config=" + \
        json.dumps(resolved, sort_keys=True, separators=(",", ":"), default=str)


class _Reporter:
    """Shared file handling: results go to <filename>.csv/.json/.txt, with a
    timestamped default name."""

    def __init__(self, cfg, db, seed, filename="", save_txt=False, save_json=False,
                 params=None, command=""):
        self.cfg = cfg
        self.db = db  # dbutil::DB or None
        self.seed = seed
        self.filename = filename
        self.save_txt = save_txt
        self.save_json = save_json
        self.params = params or {}
        self.command = command

    def _base(self) -> str:
        if not self.filename:
            # set once so csv, json and txt share the name
            self.filename = f"results_{arrow.now().format('YYYYMMDD_HHmmss')}"
        return str(self.filename)

    def _frame(self) -> pd.DataFrame:
        raise NotImplementedError

    def _rows(self) -> List[dict]:
        return self._frame().to_dict(orient="records")

    def output_csv(self):
        path = self._base() + ".csv"
        with open(path, "w", newline="") as f:
            f.write(metadata_line(self.seed, self.cfg, self.params) + "\n")
            self._frame().to_csv(f, index=False, float_format="%.10g")
        self.logger.debug(f"Finished saving results as {path}")

    def output_json(self):
        path = self._base() + ".json"
        payload = {"covadj": __version__, "seed": self.seed,
                   "config": self.cfg, "run": self.params, "results": self._rows()}
        with open(path, "w") as f:
            json.dump(payload, f, indent=2, sort_keys=True, default=str)
            f.write("\n")
        self.logger.debug(f"Finished saving results as {path}")

    def output_text(self, to_std_out=False):
        pretty_txt = self._prettify_text()
        if to_std_out:
            print(pretty_txt)
        else:
            path = self._base() + ".txt"
            with open(path, "w") as outfile:
                outfile.write(metadata_line(self.seed, self.cfg, self.params) + "\n")
                outfile.write(pretty_txt + "\n")
            self.logger.debug(f"Finished saving results as {path}")

    def _prettify_text(self) -> str:
        raise NotImplementedError

    def _save_to_db(self, rows):
        if self.db is None:
            return
        run_id = self.db.insert_hist(self.command, self.params, self.seed, 0)
        if run_id:
            self.db.insert_results(run_id, rows)
            self.db.mark_finished(run_id)

    def report(self, to_std_out=False):
        self.output_csv()
        if self.save_json:
            self.output_json()
        if self.save_txt:
            self.output_text()
        if to_std_out:
            self.output_text(to_std_out=True)


class AnalysisWorker(_Reporter):
    """Runs the requested (method, adjustment, working) cells on one trial
    dataset and reports a row per cell. A failing cell keeps its row, with
    the error message in the `error` column and empty statistics.

    Exact tests report statistic S with no SE and no Z, shown as '--'
    in the text table."""

    def __init__(self, cfg, db, data: TrialDataset, cells: Sequence[AnalysisCell],
                 plan: PermutationPlan, seed: int = 0, **kwargs):
        super().__init__(cfg, db, seed, command="analyze", **kwargs)
        self.logger = logging.getLogger(name="AnalysisWorker")
        self.data = data
        self.cells = list(cells)
        self.plan = plan
        self.outcomes: List[CellOutcome] = []

    @property
    def any_errors(self) -> bool:
        return any(o.error for o in self.outcomes)

    def _rows(self) -> List[dict]:
        return [o.to_row() for o in self.outcomes]

    def _frame(self) -> pd.DataFrame:
        return pd.DataFrame.from_records([o.to_row() for o in self.outcomes],
                                         columns=RESULT_COLUMNS)

    def _prettify_text(self) -> str:
        header = (f"{'method':<16}{'adjustment':<14}{'working':<8}{'statistic':>11}"
                  f"{'SE':>10}{'Z':>9}{'p':>9}{'selected':>9}")
        lines = [repr(self.data), header]
        for o in self.outcomes:
            r = o.result
            if r is None:
                lines.append(f"{o.cell.method.value:<16}{o.cell.adjustment.label:<14}"
                             f"{o.cell.working.value:<8}  ERROR: {o.error}")
                continue
            lines.append(f"{r.method.value:<16}{r.adjustment:<14}{r.working:<8}"
                         f"{fmt_number(r.statistic, 4):>11}{fmt_number(r.std_error, 4):>10}"
                         f"{fmt_number(r.z_value, 3):>9}{fmt_number(r.p_value, 4):>9}"
                         f"{r.n_selected:>9}")
        return "\n".join(lines)

    def run(self) -> List[CellOutcome]:
        """Run every cell and save results to the database when one is set."""
        self.logger.debug(f"Analysing {self.data} with {len(self.cells)} cells")
        self.outcomes = CellRunner(self.data, self.plan, self.seed).run_all(self.cells)
        self._save_to_db(self._rows())
        return self.outcomes


class StudyWorker(_Reporter):
    """Runs a Monte Carlo study of one design and reports rejection rates."""

    def __init__(self, cfg, db, design: SimulationDesign, cells: Sequence[AnalysisCell],
                 reps: int, alpha: float, permutations: int, workers: int = 1,
                 smoke: bool = False, **kwargs):
        super().__init__(cfg, db, design.seed, command="simulate", **kwargs)
        self.logger = logging.getLogger(name="StudyWorker")
        self.design = design
        self.cells = list(cells)
        self.reps = reps
        self.alpha = alpha
        self.permutations = permutations
        self.workers = workers
        self.smoke = smoke
        self.report_: Optional[MonteCarloReport] = None

    @property
    def any_errors(self) -> bool:
        return any(c.errors > 0 for c in self.report_.cells)

    def _frame(self) -> pd.DataFrame:
        return report_frame(self.report_)

    def _rows(self) -> List[dict]:
        return self.report_.to_records()

    def _prettify_text(self) -> str:
        lines = [f"Design {self.design.name}: {self.reps} replicates, alpha={self.alpha}",
                 design_to_text(self.design).rstrip(),
                 f"{'method':<16}{'adjustment':<12}{'working':<8}{'rate':>8}{'MC SE':>8}"
                 f"{'selected':>10}{'errors':>8}"]
        for c in self.report_.cells:
            lines.append(f"{c.method:<16}{c.adjustment:<12}{c.working:<8}"
                         f"{fmt_number(c.rejection_rate, 3):>8}{fmt_number(c.mc_se, 3):>8}"
                         f"{fmt_number(c.mean_selected, 2):>10}{c.errors:>8}")
        return "\n".join(lines)

    def _db_rows(self) -> List[dict]:
        return [{"method": c.method, "adjustment": c.adjustment, "working": c.working,
                 "statistic": c.mean_selected, "std_error": c.mc_se, "z_value": None,
                 "p_value": c.rejection_rate, "error": f"{c.errors} errors" if c.errors else ""}
                for c in self.report_.cells]

    def run(self) -> MonteCarloReport:
        self.logger.debug(f"Running {self.reps} replicates of {self.design.name} "
                          f"on {self.workers} workers")
        self.report_ = monte_carlo_study(self.design, self.cells, self.reps, self.alpha,
                                         self.permutations, self.workers,
                                         smoke=self.smoke)
        self._save_to_db(self._db_rows())
        return self.report_
