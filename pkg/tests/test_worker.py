import os
import json
import logging
import tempfile
import unittest

import pandas as pd

from covadj.data_types import AdjustKind, Adjustment, Method, PermutationPlan, Structure
from covadj.pipeline import build_cells
from covadj.simulate import named_design
from covadj.worker import AnalysisWorker, StudyWorker, metadata_line

from .fixtures import random_trial
from .test_utils import prepare_cfg

logger = logging.getLogger("TEST_WORKER")

# run as
# (.venv) pkg $ python -m unittest tests/test_worker.py


class TestAnalysisWorker(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        super(TestAnalysisWorker, cls).setUpClass()
        cls.cfg = prepare_cfg()
        cls.data = random_trial(n_per_arm=10, p=2, seed=3, effect=1.)

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.base = os.path.join(self.tmp.name, "results")

    def tearDown(self):
        self.tmp.cleanup()

    def _worker(self, cells, db=None, **kwargs):
        return AnalysisWorker(cfg=TestAnalysisWorker.cfg, db=db, data=TestAnalysisWorker.data,
                              cells=cells, plan=PermutationPlan(B=100, seed=2), seed=2,
                              filename=self.base, **kwargs)

    def test_rows_and_text(self):
        cells = build_cells([Method.CMM, Method.EXACT], [Adjustment.none()],
                            [Structure.INDEPENDENCE])
        worker = self._worker(cells)
        worker.run()
        self.assertFalse(worker.any_errors)
        text = worker._prettify_text()
        exact_line = [line for line in text.splitlines() if line.startswith("exact")][0]
        self.assertIn("--", exact_line)
        frame = worker._frame()
        self.assertEqual(list(frame["method"]), ["cmm", "exact"])

    def test_outputs(self):
        cells = build_cells([Method.APPROX_EXACT], [Adjustment.none()], [Structure.INDEPENDENCE])
        worker = self._worker(cells, save_txt=True, save_json=True, params={"input": "x.csv"})
        worker.run()
        worker.report()
        with open(self.base + ".csv") as f:
            first = f.readline()
        self.assertTrue(first.startswith("# covadj "))
        self.assertIn("seed=2", first)
        frame = pd.read_csv(self.base + ".csv", comment="#")
        self.assertEqual(len(frame), 1)
        with open(self.base + ".json") as f:
            payload = json.load(f)
        self.assertEqual(payload["run"], {"input": "x.csv"})
        self.assertEqual(payload["results"][0]["method"], "approx-exact")
        self.assertTrue(os.path.exists(self.base + ".txt"))

    def test_errors_and_db(self):
        bad = Adjustment(AdjustKind.FIXED, "fixed:x1", columns=(0,))
        cells = build_cells([Method.CMM], [bad], [Structure.INDEPENDENCE])
        db = inject_mock_db()
        worker = self._worker(cells, db=db)
        worker.data = random_trial(n_per_arm=1, p=1, seed=1)
        worker.run()
        self.assertTrue(worker.any_errors)
        self.assertEqual(db.history, [("analyze", 2)])
        self.assertEqual(len(db.results), 1)
        self.assertTrue(db.results[0]["error"])
        self.assertEqual(db.finished, [1])


class TestStudyWorker(unittest.TestCase):

    def test_report(self):
        design = named_design("indep-null", seed=5)
        cells = build_cells([Method.APPROX_EXACT], [Adjustment.none()], [Structure.INDEPENDENCE])
        with tempfile.TemporaryDirectory() as tmp:
            worker = StudyWorker(prepare_cfg(), inject_mock_db(), design, cells, reps=3,
                                 alpha=0.05, permutations=20, smoke=True,
                                 filename=os.path.join(tmp, "s"))
            report = worker.run()
            worker.report()
            frame = pd.read_csv(os.path.join(tmp, "s.csv"), comment="#")
        self.assertEqual(report.reps, 3)
        self.assertEqual(list(frame["replicates"]), [3])
        self.assertIn("Design indep-null", worker._prettify_text())

    def test_metadata_line(self):
        line = metadata_line(4, {"a": 1}, {"b": [1, 2]})
        self.assertEqual(line.split(" config=")[1], '{"config":{"a":1},"run":{"b":[1,2]}}')


def inject_mock_db():
    class Mockdb:
        def __init__(self):
            self.history = []
            self.results = []
            self.finished = []

        def insert_hist(self, command, params, seed, is_finished):
            self.history.append((command, seed))
            return len(self.history)

        def insert_results(self, run_id, rows):
            self.results.extend(rows)

        def mark_finished(self, run_id, is_finished=True):
            self.finished.append(run_id)

    return Mockdb()
