import json
import logging

import arrow
import sqlite3

logger = logging.getLogger(__name__)


def setup_db_tables(db_conn):
    c = db_conn.cursor()
    c.execute("PRAGMA foreign_keys = ON")
    c.execute("""CREATE TABLE IF NOT EXISTS history
            (
            id INTEGER PRIMARY KEY,
            date TEXT,
            command TEXT,
            params TEXT,
            seed INTEGER,
            finished INTEGER)""")
    c.execute("""CREATE TABLE IF NOT EXISTS results (
            run_id INTEGER,
            method TEXT,
            adjustment TEXT,
            working TEXT,
            statistic REAL,
            std_error REAL,
            z_value REAL,
            p_value REAL,
            error TEXT,
            FOREIGN KEY(run_id) REFERENCES history(id))
            """)


class DB:
    """Run history: one `history` row per CLI run, one `results` row per
    analysis cell (or per Monte Carlo cell, with the rejection rate as
    p_value and its Monte Carlo SE as std_error)."""

    def __init__(self, path):
        self.conn = sqlite3.connect(path)
        setup_db_tables(self.conn)

    def close(self):
        self.conn.close()

    def _get_last_run_id(self) -> int:
        with self.conn as conn:
            # if table is empty fetchone() returns (None, )
            run_id = conn.execute("SELECT MAX(id) FROM history").fetchone()
        if run_id[0] is not None:
            return run_id[0]
        return 0

    def insert_hist(self, command, params, seed, is_finished) -> int:
        time = arrow.utcnow().isoformat()
        params_json = json.dumps(params, sort_keys=True, default=str)
        # None needs to be passed for sqlite autoincrement to work
        values_tuple = (None, time, command, params_json, seed, int(is_finished))
        try:
            with self.conn as conn:
                conn.execute("INSERT INTO history values (?, ?, ?, ?, ?, ?)", values_tuple)
        except sqlite3.Error as e:
            logger.error(f"Failed inserting run history: {e}")
            return 0
        return self._get_last_run_id()

    def mark_finished(self, run_id, is_finished=True):
        try:
            with self.conn as conn:
                conn.execute("UPDATE history SET finished = ? WHERE id = ?",
                             (int(is_finished), run_id))
        except sqlite3.Error as e:
            logger.error(f"Failed updating run {run_id}: {e}")

    @staticmethod
    def _prepare_result_entry(run_id, row):
        return (run_id, row["method"], row["adjustment"], row["working"], row.get("statistic"),
                row.get("std_error"), row.get("z_value"), row.get("p_value"),
                row.get("error", ""))

    def insert_results(self, run_id, rows):
        prepared = [self._prepare_result_entry(run_id, row) for row in rows]
        try:
            with self.conn as conn:
                conn.executemany("INSERT INTO results values (?, ?, ?, ?, ?, ?, ?, ?, ?)",
                                 prepared)
        except sqlite3.Error as e:
            logger.error(f"Failed inserting results for run {run_id}: {e}")

    def read_history(self):
        with self.conn as conn:
            return conn.execute("SELECT * FROM history ORDER BY id").fetchall()

    def read_results(self, run_id):
        with self.conn as conn:
            return conn.execute("SELECT * FROM results WHERE run_id = ?", (run_id,)).fetchall()
