# -*- coding: UTF-8 -*-
import logging
from typing import Iterable, Optional, Sequence

import numpy as np
import pandas as pd
from toolz.itertoolz import concat

from .data_types import ClusterRecord, CsvSchema, TrialDataset
from .errors import AllocationError, DataFormatError

logger = logging.getLogger(__name__)


def _frozen(arr) -> np.ndarray:
    out = np.array(arr, dtype=float)
    out.setflags(write=False)
    return out


def make_dataset(clusters: Iterable[ClusterRecord],
                 covariate_names: Optional[Sequence[str]] = None,
                 treatment_probability: Optional[float] = None) -> TrialDataset:
    """Builds an immutable TrialDataset and checks its invariants.
    Allocation counts always come from the clusters themselves; pi defaults
    to n1/n."""
    records = []
    p = None
    for c in clusters:
        outcomes = _frozen(np.atleast_1d(c.outcomes))
        covariates = _frozen(np.asarray(c.covariates, dtype=float).reshape(
            len(outcomes), -1))
        if len(outcomes) == 0:
            raise DataFormatError(f"Cluster {c.id} has no units")
        if p is None:
            p = covariates.shape[1]
        elif covariates.shape[1] != p:
            raise DataFormatError(
                f"Cluster {c.id} has {covariates.shape[1]} covariates, expected {p}")
        if int(c.treatment) not in (0, 1):
            raise DataFormatError(
                f"Cluster {c.id} has treatment {c.treatment}; treatment must be 0 or 1")
        if not (np.all(np.isfinite(outcomes)) and np.all(np.isfinite(covariates))):
            raise DataFormatError(f"Cluster {c.id} holds missing or non-finite values")
        records.append(ClusterRecord(str(c.id), int(c.treatment), outcomes, covariates))

    if not records:
        raise DataFormatError("Dataset holds no clusters")
    n1 = sum(c.treatment for c in records)
    n0 = len(records) - n1
    if n0 == 0 or n1 == 0:
        raise AllocationError(
            f"Both arms need at least one cluster, got n0={n0}, n1={n1}")
    pi = n1 / len(records) if treatment_probability is None else treatment_probability
    if not 0 < pi < 1:
        raise AllocationError(f"Treatment probability {pi} outside (0, 1)")
    if covariate_names is None:
        covariate_names = [f"x{k + 1}" for k in range(p)]
    if len(covariate_names) != p:
        raise DataFormatError(
            f"{len(covariate_names)} covariate names for {p} covariate columns")
    return TrialDataset(tuple(records), float(pi), (n0, n1), tuple(covariate_names))


def _expand_nominal(frame: pd.DataFrame, nominal: Sequence[str]) -> pd.DataFrame:
    """Indicator columns for nominal covariates; the first (sorted) level is
    the reference and gets no column."""
    for col in nominal:
        levels = sorted(frame[col].astype(str).unique())
        for level in levels[1:]:
            frame[f"{col}_{level}"] = (frame[col].astype(str) == level).astype(float)
        frame = frame.drop(columns=[col])
        logger.debug(f"Expanded nominal column {col} into {len(levels) - 1} indicators")
    return frame


def load_trial_csv(path: str, schema: CsvSchema = CsvSchema()) -> TrialDataset:
    """Reads a trial CSV: one row per unit, rows of a cluster share the
    cluster id. Every numeric column besides cluster/treatment/outcome and
    the excluded ones is a covariate."""
    frame = pd.read_csv(path, encoding="utf-8", comment="#")
    required = [schema.cluster, schema.treatment, schema.outcome]
    missing = [c for c in list(required) + list(schema.nominal) + list(schema.exclude)
               if c not in frame.columns]
    if missing:
        raise DataFormatError(
            f"Missing columns {missing}. Available columns: {list(frame.columns)}")
    frame = frame.drop(columns=list(schema.exclude))
    frame = _expand_nominal(frame, schema.nominal)
    cov_cols = [c for c in frame.columns if c not in required]

    numeric_cols = [schema.treatment, schema.outcome] + cov_cols
    for col in numeric_cols:
        converted = pd.to_numeric(frame[col], errors="coerce")
        if converted.isna().any():
            bad_row = int(np.flatnonzero(converted.isna().values)[0])
            raise DataFormatError(
                f"Column {col} holds a missing or non-numeric value at data row {bad_row + 1}")
        frame[col] = converted

    if not frame[schema.treatment].isin([0, 1]).all():
        raise DataFormatError(
            f"Treatment column {schema.treatment} must hold only 0/1 values")

    clusters = []
    # sort=False keeps clusters in order of first appearance
    for cluster_id, rows in frame.groupby(schema.cluster, sort=False):
        treatments = rows[schema.treatment].unique()
        if len(treatments) > 1:
            raise DataFormatError(f"mixed treatment within cluster {cluster_id}")
        clusters.append(
            ClusterRecord(
                id=str(cluster_id),
                treatment=int(treatments[0]),
                outcomes=rows[schema.outcome].values,
                covariates=rows[cov_cols].values.reshape(len(rows), len(cov_cols))))
    data = make_dataset(clusters, covariate_names=cov_cols)
    logger.debug(f"Loaded {data} from {path}")
    return data


def write_trial_csv(data: TrialDataset, path: str, schema: CsvSchema = CsvSchema()):
    rows = list(concat(
        [[(c.id, c.treatment, y, *x) for y, x in zip(c.outcomes, c.covariates)]
         for c in data.clusters]))
    columns = [schema.cluster, schema.treatment, schema.outcome] + list(data.covariate_names)
    df = pd.DataFrame.from_records(rows, columns=columns)
    df.to_csv(path, index=False, float_format="%.17g")
    logger.debug(f"Saved {data} to {path}")


def cluster_average(data: TrialDataset) -> TrialDataset:
    """Collapses each cluster to a single unit holding within-cluster means."""
    averaged = [
        ClusterRecord(c.id, c.treatment, np.array([c.outcomes.mean()]),
                      c.covariates.mean(axis=0, keepdims=True))
        for c in data.clusters
    ]
    return make_dataset(averaged, data.covariate_names, data.treatment_probability)


def center_outcomes(data: TrialDataset) -> TrialDataset:
    """Subtracts the grand mean over all units from every outcome."""
    y, _, _, _ = data.stacked()
    grand_mean = y.mean()
    centered = [
        ClusterRecord(c.id, c.treatment, c.outcomes - grand_mean, c.covariates)
        for c in data.clusters
    ]
    return make_dataset(centered, data.covariate_names, data.treatment_probability)
