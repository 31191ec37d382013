"""Distance-based beam accuracy and missing-modality degradation tables."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

REPORT_HEADER = ["run", "drop_set", "Y1", "Y2", "Y3", "dba", "top1"]


@dataclass(frozen=True)
class DbaConfig:
    thresholds: tuple = (1, 2, 3)

    def __post_init__(self):
        th = tuple(int(d) for d in self.thresholds)
        if len(th) != 3:
            raise ValueError("DBA needs exactly three thresholds")
        if any(d < 0 for d in th) or not (th[0] < th[1] < th[2]):
            raise ValueError(f"thresholds must be nonnegative and strictly increasing: {th}")
        object.__setattr__(self, "thresholds", th)


def _check(preds, truths, n_beams=None):
    preds = np.asarray(preds)
    truths = np.asarray(truths)
    if preds.shape != truths.shape or preds.ndim != 1:
        raise ValueError(f"predictions {preds.shape} and truths {truths.shape} must be equal 1-D")
    if preds.size == 0:
        raise ValueError("empty prediction set")
    for arr in (preds, truths):
        if arr.min() < 0 or (n_beams is not None and arr.max() >= n_beams):
            raise IndexError(f"beam index outside [0, {n_beams})")
    return preds.astype(np.int64), truths.astype(np.int64)


def dba_score(preds, truths, cfg=None, n_beams=None, thresholds=None):
    """Return (Y1, Y2, Y3, score) with Y_i the fraction within d_i beams.

    ``thresholds`` bypasses DbaConfig validation so that degenerate
    settings such as (0, 0, 0) can be evaluated.
    """
    preds, truths = _check(preds, truths, n_beams)
    th = (cfg or DbaConfig()).thresholds if thresholds is None else tuple(thresholds)
    dist = np.abs(preds - truths)
    # integer counts keep the score exact, e.g. equal to top-1 at (0, 0, 0)
    counts = [int(np.count_nonzero(dist <= d)) for d in th]
    n = len(dist)
    return counts[0] / n, counts[1] / n, counts[2] / n, sum(counts) / (3 * n)


def top1(preds, truths, n_beams=None):
    preds, truths = _check(preds, truths, n_beams)
    return float(np.mean(preds == truths))


@dataclass
class EvalRun:
    run: str
    drop_set: tuple
    preds: np.ndarray
    truths: np.ndarray
    dataset: str = ""

    def row(self, cfg=None, n_beams=None):
        y1, y2, y3, s = dba_score(self.preds, self.truths, cfg, n_beams)
        return {"run": self.run, "drop_set": "+".join(self.drop_set) or "none",
                "Y1": y1, "Y2": y2, "Y3": y3, "dba": s, "top1": top1(self.preds, self.truths)}


def ablation_report(runs, cfg=None, n_beams=None):
    """Rows for each run plus a ``degradation`` entry relative to the baseline.

    The baseline is the run with an empty drop set; all runs must come from
    the same dataset.
    """
    runs = list(runs)
    base = [r for r in runs if not r.drop_set]
    if not base:
        raise ValueError("ablation report needs a baseline run with no dropped modality")
    if len({r.dataset for r in runs}) > 1:
        raise ValueError("runs come from different datasets")
    ref = base[0].row(cfg, n_beams)["dba"]
    rows = []
    for r in runs:
        row = r.row(cfg, n_beams)
        row["degradation"] = ref - row["dba"]
        rows.append(row)
    return rows


def write_report(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for r in rows:
            w.writerow([r["run"], r["drop_set"]] + [f"{r[k]:.6f}" for k in REPORT_HEADER[2:]])


def read_report(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k in REPORT_HEADER[2:]:
            r[k] = float(r[k])
    return rows
