"""Evaluation protocol: RMSE over deadlines, test log-likelihood, segment and
purchase-order breakdowns."""
from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Sequence

import numpy as np

from .core import EventLog
from .predict import (DEFAULT_DEADLINES, FittedModel, expected_return_times,
                      teacher_forced_targets, test_log_densities)

log = logging.getLogger(__name__)

DEFAULT_PERCENTILES = (10, 20, 30, 40, 50, 60, 70, 80, 90, 100)
REFERENCE = "MHMe"


@dataclass
class EvalReport:
    rmse_by_deadline: Dict[int, float]
    tll: float
    segment_curves: Dict[str, Dict[float, float]] = field(default_factory=dict)
    order_rmse: Dict[tuple, float] = field(default_factory=dict)


def rmse(predictions, truths) -> float:
    p = np.asarray(predictions, dtype=float)
    t = np.asarray(truths, dtype=float)
    if p.shape != t.shape:
        raise ValueError("predictions and truths differ in length")
    if p.size == 0:
        raise ValueError("rmse of an empty set is undefined")
    return float(np.sqrt(np.mean((p - t) ** 2)))


def _truths(durations, deadline, truth_mode):
    if truth_mode == "cap":
        return np.minimum(durations, deadline), np.ones(len(durations), dtype=bool)
    if truth_mode == "drop":
        keep = durations <= deadline
        return durations, keep
    raise ValueError("truth_mode must be 'cap' or 'drop'")


def deadline_predictions(fitted: FittedModel, test: EventLog, deadlines=DEFAULT_DEADLINES,
                         same_item: bool = False):
    """Expected return time of every teacher-forced test event per deadline.

    Returns ``(targets, {t_d: expected_days})``.
    """
    targets = teacher_forced_targets(fitted, test, same_item=same_item)
    preds = {}
    for td in deadlines:
        preds[int(td)] = expected_return_times(fitted, targets.users, targets.items,
                                               targets.anchors, int(td))[0]
    return targets, preds


def rmse_by_deadline(fitted: FittedModel, test: EventLog, deadlines=DEFAULT_DEADLINES,
                     truth_mode: str = "cap", same_item: bool = False) -> Dict[int, float]:
    targets, preds = deadline_predictions(fitted, test, deadlines, same_item)
    out = {}
    for td, p in preds.items():
        truth, keep = _truths(targets.durations, td, truth_mode)
        out[td] = rmse(p[keep], truth[keep])
    return out


def per_user_tll(fitted: FittedModel, test: EventLog, same_item: bool = False) -> np.ndarray:
    targets = teacher_forced_targets(fitted, test, same_item=same_item)
    dens = test_log_densities(fitted, targets)
    return np.bincount(targets.users, weights=dens, minlength=fitted.train.n_users)


def test_log_likelihood(fitted: FittedModel, test: EventLog, same_item: bool = False) -> float:
    """Sum of per-event duration log densities (no bid term)."""
    targets = teacher_forced_targets(fitted, test, same_item=same_item)
    return float(math.fsum(test_log_densities(fitted, targets)))


def _segment_users(train: EventLog, users: np.ndarray, axis: str, percentile: float) -> np.ndarray:
    if axis == "activity":
        metric = train.user_event_counts().astype(float)
    elif axis == "spend":
        metric = np.bincount(train.users, weights=train.prices, minlength=train.n_users)
    else:
        raise ValueError("axis must be 'activity' or 'spend'")
    order = users[np.argsort(metric[users], kind="stable")]
    k = int(math.ceil(percentile / 100.0 * len(order) - 1e-9))
    return order[:k]


def segment_report(fitted_models: Mapping[str, FittedModel], test: EventLog, axis: str = "activity",
                   percentiles: Sequence[float] = DEFAULT_PERCENTILES, reference: str = REFERENCE,
                   same_item: bool = False) -> Dict[str, Dict[float, float]]:
    """Relative TLL of each model against ``reference`` on bottom-percentile user groups.

    The value is ``(TLL_model - TLL_ref) / |TLL_ref|`` restricted to test
    events of the selected users.
    """
    if reference not in fitted_models:
        raise ValueError(f"reference model {reference!r} missing from fitted_models")
    per_user = {name: per_user_tll(m, test, same_item) for name, m in fitted_models.items()}
    ref_model = fitted_models[reference]
    users = np.unique(test.users)
    curves = {name: {} for name in fitted_models}
    for P in percentiles:
        sel = _segment_users(ref_model.train, users, axis, P)
        if len(sel) == 0:
            log.warning("percentile %s selects no users; skipped", P)
            continue
        ref = math.fsum(per_user[reference][sel])
        for name in fitted_models:
            val = math.fsum(per_user[name][sel])
            curves[name][P] = (val - ref) / abs(ref) if ref != 0 else 0.0
    return curves


def order_report(fitted: FittedModel, test: EventLog, deadlines=DEFAULT_DEADLINES, max_order: int = 5,
                 truth_mode: str = "cap", same_item: bool = False) -> Dict[tuple, float]:
    """RMSE per ``(t_d, k)`` where ``k`` is the per-user rank of the test event."""
    if max_order < 1:
        raise ValueError("max_order must be >= 1")
    targets, preds = deadline_predictions(fitted, test, deadlines, same_item)
    out = {}
    for td, p in preds.items():
        truth, keep = _truths(targets.durations, td, truth_mode)
        for k in range(1, max_order + 1):
            m = keep & (targets.order == k)
            if m.any():
                out[(td, k)] = rmse(p[m], truth[m])
    return out


def evaluate_models(fitted_models: Mapping[str, FittedModel], test: EventLog,
                    deadlines=DEFAULT_DEADLINES, percentiles=DEFAULT_PERCENTILES, max_order: int = 5,
                    truth_mode: str = "cap", same_item: bool = False) -> Dict[str, EvalReport]:
    reports = {}
    for name, m in fitted_models.items():
        reports[name] = EvalReport(
            rmse_by_deadline=rmse_by_deadline(m, test, deadlines, truth_mode, same_item),
            tll=test_log_likelihood(m, test, same_item),
            order_rmse=order_report(m, test, deadlines, max_order, truth_mode, same_item),
        )
    if REFERENCE in fitted_models:
        for axis in ("activity", "spend"):
            curves = segment_report(fitted_models, test, axis, percentiles, same_item=same_item)
            for name, c in curves.items():
                reports[name].segment_curves[axis] = c
    return reports


def _fmt(x):
    return repr(float(x))


def write_report_csvs(reports: Mapping[str, EvalReport], out_dir) -> list:
    """Write rmse.csv, tll.csv, segments_activity.csv, segments_spend.csv and
    order_rmse.csv; returns the written paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []

    def write(name, header, rows):
        path = os.path.join(out_dir, name)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
        paths.append(path)

    write("rmse.csv", ["model", "t_d", "rmse"],
          [(m, td, _fmt(v)) for m, r in reports.items() for td, v in sorted(r.rmse_by_deadline.items())])
    write("tll.csv", ["model", "tll"], [(m, _fmt(r.tll)) for m, r in reports.items()])
    for axis in ("activity", "spend"):
        write(f"segments_{axis}.csv", ["model", "percentile", "relative_tll"],
              [(m, p, _fmt(v)) for m, r in reports.items()
               for p, v in sorted(r.segment_curves.get(axis, {}).items())])
    write("order_rmse.csv", ["model", "t_d", "order", "rmse"],
          [(m, td, k, _fmt(v)) for m, r in reports.items() for (td, k), v in sorted(r.order_rmse.items())])
    return paths
