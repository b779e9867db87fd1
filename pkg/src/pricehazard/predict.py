"""Return-time prediction and spend sampling from a fitted model."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import EventLog, ModelParams, ModelSpec
from .exceptions import ColdStartError
from .hazard import HazardDesign, Observations, find_precursors, hazard_rate

__all__ = [
    "FittedModel",
    "ReturnTimePrediction",
    "TestTargets",
    "predict_hazard",
    "expected_return_time",
    "expected_return_times",
    "teacher_forced_targets",
    "test_log_densities",
    "sample_spend_posterior",
    "write_predictions",
]

DEFAULT_DEADLINES = (30, 45, 60, 75, 90)


@dataclass
class FittedModel:
    spec: ModelSpec
    params: ModelParams
    train: EventLog

    def __post_init__(self):
        counts = self.train.user_event_counts()
        last = np.full(self.train.n_users, np.nan)
        last[self.train.users] = self.train.times  # time-sorted: last write wins
        self._counts = counts
        self._last = last

    def check_known(self, user, item=None):
        if not 0 <= user < self.train.n_users or self._counts[user] == 0:
            raise ColdStartError(f"user {user} has no training history")
        if item is not None and not 0 <= item < self.train.n_items:
            raise ColdStartError(f"item {item} is unknown to the model")

    def last_event_time(self, user) -> float:
        self.check_known(user)
        return float(self._last[user])

    def purchase_count(self, user) -> int:
        self.check_known(user)
        return int(self._counts[user])


@dataclass
class ReturnTimePrediction:
    user: int
    item: int
    deadline: int
    expected_days: float
    survival_curve: np.ndarray


def predict_hazard(fitted: FittedModel, user: int, item: int, t: float,
                   anchor: Optional[float] = None) -> float:
    """Hazard ``t`` days after ``anchor`` (default: the user's last training event).

    Precursors come from the training log only.
    """
    fitted.check_known(user, item)
    if anchor is None:
        anchor = fitted.last_event_time(user)
    s = anchor + t
    pre = find_precursors(fitted.spec, fitted.train, user, item, s)
    return hazard_rate(fitted.spec, fitted.params, (user, item, s), pre)


def _survival_curves(fitted: FittedModel, users, items, anchors, deadline: int) -> np.ndarray:
    """Survival on ``tau = 0..deadline`` for each request (rows)."""
    n = len(users)
    obs = Observations(users=np.asarray(users, dtype=np.int64), items=np.asarray(items, dtype=np.int64),
                       anchors=np.asarray(anchors, dtype=float),
                       event_times=np.asarray(anchors, dtype=float) + deadline,
                       prices=np.full(n, np.nan), censored=np.ones(n, dtype=bool),
                       shapes=np.ones(n, dtype=np.int64))
    design = HazardDesign.build(fitted.spec, fitted.train, obs, n_days=np.full(n, deadline),
                                sigma=fitted.params.sigma)
    lam = design.cumulative(fitted.params).reshape(n, deadline)
    Lam = np.cumsum(lam, axis=1)
    return np.hstack([np.ones((n, 1)), np.exp(-Lam)])


def expected_return_times(fitted: FittedModel, users, items, anchors, deadline: int):
    """Vectorised ``E(T) = sum_{tau=0}^{deadline} S(tau)`` for many requests.

    Returns ``(expected_days, survival_curves)``.
    """
    deadline = int(deadline)
    if deadline <= 0:
        raise ValueError("deadline must be a positive number of days")
    for u, o in zip(users, items):
        fitted.check_known(int(u), int(o))
    if len(users) == 0:
        return np.zeros(0), np.zeros((0, deadline + 1))
    curves = _survival_curves(fitted, users, items, anchors, deadline)
    return curves.sum(axis=1), curves


def expected_return_time(fitted: FittedModel, user: int, item: int, deadline: int,
                         anchor: Optional[float] = None) -> ReturnTimePrediction:
    if anchor is None:
        anchor = fitted.last_event_time(user)
    e, curves = expected_return_times(fitted, [user], [item], [anchor], deadline)
    return ReturnTimePrediction(user, item, int(deadline), float(e[0]), curves[0])


@dataclass
class TestTargets:
    """Teacher-forced prediction targets, one row per test event."""

    users: np.ndarray
    items: np.ndarray
    anchors: np.ndarray
    times: np.ndarray
    order: np.ndarray  # 1-based rank of the event among the user's test events

    @property
    def durations(self):
        return self.times - self.anchors

    def __len__(self):
        return len(self.users)


def teacher_forced_targets(fitted: FittedModel, test: EventLog, same_item: bool = False) -> TestTargets:
    """Anchor each test event at the previous observed event.

    The first test event of a user is anchored at the user's last training
    event, later ones at the previous test event. With ``same_item`` the
    anchor is the last earlier event of the same (user, item) pair, falling
    back to the user-level anchor when the pair has none.
    """
    users, items, times = test.users, test.items, test.times
    for u in np.unique(users):
        fitted.check_known(int(u))
    if len(items) and items.max() >= fitted.train.n_items:
        raise ColdStartError("test log references items unknown to the model")
    anchors = np.empty(len(test))
    order = np.zeros(len(test), dtype=np.int64)
    last_user = {}
    last_pair = {}
    if same_item:
        tr = fitted.train
        for u, o, t in zip(tr.users, tr.items, tr.times):
            last_pair[(int(u), int(o))] = float(t)
    seen = {}
    for i, (u, o, t) in enumerate(zip(users, items, times)):
        u, o = int(u), int(o)
        user_anchor = last_user.get(u, fitted.last_event_time(u))
        anchors[i] = last_pair.get((u, o), user_anchor) if same_item else user_anchor
        seen[u] = seen.get(u, 0) + 1
        order[i] = seen[u]
        last_user[u] = float(t)
        last_pair[(u, o)] = float(t)
    return TestTargets(users.copy(), items.copy(), anchors, times.copy(), order)


def test_log_densities(fitted: FittedModel, targets: TestTargets) -> np.ndarray:
    """Per-event ``log hazard(t_i) - cumulative hazard`` of teacher-forced durations."""
    n = len(targets)
    obs = Observations(targets.users, targets.items, targets.anchors, targets.times,
                       np.full(n, np.nan), np.zeros(n, dtype=bool), np.ones(n, dtype=np.int64))
    design = HazardDesign.build(fitted.spec, fitted.train, obs, sigma=fitted.params.sigma)
    return design.per_observation(fitted.params, include_price=False)


def sample_spend_posterior(fitted: FittedModel, user: int, n_samples: int, seed: int = 0) -> np.ndarray:
    """Draws of a user's total spend.

    Each draw sums ``N_u`` bids from ``Gamma(N_u^{t_end}, kappa_u)``, where
    ``N_u`` is the user's number of training purchases; the sum is drawn
    directly as ``Gamma(N_u * N_u^{t_end}, kappa_u)``.
    """
    if n_samples <= 0:
        raise ValueError("n_samples must be positive")
    if not fitted.spec.variant.uses_price:
        raise ValueError(f"variant {fitted.spec.variant.value} has no price model")
    n_u = fitted.purchase_count(user)
    tr = fitted.train
    shape_end = max(int(np.count_nonzero((tr.users == user) & (tr.times < tr.t_end))), 1)
    kappa = float(fitted.params.kappa_u[user])
    rng = np.random.default_rng(seed)
    return rng.gamma(n_u * shape_end, 1.0 / kappa, size=n_samples)


def write_predictions(path, rows) -> None:
    """Write ``(user, item, t_d, expected_days, actual_days)`` rows."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["user", "item", "t_d", "expected_days", "actual_days"])
        for row in rows:
            w.writerow(["" if v is None else (repr(float(v)) if isinstance(v, float) else v) for v in row])
