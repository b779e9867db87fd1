"""Domain types for purchase logs and model parameters."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

from .exceptions import UnindexedIdentifierError

__all__ = [
    "Variant",
    "PurchaseEvent",
    "EventLog",
    "ModelParams",
    "ModelSpec",
    "cumulative_purchase_count",
    "user_total_spend",
    "split_by_time",
]


class Variant(str, enum.Enum):
    PP = "PP"
    HP = "HP"
    CC = "CC"
    IB = "IB"
    MHMl = "MHMl"
    MHMe = "MHMe"

    @classmethod
    def parse(cls, value) -> "Variant":
        if isinstance(value, cls):
            return value
        for v in cls:
            if v.value.lower() == str(value).lower():
                return v
        raise ValueError(f"unknown variant {value!r}; expected one of {[v.value for v in cls]}")

    @property
    def uses_price(self) -> bool:
        return self in (Variant.MHMl, Variant.MHMe)

    @property
    def uses_social(self) -> bool:
        return self in (Variant.CC, Variant.IB, Variant.MHMl, Variant.MHMe)

    @property
    def uses_self_excitation(self) -> bool:
        return self is Variant.HP

    @property
    def has_excitation(self) -> bool:
        return self is not Variant.PP

    @property
    def exponential(self) -> bool:
        """Whether excitation enters through a Cox link ``exp(w(t) * s)``."""
        return self in (Variant.CC, Variant.MHMe)


@dataclass(frozen=True)
class PurchaseEvent:
    user: int
    item: int
    time: float
    price: float

    def __post_init__(self):
        if self.time < 0:
            raise ValueError(f"event time must be >= 0, got {self.time}")
        if self.price < 0:
            raise ValueError(f"event price must be >= 0, got {self.price}")


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class EventLog:
    """Time-sorted purchase events over the window ``[0, t_end]``.

    Events are stored column-wise. ``user_ids`` / ``item_ids`` map the dense
    indices back to the raw identifiers seen at ingestion.
    """

    users: np.ndarray
    items: np.ndarray
    times: np.ndarray
    prices: np.ndarray
    t_end: float
    n_users: int
    n_items: int
    user_ids: tuple = ()
    item_ids: tuple = ()

    def __post_init__(self):
        users = _frozen(self.users, np.int64)
        items = _frozen(self.items, np.int64)
        times = _frozen(self.times, np.float64)
        prices = _frozen(self.prices, np.float64)
        if not (len(users) == len(items) == len(times) == len(prices)):
            raise ValueError("event columns have different lengths")
        order = np.argsort(times, kind="stable")
        if np.any(order != np.arange(len(order))):
            users, items, times, prices = (
                _frozen(a[order], a.dtype) for a in (users, items, times, prices)
            )
        object.__setattr__(self, "users", users)
        object.__setattr__(self, "items", items)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "prices", prices)
        object.__setattr__(self, "t_end", float(self.t_end))
        user_ids = tuple(self.user_ids) or tuple(str(i) for i in range(self.n_users))
        item_ids = tuple(self.item_ids) or tuple(str(i) for i in range(self.n_items))
        object.__setattr__(self, "user_ids", user_ids)
        object.__setattr__(self, "item_ids", item_ids)
        if len(user_ids) != self.n_users or len(item_ids) != self.n_items:
            raise ValueError("identifier maps do not match n_users / n_items")
        if len(times):
            if times[0] < 0 or times[-1] > self.t_end:
                raise ValueError("event times must lie in [0, t_end]")
            if users.min() < 0 or users.max() >= self.n_users:
                raise UnindexedIdentifierError("user index out of range")
            if items.min() < 0 or items.max() >= self.n_items:
                raise UnindexedIdentifierError("item index out of range")
        if np.any(prices < 0):
            raise ValueError("prices must be non-negative")

    @classmethod
    def from_events(cls, events: Sequence[PurchaseEvent], t_end: float,
                    n_users: Optional[int] = None, n_items: Optional[int] = None) -> "EventLog":
        users = [e.user for e in events]
        items = [e.item for e in events]
        if n_users is None:
            n_users = max(users, default=-1) + 1
        if n_items is None:
            n_items = max(items, default=-1) + 1
        return cls(users, items, [e.time for e in events], [e.price for e in events],
                   t_end, n_users, n_items)

    def __len__(self) -> int:
        return len(self.times)

    def __iter__(self) -> Iterator[PurchaseEvent]:
        return iter(self.events)

    @property
    def events(self) -> list:
        return [PurchaseEvent(int(u), int(o), float(t), float(p))
                for u, o, t, p in zip(self.users, self.items, self.times, self.prices)]

    def subset(self, mask, t_end: Optional[float] = None) -> "EventLog":
        """Events selected by a boolean mask, keeping the index space."""
        return EventLog(self.users[mask], self.items[mask], self.times[mask], self.prices[mask],
                        self.t_end if t_end is None else t_end, self.n_users, self.n_items,
                        self.user_ids, self.item_ids)

    def user_event_counts(self) -> np.ndarray:
        return np.bincount(self.users, minlength=self.n_users)

    def item_event_counts(self) -> np.ndarray:
        return np.bincount(self.items, minlength=self.n_items)

    def _check_user(self, user):
        if not 0 <= int(user) < self.n_users:
            raise UnindexedIdentifierError(f"user {user} is not indexed in this log")


@dataclass(frozen=True)
class ModelSpec:
    variant: Variant = Variant.MHMe
    precursor_cap: Optional[int] = 100
    time_bucket_days: int = 7

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant.parse(self.variant))
        if self.precursor_cap is not None and self.precursor_cap < 1:
            raise ValueError("precursor_cap must be a positive integer or None")
        if int(self.time_bucket_days) < 1:
            raise ValueError("time_bucket_days must be >= 1")

    def n_buckets(self, t_max: float) -> int:
        return int(np.floor(t_max / self.time_bucket_days)) + 1

    def bucket(self, t):
        return np.floor(np.asarray(t, dtype=float) / self.time_bucket_days).astype(np.int64)


@dataclass
class ModelParams:
    """All latent parameters in natural (constrained) space.

    Fields a variant does not use keep neutral values: ``kappa_u = 1``,
    ``alpha_u = beta_u = 0`` and ``w = 0``.
    """

    theta_u: np.ndarray
    theta_o: np.ndarray
    kappa_u: np.ndarray
    alpha_u: np.ndarray
    beta_u: np.ndarray
    w: np.ndarray
    sigma: float = 0.1

    def __post_init__(self):
        for name in ("theta_u", "theta_o", "kappa_u", "alpha_u", "beta_u", "w"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        self.sigma = float(self.sigma)

    @classmethod
    def neutral(cls, n_users: int, n_items: int, n_buckets: int, sigma: float = 0.1) -> "ModelParams":
        return cls(np.ones(n_users), np.ones(n_items), np.ones(n_users), np.zeros(n_users),
                   np.zeros(n_users), np.zeros(n_buckets), sigma)

    def copy(self) -> "ModelParams":
        return ModelParams(self.theta_u.copy(), self.theta_o.copy(), self.kappa_u.copy(),
                           self.alpha_u.copy(), self.beta_u.copy(), self.w.copy(), self.sigma)

    def validate(self):
        if np.any(self.theta_u <= 0) or np.any(self.theta_o <= 0) or np.any(self.kappa_u <= 0):
            raise ValueError("theta_u, theta_o and kappa_u must be strictly positive")
        if np.any(self.alpha_u < 0) or np.any(self.beta_u < 0):
            raise ValueError("alpha_u and beta_u must be non-negative")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")

    def w_at(self, t, bucket_days: int):
        b = np.floor(np.asarray(t, dtype=float) / bucket_days).astype(np.int64)
        return self.w[np.clip(b, 0, len(self.w) - 1)]

    def to_dict(self) -> dict:
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in vars(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelParams":
        return cls(**d)


def cumulative_purchase_count(log: EventLog, user: int, t: float) -> int:
    """Number of the user's events strictly before ``t``, never less than one."""
    if t < 0:
        raise ValueError("t must be >= 0")
    log._check_user(user)
    n = int(np.count_nonzero((log.users == user) & (log.times < t)))
    return max(n, 1)


def user_total_spend(log: EventLog, user: int) -> float:
    log._check_user(user)
    return float(log.prices[log.users == user].sum())


def split_by_time(log: EventLog, cutoff: float):
    """Split into ``(train, test)`` at ``cutoff`` (train keeps ``time <= cutoff``).

    Test events of users or items absent from train are dropped.
    """
    if not 0 < cutoff < log.t_end:
        raise ValueError(f"cutoff {cutoff} outside the open window (0, {log.t_end})")
    in_train = log.times <= cutoff
    train = log.subset(in_train, t_end=cutoff)
    known_u = train.user_event_counts() > 0
    known_o = train.item_event_counts() > 0
    keep = ~in_train & known_u[log.users] & known_o[log.items]
    return train, log.subset(keep)
