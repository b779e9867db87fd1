"""Intensity, survival and likelihood math for the six hazard variants.

Two layers live here. The scalar functions (``decay``, ``hazard_rate``,
``cumulative_hazard``...) evaluate one context at a time and are meant for
inspection and tests. :class:`HazardDesign` compiles a whole set of
observations into flat arrays plus a sparse excitation matrix so the
log-likelihood and its gradient are evaluated in a few vectorised passes.

Time is measured in days. Cumulative hazards are sums over the integer-day
grid ``anchor + 1, anchor + 2, ...``; a precursor at time ``t_j`` counts at
grid time ``s`` only when ``t_j < s``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import sparse
from scipy.special import gammaln

from .core import EventLog, ModelParams, ModelSpec, Variant
from .exceptions import NumericError, SupportError

HAZARD_FLOOR = 1e-12

__all__ = [
    "HAZARD_FLOOR",
    "decay",
    "base_intensity",
    "social_intensity",
    "self_exciting_intensity",
    "hazard_rate",
    "cumulative_hazard",
    "survival",
    "bid_logpdf",
    "Observation",
    "Observations",
    "make_observations",
    "find_precursors",
    "HazardDesign",
    "total_log_likelihood",
]


# --- scalar reference operations -----------------------------------------

def decay(dt, sigma):
    """Exponential influence kernel ``exp(-sigma * dt)``."""
    dt = np.asarray(dt, dtype=float)
    if np.any(dt < 0):
        raise ValueError("decay is only defined for dt >= 0")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    out = np.exp(-sigma * dt)
    return float(out) if out.ndim == 0 else out


def base_intensity(params: ModelParams, user: int, item: int) -> float:
    return float(params.theta_u[user] * params.theta_o[item])


def social_intensity(params: ModelParams, target_user: int, precursors) -> float:
    """Decayed influence of earlier purchasers: ``sum_j alpha[u_j] beta[u] exp(-sigma dt_j)``.

    ``precursors`` is a sequence of ``(precursor_user, dt)`` pairs.
    """
    beta = params.beta_u[target_user]
    total = 0.0
    for src, dt in precursors:
        total += params.alpha_u[src] * beta * decay(dt, params.sigma)
    return float(total)


def self_exciting_intensity(params: ModelParams, target_user: int, own_history) -> float:
    """Same kernel as :func:`social_intensity` over the user's own past events.

    ``own_history`` holds either bare ``dt`` values or ``(user, dt)`` pairs.
    """
    dts = [h[1] if isinstance(h, (tuple, list)) else h for h in own_history]
    return social_intensity(params, target_user, [(target_user, dt) for dt in dts])


def _excitation(spec: ModelSpec, params: ModelParams, user: int, precursors) -> float:
    if spec.variant.uses_self_excitation:
        return self_exciting_intensity(params, user, precursors)
    if spec.variant.uses_social:
        return social_intensity(params, user, precursors)
    return 0.0


def hazard_rate(spec: ModelSpec, params: ModelParams, context, precursors=()) -> float:
    """Hazard of one ``(user, item, t)`` context under ``spec.variant``.

    ``precursors`` are ``(precursor_user, dt)`` pairs; for the Hawkes variant
    they are the user's own past events.
    """
    user, item, t = context
    v = spec.variant
    base = base_intensity(params, user, item)
    if v.uses_price:
        base *= params.kappa_u[user]
    if v is Variant.PP:
        lam = base
    else:
        s = _excitation(spec, params, user, precursors)
        if v.exponential:
            lam = base * math.exp(float(params.w_at(t, spec.time_bucket_days)) * s)
        else:
            lam = base + s
    if not math.isfinite(lam):
        raise NumericError(f"non-finite hazard for variant {v.value} (user={user}, item={item})")
    return max(lam, HAZARD_FLOOR)


def cumulative_hazard(spec: ModelSpec, params: ModelParams, context, precursor_stream=(),
                      t: float = 0.0) -> float:
    """Daily-grid cumulative hazard ``sum_{k=1}^{floor(t)} hazard(anchor + k)``.

    ``context`` is ``(user, item, anchor)``; ``precursor_stream`` holds
    ``(precursor_user, absolute_time)`` pairs, each counted only at grid
    times strictly after it. At each grid time only the ``spec.precursor_cap``
    most recent of them count.
    """
    if t < 0:
        raise ValueError("t must be >= 0")
    user, item, anchor = context
    stream = sorted(precursor_stream, key=lambda p: p[1])
    cap = spec.precursor_cap
    total = 0.0
    for k in range(1, int(math.floor(t)) + 1):
        s = anchor + k
        pre = [(src, s - tj) for src, tj in stream if tj < s]
        if cap is not None:
            pre = pre[-cap:]
        total += hazard_rate(spec, params, (user, item, s), pre)
    return total


def survival(spec: ModelSpec, params: ModelParams, context, precursor_stream=(),
             t: float = 0.0) -> float:
    return math.exp(-cumulative_hazard(spec, params, context, precursor_stream, t))


def bid_logpdf(price, shape, kappa):
    """Log density of a Gamma(shape, rate=kappa) bid, evaluated in log space."""
    price = np.asarray(price, dtype=float)
    shape = np.asarray(shape, dtype=float)
    kappa = np.asarray(kappa, dtype=float)
    if np.any(price <= 0):
        raise SupportError("bid prices must be strictly positive")
    if np.any(kappa <= 0):
        raise SupportError("kappa must be strictly positive")
    out = shape * np.log(kappa) + (shape - 1.0) * np.log(price) - kappa * price - gammaln(shape)
    return float(out) if out.ndim == 0 else out


# --- observations --------------------------------------------------------

@dataclass(frozen=True)
class Observation:
    user: int
    item: int
    duration: float
    event_time: float
    price: Optional[float]
    censored: bool
    shape: int = 1

    @property
    def anchor(self) -> float:
        return self.event_time - self.duration


@dataclass(frozen=True, eq=False)
class Observations:
    """Column-wise observations; censored rows have ``price = nan``."""

    users: np.ndarray
    items: np.ndarray
    anchors: np.ndarray
    event_times: np.ndarray
    prices: np.ndarray
    censored: np.ndarray
    shapes: np.ndarray

    def __len__(self):
        return len(self.users)

    @property
    def durations(self):
        return self.event_times - self.anchors

    def __getitem__(self, i) -> Observation:
        cens = bool(self.censored[i])
        return Observation(int(self.users[i]), int(self.items[i]), float(self.durations[i]),
                           float(self.event_times[i]), None if cens else float(self.prices[i]),
                           cens, int(self.shapes[i]))

    def to_list(self) -> list:
        return [self[i] for i in range(len(self))]

    @classmethod
    def from_list(cls, obs: Sequence[Observation]) -> "Observations":
        return cls(
            np.array([o.user for o in obs], dtype=np.int64),
            np.array([o.item for o in obs], dtype=np.int64),
            np.array([o.anchor for o in obs], dtype=float),
            np.array([o.event_time for o in obs], dtype=float),
            np.array([np.nan if o.price is None else o.price for o in obs], dtype=float),
            np.array([o.censored for o in obs], dtype=bool),
            np.array([o.shape for o in obs], dtype=np.int64),
        )


def _previous_event_times(log: EventLog):
    """Per event: time of the same user's previous event (0 for the first),
    and the number of that user's events strictly earlier in time."""
    n = len(log)
    prev = np.zeros(n)
    earlier = np.zeros(n, dtype=np.int64)
    order = np.lexsort((np.arange(n), log.users))  # by user, then time order
    u_sorted = log.users[order]
    t_sorted = log.times[order]
    starts = np.r_[0, np.flatnonzero(np.diff(u_sorted)) + 1]
    for a, b in zip(starts, np.r_[starts[1:], n]):
        ts = t_sorted[a:b]
        idx = order[a:b]
        prev[idx[1:]] = ts[:-1]
        earlier[idx] = np.searchsorted(ts, ts, side="left")
    return prev, earlier


def make_observations(log: EventLog, censor: bool = True) -> Observations:
    """One observation per event plus, per active user, one censored
    observation from the user's last event to ``log.t_end`` (on the item of
    that last event)."""
    prev, earlier = _previous_event_times(log)
    users, items = log.users, log.items
    anchors, ends = prev, log.times.copy()
    prices = log.prices.astype(float)
    cens = np.zeros(len(log), dtype=bool)
    shapes = np.maximum(earlier, 1)
    if censor and len(log):
        last = np.full(log.n_users, -1, dtype=np.int64)
        last[users] = np.arange(len(log))  # later events overwrite earlier ones
        last = last[last >= 0]
        users = np.r_[users, log.users[last]]
        items = np.r_[items, log.items[last]]
        anchors = np.r_[anchors, log.times[last]]
        ends = np.r_[ends, np.full(len(last), log.t_end)]
        prices = np.r_[prices, np.full(len(last), np.nan)]
        cens = np.r_[cens, np.ones(len(last), dtype=bool)]
        shapes = np.r_[shapes, np.ones(len(last), dtype=np.int64)]
    return Observations(users, items, anchors, ends, prices, cens, shapes)


class _PrecursorIndex:
    """Lookup of earlier events grouped by item (social) or by user (self)."""

    def __init__(self, history: EventLog, by_user: bool):
        self.by_user = by_user
        key = history.users if by_user else history.items
        n_keys = history.n_users if by_user else history.n_items
        order = np.argsort(key, kind="stable")  # history is time-sorted already
        self.times = history.times[order]
        self.users = history.users[order]
        bounds = np.searchsorted(key[order], np.arange(n_keys + 1))
        self.bounds = bounds

    def _before(self, a, stop, user, cap):
        """Positions in ``[a, stop)`` excluding ``user`` (social index only),
        restricted to the last ``cap`` of them."""
        if cap is None:
            sel = np.arange(a, stop)
            return sel if self.by_user else sel[self.users[sel] != user]
        if self.by_user:
            return np.arange(max(a, stop - cap), stop)
        lo = stop
        sel = np.empty(0, dtype=np.int64)
        while lo > a and len(sel) < cap:
            lo = max(a, lo - (cap - len(sel)))
            sel = np.arange(lo, stop)
            sel = sel[self.users[sel] != user]
        return sel[-cap:]

    def _range(self, user, item):
        key = user if self.by_user else item
        return self.bounds[key], self.bounds[key + 1]

    def lookup(self, user: int, item: int, before: float, cap: Optional[int]):
        """The (at most ``cap``) most recent precursors strictly before ``before``."""
        a, b = self._range(user, item)
        k = a + int(np.searchsorted(self.times[a:b], before, side="left"))
        sel = self._before(a, k, user, cap)
        return self.users[sel], self.times[sel]

    def window(self, user: int, item: int, anchor: float, end: float, cap: Optional[int]):
        """Precursors that matter on ``(anchor, end]`` under a per-time cap.

        Returns ``(src, times, upper)``: precursor ``r`` counts at time ``s``
        when ``times[r] < s <= upper[r]``; ``upper`` is the time of the
        precursor ``cap`` places later (``inf`` if none before ``end``).
        """
        a, b = self._range(user, item)
        ts = self.times[a:b]
        k = a + int(np.searchsorted(ts, end, side="left"))
        m = a + int(np.searchsorted(ts, anchor, side="right"))
        inside = np.arange(m, k)
        if not self.by_user:
            inside = inside[self.users[inside] != user]
        sel = np.r_[self._before(a, m, user, cap), inside].astype(np.int64)
        times = self.times[sel]
        upper = np.full(len(sel), np.inf)
        if cap is not None and len(sel) > cap:
            upper[:-cap] = times[cap:]
        return self.users[sel], times, upper


def find_precursors(spec: ModelSpec, history: EventLog, user: int, item: int, t: float):
    """Precursor list ``[(precursor_user, t - t_j), ...]`` for a target at time ``t``.

    Social variants use other users' earlier purchases of ``item``; the
    Hawkes variant uses the user's own earlier purchases of any item. At most
    ``spec.precursor_cap`` most recent entries are kept, oldest first.
    """
    v = spec.variant
    if not v.has_excitation:
        return []
    idx = _PrecursorIndex(history, by_user=v.uses_self_excitation)
    src, tj = idx.lookup(user, item, t, spec.precursor_cap)
    return [(int(s), float(t - x)) for s, x in zip(src, tj)]


# --- vectorised design ---------------------------------------------------

@dataclass
class HazardDesign:
    """Compiled evaluation points for a set of observations.

    Rows ``0 .. n_events-1`` are hazard-at-event points; the remaining rows are
    daily grid points whose hazards are summed into cumulative hazards.
    ``excite`` is a (points x users) matrix with entries ``exp(-sigma * dt)``
    so that the excitation at each point is ``beta[user] * (excite @ alpha)``.
    """

    spec: ModelSpec
    n_users: int
    n_items: int
    n_obs: int
    obs_of_event: np.ndarray
    point_obs: np.ndarray
    point_users: np.ndarray
    point_items: np.ndarray
    point_times: np.ndarray
    n_events: int
    event_prices: np.ndarray
    event_shapes: np.ndarray
    excite: Optional[sparse.csr_matrix] = None
    excite_dt: Optional[np.ndarray] = None
    sigma: Optional[float] = None
    grid_n: Optional[np.ndarray] = None

    @classmethod
    def build(cls, spec: ModelSpec, history: EventLog, obs: Observations,
              n_days: Optional[np.ndarray] = None, sigma: float = 0.1) -> "HazardDesign":
        """Compile ``obs`` against precursors drawn from ``history``.

        ``n_days`` overrides the number of grid days per observation; by
        default uncensored observations use ``ceil(duration)`` and censored
        ones ``floor(duration)``.
        """
        dur = obs.durations
        if n_days is None:
            n_days = np.where(obs.censored, np.floor(dur + 1e-9), np.ceil(dur - 1e-9))
        n_days = np.maximum(np.asarray(n_days, dtype=np.int64), 0)
        uncens = np.flatnonzero(~obs.censored)
        n_ev = len(uncens)
        grid_obs = np.repeat(np.arange(len(obs)), n_days)
        grid_start = np.cumsum(n_days) - n_days
        tau = np.arange(len(grid_obs)) - np.repeat(grid_start, n_days) + 1
        grid_times = obs.anchors[grid_obs] + tau

        point_obs = np.r_[uncens, grid_obs]
        point_times = np.r_[obs.event_times[uncens], grid_times]
        design = cls(
            spec=spec, n_users=history.n_users, n_items=history.n_items, n_obs=len(obs),
            obs_of_event=uncens, point_obs=point_obs,
            point_users=obs.users[point_obs], point_items=obs.items[point_obs],
            point_times=point_times, n_events=n_ev,
            event_prices=obs.prices[uncens], event_shapes=obs.shapes[uncens],
            grid_n=n_days,
        )
        if spec.variant.has_excitation:
            design._build_excitation(history, obs, n_days, grid_start, sigma)
        return design

    def _build_excitation(self, history, obs, n_days, grid_start, sigma):
        idx = _PrecursorIndex(history, by_user=self.spec.variant.uses_self_excitation)
        cap = self.spec.precursor_cap
        src_l, tj_l, up_l = [], [], []
        cnt = np.zeros(len(obs), dtype=np.int64)
        for i in range(len(obs)):
            s, t, up = idx.window(int(obs.users[i]), int(obs.items[i]), float(obs.anchors[i]),
                                  float(obs.event_times[i]), cap)
            src_l.append(s)
            tj_l.append(t)
            up_l.append(up)
            cnt[i] = len(s)
        pair_obs = np.repeat(np.arange(len(obs)), cnt)
        pair_src = np.concatenate(src_l) if src_l else np.empty(0, dtype=np.int64)
        pair_t = np.concatenate(tj_l) if tj_l else np.empty(0)
        pair_up = np.concatenate(up_l) if up_l else np.empty(0)
        a = obs.anchors[pair_obs]

        # event rows: precursors still within the cap at the event time
        ev_row = np.full(len(obs), -1, dtype=np.int64)
        ev_row[self.obs_of_event] = np.arange(self.n_events)
        has_ev = (ev_row[pair_obs] >= 0) & np.isinf(pair_up)
        e_rows = ev_row[pair_obs][has_ev]
        e_cols = pair_src[has_ev]
        e_dt = obs.event_times[pair_obs][has_ev] - pair_t[has_ev]

        # grid rows: precursor j counts on tau0..tau1 with anchor + tau in (t_j, upper_j]
        tau0 = np.maximum(np.floor(pair_t - a).astype(np.int64) + 1, 1)
        tau1 = np.minimum(np.floor(pair_up - a), n_days[pair_obs]).astype(np.int64)
        reps = np.maximum(tau1 - tau0 + 1, 0)
        g_pair = np.repeat(np.arange(len(pair_obs)), reps)
        offs = np.arange(len(g_pair)) - np.repeat(np.cumsum(reps) - reps, reps)
        g_tau = tau0[g_pair] + offs
        g_rows = self.n_events + grid_start[pair_obs[g_pair]] + g_tau - 1
        g_cols = pair_src[g_pair]
        g_dt = a[g_pair] + g_tau - pair_t[g_pair]

        rows = np.r_[e_rows, g_rows]
        cols = np.r_[e_cols, g_cols]
        dt = np.r_[e_dt, g_dt]
        order = np.argsort(rows, kind="stable")
        rows, cols, dt = rows[order], cols[order], dt[order]
        n_points = len(self.point_times)
        indptr = np.r_[0, np.cumsum(np.bincount(rows, minlength=n_points))]
        self.excite_dt = dt
        self.excite = sparse.csr_matrix((np.exp(-sigma * dt), cols, indptr),
                                        shape=(n_points, self.n_users))
        self.sigma = sigma

    @property
    def n_points(self) -> int:
        return len(self.point_times)

    def _set_sigma(self, sigma: float):
        if self.excite is not None and sigma != self.sigma:
            self.excite.data[:] = np.exp(-sigma * self.excite_dt)
            self.sigma = sigma

    def _buckets(self, n_buckets):
        b = np.floor(self.point_times / self.spec.time_bucket_days).astype(np.int64)
        return np.clip(b, 0, n_buckets - 1)

    def intensities(self, params: ModelParams):
        """Return ``(lam, parts)``; ``lam`` is floored, ``parts`` holds the
        intermediates needed for the gradient."""
        v = self.spec.variant
        u, o = self.point_users, self.point_items
        base = params.theta_u[u] * params.theta_o[o]
        if v.uses_price:
            base = base * params.kappa_u[u]
        parts = {"base": base}
        with np.errstate(over="ignore", invalid="ignore"):
            if v is Variant.PP:
                raw = base
            else:
                self._set_sigma(params.sigma)
                A = self.excite @ params.alpha_u
                S = params.beta_u[u] * A
                parts.update(A=A, S=S)
                if v.exponential:
                    b = self._buckets(len(params.w))
                    wb = params.w[b]
                    E = np.exp(wb * S)
                    raw = base * E
                    parts.update(b=b, wb=wb, E=E)
                else:
                    raw = base + S
        parts["raw"] = raw
        return np.maximum(raw, HAZARD_FLOOR), parts

    def _price_term(self, params: ModelParams):
        if not self.spec.variant.uses_price or self.n_events == 0:
            return np.zeros(self.n_events)
        kappa = params.kappa_u[self.point_users[:self.n_events]]
        return bid_logpdf(self.event_prices, self.event_shapes, kappa)

    def per_observation(self, params: ModelParams, include_price: bool = True) -> np.ndarray:
        """Log-likelihood contribution of each observation."""
        lam, _ = self.intensities(params)
        out = np.zeros(self.n_obs)
        ev = self.n_events
        contrib = np.r_[np.log(lam[:ev]), -lam[ev:]]
        if include_price:
            contrib[:ev] += self._price_term(params)
        np.add.at(out, self.point_obs, contrib)
        return out

    def loglik(self, params: ModelParams, include_price: bool = True) -> float:
        return float(math.fsum(self.per_observation(params, include_price)))

    def cumulative(self, params: ModelParams) -> np.ndarray:
        """Grid hazards of each observation, as a flat array in grid order."""
        lam, _ = self.intensities(params)
        return lam[self.n_events:]

    def loglik_and_grad(self, params: ModelParams, include_price: bool = True):
        """Log-likelihood and its gradient with respect to every ModelParams
        field (a dict keyed by field name; ``sigma`` is a float)."""
        v = self.spec.variant
        lam, parts = self.intensities(params)
        ev = self.n_events
        with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
            ll = np.log(lam[:ev]).sum() - lam[ev:].sum()
            g = np.r_[1.0 / lam[:ev], -np.ones(self.n_points - ev)]
        g = np.where(parts["raw"] < HAZARD_FLOOR, 0.0, g)
        u, o = self.point_users, self.point_items
        nu, no = self.n_users, self.n_items
        grad = {
            "theta_u": np.zeros(nu), "theta_o": np.zeros(no), "kappa_u": np.zeros(nu),
            "alpha_u": np.zeros(nu), "beta_u": np.zeros(nu), "w": np.zeros(len(params.w)),
            "sigma": 0.0,
        }
        if v.exponential:
            d_base = g * parts["E"]
            d_S = g * parts["raw"] * parts["wb"]
            grad["w"] = np.bincount(parts["b"], weights=g * parts["raw"] * parts["S"],
                                    minlength=len(params.w))
        else:
            d_base = g
            d_S = g
        base = parts["base"]
        tu, to = params.theta_u[u], params.theta_o[o]
        grad["theta_u"] = np.bincount(u, weights=d_base * base / np.where(tu > 0, tu, 1.0), minlength=nu)
        grad["theta_o"] = np.bincount(o, weights=d_base * base / np.where(to > 0, to, 1.0), minlength=no)
        if v.uses_price:
            ku = params.kappa_u[u]
            grad["kappa_u"] = np.bincount(u, weights=d_base * base / ku, minlength=nu)
            if include_price and ev:
                ke = params.kappa_u[u[:ev]]
                ll += self._price_term(params).sum()
                grad["kappa_u"] += np.bincount(u[:ev], weights=self.event_shapes / ke - self.event_prices,
                                               minlength=nu)
        if v.has_excitation:
            beta_p = params.beta_u[u]
            grad["beta_u"] = np.bincount(u, weights=d_S * parts["A"], minlength=nu)
            grad["alpha_u"] = self.excite.T @ (d_S * beta_p)
            d_excite = sparse.csr_matrix((-self.excite_dt * self.excite.data, self.excite.indices,
                                          self.excite.indptr), shape=self.excite.shape)
            grad["sigma"] = float(np.dot(d_S * beta_p, d_excite @ params.alpha_u))
        return float(ll), grad


def total_log_likelihood(spec: ModelSpec, params: ModelParams, train: EventLog,
                         observations=None) -> float:
    """Joint log-likelihood of the observed durations, censoring and bids."""
    if observations is None:
        observations = make_observations(train)
    elif not isinstance(observations, Observations):
        observations = Observations.from_list(list(observations))
    design = HazardDesign.build(spec, train, observations, sigma=params.sigma)
    per = design.per_observation(params)
    bad = np.flatnonzero(~np.isfinite(per))
    if len(bad):
        raise NumericError(f"non-finite log-likelihood at observation {int(bad[0])}")
    return float(math.fsum(per))
