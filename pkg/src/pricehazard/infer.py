"""Mean-field ADVI with Adagrad, plus a MAP fallback on the same machinery.

Every scalar parameter gets an independent Gaussian in unconstrained space.
Positive parameters with a Gamma prior (``kappa_u``) use a log transform,
uniformly bounded ones (``theta``, ``alpha``, ``beta``, learned ``sigma``) a
scaled logit, and the covariate weights ``w`` the identity.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy.special import expit, gammaln, logit

from .core import EventLog, ModelParams, ModelSpec
from .exceptions import FitDivergedError, SupportError
from .hazard import HazardDesign, make_observations

log = logging.getLogger(__name__)

LOG, LOGIT, IDENTITY = "log", "logit", "identity"
_KIND_CODE = {LOG: 0, LOGIT: 1, IDENTITY: 2}
_HALF_LOG_2PI_E = 0.5 * (1.0 + math.log(2.0 * math.pi))


# --- transforms ------------------------------------------------------------

def transform(value, kind: str = LOG, bound: float = 1.0):
    """Map a constrained value to unconstrained space."""
    value = np.asarray(value, dtype=float)
    if kind == LOG:
        if np.any(value <= 0):
            raise SupportError("log transform needs strictly positive values")
        out = np.log(value)
    elif kind == LOGIT:
        if np.any(value <= 0) or np.any(value >= bound):
            raise SupportError(f"logit transform needs values in (0, {bound})")
        out = logit(value / bound)
    elif kind == IDENTITY:
        out = value.copy()
    else:
        raise ValueError(f"unknown transform {kind!r}")
    return float(out) if out.ndim == 0 else out


def untransform(z, kind: str = LOG, bound: float = 1.0):
    """Inverse of :func:`transform`."""
    z = np.asarray(z, dtype=float)
    if kind == LOG:
        out = np.exp(z)
    elif kind == LOGIT:
        out = bound * expit(z)
    elif kind == IDENTITY:
        out = z.copy()
    else:
        raise ValueError(f"unknown transform {kind!r}")
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class Block:
    name: str
    size: int
    kind: str
    bound: float = 1.0


class ParamLayout:
    """Flat-vector layout of a set of named parameter blocks."""

    def __init__(self, blocks):
        self.blocks = tuple(blocks)
        self.slices = {}
        start = 0
        for b in self.blocks:
            self.slices[b.name] = slice(start, start + b.size)
            start += b.size
        self.size = start
        self._code = np.concatenate([np.full(b.size, _KIND_CODE[b.kind]) for b in self.blocks]) \
            if self.blocks else np.zeros(0, dtype=int)
        self._bound = np.concatenate([np.full(b.size, float(b.bound)) for b in self.blocks]) \
            if self.blocks else np.zeros(0)

    @property
    def names(self):
        return tuple(b.name for b in self.blocks)

    def split(self, flat) -> dict:
        return {name: flat[s] for name, s in self.slices.items()}

    def join(self, parts: dict) -> np.ndarray:
        out = np.zeros(self.size)
        for name, s in self.slices.items():
            out[s] = parts[name]
        return out

    def to_unconstrained(self, x):
        x = np.asarray(x, dtype=float)
        out = x.copy()
        for b in self.blocks:
            out[self.slices[b.name]] = transform(x[self.slices[b.name]], b.kind, b.bound)
        return out

    def to_constrained(self, z):
        """Return ``(x, dx/dz, log|J|, dlog|J|/dz)`` for the diagonal transform."""
        z = np.asarray(z, dtype=float)
        code, U = self._code, self._bound
        is_log, is_logit = code == 0, code == 1
        x = z.copy()
        dxdz = np.ones_like(z)
        dlogj = np.zeros_like(z)
        ez = np.exp(z[is_log])
        x[is_log] = ez
        dxdz[is_log] = ez
        dlogj[is_log] = 1.0
        s = expit(z[is_logit])
        x[is_logit] = U[is_logit] * s
        dxdz[is_logit] = U[is_logit] * s * (1.0 - s)
        dlogj[is_logit] = 1.0 - 2.0 * s
        with np.errstate(divide="ignore"):
            logj = np.sum(z[is_log]) + np.sum(np.log(dxdz[is_logit]))
        return x, dxdz, float(logj), dlogj


# --- configuration ---------------------------------------------------------

@dataclass
class FitConfig:
    """Optimiser settings and prior hyperparameters.

    ``kappa_prior_rate=None`` sets the Gamma prior rate so that its mean equals
    the average per-user bid-rate estimate of the training data.
    """

    iterations: int = 2000
    learning_rate: float = 0.1
    mc_samples: int = 1
    seed: int = 0
    kappa_prior_shape: float = 2.0
    kappa_prior_rate: Optional[float] = None
    w_step_std: float = 0.1
    w_init_std: float = 1.0
    theta_bound: float = 100.0
    excite_bound: float = 10.0
    sigma: float = 0.1
    learn_sigma: bool = False
    sigma_bound: float = 10.0
    tolerance: float = 1e-6
    init_log_std: float = -2.0
    horizon_days: float = 180.0

    def __post_init__(self):
        if self.iterations <= 0:
            raise ValueError("iterations must be positive")
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0 < self.sigma < self.sigma_bound:
            raise ValueError("sigma must lie in (0, sigma_bound)")

    def to_dict(self) -> dict:
        return asdict(self)


# --- targets -----------------------------------------------------------------

def gamma_logpdf(x, shape, rate):
    x = np.asarray(x, dtype=float)
    return shape * np.log(rate) + (shape - 1.0) * np.log(x) - rate * x - gammaln(shape)


def random_walk_logpdf(w, step_std, init_std):
    """Gaussian random walk: ``w[0] ~ N(0, init_std)``, ``w[k]-w[k-1] ~ N(0, step_std)``."""
    w = np.asarray(w, dtype=float)
    if len(w) == 0:
        return 0.0
    d = np.diff(w)
    return float(-0.5 * (w[0] / init_std) ** 2 - math.log(init_std)
                 - 0.5 * np.sum((d / step_std) ** 2) - len(d) * math.log(step_std)
                 - 0.5 * len(w) * math.log(2 * math.pi))


def _random_walk_grad(w, step_std, init_std):
    g = np.zeros_like(w)
    if len(w) == 0:
        return g
    g[0] = -w[0] / init_std ** 2
    d = np.diff(w) / step_std ** 2
    g[1:] -= d
    g[:-1] += d
    return g


def per_user_kappa_estimate(train: EventLog) -> np.ndarray:
    """Closed-form bid rate per user, ``sum(shape) / sum(price)``; nan without events."""
    obs = make_observations(train, censor=False)
    n = np.bincount(obs.users, weights=obs.shapes, minlength=train.n_users)
    p = np.bincount(obs.users, weights=obs.prices, minlength=train.n_users)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(p > 0, n / p, np.nan)


class HazardPosterior:
    """Unnormalised log posterior of a hazard variant on one training log."""

    def __init__(self, spec: ModelSpec, train: EventLog, config: FitConfig):
        if len(train) == 0:
            raise ValueError("cannot fit an empty training log")
        self.spec, self.train, self.config = spec, train, config
        v = spec.variant
        self.n_buckets = spec.n_buckets(train.t_end + config.horizon_days)
        blocks = [Block("theta_u", train.n_users, LOGIT, config.theta_bound),
                  Block("theta_o", train.n_items, LOGIT, config.theta_bound)]
        if v.uses_price:
            blocks.append(Block("kappa_u", train.n_users, LOG))
        if v.has_excitation:
            blocks += [Block("alpha_u", train.n_users, LOGIT, config.excite_bound),
                       Block("beta_u", train.n_users, LOGIT, config.excite_bound)]
        if v.exponential:
            blocks.append(Block("w", self.n_buckets, IDENTITY))
        if config.learn_sigma and v.has_excitation:
            blocks.append(Block("sigma", 1, LOGIT, config.sigma_bound))
        self.layout = ParamLayout(blocks)
        self.kappa_hat = per_user_kappa_estimate(train)
        rate = config.kappa_prior_rate
        if rate is None:
            finite = self.kappa_hat[np.isfinite(self.kappa_hat)]
            rate = config.kappa_prior_shape / (finite.mean() if len(finite) else 1.0)
        self.kappa_prior_rate = float(rate)
        self.design = HazardDesign.build(spec, train, make_observations(train), sigma=config.sigma)

    def params(self, x) -> ModelParams:
        """ModelParams from a flat natural-space vector (unused fields neutral)."""
        parts = self.layout.split(np.asarray(x, dtype=float))
        p = ModelParams.neutral(self.train.n_users, self.train.n_items, self.n_buckets,
                                self.config.sigma)
        for name, val in parts.items():
            if name == "sigma":
                p.sigma = float(val[0])
            else:
                setattr(p, name, np.array(val))
        return p

    def flatten(self, params: ModelParams) -> np.ndarray:
        parts = {name: (np.atleast_1d(params.sigma) if name == "sigma" else getattr(params, name))
                 for name in self.layout.names}
        return self.layout.join(parts)

    def log_prior(self, params: ModelParams) -> float:
        c = self.config
        lp = 0.0
        for b in self.layout.blocks:
            if b.kind == LOGIT:
                lp -= b.size * math.log(b.bound)
        if "kappa_u" in self.layout.slices:
            lp += float(np.sum(gamma_logpdf(params.kappa_u, c.kappa_prior_shape, self.kappa_prior_rate)))
        if "w" in self.layout.slices:
            lp += random_walk_logpdf(params.w, c.w_step_std, c.w_init_std)
        return lp

    def log_joint(self, params: ModelParams) -> float:
        return self.design.loglik(params) + self.log_prior(params)

    def logp_and_grad(self, x):
        params = self.params(x)
        ll, g = self.design.loglik_and_grad(params)
        c = self.config
        value = ll + self.log_prior(params)
        if "kappa_u" in self.layout.slices:
            g["kappa_u"] = g["kappa_u"] + (c.kappa_prior_shape - 1.0) / params.kappa_u - self.kappa_prior_rate
        if "w" in self.layout.slices:
            g["w"] = g["w"] + _random_walk_grad(params.w, c.w_step_std, c.w_init_std)
        g["sigma"] = np.atleast_1d(g["sigma"])
        return value, self.layout.join({n: g[n] for n in self.layout.names})

    def initial_values(self) -> np.ndarray:
        """Data-driven starting point in natural space."""
        tr, c = self.train, self.config
        counts = tr.user_event_counts().astype(float)
        rate = np.maximum(counts, 0.5) / max(tr.t_end, 1.0)
        kappa = np.where(np.isfinite(self.kappa_hat), self.kappa_hat, 1.0)
        target = rate * (1.0 / kappa if self.spec.variant.uses_price else 1.0)
        scale = math.sqrt(float(np.median(target)))
        hi = 0.9 * c.theta_bound
        parts = {
            "theta_u": np.clip(target / scale, 1e-4, hi),
            "theta_o": np.clip(np.full(tr.n_items, scale), 1e-4, hi),
            "kappa_u": kappa,
            "alpha_u": np.full(tr.n_users, 0.02 * c.excite_bound / 10.0),
            "beta_u": np.full(tr.n_users, 0.02 * c.excite_bound / 10.0),
            "w": np.zeros(self.n_buckets),
            "sigma": np.array([c.sigma]),
        }
        return self.layout.join({n: parts[n] for n in self.layout.names})


def log_joint(params: ModelParams, spec: ModelSpec, train: EventLog, config: FitConfig) -> float:
    """Log-likelihood plus log-prior terms at ``params``."""
    return HazardPosterior(spec, train, config).log_joint(params)


# --- variational objective -------------------------------------------------------

@dataclass
class VariationalState:
    mu: np.ndarray
    log_std: np.ndarray
    names: tuple = ()

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=float)
        self.log_std = np.asarray(self.log_std, dtype=float)
        if self.mu.shape != self.log_std.shape:
            raise ValueError("mu and log_std must have the same shape")

    def to_dict(self) -> dict:
        return {"mu": self.mu.tolist(), "log_std": self.log_std.tolist(), "names": list(self.names)}

    @classmethod
    def from_dict(cls, d) -> "VariationalState":
        return cls(d["mu"], d["log_std"], tuple(d.get("names", ())))


def _noise(noise, size):
    noise = np.asarray(noise, dtype=float)
    if noise.ndim == 1:
        noise = noise[None, :]
    if noise.shape[1] != size:
        raise ValueError(f"noise has {noise.shape[1]} columns, expected {size}")
    return noise


def _entropy(q: VariationalState) -> float:
    return float(np.sum(q.log_std)) + len(q.mu) * _HALF_LOG_2PI_E


def elbo_estimate(q: VariationalState, target, noise) -> float:
    """Monte Carlo ELBO at fixed standard-normal ``noise`` (shape samples x dims)."""
    return elbo_and_gradient(q, target, noise, with_grad=False)[0]


def elbo_gradient(q: VariationalState, target, noise):
    """Reparameterised gradient ``(d/dmu, d/dlog_std)`` of :func:`elbo_estimate`."""
    _, g_mu, g_ls = elbo_and_gradient(q, target, noise)
    return g_mu, g_ls


def elbo_and_gradient(q: VariationalState, target, noise, with_grad: bool = True):
    layout = target.layout
    eps = _noise(noise, layout.size)
    std = np.exp(q.log_std)
    total = 0.0
    g_mu = np.zeros(layout.size)
    g_ls = np.zeros(layout.size)
    for e in eps:
        z = q.mu + std * e
        x, dxdz, logj, dlogj = layout.to_constrained(z)
        lp, gx = target.logp_and_grad(x)
        total += lp + logj
        if with_grad:
            gz = gx * dxdz + dlogj
            g_mu += gz
            g_ls += gz * e * std
    S = len(eps)
    value = total / S + _entropy(q)
    if not with_grad:
        return value, None, None
    return value, g_mu / S, g_ls / S + 1.0


# --- optimisation -----------------------------------------------------------------

@dataclass
class FitResult:
    params: ModelParams
    state: Optional[VariationalState]
    trace: list = field(default_factory=list)
    n_iter: int = 0
    converged: bool = False


class _Adagrad:
    def __init__(self, lr, size, delta=1e-8):
        self.lr, self.delta = lr, delta
        self.accum = np.zeros(size)

    def step(self, grad):
        self.accum += grad * grad
        return self.lr * grad / np.sqrt(self.accum + self.delta)


def _stalled(values, window, tol) -> bool:
    if len(values) < 2 * window:
        return False
    prev = float(np.mean(values[-2 * window:-window]))
    cur = float(np.mean(values[-window:]))
    return cur - prev < tol * max(1.0, abs(prev))


def run_advi(target, config: FitConfig, init_state: Optional[VariationalState] = None) -> FitResult:
    """Maximise the ELBO of ``target`` with Adagrad.

    ``target`` needs a ``layout`` (:class:`ParamLayout`), ``logp_and_grad(x)``
    and ``initial_values()``. The ELBO is recorded in the trace every 10
    iterations; optimisation stops early once the 100-iteration moving
    average improves by less than ``config.tolerance`` (relative).
    """
    layout = target.layout
    rng = np.random.default_rng(config.seed)
    if init_state is None:
        mu = layout.to_unconstrained(target.initial_values())
        q = VariationalState(mu, np.full(layout.size, config.init_log_std), layout.names)
    else:
        q = VariationalState(init_state.mu.copy(), init_state.log_std.copy(), layout.names)
    opt_mu = _Adagrad(config.learning_rate, layout.size)
    opt_ls = _Adagrad(config.learning_rate, layout.size)
    history, trace = [], []
    bad = 0
    converged = False
    it = 0
    for it in range(1, config.iterations + 1):
        eps = rng.standard_normal((config.mc_samples, layout.size))
        with np.errstate(all="ignore"):
            value, g_mu, g_ls = elbo_and_gradient(q, target, eps)
        finite = np.isfinite(value) and np.all(np.isfinite(g_mu)) and np.all(np.isfinite(g_ls))
        if it % 10 == 0:
            trace.append(float(value))
        if not finite:
            bad += 1
            if bad >= 3:
                raise FitDivergedError(f"ELBO non-finite for 3 consecutive iterations (at {it})", trace)
            continue
        bad = 0
        history.append(float(value))
        q.mu = q.mu + opt_mu.step(g_mu)
        q.log_std = q.log_std + opt_ls.step(g_ls)
        if it % 100 == 0 and _stalled(history, 100, config.tolerance):
            converged = True
            break
    params = target.params(layout.to_constrained(q.mu)[0])
    return FitResult(params, q, trace, it, converged)


def run_map(target, config: FitConfig, init=None) -> FitResult:
    """Maximise ``log p(x(z))`` (no Jacobian, no entropy) with Adagrad."""
    layout = target.layout
    z = layout.to_unconstrained(target.initial_values() if init is None else init)
    opt = _Adagrad(config.learning_rate, layout.size)
    history, trace = [], []
    bad = 0
    converged = False
    it = 0
    for it in range(1, config.iterations + 1):
        with np.errstate(all="ignore"):
            x, dxdz, _, _ = layout.to_constrained(z)
            value, gx = target.logp_and_grad(x)
            gz = gx * dxdz
        if it % 10 == 0:
            trace.append(float(value))
        if not (np.isfinite(value) and np.all(np.isfinite(gz))):
            bad += 1
            if bad >= 3:
                raise FitDivergedError(f"log joint non-finite for 3 consecutive iterations (at {it})", trace)
            continue
        bad = 0
        history.append(float(value))
        z = z + opt.step(gz)
        if it % 100 == 0 and _stalled(history, 100, config.tolerance):
            converged = True
            break
    params = target.params(layout.to_constrained(z)[0])
    return FitResult(params, None, trace, it, converged)


def fit(spec: ModelSpec, train: EventLog, config: Optional[FitConfig] = None) -> FitResult:
    """Mean-field ADVI fit; the point estimate is the untransformed variational mean."""
    config = config or FitConfig()
    return run_advi(HazardPosterior(spec, train, config), config)


def map_fit(spec: ModelSpec, train: EventLog, config: Optional[FitConfig] = None) -> FitResult:
    config = config or FitConfig()
    return run_map(HazardPosterior(spec, train, config), config)
