"""scikit-learn style estimator around the hazard variants."""
from __future__ import annotations

import json
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import __version__
from .core import EventLog, ModelParams, ModelSpec, Variant
from .exceptions import SchemaError
from .infer import FitConfig, VariationalState, fit as advi_fit, map_fit
from .predict import (FittedModel, expected_return_time, predict_hazard,
                      sample_spend_posterior, teacher_forced_targets, expected_return_times)
from .evaluate import test_log_likelihood

CHECKPOINT_FORMAT = "pricehazard-model"
CHECKPOINT_VERSION = 1


def check_event_log(X, allow_empty: bool = False) -> EventLog:
    """Validate that ``X`` is an EventLog (optionally non-empty)."""
    if not isinstance(X, EventLog):
        raise TypeError(f"expected an EventLog, got {type(X).__name__}")
    if not allow_empty and len(X) == 0:
        raise ValueError("EventLog is empty")
    return X


class MixedHazardModel(BaseEstimator):
    """Price-driven hazard model of user return time.

    ``variant`` selects the intensity: ``PP`` (base only), ``HP`` (self
    excitation), ``IB`` (additive social influence), ``CC`` (social influence
    through a Cox link), ``MHMl`` (base x price + social) or ``MHMe`` (base x
    price x Cox-linked social). ``method`` is ``"advi"`` (mean-field ADVI) or
    ``"map"``.

    ``fit`` takes a training :class:`EventLog`; ``predict`` and ``score`` take
    a test log in the same index space.
    """

    def __init__(self, variant="MHMe", method="advi", precursor_cap=100, time_bucket_days=7,
                 iterations=2000, learning_rate=0.1, mc_samples=1, random_state=0,
                 kappa_prior_shape=2.0, kappa_prior_rate=None, w_step_std=0.1,
                 theta_bound=100.0, excite_bound=10.0, sigma=0.1, learn_sigma=False,
                 tolerance=1e-6, horizon_days=180.0):
        self.variant = variant
        self.method = method
        self.precursor_cap = precursor_cap
        self.time_bucket_days = time_bucket_days
        self.iterations = iterations
        self.learning_rate = learning_rate
        self.mc_samples = mc_samples
        self.random_state = random_state
        self.kappa_prior_shape = kappa_prior_shape
        self.kappa_prior_rate = kappa_prior_rate
        self.w_step_std = w_step_std
        self.theta_bound = theta_bound
        self.excite_bound = excite_bound
        self.sigma = sigma
        self.learn_sigma = learn_sigma
        self.tolerance = tolerance
        self.horizon_days = horizon_days

    def _spec(self) -> ModelSpec:
        return ModelSpec(Variant.parse(self.variant), self.precursor_cap, int(self.time_bucket_days))

    def _config(self) -> FitConfig:
        return FitConfig(
            iterations=int(self.iterations), learning_rate=float(self.learning_rate),
            mc_samples=int(self.mc_samples), seed=int(self.random_state or 0),
            kappa_prior_shape=float(self.kappa_prior_shape), kappa_prior_rate=self.kappa_prior_rate,
            w_step_std=float(self.w_step_std), theta_bound=float(self.theta_bound),
            excite_bound=float(self.excite_bound), sigma=float(self.sigma),
            learn_sigma=bool(self.learn_sigma), tolerance=float(self.tolerance),
            horizon_days=float(self.horizon_days),
        )

    def fit(self, X, y=None):
        X = check_event_log(X)
        if self.method not in ("advi", "map"):
            raise ValueError("method must be 'advi' or 'map'")
        spec, config = self._spec(), self._config()
        result = (advi_fit if self.method == "advi" else map_fit)(spec, X, config)
        self._set_fitted(spec, X, result.params, result.state, result.trace,
                         result.n_iter, result.converged)
        return self

    def _set_fitted(self, spec, train, params, state, trace, n_iter, converged):
        self.spec_ = spec
        self.train_ = train
        self.params_ = params
        self.state_ = state
        self.elbo_trace_ = list(trace)
        self.n_iter_ = int(n_iter)
        self.converged_ = bool(converged)
        self.fitted_ = FittedModel(spec, params, train)

    # --- prediction ---------------------------------------------------

    def predict(self, X, deadline: int = 30, same_item: bool = False) -> np.ndarray:
        """Expected return time (days) for each event of test log ``X``,
        teacher-forced at the previous observed event."""
        check_is_fitted(self, "fitted_")
        X = check_event_log(X, allow_empty=True)
        targets = teacher_forced_targets(self.fitted_, X, same_item=same_item)
        return expected_return_times(self.fitted_, targets.users, targets.items,
                                     targets.anchors, deadline)[0]

    def score(self, X, y=None, same_item: bool = False) -> float:
        """Test log-likelihood of ``X`` (duration term only)."""
        check_is_fitted(self, "fitted_")
        return test_log_likelihood(self.fitted_, check_event_log(X, allow_empty=True), same_item)

    def predict_hazard(self, user, item, t, anchor=None) -> float:
        check_is_fitted(self, "fitted_")
        return predict_hazard(self.fitted_, user, item, t, anchor)

    def expected_return_time(self, user, item, deadline, anchor=None):
        check_is_fitted(self, "fitted_")
        return expected_return_time(self.fitted_, user, item, deadline, anchor)

    def sample_spend(self, user, n_samples, seed=0) -> np.ndarray:
        check_is_fitted(self, "fitted_")
        return sample_spend_posterior(self.fitted_, user, n_samples, seed)

    # --- checkpoints --------------------------------------------------

    def to_checkpoint(self) -> dict:
        check_is_fitted(self, "fitted_")
        tr = self.train_
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "package_version": __version__,
            "estimator": self.get_params(),
            "spec": {"variant": self.spec_.variant.value, "precursor_cap": self.spec_.precursor_cap,
                     "time_bucket_days": self.spec_.time_bucket_days},
            "config": self._config().to_dict(),
            "user_ids": list(tr.user_ids),
            "item_ids": list(tr.item_ids),
            "params": self.params_.to_dict(),
            "state": None if self.state_ is None else self.state_.to_dict(),
            "elbo_trace": self.elbo_trace_,
            "n_iter": self.n_iter_,
            "converged": self.converged_,
            "train": {"users": tr.users.tolist(), "items": tr.items.tolist(),
                      "times": tr.times.tolist(), "prices": tr.prices.tolist(), "t_end": tr.t_end},
        }

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_checkpoint(), fh, sort_keys=True, indent=1)
            fh.write("\n")

    @classmethod
    def from_checkpoint(cls, d: dict) -> "MixedHazardModel":
        if d.get("format") != CHECKPOINT_FORMAT:
            raise SchemaError("not a pricehazard model checkpoint")
        if d.get("version") != CHECKPOINT_VERSION:
            raise SchemaError(f"unsupported checkpoint version {d.get('version')}")
        model = cls(**d["estimator"])
        t = d["train"]
        train = EventLog(t["users"], t["items"], t["times"], t["prices"], t["t_end"],
                         len(d["user_ids"]), len(d["item_ids"]), tuple(d["user_ids"]),
                         tuple(d["item_ids"]))
        state = None if d["state"] is None else VariationalState.from_dict(d["state"])
        model._set_fitted(ModelSpec(**d["spec"]), train, ModelParams.from_dict(d["params"]), state,
                          d["elbo_trace"], d["n_iter"], d["converged"])
        return model

    @classmethod
    def load(cls, path) -> "MixedHazardModel":
        with open(path) as fh:
            return cls.from_checkpoint(json.load(fh))
