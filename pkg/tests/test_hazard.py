import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, stats

from pricehazard.core import EventLog, ModelParams, ModelSpec, Variant
from pricehazard.exceptions import SupportError
from pricehazard.hazard import (HazardDesign, bid_logpdf, cumulative_hazard, decay, find_precursors,
                                hazard_rate, make_observations, self_exciting_intensity,
                                social_intensity, survival, total_log_likelihood)

from conftest import random_log, random_params


def _params(n_users=2, n_items=2, **kw):
    p = ModelParams.neutral(n_users, n_items, 4)
    for k, v in kw.items():
        setattr(p, k, np.asarray(v, dtype=float) if not np.isscalar(v) else v)
    return p


# --- scalar examples -------------------------------------------------------

def test_decay():
    assert decay(0.0, 0.1) == 1.0
    assert decay(10.0, 0.1) == pytest.approx(0.367879, abs=1e-6)
    d = decay(np.linspace(0, 500, 50), 0.1)
    assert np.all(np.diff(d) < 0) and d[-1] < 1e-20
    with pytest.raises(ValueError):
        decay(-1.0, 0.1)


def test_base_and_social_examples():
    p = _params(theta_u=[2.0, 1.0], theta_o=[3.0, 1.0])
    spec = ModelSpec(Variant.PP)
    assert hazard_rate(spec, p, (0, 0, 5.0)) == 6.0
    assert hazard_rate(spec, p, (1, 1, 5.0), [(0, 0.0)]) == 1.0
    p = _params(alpha_u=[0.5, 1.0], beta_u=[0.4, 0.4], sigma=0.1)
    assert social_intensity(p, 1, [(0, 0.0)]) == pytest.approx(0.2)
    assert social_intensity(p, 1, []) == 0.0
    assert social_intensity(p, 1, [(0, 10.0), (1, 0.0)]) == pytest.approx(0.473576, abs=1e-6)


def test_self_excitation_examples():
    p = _params(alpha_u=[1.0, 1.0], beta_u=[1.0, 1.0])
    assert self_exciting_intensity(p, 0, []) == 0.0
    assert self_exciting_intensity(p, 0, [0.0]) == 1.0
    q = _params(alpha_u=[0.3, 0.7], beta_u=[0.9, 0.2], sigma=0.2)
    assert self_exciting_intensity(q, 1, [3.0, 1.0]) == pytest.approx(
        social_intensity(q, 1, [(1, 3.0), (1, 1.0)]))


def test_mixed_hazard_examples():
    # base 6, kappa 0.5, social term 0.2 from one precursor at dt=0
    p = _params(theta_u=[2.0, 1.0], theta_o=[3.0, 1.0], kappa_u=[0.5, 1.0],
                alpha_u=[1.0, 0.5], beta_u=[0.4, 1.0], w=[1.0] * 4)
    assert hazard_rate(ModelSpec(Variant.MHMl), p, (0, 0, 1.0), [(1, 0.0)]) == pytest.approx(3.2)
    assert hazard_rate(ModelSpec(Variant.MHMe), p, (0, 0, 1.0), [(1, 0.0)]) == pytest.approx(3.664208, abs=1e-6)


def test_cumulative_and_survival_constant():
    p = _params(theta_u=[0.1, 1.0])
    spec = ModelSpec(Variant.PP)
    assert cumulative_hazard(spec, p, (0, 0, 0.0), t=10) == pytest.approx(1.0)
    assert cumulative_hazard(spec, p, (0, 0, 0.0), t=0) == 0.0
    assert survival(spec, p, (0, 0, 0.0), t=0) == 1.0
    assert survival(spec, p, (0, 0, 0.0), t=10) == pytest.approx(0.367879, abs=1e-6)


def test_cumulative_cap_applies_per_grid_time():
    p = _params(3, 1, theta_u=[0.2, 1, 1], alpha_u=[0.0, 0.5, 0.9], beta_u=[0.7, 0, 0], sigma=0.3)
    spec = ModelSpec(Variant.IB, precursor_cap=1)
    stream = [(1, 1.5), (2, 4.5)]
    # days 2..4 see only the first precursor, days 5..6 only the second
    want = sum(0.2 + 0.7 * (0.5 * math.exp(-0.3 * (s - 1.5)) if s < 4.5 else 0.9 * math.exp(-0.3 * (s - 4.5)))
               for s in range(2, 7))
    assert cumulative_hazard(spec, p, (0, 0, 1.0), stream, t=5) == pytest.approx(want, rel=1e-12)


def test_cumulative_matches_daily_loop():
    p = _params(theta_u=[0.3, 0.5], theta_o=[1.2, 0.8], kappa_u=[0.7, 1.1],
                alpha_u=[0.8, 0.6], beta_u=[0.9, 0.5], w=[0.5, -0.2, 0.3, 0.1], sigma=0.25)
    spec = ModelSpec(Variant.MHMe, precursor_cap=None, time_bucket_days=7)
    stream = [(1, 2.5), (1, 7.2), (1, 11.0)]
    total = 0.0
    for k in range(1, 16):
        s = 1.0 + k
        soc = sum(0.6 * 0.9 * math.exp(-0.25 * (s - tj)) for _, tj in stream if tj < s)
        total += 0.3 * 1.2 * 0.7 * math.exp(p.w[min(int(s // 7), 3)] * soc)
    assert cumulative_hazard(spec, p, (0, 0, 1.0), stream, t=15.5) == pytest.approx(total, rel=1e-12)


@given(st.floats(0, 60), st.floats(0, 60))
@settings(max_examples=50, deadline=None)
def test_survival_non_increasing(a, b):
    p = _params(theta_u=[0.05, 1.0], alpha_u=[0.5, 0.5], beta_u=[0.5, 0.5], w=[0.3] * 4)
    spec = ModelSpec(Variant.MHMe, precursor_cap=None)
    stream = [(1, 3.0), (1, 20.0)]
    lo, hi = sorted((a, b))
    assert survival(spec, p, (0, 0, 0.0), stream, hi) <= survival(spec, p, (0, 0, 0.0), stream, lo)


def test_bid_logpdf():
    assert bid_logpdf(1e-12, 1, 1.0) == pytest.approx(0.0, abs=1e-9)
    assert bid_logpdf(1.0, 2, 1.0) == pytest.approx(-1.0, abs=1e-12)
    with pytest.raises(SupportError):
        bid_logpdf(0.0, 2, 1.0)
    with pytest.raises(SupportError):
        bid_logpdf(1.0, 2, 0.0)


@pytest.mark.parametrize("shape,kappa", [(2, 1.0), (5, 0.7), (30, 3.0)])
def test_bid_mode_and_reference(shape, kappa):
    grid = np.linspace(0.01, 60, 20001)
    vals = bid_logpdf(grid, shape, kappa)
    assert grid[np.argmax(vals)] == pytest.approx((shape - 1) / kappa, abs=0.01)
    ref = stats.gamma(shape, scale=1 / kappa).logpdf(grid)
    assert np.allclose(vals, ref, rtol=1e-10, atol=1e-10)


def test_bid_density_integrates_to_one():
    val, _ = integrate.quad(lambda p: math.exp(bid_logpdf(p, 3, 0.8)), 0, np.inf)
    assert val == pytest.approx(1.0, abs=1e-4)


def test_bid_large_shape_is_finite():
    assert math.isfinite(bid_logpdf(1e4, 5000, 0.5))


# --- precursors -------------------------------------------------------------

def test_precursors_exclude_target_and_respect_cap():
    log = EventLog([0, 1, 2, 1, 0], [0, 0, 0, 0, 1], [1.0, 2.0, 3.0, 4.0, 4.5], [1.0] * 5, 10.0, 3, 2)
    spec = ModelSpec(Variant.MHMe, precursor_cap=None)
    assert find_precursors(spec, log, 1, 0, 5.0) == [(0, 4.0), (2, 2.0)]
    assert find_precursors(spec, log, 0, 0, 3.0) == [(1, 1.0)]  # strict: t_j < t
    assert find_precursors(ModelSpec(Variant.MHMe, precursor_cap=1), log, 1, 0, 5.0) == [(2, 2.0)]
    assert find_precursors(ModelSpec(Variant.PP), log, 1, 0, 5.0) == []
    assert find_precursors(ModelSpec(Variant.HP), log, 0, 0, 5.0) == [(0, 4.0), (0, 0.5)]


# --- log-likelihood ---------------------------------------------------------

def _oracle_loglik(spec, p, log):
    """Straight-line per-observation sum: log hazard at the event, minus the
    daily-grid cumulative hazard, plus the bid term for price variants.

    Precursors seen at a grid point are those before both the grid time and
    the observation's end (the grid stands in for the integral up to the event).
    """
    v = spec.variant
    U, O, T, P = log.users, log.items, log.times, log.prices
    n = len(log)

    def lam(u, o, s, end):
        base = p.theta_u[u] * p.theta_o[o]
        if v.uses_price:
            base *= p.kappa_u[u]
        if v is Variant.PP:
            return base
        if v is Variant.HP:
            js = [j for j in range(n) if U[j] == u and T[j] < min(s, end)]
        else:
            js = [j for j in range(n) if O[j] == o and U[j] != u and T[j] < min(s, end)]
        if spec.precursor_cap is not None:
            js = js[-spec.precursor_cap:]
        exc = sum(p.alpha_u[U[j]] * p.beta_u[u] * math.exp(-p.sigma * (s - T[j])) for j in js)
        if v.exponential:
            b = min(int(s // spec.time_bucket_days), len(p.w) - 1)
            return base * math.exp(p.w[b] * exc)
        return base + exc

    total = 0.0
    for u in range(log.n_users):
        mine = [j for j in range(n) if U[j] == u]
        prev = 0.0
        for k, j in enumerate(mine):
            d = T[j] - prev
            total += math.log(max(lam(u, O[j], T[j], T[j]), 1e-12))
            total -= sum(max(lam(u, O[j], prev + m, T[j]), 1e-12) for m in range(1, math.ceil(d) + 1))
            if v.uses_price:
                shape = max(sum(1 for i in mine if T[i] < T[j]), 1)
                total += stats.gamma(shape, scale=1 / p.kappa_u[u]).logpdf(P[j])
            prev = T[j]
        if mine:
            o = O[mine[-1]]
            total -= sum(max(lam(u, o, prev + m, log.t_end), 1e-12)
                         for m in range(1, math.floor(log.t_end - prev) + 1))
    return total


@pytest.mark.parametrize("cap", [None, 1, 2])
@pytest.mark.parametrize("seed", [3, 11])
def test_total_loglik_matches_oracle(spec_all, cap, seed):
    spec = ModelSpec(spec_all.variant, precursor_cap=cap)
    log = random_log(seed=seed, n=25, n_users=4, n_items=2, span=30.0, t_end=33.0)
    p = random_params(spec, log, seed=seed + 1)
    assert total_log_likelihood(spec, p, log) == pytest.approx(_oracle_loglik(spec, p, log), rel=1e-10)


def test_five_event_mhme_oracle():
    log = EventLog([0, 1, 0, 2, 1], [0, 0, 1, 0, 0], [0.5, 1.7, 3.2, 4.0, 6.9],
                   [3.0, 1.5, 2.0, 4.0, 1.0], 9.5, 3, 2)
    spec = ModelSpec(Variant.MHMe, precursor_cap=None)
    p = random_params(spec, log, seed=1)
    assert total_log_likelihood(spec, p, log) == pytest.approx(_oracle_loglik(spec, p, log), rel=1e-12)


def test_single_observation_closed_forms():
    lam = 0.2
    p = _params(1, 1, theta_u=[lam], theta_o=[1.0])
    spec = ModelSpec(Variant.PP)
    log = EventLog([0], [0], [5.0], [1.0], 5.0, 1, 1)
    obs = make_observations(log, censor=False)
    assert total_log_likelihood(spec, p, log, obs) == pytest.approx(math.log(lam) - 5 * lam)
    # with the censoring tail (zero days here) the value is unchanged
    assert total_log_likelihood(spec, p, log) == pytest.approx(math.log(lam) - 5 * lam)


def test_censored_only_term():
    lam = 0.3
    p = _params(1, 1, theta_u=[lam], theta_o=[1.0])
    log = EventLog([0], [0], [0.0], [1.0], 7.0, 1, 1)
    obs = make_observations(log)
    assert obs.censored.tolist() == [False, True]
    design = HazardDesign.build(ModelSpec(Variant.PP), log, obs, sigma=0.1)
    per = design.per_observation(p)
    assert per[1] == pytest.approx(-7 * lam)


def test_observation_layout():
    log = EventLog([0, 1, 0], [1, 0, 0], [1.0, 2.0, 4.5], [1.0, 2.0, 3.0], 10.0, 3, 2)
    obs = make_observations(log)
    assert len(obs) == 5
    assert obs.anchors.tolist() == [0.0, 0.0, 1.0, 4.5, 2.0]
    assert obs.items.tolist() == [1, 0, 0, 0, 0]
    assert obs.shapes.tolist() == [1, 1, 1, 1, 1]
    assert obs[3].censored and obs[3].price is None


# --- invariants -------------------------------------------------------------

def test_pp_identifiable_only_through_products():
    log = random_log(seed=5)
    spec = ModelSpec(Variant.PP)
    p = random_params(spec, log)
    q = p.copy()
    q.theta_u = p.theta_u * 4.0
    q.theta_o = p.theta_o / 4.0
    assert total_log_likelihood(spec, p, log) == pytest.approx(total_log_likelihood(spec, q, log), rel=1e-12)


def test_social_superposition():
    p = _params(3, 1, alpha_u=[0.0, 0.4, 0.7], beta_u=[0.6, 0.0, 0.0], sigma=0.2)
    a, b = [(1, 1.5), (2, 4.0)], [(2, 0.3)]
    assert social_intensity(p, 0, a + b) == pytest.approx(social_intensity(p, 0, a) + social_intensity(p, 0, b))


@given(st.floats(0.0, 50.0), st.floats(0.0, 50.0))
def test_hazard_decays_toward_base(d1, d2):
    p = _params(theta_u=[0.4, 1.0], alpha_u=[0.5, 0.5], beta_u=[0.5, 0.5], kappa_u=[1.0, 1.0], w=[0.8] * 4)
    spec = ModelSpec(Variant.MHMe)
    lo, hi = sorted((d1, d2))
    near = hazard_rate(spec, p, (0, 0, 1.0), [(1, lo)])
    far = hazard_rate(spec, p, (0, 0, 1.0), [(1, hi)])
    assert 0.4 <= far <= near


def test_loglik_gradient_matches_finite_differences(spec_all):
    log = random_log(seed=9, n=15)
    p = random_params(spec_all, log, seed=2)
    design = HazardDesign.build(spec_all, log, make_observations(log), sigma=p.sigma)
    _, grad = design.loglik_and_grad(p)
    h = 1e-6
    for name in ("theta_u", "theta_o", "kappa_u", "alpha_u", "beta_u", "w"):
        arr = getattr(p, name)
        for i in range(len(arr)):
            old = arr[i]
            arr[i] = old + h
            fp = design.loglik(p)
            arr[i] = old - h
            fm = design.loglik(p)
            arr[i] = old
            fd = (fp - fm) / (2 * h)
            assert grad[name][i] == pytest.approx(fd, rel=1e-5, abs=1e-6), (name, i)
