"""One test per acceptance criterion; each prints a single PASS/FAIL line."""
import json
import math
import os
import time

import numpy as np
import pandas as pd
import pytest
from scipy import stats

from pricehazard import MixedHazardModel
from pricehazard.cli import run
from pricehazard.core import ModelParams, ModelSpec, Variant, split_by_time
from pricehazard.evaluate import DEFAULT_DEADLINES, evaluate_models
from pricehazard.infer import (Block, FitConfig, HazardPosterior, ParamLayout, VariationalState,
                               elbo_estimate, elbo_gradient, gamma_logpdf, run_advi)
from pricehazard.ingest import build_event_log, parse_online_retail
from pricehazard.sim import simulate_events

import conftest
from conftest import random_log

ONLINE_RETAIL_ENV = "PRICEHAZARD_ONLINE_RETAIL"


def _report(n, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    conftest.ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def test_criterion_1_gradient_finite_differences():
    start = time.perf_counter()
    worst = {}
    for k, variant in enumerate(Variant):
        log = random_log(seed=100 + k, n=20)
        post = HazardPosterior(ModelSpec(variant, precursor_cap=None), log,
                               FitConfig(horizon_days=10, learn_sigma=True))
        rng = np.random.default_rng(k)
        d = post.layout.size
        q = VariationalState(post.layout.to_unconstrained(post.initial_values()) + rng.normal(0, 0.3, d),
                             rng.normal(-1.5, 0.3, d))
        eps = rng.standard_normal((2, d))
        g_mu, g_ls = elbo_gradient(q, post, eps)
        h = 1e-5
        excess = -math.inf
        for arr, g in ((q.mu, g_mu), (q.log_std, g_ls)):
            for i in range(d):
                old = arr[i]
                arr[i] = old + h
                fp = elbo_estimate(q, post, eps)
                arr[i] = old - h
                fm = elbo_estimate(q, post, eps)
                arr[i] = old
                fd = (fp - fm) / (2 * h)
                excess = max(excess, abs(fd - g[i]) - (1e-4 * abs(fd) + 1e-8))
        worst[variant.value] = excess
    elapsed = time.perf_counter() - start
    ok = all(e <= 0 for e in worst.values()) and elapsed < 60
    bad = [v for v, e in worst.items() if e > 0]
    _report(1, ok, f"ELBO gradient vs central differences, six variants, "
                   f"{'all coordinates within tolerance' if not bad else 'violations in ' + ','.join(bad)}, "
                   f"{elapsed:.1f}s (limit 60s)")


def test_criterion_2_parameter_recovery(tmp_path, capsys):
    start = time.perf_counter()
    code = run(["recover", "--variant", "mhme", "--n-users", "200", "--n-items", "50", "--horizon", "365",
                "--seed", "0", "--out", str(tmp_path / "rec.json")])
    elapsed = time.perf_counter() - start
    assert code == 0
    rho = json.loads((tmp_path / "rec.json").read_text())["spearman"]
    k, t = rho["kappa_u"], rho["theta_u"]
    ok = k is not None and t is not None and k >= 0.7 and t >= 0.7 and elapsed < 1800
    _report(2, ok, f"recover 200/50/365 MHMe: spearman kappa={k:.3f}, theta_u={t:.3f} (need >= 0.7), "
                   f"{elapsed:.0f}s (limit 1800s)")


def _pp(n_users, rates):
    p = ModelParams.neutral(n_users, 1, 1)
    p.theta_u[:] = rates
    return p


def _gaps(log, groups):
    out = []
    for g in groups:
        t = np.sort(log.times[np.isin(log.users, g)])
        out.append(np.diff(np.r_[0.0, t]))
    return np.concatenate(out)


def test_criterion_3_survival_oracle():
    lam = 0.5
    spec = ModelSpec(Variant.PP)
    log = simulate_events(spec, _pp(100, lam), 100, 1, 205.0, seed=3)
    d = _gaps(log, [[u] for u in range(100)])[:10_000]
    p_single = stats.kstest(d, stats.expon(scale=1 / lam).cdf).pvalue
    l1, l2, n = 0.2, 0.3, 400
    log = simulate_events(spec, _pp(n, np.r_[np.full(n // 2, l1), np.full(n // 2, l2)]), n, 1, 110.0, seed=5)
    merged = _gaps(log, [[a, a + n // 2] for a in range(n // 2)])[:10_000]
    p_super = stats.kstest(merged, stats.expon(scale=1 / (l1 + l2)).cdf).pvalue
    ok = len(d) == 10_000 and len(merged) == 10_000 and p_single > 0.01 and p_super > 0.01
    _report(3, ok, f"KS vs analytic survival: PP p={p_single:.3f}, superposition p={p_super:.3f} "
                   f"(n=10^4, need > 0.01)")


def _skip(n, reason):
    line = f"SKIP criterion {n}: {reason}"
    conftest.ACCEPTANCE_LINES.append(line)
    print(line)
    pytest.skip(line)


def test_criterion_4_online_retail():
    if not os.environ.get(ONLINE_RETAIL_ENV):
        _skip(4, f"Online Retail CSV not available; set {ONLINE_RETAIL_ENV} to its path to run")
    records = parse_online_retail(os.environ[ONLINE_RETAIL_ENV])
    full = build_event_log(records, "2010-12-01", "2011-12-09", min_degree=10)
    size = {"users": (full.n_users, 3756), "items": (full.n_items, 2882), "purchases": (len(full), 391773)}
    size_ok = all(abs(got / want - 1) <= 0.10 for got, want in size.values())
    cutoff = (pd.Timestamp("2011-09-01") - pd.Timestamp("2010-12-01")) / pd.Timedelta(days=1)
    train, test = split_by_time(full, cutoff)
    fitted = {}
    for v in Variant:
        fitted[v.value] = MixedHazardModel(variant=v.value, random_state=0).fit(train).fitted_
    reports = evaluate_models(fitted, test, DEFAULT_DEADLINES)
    rm = {name: r.rmse_by_deadline for name, r in reports.items()}
    a = all(rm[m][td] < rm[b][td] for m in ("MHMe", "MHMl") for b in ("PP", "CC", "IB") for td in DEFAULT_DEADLINES)
    b = abs(rm["MHMe"][30] / 9.13 - 1) <= 0.15
    top = sorted(reports, key=lambda name: reports[name].tll, reverse=True)[:2]
    c = set(top) == {"MHMe", "MHMl"}
    sizes = ", ".join(f"{k}={got}" for k, (got, _) in size.items())
    _report(4, size_ok and a and b and c,
            f"Online Retail: {sizes} (within 10%: {size_ok}); mixed models beat PP/CC/IB at all deadlines: {a}; "
            f"MHMe RMSE@30={rm['MHMe'][30]:.2f} within 15% of 9.13: {b}; top TLL {top}: {c}")


def test_criterion_5_large_scale_documentation_only():
    _skip(5, "large-scale reference numbers are documentation targets only, not asserted")


class _Conjugate:
    """Bids ``p_i ~ Gamma(shape, kappa)``, ``kappa ~ Gamma(a0, b0)``."""

    def __init__(self, prices, shape, a0, b0):
        self.prices, self.shape, self.a0, self.b0 = np.asarray(prices), shape, a0, b0
        self.layout = ParamLayout([Block("kappa", 1, "log")])

    def logp_and_grad(self, x):
        k = x[0]
        lp = float(np.sum(gamma_logpdf(self.prices, self.shape, k)) + gamma_logpdf(k, self.a0, self.b0))
        g = (len(self.prices) * self.shape + self.a0 - 1) / k - (self.prices.sum() + self.b0)
        return lp, np.array([g])

    def initial_values(self):
        return np.array([1.0])

    def params(self, x):
        return float(x[0])


def test_criterion_6_conjugate_toy():
    rng = np.random.default_rng(11)
    target = _Conjugate(rng.gamma(3.0, 1 / 1.7, size=40), 3.0, 2.0, 1.0)
    exact = (target.a0 + 40 * target.shape) / (target.b0 + target.prices.sum())
    res = run_advi(target, FitConfig(iterations=4000, learning_rate=0.1, mc_samples=4, tolerance=0.0))
    got = math.exp(res.state.mu[0] + 0.5 * math.exp(2 * res.state.log_std[0]))
    rel = abs(got / exact - 1)
    _report(6, rel <= 0.05, f"Gamma-Gamma posterior mean {got:.4f} vs closed form {exact:.4f}, "
                            f"rel err {rel:.4f} (limit 0.05)")


def test_criterion_7_determinism(tmp_path):
    d = tmp_path
    assert run(["simulate", "--n-users", "30", "--n-items", "8", "--horizon", "150", "--seed", "4",
                "--out", str(d / "ev.csv")]) == 0
    assert run(["ingest", "--format", "generic", "--input", str(d / "ev.csv"), "--window-start", "2013-01-01",
                "--window-end", "2013-06-01", "--min-degree", "2", "--split-at", "2013-04-15",
                "--out", str(d / "train.csv")]) == 0
    same = []
    for rep in ("a", "b"):
        models = []
        for v in ("pp", "ib", "mhme"):
            out = d / f"{v}_{rep}.json"
            assert run(["fit", "--log", str(d / "train.csv"), "--variant", v, "--iterations", "60",
                        "--seed", "7", "--out", str(out)]) == 0
            models.append(str(out))
        assert run(["eval", "--models", ",".join(models), "--test", str(d / "train.test.csv"),
                    "--out-dir", str(d / f"report_{rep}")]) == 0
    for v in ("pp", "ib", "mhme"):
        same.append((d / f"{v}_a.json").read_bytes() == (d / f"{v}_b.json").read_bytes())
    csvs = sorted(p.name for p in (d / "report_a").glob("*.csv"))
    for name in csvs:
        same.append((d / "report_a" / name).read_bytes() == (d / "report_b" / name).read_bytes())
    ok = all(same) and len(csvs) == 5
    _report(7, ok, f"two runs with the same seed: {sum(same)}/{len(same)} files byte-identical "
                   f"(3 checkpoints, {len(csvs)} report CSVs)")
