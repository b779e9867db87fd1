import numpy as np
import pytest

from pricehazard.core import EventLog, ModelParams, ModelSpec, Variant

ACCEPTANCE_LINES = []


def random_log(seed=0, n=20, n_users=4, n_items=3, span=40.0, t_end=45.0):
    rng = np.random.default_rng(seed)
    return EventLog(rng.integers(0, n_users, n), rng.integers(0, n_items, n),
                    np.sort(rng.uniform(0, span, n)), rng.uniform(1, 20, n), t_end, n_users, n_items)


def random_params(spec, log, seed=0):
    rng = np.random.default_rng(seed)
    p = ModelParams.neutral(log.n_users, log.n_items, spec.n_buckets(log.t_end))
    p.theta_u = rng.uniform(0.1, 0.6, log.n_users)
    p.theta_o = rng.uniform(0.5, 1.5, log.n_items)
    p.kappa_u = rng.uniform(0.2, 2.0, log.n_users)
    p.alpha_u = rng.uniform(0.1, 1.0, log.n_users)
    p.beta_u = rng.uniform(0.1, 1.0, log.n_users)
    p.w = rng.normal(0.0, 0.5, len(p.w))
    p.sigma = 0.3
    return p


@pytest.fixture
def toy_log():
    return random_log()


@pytest.fixture(params=list(Variant), ids=lambda v: v.value)
def variant(request):
    return request.param


@pytest.fixture
def spec_all(variant):
    return ModelSpec(variant, precursor_cap=None)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
