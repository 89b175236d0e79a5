from collections import defaultdict

import numpy as np
import pytest

from glmmsmc.design import design_from_frame
from glmmsmc.model import ModelSpec, RandomBlock
from glmmsmc.pql import pql_fit
from glmmsmc.simulate import simulate_poisson


def make_tiny_poisson(n=60, seed=3):
    """Two fixed effects, no random effects: intercept and one slope."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(n)
    y = rng.poisson(np.exp(0.3 + 0.5 * x))
    return ModelSpec(y, np.column_stack([np.ones(n), x]), 2, (), 1e8, (), "poisson",
                     ("(Intercept)", "x"))


def make_small_mixed(n_groups=4, per_group=10, seed=5, family="poisson"):
    rng = np.random.default_rng(seed)
    n = n_groups * per_group
    g = np.repeat(np.arange(n_groups), per_group)
    x = rng.standard_normal(n)
    u = 0.5 * rng.standard_normal(n_groups)
    eta = 0.2 + 0.4 * x + u[g]
    if family == "poisson":
        y = rng.poisson(np.exp(eta))
    else:
        y = (rng.random(n) < 1 / (1 + np.exp(-eta))).astype(float)
    Z = (g[:, None] == np.arange(n_groups)[None, :]).astype(float)
    C = np.column_stack([np.ones(n), x, Z])
    return ModelSpec(y, C, 2, (RandomBlock("g", 2, n_groups),), 1e8, 0.01, family)


@pytest.fixture(scope="session")
def tiny_poisson():
    model = make_tiny_poisson()
    return model, pql_fit(model)


@pytest.fixture(scope="session")
def small_mixed():
    model = make_small_mixed()
    return model, pql_fit(model)


def build_poisson_experiment(seed=1, n=500):
    ds = simulate_poisson(n, seed=seed)
    design = design_from_frame(ds.data, "y", {"x1": "binary", "x2": "continuous"},
                               splines=[{"column": "x2", "K": 10}])
    model = ModelSpec(design.y, design.C, design.q_beta, design.blocks, 1e8, 0.01, "poisson",
                      tuple(design.names))
    return ds, design, model, pql_fit(model)


@pytest.fixture(scope="session")
def poisson_experiment():
    return build_poisson_experiment()


# --------------------------------------------------- acceptance reporting

_CRITERIA = defaultdict(list)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion checked by a test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (rep.when == "call" or rep.failed):
        return
    _CRITERIA[mark.args[0]].append((item.name, rep.passed, list(item.user_properties)))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for crit in sorted(_CRITERIA):
        checks = _CRITERIA[crit]
        failed = [name for name, ok, _ in checks if not ok]
        status = "FAIL" if failed else "PASS"
        note = f" (failed: {', '.join(failed)})" if failed else ""
        tr.write_line(f"criterion {crit}: {status} [{len(checks) - len(failed)}/{len(checks)} checks]{note}")
        for name, _, props in checks:
            for key, value in props:
                tr.write_line(f"    {name} {key} = {value}")
