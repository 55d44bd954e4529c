import numpy as np
import pytest

FD_STEP = 1e-5
FD_RTOL = 1e-4


def numeric_grad(f, x, h=FD_STEP):
    """Central finite differences of scalar ``f()`` wrt array ``x`` (perturbed in place)."""
    g = np.zeros_like(x, dtype=np.float64)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        up = f()
        x[idx] = old - h
        down = f()
        x[idx] = old
        g[idx] = (up - down) / (2 * h)
    return g


def rel_error(analytic, numeric):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale == 0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ---------------------------------------------------------------- acceptance summary

_ACCEPTANCE: list[tuple[str, bool, list[str]]] = []


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(name): a primary acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is not None and (rep.when == "call" or (rep.when == "setup" and rep.failed)):
        details = [v for k, v in item.user_properties if k == "detail"]
        _ACCEPTANCE.append((marker.args[0], rep.passed, details))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, details in _ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}")
        for d in details:
            terminalreporter.write_line(f"      {d}")
