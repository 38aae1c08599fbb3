import numpy as np
import pytest

from sincvae import tensor as T


def numeric_grad(fn, arr, h=1e-5):
    """Central differences of scalar ``fn()`` w.r.t. every entry of ``arr`` (mutated in place)."""
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + h
        up = fn()
        arr[i] = old - h
        down = fn()
        arr[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def check_grads(build, arrays, tol=1e-4, h=1e-5, floor=1e-6):
    """``build(*tensors) -> scalar Tensor``; compares analytic and numeric gradients."""
    tensors = [T.Tensor(a.copy(), requires_grad=True) for a in arrays]
    T.backward(build(*tensors))
    for t in tensors:
        analytic = t.grad.copy()
        numeric = numeric_grad(lambda: build(*[T.Tensor(u.data) for u in tensors]).item(), t.data, h)
        scale = max(np.abs(numeric).max(), np.abs(analytic).max(), floor)
        assert np.max(np.abs(analytic - numeric)) / scale < tol, (analytic, numeric)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance reporting: one PASS/FAIL line per criterion in the terminal summary

_ACCEPTANCE = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None:
        return
    number, title = mark.args
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
        if hasattr(report, "wasxfail"):
            status = "FAIL"
        # parametrized criteria fold into one line; FAIL beats PASS beats SKIP
        _, prev_status, prev_time = _ACCEPTANCE.get(number, (title, "SKIP", 0.0))
        rank = {"SKIP": 0, "PASS": 1, "FAIL": 2}
        status = max(status, prev_status, key=rank.get)
        _ACCEPTANCE[number] = (title, status, prev_time + report.duration)


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_ACCEPTANCE):
            title, status, seconds = _ACCEPTANCE[number]
            terminalreporter.write_line(f"acceptance {number}: {status}  {title}  ({seconds:.1f} s)")
