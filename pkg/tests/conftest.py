import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def central_diff(f, arrays, eps=1e-5):
    """Central-difference gradient of scalar ``f()`` w.r.t. each array (mutated in place)."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = arr[idx]
            arr[idx] = old + eps
            up = f()
            arr[idx] = old - eps
            down = f()
            arr[idx] = old
            g[idx] = (up - down) / (2 * eps)
        grads.append(g)
    return grads


def max_rel_err(analytic, numeric):
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric) / denom))


def brute_deconv(f, c, s):
    p, q = f.shape
    d = c.shape[0]
    out = np.zeros((s * (p - 1) + d, s * (q - 1) + d))
    for i in range(p):
        for j in range(q):
            for u in range(d):
                for v in range(d):
                    out[s * i + u, s * j + v] += f[i, j] * c[u, v]
    return out


def brute_conv(x, k, s):
    d = k.shape[0]
    p = (x.shape[0] - d) // s + 1
    q = (x.shape[1] - d) // s + 1
    out = np.zeros((p, q))
    for i in range(p):
        for j in range(q):
            for m in range(d):
                for n in range(d):
                    out[i, j] += x[i * s + m, j * s + n] * k[m, n]
    return out


# -- acceptance reporting ----------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when != "call" and not (rep.when == "setup" and rep.failed):
        return
    number, title = marker.args
    detail = dict(item.user_properties).get("detail", "")
    status = "PASS" if rep.passed else "FAIL"
    line = f"[{status}] criterion {number:2d}: {title}" + (f" ({detail})" if detail else "")
    ACCEPTANCE_LINES.append(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
