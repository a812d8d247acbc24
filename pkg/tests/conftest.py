import numpy as np
import pytest

from dissimspace.numeric import make_rng


@pytest.fixture
def rng():
    return make_rng(1234)


def naive_matmul_bias(x, W, b):
    B, d_in = x.shape
    d_out = W.shape[0]
    out = np.zeros((B, d_out))
    for i in range(B):
        for j in range(d_out):
            acc = 0.0
            for k in range(d_in):
                acc += x[i, k] * W[j, k]
            out[i, j] = acc + (b[j] if b is not None else 0.0)
    return out


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[number])
