import numpy as np
import pytest

from mriqa import tensor as T


@pytest.fixture(autouse=True)
def float64():
    with T.precision("float64"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def naive_conv2d(x, k, stride=1, padding=0):
    """Direct six-loop convolution (cross-correlation) on [n, c, h, w]."""
    n, c, h, w = x.shape
    co, _, d, _ = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - d) // stride + 1
    wo = (w + 2 * padding - d) // stride + 1
    out = np.zeros((n, co, ho, wo))
    for b in range(n):
        for o in range(co):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[b, :, i * stride:i * stride + d, j * stride:j * stride + d]
                    out[b, o, i, j] = np.sum(patch * k[o])
    return out


def naive_depthwise(x, k, stride=1, padding=0):
    n, c, h, w = x.shape
    out = [naive_conv2d(x[:, ch:ch + 1], k[ch][None, None], stride, padding) for ch in range(c)]
    return np.concatenate(out, axis=1)


CRITERIA: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    CRITERIA[number] = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[n])
