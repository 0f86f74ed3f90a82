import numpy as np
import pytest

from grouppanel.panel import PanelDataset


def make_panel(y, X):
    return PanelDataset(y=np.asarray(y, dtype=float), X=np.asarray(X, dtype=float))


def grouped_panel(rng, N=30, T=10, K=2, G=2, slopes=None, sigma=1.0, labels=None):
    """Random panel with G slope groups; returns (panel, labels, slopes)."""
    if slopes is None:
        slopes = rng.normal(size=(G, K)) * 2
    slopes = np.asarray(slopes, dtype=float)
    if labels is None:
        labels = np.arange(N) % G
    X = rng.normal(size=(N, T, K))
    y = np.einsum("ntk,nk->nt", X, slopes[labels]) + sigma * rng.normal(size=(N, T))
    return make_panel(y, X), np.asarray(labels), slopes


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list = []


def record_criterion(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
