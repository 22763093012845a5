import os
from pathlib import Path

import numpy as np
import pytest

from sperceptron.mnist_io import LabeledDataset, find_mnist_files, load_mnist


def mnist_dir():
    """Directory holding the four MNIST IDX files, or None."""
    candidates = [os.environ.get("SPERCEPTRON_DATA_DIR"), Path.home() / "data" / "mnist"]
    for cand in candidates:
        if not cand:
            continue
        try:
            find_mnist_files(cand, "train")
            find_mnist_files(cand, "test")
        except FileNotFoundError:
            continue
        return Path(cand)
    return None


requires_mnist = pytest.mark.skipif(mnist_dir() is None, reason="MNIST IDX files not found")


@pytest.fixture(scope="session")
def mnist_path():
    path = mnist_dir()
    if path is None:
        pytest.skip("MNIST IDX files not found (set SPERCEPTRON_DATA_DIR)")
    return path


@pytest.fixture(scope="session")
def mnist_train(mnist_path):
    return load_mnist(mnist_path, "train")


@pytest.fixture(scope="session")
def mnist_test(mnist_path):
    return load_mnist(mnist_path, "test")


def separable_task(seed=0, count=40, n=8):
    """Two-class points in [0,1]^n split by a random hyperplane through the centre."""
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.0, 1.0, size=(count, n))
    w = rng.normal(size=n)
    score = (x - 0.5) @ w
    labels = (score > np.median(score)).astype(np.int64)
    return LabeledDataset(x, labels)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = []


def report_criterion(number, title, ok, detail=""):
    ACCEPTANCE_LINES.append(f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title}"
                            + (f" ({detail})" if detail else ""))
    assert ok, f"criterion {number} failed: {detail}"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
        if not any("criterion 4:" in line for line in ACCEPTANCE_LINES):
            terminalreporter.write_line("[SKIP] criterion 4: full MNIST run (set SPERCEPTRON_FULL=1)")
