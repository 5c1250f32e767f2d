import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


@pytest.fixture
def criterion(capsys):
    """Record and print one PASS/FAIL line for an acceptance criterion."""

    def report(name, passed, detail):
        line = f"{'PASS' if passed else 'FAIL'}  {name}: {detail}"
        ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print("\n" + line)
        return passed

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def digit_data(tmp_path_factory):
    """10k/2k IDX digits: real MNIST from ``$DOCONV_MNIST_DIR`` if set, else the synthetic set."""
    import os

    from doconv.io import load_idx

    mnist = os.environ.get("DOCONV_MNIST_DIR")
    if mnist:
        d = Path(mnist)
        train = load_idx(d / "train-images-idx3-ubyte", d / "train-labels-idx1-ubyte").subset(10000)
        test = load_idx(d / "t10k-images-idx3-ubyte", d / "t10k-labels-idx1-ubyte").subset(2000)
        return train, test, "MNIST"
    pytest.importorskip("cv2")
    from doconv.digits import load_digit_split

    cache = os.environ.get("DOCONV_DIGIT_CACHE") or tmp_path_factory.mktemp("digits")
    train, test = load_digit_split(cache, 10000, 2000, seed=0)
    return train, test, "synthetic digits"
