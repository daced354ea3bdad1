import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from curvebench.data import synth_split  # noqa: E402
from curvebench.models import TrainConfig, build_model, train  # noqa: E402


@pytest.fixture(scope="session")
def small_net():
    """A quickly trained cnn-small on 3-class 8x8 blobs: (model, train, test)."""
    tr, te = synth_split(3, 80, 70, 8, 11, sigma=0.2)
    model, _ = train(build_model("cnn-small", tr.image_shape, 3, seed=0), tr,
                     TrainConfig(epochs=10, learning_rate=0.02, weight_decay=1e-3))
    return model, tr, te


@pytest.fixture(scope="session")
def small_mlp():
    """mlp-2x64 on 4-class 8x8 blobs (64-dimensional input)."""
    tr, te = synth_split(4, 60, 30, 8, 5, sigma=0.2)
    model, _ = train(build_model("mlp-2x64", tr.image_shape, 4, seed=1), tr,
                     TrainConfig(epochs=10, learning_rate=0.02, weight_decay=1e-3))
    return model, tr, te


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE

    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
