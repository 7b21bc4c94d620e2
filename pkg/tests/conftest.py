import numpy as np
import pytest

from heatood.classifier import ClassifierConfig, extract_feature_bank, train_classifier
from heatood.data import SynthSpec, synth_dataset


@pytest.fixture(scope="session")
def small_spec():
    return SynthSpec(num_classes=2, image_size=8)


@pytest.fixture(scope="session")
def small_data(small_spec):
    return {
        "in_train": synth_dataset(small_spec, 5, "in_train", count=200),
        "in_test": synth_dataset(small_spec, 5, "in_test", count=40),
        "out_train": synth_dataset(small_spec, 5, "out_train", count=40),
        "out_test": synth_dataset(small_spec, 5, "out_test", count=40),
    }


@pytest.fixture(scope="session")
def small_config():
    return ClassifierConfig(width=8, height=8, num_classes=2, conv_blocks=((8, 3, 2), (8, 3, 2)),
                            feature_dim=16, epochs=10, batch_size=20, seed=1)


@pytest.fixture(scope="session")
def small_classifier(small_data, small_config):
    return train_classifier(small_data["in_train"], small_config)


@pytest.fixture(scope="session")
def small_bank(small_classifier, small_data):
    return extract_feature_bank(small_classifier, small_data["in_train"])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, printed after the test summary
ACCEPTANCE_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_KEY] = []


@pytest.fixture
def criterion(request):
    """Record ``(number, title, passed, detail)`` for the acceptance summary."""
    lines = request.config.stash[ACCEPTANCE_KEY]

    def record(number: int, title: str, passed: bool, detail: str = "") -> bool:
        lines.append((number, title, bool(passed), detail))
        return passed

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(lines, key=lambda t: t[0]):
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"[{status}] criterion {number}: {title}" + (f" ({detail})" if detail else ""))
