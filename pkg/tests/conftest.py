import numpy as np
import pytest

from weaklab.bagcore import make_bags
from weaklab.ingest import SyntheticConfig, gen_gaussian_instances, gen_synthetic_spectrograms


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_gaussian_bags():
    inst = gen_gaussian_instances(SyntheticConfig(num_classes=10, per_class_count=60, shape=(8,),
                                                  class_mean_separation=3.0, seed=3))
    return make_bags(inst, target_class=0, bag_size=5, seed=3)


@pytest.fixture(scope="session")
def small_spec_bags():
    inst = gen_synthetic_spectrograms(SyntheticConfig(num_classes=4, per_class_count=30, shape=(20, 16),
                                                      class_mean_separation=3.0, seed=5))
    return make_bags(inst, target_class=0, bag_size=3, seed=5)


_CRITERIA: list[str] = []


@pytest.fixture
def criterion(request):
    """Call with (name, passed, detail); the line is echoed now and again in the final summary."""
    capman = request.config.pluginmanager.getplugin("capturemanager")

    def record(name, passed, detail=""):
        line = f"{name}: {'PASS' if passed else 'FAIL'}  {detail}".rstrip()
        _CRITERIA.append(line)
        with capman.global_and_fixture_disabled():
            print(f"\n    {line}")
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERIA:
            terminalreporter.write_line(line)
