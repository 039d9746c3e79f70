import numpy as np
import pytest

from headfit import synth


@pytest.fixture(scope="session")
def toy_model():
    return synth.make_toy_model(0)


@pytest.fixture(scope="session")
def small_scene(toy_model):
    """Two frames at 48x48 on a once-subdivided head: quick to fit and to check."""
    params = synth.SynthParams(frames=2, width=48, height=48, levels=1, seed=3).noiseless()
    return synth.make_scene(params, model=toy_model)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
