import sys
import numpy as np
import pytest

from headsplat.synth import SceneSpec, generate_scene, render_dataset


def tiny_spec(**kw):
    base = dict(seed=3, n_lat=6, n_lon=10, n_shape=2, n_expr=4, n_cameras=3, timestamps=5,
                image_size=32, focal=40.0, heldout_view=-1, heldout_fraction=0.2)
    base.update(kw)
    return SceneSpec(**base)


@pytest.fixture(scope="session")
def tiny_dataset():
    return render_dataset(generate_scene(tiny_spec()))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
