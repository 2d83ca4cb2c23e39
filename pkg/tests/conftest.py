import numpy as np
import pytest

from wticket.data import SynthConfig, load_dataset, synth_generate


@pytest.fixture(scope="session")
def tiny_bundle(tmp_path_factory):
    """A 32x32 synthetic dataset small enough to train on in a second."""
    root = tmp_path_factory.mktemp("tiny") / "data"
    synth_generate(SynthConfig(size=32, train_samples=160, test_samples=80, seed=11), root)
    return load_dataset(root)


def random_store(rng, sizes, prunable=True, ties=False, density=1.0):
    from wticket.models import ParamStore

    s = ParamStore()
    for i, n in enumerate(sizes):
        if ties:
            w = rng.integers(-4, 5, size=n) * 0.25
        else:
            w = rng.standard_normal(n)
        s.add(f"l{i}.weight", w, prunable=prunable)
    if density < 1.0:
        s.set_masks({k: rng.random(p.data.shape) < density for k, p in s.prunable()})
    return s


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, echoed after the run
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
