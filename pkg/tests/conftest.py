import numpy as np
import pytest

from cider.dataset import SynthSpec, generate_synthetic_corpus, load_instances
from cider.dsp import FeatureConfig, Waveform

SR = 16000


def tone(freq, seconds, sr=SR, amp=0.5):
    t = np.arange(int(round(seconds * sr))) / sr
    return Waveform(amp * np.sin(2 * np.pi * freq * t), sr)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def short_cfg():
    # 1 s windows keep network tests fast
    return FeatureConfig(window_seconds=1.0)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    spec = SynthSpec(name="tiny", counts={"train": (6, 6), "val": (4, 4), "test": (4, 4)},
                     duration_range=(0.6, 2.5), separation=2.0)
    out = tmp_path_factory.mktemp("tiny")
    manifest = generate_synthetic_corpus(spec, 3, out)
    return manifest


@pytest.fixture(scope="session")
def tiny_instances(tiny_corpus):
    return {s: load_instances(tiny_corpus, s, SR) for s in ("train", "val", "test")}


# -- acceptance reporting ------------------------------------------------------------

_ACCEPTANCE: dict = {}


@pytest.fixture
def criterion(request):
    """Record the outcome of one acceptance criterion; printed after the run."""
    number, title = request.node.get_closest_marker("criterion").args
    _ACCEPTANCE[number] = [title, "FAIL", ""]

    def note(text):
        _ACCEPTANCE[number][2] = text

    yield note


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker and call.when == "call" and marker.args[0] in _ACCEPTANCE:
        _ACCEPTANCE[marker.args[0]][1] = "PASS" if call.excinfo is None else "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, status, detail = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number} [{status}] {title}" + (f": {detail}" if detail else ""))
