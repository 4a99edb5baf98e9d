import numpy as np
import pytest

from fgsmsdi.attacks import AttackConfig
from fgsmsdi.data import synth_dataset
from fgsmsdi.models import Architecture, GeneratorNet, TargetNet, init_params


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_arch():
    return Architecture(kind="cnn", image_shape=(3, 6, 6), num_classes=4, widths=(3, 4))


@pytest.fixture
def tiny_cnn(tiny_arch):
    net = TargetNet(tiny_arch, np.float64)
    init_params(net, 0)
    return net


@pytest.fixture
def tiny_gen():
    gen = GeneratorNet(3, hidden=4, dtype=np.float64)
    init_params(gen, 1)
    return gen


@pytest.fixture
def tiny_batch(rng):
    x = rng.uniform(0.05, 0.95, (5, 3, 6, 6))
    y = rng.integers(0, 4, 5)
    return x, y


@pytest.fixture
def eps_cfg():
    return AttackConfig(epsilon=8 / 255)


@pytest.fixture(scope="session")
def small_data():
    kw = dict(num_classes=4, image_shape=(3, 8, 8), noise=0.5, seed=3)
    return synth_dataset(size=200, split="train", **kw), synth_dataset(size=80, split="test", **kw)


@pytest.fixture
def linear_net():
    """Factory for a ``linear`` TargetNet over ``[N, 1, 1, d]`` inputs with given weights."""

    def make(W, b, dtype=np.float64):
        k, d = W.shape
        net = TargetNet(Architecture("linear", (1, 1, d), k), dtype)
        net.fc.weight.data = np.asarray(W, dtype)
        net.fc.bias.data = np.asarray(b, dtype)
        return net

    return make


# ---------------------------------------------------------------------------
# acceptance report: one pass/fail line per criterion, printed after the run

_ACCEPTANCE = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): an acceptance criterion")


@pytest.fixture
def detail(request):
    """Attach a short measurement to the current criterion's report line."""
    notes = []
    request.node.user_properties.append(("detail", notes))
    return notes.append


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None or (rep.when != "call" and not rep.failed):
        return
    number, title = mark.args
    notes = [n for k, v in item.user_properties if k == "detail" for n in v]
    prev = _ACCEPTANCE.get(number)
    passed = rep.passed and (prev is None or prev[1])
    _ACCEPTANCE[number] = (title, passed, "; ".join(notes))


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, passed, notes = _ACCEPTANCE[number]
        line = f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {title}"
        terminalreporter.write_line(line + (f"  [{notes}]" if notes else ""))
