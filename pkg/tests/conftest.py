import pytest

from unshadow.networks import CriticSpec, GeneratorSpec, VGGPerceptual
from unshadow.synthetic import make_toy_split
from unshadow.training import NetworkConfig, TrainConfig

TINY_NET = NetworkConfig(GeneratorSpec(base_channels=8, depth=3, dense_blocks_per_stage=1, layers_per_block=2),
                         CriticSpec(num_layers=3, base_channels=8), proj_dim=32, proj_hidden=32, num_patches=16)


def tiny_train(**kwargs) -> TrainConfig:
    base = dict(epochs=4, decay_start_epoch=2, lr_base=1e-3, train_resolution=64, crop_size=40, grad_clip=1.0,
                checkpoint_every=1)
    base.update(kwargs)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def extractor():
    return VGGPerceptual(allow_untrained=True)


@pytest.fixture(scope="session")
def toy_split():
    return make_toy_split(8, 64, seed=0)


# one PASS/FAIL line per acceptance criterion in the terminal summary

_criteria: dict = {}
_outcomes: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(name): gating acceptance criterion")


def pytest_collection_modifyitems(items):
    for item in items:
        marker = item.get_closest_marker("acceptance")
        if marker is not None:
            _criteria[item.nodeid] = marker.args[0]


def pytest_runtest_logreport(report):
    if report.nodeid not in _criteria:
        return
    status, seconds, detail = _outcomes.get(report.nodeid, ("PASS", 0.0, ""))
    seconds += report.duration  # setup time counts: fixtures may do the heavy lifting
    if report.failed:
        status = "FAIL"
    elif report.skipped:
        status = "SKIP"
    for key, value in report.user_properties:
        if key == "detail":
            detail = value
    _outcomes[report.nodeid] = (status, seconds, detail)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for nodeid, name in _criteria.items():
        status, seconds, detail = _outcomes.get(nodeid, ("NOT RUN", 0.0, ""))
        line = f"{status:<7} {name} ({seconds:.1f}s)"
        terminalreporter.write_line(line + (f": {detail}" if detail else ""))
