import numpy as np
import pytest
import torch

from camscope.model import CovidNet25D, ModelConfig

# small float64 network shared by gradient and CAM tests
TINY = dict(
    input_shape=(32, 32, 16),
    enc2d_channels=8,
    fused_channels=24,
    enc3d_mid_channels=16,
    enc3d_channels=16,
    mlp_reduction=8,
)


def tiny_config(**overrides) -> ModelConfig:
    return ModelConfig(**{**TINY, **overrides})


def tiny_model(dtype=torch.float64, **overrides) -> CovidNet25D:
    model = CovidNet25D(tiny_config(**overrides)).to(dtype)
    model.eval()
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# 48x48x32 phantoms with large voxels, resampled to the tiny 32x32x16 input
SMALL_SPEC = dict(volume_shape=(48, 48, 32), spacing_mm=(7.0, 7.0, 10.5), lesion_radius_range_mm=(14.0, 24.0))


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    from camscope.phantom import PhantomSpec, generate_dataset

    out = tmp_path_factory.mktemp("phantoms") / "d"
    generate_dataset(PhantomSpec(**SMALL_SPEC, n_typical=10, n_nontypical=10, seed=3), out)
    return out


# one verdict line per acceptance criterion, printed after the run
_VERDICTS = {}


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            number, name = mark.args
            item.user_properties.append(("criterion", f"{number} ({name})"))


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    if report.when == "call" or report.outcome == "failed":
        _VERDICTS[props["criterion"]] = (report.outcome, props.get("detail", ""))


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_VERDICTS):
        outcome, detail = _VERDICTS[key]
        verdict = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"criterion {key}: {verdict}  {detail}".rstrip())
