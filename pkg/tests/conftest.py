import json

import pytest

from sampling.noise_design import RngStream, StreamPurpose, gaussian_batch
from sampling.toy_diffusion import MixtureParams, MixtureScoreField, linear_beta_schedule


@pytest.fixture(autouse=True)
def _isolated_output_dir(settings, tmp_path):
    settings.LAB_OUTPUT_DIR = tmp_path / "runs"
    settings.LAB_THREADS = 1


@pytest.fixture
def seed():
    return 20240917


@pytest.fixture
def stream(seed):
    return RngStream.for_purpose(seed, StreamPurpose.SYNTHETIC)


@pytest.fixture
def schedule():
    return linear_beta_schedule(1000).respaced(50)


@pytest.fixture
def short_schedule():
    return linear_beta_schedule(100).respaced(10)


@pytest.fixture
def gaussian_params():
    return MixtureParams.gaussian(8)


@pytest.fixture
def symmetric_params():
    return MixtureParams.symmetric(8, offset=1.0, std=0.5)


@pytest.fixture
def linear_field(gaussian_params, schedule):
    return MixtureScoreField(gaussian_params, schedule)


@pytest.fixture
def symmetric_field(symmetric_params, schedule):
    return MixtureScoreField(symmetric_params, schedule)


@pytest.fixture
def noise(stream):
    return gaussian_batch(stream, 16, 8).rows


@pytest.fixture
def write_config(tmp_path):
    """Write a config dict to a JSON file and return its path."""

    def _write(data, name="config.json"):
        path = tmp_path / name
        path.write_text(json.dumps(data))
        return str(path)

    return _write
