import json
from pathlib import Path

import numpy as np
import pytest

from vlct.volume import VoxelVolume

FIXTURES = Path(__file__).parent / "fixtures"


def constant_volume(value, shape=(40, 24, 24), spacing=(1.0, 1.0, 1.0), study_id="c"):
    return VoxelVolume(np.full(shape, value, dtype=np.int16), spacing, study_id)


def random_volume(seed=0, shape=(40, 24, 24), spacing=(1.0, 1.0, 1.0), study_id="r"):
    rng = np.random.default_rng(seed)
    return VoxelVolume(rng.integers(-1000, 1001, shape).astype(np.int16), spacing, study_id)


def load_fixture_corpus():
    with open(FIXTURES / "impressions.jsonl") as fh:
        return [json.loads(line) for line in fh if line.strip()]


@pytest.fixture(scope="session")
def fixture_corpus():
    return load_fixture_corpus()


@pytest.fixture(scope="session")
def small_synth(tmp_path_factory):
    """A 60-study synthetic dataset shared across pipeline tests."""
    from vlct.pipeline.synth import SyntheticSpec, synth

    out = tmp_path_factory.mktemp("synth60")
    synth(SyntheticSpec(n_studies=60, seed=1), out)
    return out
