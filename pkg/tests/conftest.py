import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from voxharm.phantom import PhantomSpec, generate_dataset

settings.register_profile(
    "ci",
    max_examples=30,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("ci")

torch.manual_seed(0)


@pytest.fixture(scope="session")
def cohort(tmp_path_factory):
    """Small traveling-subject cohort shared by read-only tests."""
    out = tmp_path_factory.mktemp("cohort") / "data"
    spec = PhantomSpec(out_dir=out, seed=0)
    manifest = generate_dataset(spec)
    return spec, manifest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
