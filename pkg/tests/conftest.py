import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from dcnet import backends


@pytest.fixture(params=["numpy", "numba"])
def backend(request):
    """Run a test under both kernel backends."""
    backends.set_backend(request.param)
    yield request.param
    backends.set_backend(None)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def micro_cohort(tmp_path_factory):
    """Tiny scenario-(a) cohort shared by I/O and CLI tests."""
    from dcnet import phantom

    out = tmp_path_factory.mktemp("micro_cohort")
    spec = phantom.scenario_a(subjects_per_class=4, grid=(9, 9, 9))
    manifest = phantom.gen_cohort(spec, out)
    return manifest
