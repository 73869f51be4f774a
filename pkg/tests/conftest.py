import shutil
from pathlib import Path

import numpy as np
import pytest

from ropim.sketch import BACKENDS, current_backend, use_backend

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(params=sorted(BACKENDS))
def backend(request):
    """Run the test once per available kernel backend."""
    before = current_backend()
    use_backend(request.param)
    yield request.param
    use_backend(before)


@pytest.fixture
def fixtures_dir():
    return FIXTURES


@pytest.fixture
def cifar_fixture(tmp_path):
    """The committed two-record batch, copied under the canonical file name."""
    dst = tmp_path / "cifar-10-batches-bin"
    dst.mkdir()
    shutil.copy(FIXTURES / "cifar_two_records.bin", dst / "data_batch_1.bin")
    return dst


@pytest.fixture
def gen():
    return np.random.default_rng(12345)
