import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from quicfp.fingerprint import load_db  # noqa: E402
from quicfp.labharness import Farm, LocalLab  # noqa: E402
from quicfp.probe import ProbeConfig  # noqa: E402

GOLDEN = Path(__file__).parent / "golden"


@pytest.fixture(scope="session")
def db():
    return load_db()


@pytest.fixture
def lab():
    return LocalLab(seed=7)


@pytest.fixture
def fast_cfg():
    return ProbeConfig(response_timeout=0.2)


@pytest.fixture(scope="module")
def farm():
    with Farm(seed=11) as f:
        yield f


@pytest.fixture(scope="session")
def golden_dir():
    return GOLDEN
