"""
Shared pytest fixtures
Puts the llm_perf_tuner package root on sys.path and builds small flat profiles
"""
import os
import sys

import pytest

ROOT = os.path.dirname(os.path.abspath(__file__))
PACKAGE_DIR = os.path.join(ROOT, 'llm_perf_tuner')
if PACKAGE_DIR not in sys.path:
    sys.path.insert(0, PACKAGE_DIR)

# reference material checked out next to the repo
collect_ignore = ['examples']

from backend.config import Config  # noqa: E402
from backend.specs import load_config  # noqa: E402
from profiles.bandwidth import LOCALITIES, OP_KINDS, WILDCARD_SCALE, WILDCARD_TOPOLOGY, \
    ingest_bandwidth  # noqa: E402
from profiles.profile_store import ProfileSet  # noqa: E402
from profiles.utilization import ingest_utilization  # noqa: E402


def make_flat_profiles(bw=1.0, mu=1.0, params_points=(1.0,)):
    """Every op and locality at bandwidth bw, mu constant in b"""
    rows = [dict(op=op, locality=locality, topology=WILDCARD_TOPOLOGY, scale=WILDCARD_SCALE,
                 msg_bytes=size, bw_bytes_per_s=bw)
            for op in OP_KINDS for locality in LOCALITIES for size in (1, 2 ** 40)]
    samples = [dict(params_per_gpu=params, micro_batch=b, mu=mu)
               for params in params_points for b in (1, 4096)]
    return ProfileSet(ingest_bandwidth(rows, source='flat'), ingest_utilization(samples, source='flat'),
                      label='flat')


@pytest.fixture
def flat_profiles():
    """Factory: flat_profiles(bw=..., mu=...)"""
    return make_flat_profiles


@pytest.fixture
def configs_dir():
    return Config.CONFIGS_DIR


@pytest.fixture
def fixtures_dir():
    return Config.FIXTURES_DIR


@pytest.fixture
def toy_specs():
    """(model, parallel, platform) of configs/toy.yaml"""
    return load_config(os.path.join(Config.CONFIGS_DIR, 'toy.yaml'))


@pytest.fixture
def toy_profile_paths():
    return [os.path.join(Config.FIXTURES_DIR, 'toy_bandwidth.csv'),
            os.path.join(Config.FIXTURES_DIR, 'toy_utilization.csv')]
