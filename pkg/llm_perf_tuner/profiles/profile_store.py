"""
Profile store
Loads profile files in order (later files override earlier keys) and persists merged profiles
"""
import os
from dataclasses import dataclass

import pandas as pd

from backend.errors import MalformedRow
from backend.utils import get_logger, log_action, write_text

from .bandwidth import BandwidthProfile, COLUMNS as BW_COLUMNS, NCCL_COLUMNS, read_bandwidth_csv
from .bandwidth import ingest_bandwidth
from .defaults import DEFAULTS_LABEL, default_bandwidth_profile, default_utilization_profile
from .utilization import COLUMNS as MU_COLUMNS, UtilizationProfile, read_utilization_csv

logger = get_logger('profiles.store')

BANDWIDTH_FILE = 'bandwidth.csv'
UTILIZATION_FILE = 'utilization.csv'


@dataclass(frozen=True)
class ProfileSet:
    """Bandwidth and utilization profiles used together"""
    bandwidth: BandwidthProfile
    utilization: UtilizationProfile
    label: str = ''

    def merged_with(self, other):
        return ProfileSet(self.bandwidth.merged_with(other.bandwidth),
                          self.utilization.merged_with(other.utilization),
                          label=f"{self.label}+{other.label}" if self.label else other.label)


def empty_bandwidth():
    dtypes = {'op': 'object', 'locality': 'object', 'topology': 'object',
              'scale': 'int64', 'msg_bytes': 'int64', 'bw_bytes_per_s': 'float64'}
    return BandwidthProfile(pd.DataFrame({c: pd.Series(dtype=dtypes[c]) for c in BW_COLUMNS}))


def empty_utilization():
    return UtilizationProfile(pd.DataFrame({c: pd.Series(dtype='float64') for c in MU_COLUMNS}))


def default_profiles():
    """The bundled reference profiles"""
    logger.warning("using %s; ingest measured profiles for real decisions", DEFAULTS_LABEL)
    return ProfileSet(default_bandwidth_profile(), default_utilization_profile(), label='defaults')


def sniff_profile_kind(path):
    """Return 'bandwidth' or 'utilization' from the CSV header"""
    try:
        header = pd.read_csv(path, comment='#', nrows=0)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, FileNotFoundError) as e:
        raise MalformedRow(f"{path}: {e}", path=str(path))
    columns = set(header.columns)
    if set(MU_COLUMNS) <= columns:
        return 'utilization'
    if set(BW_COLUMNS) <= columns or set(NCCL_COLUMNS) <= columns:
        return 'bandwidth'
    raise MalformedRow(f"{path}: header {sorted(columns)} matches no profile schema", path=str(path))


def load_profiles(paths, base=None, locality=None, topology=None):
    """
    Merge profile files in order

    Args:
        paths: CSV paths, bandwidth or utilization (detected from the header)
        base: ProfileSet to start from; empty profiles when None
        locality: Locality for nccl-tests schema files
        topology: Topology tag for nccl-tests schema files

    Returns:
        ProfileSet
    """
    merged = base or ProfileSet(empty_bandwidth(), empty_utilization(), label='')
    for path in paths:
        kind = sniff_profile_kind(path)
        if kind == 'bandwidth':
            loaded = ProfileSet(read_bandwidth_csv(path, locality=locality, topology=topology),
                                empty_utilization(), label=os.path.basename(path))
        else:
            loaded = ProfileSet(empty_bandwidth(), read_utilization_csv(path), label=os.path.basename(path))
        merged = merged.merged_with(loaded)
        log_action('load_profile', f"{path} ({kind})")
    return merged


def resolve_profiles(paths):
    """Profiles named on the command line, or the bundled defaults when none are given"""
    if not paths:
        return default_profiles()
    return load_profiles(paths)


class ProfileStore:
    """Directory holding bandwidth.csv and utilization.csv"""

    def __init__(self, directory):
        """
        Initialize profile store

        Args:
            directory: Store directory, created on first save
        """
        self.directory = directory

    @property
    def bandwidth_path(self):
        return os.path.join(self.directory, BANDWIDTH_FILE)

    @property
    def utilization_path(self):
        return os.path.join(self.directory, UTILIZATION_FILE)

    def exists(self):
        return os.path.exists(self.bandwidth_path) or os.path.exists(self.utilization_path)

    def save(self, profiles, digest=None):
        """Write both profiles; returns the written paths"""
        written = [write_text(self.bandwidth_path, profiles.bandwidth.to_csv(digest))]
        written.append(write_text(self.utilization_path, profiles.utilization.to_csv(digest)))
        return written

    def load(self):
        """Read the stored profiles back"""
        bandwidth = read_bandwidth_csv(self.bandwidth_path) if os.path.exists(self.bandwidth_path) \
            else empty_bandwidth()
        utilization = read_utilization_csv(self.utilization_path) if os.path.exists(self.utilization_path) \
            else empty_utilization()
        return ProfileSet(bandwidth, utilization, label=self.directory)

    def ingest(self, paths, locality=None, topology=None, digest=None):
        """Merge files into whatever the store already holds and save"""
        current = self.load() if self.exists() else None
        merged = load_profiles(paths, base=current, locality=locality, topology=topology)
        self.save(merged, digest)
        return merged

    def get_stats(self):
        profiles = self.load() if self.exists() else None
        return {
            'directory': self.directory,
            'bandwidth_records': len(profiles.bandwidth) if profiles else 0,
            'utilization_samples': len(profiles.utilization) if profiles else 0,
        }


def ingest_nccl_log(text, op, locality, topology=None, nranks=None):
    """Bandwidth profile from raw benchmark stdout"""
    from .nccl_log import parse_nccl_tests_log
    frame = parse_nccl_tests_log(text, op, nranks=nranks)
    return ingest_bandwidth(frame, locality=locality, topology=topology, source=f"{op} log")
