"""
GPU utilization profile
mu keyed on (parameters per GPU, micro-batch size)
"""
import numpy as np
import pandas as pd

from backend.errors import EmptyProfile, MalformedRow
from backend.utils import log_action, provenance_header

COLUMNS = ['params_per_gpu', 'micro_batch', 'mu']


class UtilizationProfile:
    """Validated utilization samples sorted by (params_per_gpu, micro_batch)"""

    def __init__(self, frame):
        self._frame = frame.reset_index(drop=True)

    @property
    def frame(self):
        return self._frame.copy()

    def __len__(self):
        return len(self._frame)

    def __eq__(self, other):
        return isinstance(other, UtilizationProfile) and self._frame.equals(other._frame)

    def param_points(self):
        return sorted(self._frame['params_per_gpu'].unique().tolist())

    def merged_with(self, other):
        """Later samples replace earlier ones at the same (params_per_gpu, micro_batch)"""
        if len(other) == 0:
            return self
        if len(self) == 0:
            return other
        return UtilizationProfile(_normalize(pd.concat([self._frame, other._frame], ignore_index=True)))

    def to_csv(self, digest=None):
        text = self._frame[COLUMNS].to_csv(index=False, lineterminator='\n')
        return (provenance_header(digest) if digest else '') + text


def _normalize(frame):
    frame = frame.drop_duplicates(subset=['params_per_gpu', 'micro_batch'], keep='last')
    frame = frame.sort_values(['params_per_gpu', 'micro_batch'], kind='mergesort')
    return frame[COLUMNS].reset_index(drop=True)


def ingest_utilization(records, source=''):
    """
    Validate utilization samples

    Args:
        records: DataFrame or iterable of dicts with params_per_gpu, micro_batch, mu
        source: Label for log lines

    Returns:
        UtilizationProfile
    """
    frame = records.copy() if isinstance(records, pd.DataFrame) else pd.DataFrame(list(records))
    missing = [c for c in COLUMNS if c not in frame.columns]
    if missing:
        raise MalformedRow(f"utilization records lack columns {missing}", columns=missing)
    frame = frame[COLUMNS].copy()

    for column in COLUMNS:
        numeric = pd.to_numeric(frame[column], errors='coerce')
        if numeric.isna().any():
            index = int(np.flatnonzero(numeric.isna().to_numpy())[0])
            raise MalformedRow(f"row {index}: {column} is not numeric", row=index, column=column)
        frame[column] = numeric.astype('float64')

    bad = (frame['mu'] <= 0) | (frame['mu'] > 1) | (frame['params_per_gpu'] <= 0) | (frame['micro_batch'] < 1)
    if bad.any():
        index = int(np.flatnonzero(bad.to_numpy())[0])
        raise MalformedRow(f"row {index}: need 0 < mu <= 1, params_per_gpu > 0, micro_batch >= 1", row=index)

    profile = UtilizationProfile(_normalize(frame))
    log_action('ingest_utilization', f"{source or 'records'}: {len(frame)} rows -> {len(profile)} samples")
    return profile


def read_utilization_csv(path):
    try:
        frame = pd.read_csv(path, comment='#')
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise MalformedRow(f"{path}: {e}", path=str(path))
    return ingest_utilization(frame, source=str(path))


def lookup_utilization(profile, params_per_gpu, b):
    """
    GPU utilization for a per-GPU model size and micro-batch

    Nearest sampled params_per_gpu (ties go to the smaller), then linear in b
    between bracketing samples, clamped at the ends.
    """
    if len(profile) == 0:
        raise EmptyProfile("utilization profile has no samples")
    frame = profile.frame
    points = np.array(profile.param_points(), dtype=float)
    distance = np.abs(points - float(params_per_gpu))
    nearest = points[int(np.argmin(distance))]  # argmin returns the first, i.e. smaller, on ties
    rows = frame[frame['params_per_gpu'] == nearest]
    return float(np.interp(float(b), rows['micro_batch'].to_numpy(), rows['mu'].to_numpy()))
