"""
Effective bandwidth profile
Records of (op, locality, topology, scale, message size, bandwidth) with log2-size interpolation
"""
import numpy as np
import pandas as pd

from backend.errors import MalformedRow, MissingProfileKey, NonPositiveBandwidth, ProfileError
from backend.utils import get_logger, log_action, provenance_header

logger = get_logger('profiles.bandwidth')

OP_KINDS = ('p2p', 'allreduce', 'alltoall')
LOCALITIES = ('intra', 'inter')
COLUMNS = ['op', 'locality', 'topology', 'scale', 'msg_bytes', 'bw_bytes_per_s']
KEY_COLUMNS = ['op', 'locality', 'topology', 'scale']
NCCL_COLUMNS = ['size_bytes', 'busbw_bytes_per_s', 'op', 'nranks']

# scale 0 marks a scale-insensitive curve, topology '' a topology-independent one
WILDCARD_SCALE = 0
WILDCARD_TOPOLOGY = ''


class BandwidthProfile:
    """Validated, deduplicated and sorted bandwidth records"""

    def __init__(self, frame):
        self._frame = frame.reset_index(drop=True)

    @property
    def frame(self):
        """Copy of the underlying records"""
        return self._frame.copy()

    def __len__(self):
        return len(self._frame)

    def __eq__(self, other):
        return isinstance(other, BandwidthProfile) and self._frame.equals(other._frame)

    def keys(self):
        """Distinct (op, locality, topology, scale) curve keys"""
        unique = self._frame[KEY_COLUMNS].drop_duplicates()
        return [tuple(row) for row in unique.itertuples(index=False)]

    def curve(self, op, locality, scale, topology=None):
        """
        Sorted (msg_bytes, bw) arrays for one key

        Exact scale rows win over scale-0 rows, exact topology rows over
        topology-independent rows.
        """
        frame = self._frame
        rows = frame[(frame['op'] == op) & (frame['locality'] == locality)]
        if topology is not None:
            exact = rows[rows['topology'] == topology]
            rows = exact if len(exact) else rows[rows['topology'] == WILDCARD_TOPOLOGY]
        elif rows['topology'].nunique() > 1:
            raise MissingProfileKey(
                f"ambiguous topology for ({op}, {locality}); pass one of {sorted(rows['topology'].unique())}",
                op=op, locality=locality)

        exact_scale = rows[rows['scale'] == scale]
        rows = exact_scale if len(exact_scale) else rows[rows['scale'] == WILDCARD_SCALE]
        if rows.empty:
            raise MissingProfileKey(
                f"no bandwidth records for op={op} locality={locality} scale={scale} topology={topology}",
                op=op, locality=locality, scale=int(scale), topology=topology)
        rows = rows.sort_values('msg_bytes')
        return rows['msg_bytes'].to_numpy(dtype=float), rows['bw_bytes_per_s'].to_numpy(dtype=float)

    def merged_with(self, other):
        """
        Combine two profiles; curves present in `other` replace whole curves here

        Args:
            other: BandwidthProfile loaded later

        Returns:
            New BandwidthProfile
        """
        if len(other) == 0:
            return self
        if len(self) == 0:
            return other
        overridden = set(self.keys()) & set(other.keys())
        for key in sorted(overridden, key=str):
            logger.warning("bandwidth curve %s overridden by a later profile", key)
        keep = [tuple(row) not in overridden
                for row in self._frame[KEY_COLUMNS].itertuples(index=False)]
        base = self._frame[np.array(keep, dtype=bool)]
        return BandwidthProfile(_normalize(pd.concat([base, other._frame], ignore_index=True)))

    def to_csv(self, digest=None):
        """CSV text with the profile header; a provenance comment line when digest is given"""
        text = self._frame[COLUMNS].to_csv(index=False, lineterminator='\n')
        return (provenance_header(digest) if digest else '') + text

    def summary(self):
        return {'records': len(self), 'curves': len(self.keys())}


def _normalize(frame):
    """Dedup last-wins on (key, msg_bytes) and sort"""
    frame = frame.drop_duplicates(subset=KEY_COLUMNS + ['msg_bytes'], keep='last')
    frame = frame.sort_values(KEY_COLUMNS + ['msg_bytes'], kind='mergesort')
    return frame[COLUMNS].reset_index(drop=True)


def _as_frame(records):
    if isinstance(records, pd.DataFrame):
        return records.copy()
    try:
        return pd.DataFrame(list(records))
    except (TypeError, ValueError) as e:
        raise MalformedRow(f"records are not tabular: {e}")


def _from_nccl_schema(frame, locality, topology):
    """Map benchmark-log columns onto the profile schema"""
    if locality is None:
        raise MalformedRow("nccl-style records need a locality", columns=list(frame.columns))
    return pd.DataFrame({
        'op': frame['op'],
        'locality': locality,
        'topology': topology or WILDCARD_TOPOLOGY,
        'scale': frame['nranks'],
        'msg_bytes': frame['size_bytes'],
        'bw_bytes_per_s': frame['busbw_bytes_per_s'],
    })


def ingest_bandwidth(records, locality=None, topology=None, source=''):
    """
    Validate bandwidth records into a profile

    Args:
        records: DataFrame or iterable of dicts, in profile schema or nccl-tests schema
        locality: Locality for nccl-tests schema rows (which carry none)
        topology: Topology tag for nccl-tests schema rows
        source: Label for log lines

    Returns:
        BandwidthProfile
    """
    frame = _as_frame(records)
    if set(COLUMNS) <= set(frame.columns):
        frame = frame[COLUMNS]
    elif set(NCCL_COLUMNS) <= set(frame.columns):
        frame = _from_nccl_schema(frame, locality, topology)
    else:
        raise MalformedRow(f"unrecognized bandwidth columns {sorted(map(str, frame.columns))}",
                           columns=[str(c) for c in frame.columns])

    frame = frame.copy()
    frame['topology'] = frame['topology'].fillna(WILDCARD_TOPOLOGY).astype(str)
    frame['op'] = frame['op'].astype(str).str.strip().str.lower()
    frame['locality'] = frame['locality'].astype(str).str.strip().str.lower()

    for index, row in enumerate(frame.itertuples(index=False)):
        if row.op not in OP_KINDS:
            raise MalformedRow(f"row {index}: op {row.op!r} not in {OP_KINDS}", row=index)
        if row.locality not in LOCALITIES:
            raise MalformedRow(f"row {index}: locality {row.locality!r} not in {LOCALITIES}", row=index)

    for column in ('scale', 'msg_bytes', 'bw_bytes_per_s'):
        numeric = pd.to_numeric(frame[column], errors='coerce')
        bad = numeric.isna()
        if bad.any():
            index = int(np.flatnonzero(bad.to_numpy())[0])
            raise MalformedRow(f"row {index}: {column} is not numeric", row=index, column=column)
        frame[column] = numeric

    bad_bw = frame['bw_bytes_per_s'] <= 0
    if bad_bw.any():
        index = int(np.flatnonzero(bad_bw.to_numpy())[0])
        raise NonPositiveBandwidth(f"row {index}: bandwidth must be > 0", row=index)
    for column, low in (('scale', 0), ('msg_bytes', 1)):
        values = frame[column]
        bad = (values < low) | (values != np.floor(values))
        if bad.any():
            index = int(np.flatnonzero(bad.to_numpy())[0])
            raise MalformedRow(f"row {index}: {column} must be an integer >= {low}", row=index)

    frame['scale'] = frame['scale'].astype('int64')
    frame['msg_bytes'] = frame['msg_bytes'].astype('int64')
    frame['bw_bytes_per_s'] = frame['bw_bytes_per_s'].astype('float64')

    profile = BandwidthProfile(_normalize(frame))
    log_action('ingest_bandwidth', f"{source or 'records'}: {len(frame)} rows -> {len(profile)} records")
    return profile


def read_bandwidth_csv(path, locality=None, topology=None):
    """Read a bandwidth CSV (comment lines start with '#')"""
    try:
        frame = pd.read_csv(path, comment='#', keep_default_na=False,
                            dtype={'topology': str, 'op': str, 'locality': str})
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise MalformedRow(f"{path}: {e}", path=str(path))
    return ingest_bandwidth(frame, locality=locality, topology=topology, source=str(path))


def lookup_bandwidth(profile, op, locality, scale, message_size, topology=None):
    """
    Effective bandwidth for one operation

    Args:
        profile: BandwidthProfile
        op: p2p, allreduce or alltoall
        locality: intra or inter
        scale: Group size
        message_size: Bytes per operation
        topology: Optional topology tag filter

    Returns:
        Bytes per second, piecewise linear in log2(message_size), clamped at the ends
    """
    if message_size <= 0:
        raise ProfileError(f"message size must be > 0, got {message_size}")
    sizes, bws = profile.curve(op, locality, scale, topology)
    return float(np.interp(np.log2(float(message_size)), np.log2(sizes), bws))
