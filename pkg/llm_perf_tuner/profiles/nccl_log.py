"""
Parser for collective benchmark stdout tables (nccl-tests layout)
"""
import re

import pandas as pd

from backend.errors import MalformedRow
from backend.utils import get_logger

logger = get_logger('profiles.nccl_log')

SIZE_COLUMN = 0
BUSBW_COLUMN = 7  # out-of-place busbw, GB/s
GB = 1e9

_RANK_LINE = re.compile(r'^#\s*Rank\s+\d+')
_OP_NAMES = {
    'all_reduce': 'allreduce', 'allreduce': 'allreduce',
    'alltoall': 'alltoall', 'all_to_all': 'alltoall',
    'sendrecv': 'p2p', 'send_recv': 'p2p', 'p2p': 'p2p',
}


def op_from_binary(name):
    """Map a benchmark binary name like all_reduce_perf to an op kind"""
    stem = name.rsplit('/', 1)[-1].replace('_perf', '').lower()
    if stem not in _OP_NAMES:
        raise MalformedRow(f"cannot infer op from {name!r}")
    return _OP_NAMES[stem]


def parse_nccl_tests_log(text, op, nranks=None):
    """
    Extract (size, busbw) rows from benchmark output

    Args:
        text: Raw stdout
        op: Op kind or benchmark binary name
        nranks: Group scale; counted from '#  Rank' lines when omitted

    Returns:
        DataFrame in the nccl-tests schema (size_bytes, busbw_bytes_per_s, op, nranks)
    """
    op = op if op in ('p2p', 'allreduce', 'alltoall') else op_from_binary(op)
    rows = []
    ranks_seen = 0
    for line_no, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped:
            continue
        if stripped.startswith('#'):
            if _RANK_LINE.match(stripped):
                ranks_seen += 1
            continue
        fields = stripped.split()
        if not fields[0].isdigit():
            continue
        if len(fields) <= BUSBW_COLUMN:
            raise MalformedRow(f"line {line_no}: expected at least {BUSBW_COLUMN + 1} columns", line=line_no)
        try:
            busbw = float(fields[BUSBW_COLUMN]) * GB
        except ValueError:
            raise MalformedRow(f"line {line_no}: busbw {fields[BUSBW_COLUMN]!r} is not numeric", line=line_no)
        rows.append({'size_bytes': int(fields[SIZE_COLUMN]), 'busbw_bytes_per_s': busbw})

    if not rows:
        raise MalformedRow("no benchmark rows found")
    scale = nranks or ranks_seen
    if not scale:
        raise MalformedRow("group scale unknown: pass nranks or include '# Rank' lines")

    frame = pd.DataFrame(rows)
    frame['op'] = op
    frame['nranks'] = int(scale)
    # tiny messages print 0.00 GB/s
    usable = (frame['size_bytes'] > 0) & (frame['busbw_bytes_per_s'] > 0)
    if not usable.all():
        logger.info("dropped %d rows with zero size or bandwidth", int((~usable).sum()))
    frame = frame[usable].reset_index(drop=True)
    logger.info("parsed %d %s rows at scale %d", len(frame), op, scale)
    return frame
