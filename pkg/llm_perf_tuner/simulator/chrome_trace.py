"""
Chrome trace export
Simulated schedules as chrome://tracing / Perfetto complete events
"""
import json

from backend.utils import provenance

US_PER_S = 1e6

_NAMES = {'F': 'forward', 'B': 'backward'}


def trace_events(result):
    """
    Complete ("X") events for every scheduled op

    Args:
        result: SimResult

    Returns:
        List of event dicts, pid = stage, tid = chunk
    """
    events = []
    stages = sorted({op.stage for op in result.ops})
    for stage in stages:
        events.append({'name': 'process_name', 'ph': 'M', 'pid': stage, 'tid': 0,
                       'args': {'name': f"stage {stage}"}})
    for op in result.ops:
        events.append({
            'name': f"{op.kind}{op.mb}",
            'cat': _NAMES[op.kind],
            'ph': 'X',
            'ts': op.start * US_PER_S,
            'dur': (op.end - op.start) * US_PER_S,
            'pid': op.stage,
            'tid': op.chunk,
            'args': {'micro_batch': op.mb, 'chunk': op.chunk},
        })
    return events


def to_chrome_trace(result, digest=None):
    """Trace document with the provenance block in otherData"""
    document = {'traceEvents': trace_events(result), 'displayTimeUnit': 'ms'}
    if digest is not None:
        document['otherData'] = provenance(digest)
    return document


def chrome_trace_json(result, digest=None):
    """Serialized trace; key order is fixed so repeated runs match byte for byte"""
    return json.dumps(to_chrome_trace(result, digest), indent=1, sort_keys=True) + "\n"
