"""
Step-by-step ring AllReduce
Moves real chunks around the ring and counts the bytes each directed edge carries
"""
from collections import defaultdict

import numpy as np

from backend.traffic_model import chunk_sizes


def ring_allreduce(buffers):
    """
    Reduce-scatter then all-gather over a ring of k members

    Args:
        buffers: k equal-length 1-D arrays, one per member

    Returns:
        (reduced buffers, {(i, i+1): elements sent})
    """
    data = [np.array(b, dtype=np.int64) for b in buffers]
    k = len(data)
    sent = defaultdict(int)
    if k < 2:
        return data, dict(sent)
    sizes = chunk_sizes(len(data[0]), k)
    bounds = np.concatenate([[0], np.cumsum(sizes)])

    def chunk(c):
        return slice(int(bounds[c]), int(bounds[c + 1]))

    # reduce-scatter: after k-1 rounds member i owns the sum of chunk i+1
    for step in range(k - 1):
        outgoing = [(i, (i - step) % k, data[i][chunk((i - step) % k)].copy()) for i in range(k)]
        for i, c, values in outgoing:
            dst = (i + 1) % k
            data[dst][chunk(c)] += values
            sent[(i, dst)] += len(values)

    # all-gather: circulate the owned sums
    for step in range(k - 1):
        outgoing = [(i, (i + 1 - step) % k, data[i][chunk((i + 1 - step) % k)].copy()) for i in range(k)]
        for i, c, values in outgoing:
            dst = (i + 1) % k
            data[dst][chunk(c)] = values
            sent[(i, dst)] += len(values)

    return data, dict(sent)


def ring_edge_bytes(payload, k):
    """Bytes per directed edge for a payload of `payload` one-byte elements"""
    buffers = [np.zeros(int(payload), dtype=np.int64) for _ in range(k)]
    _, sent = ring_allreduce(buffers)
    return sent
