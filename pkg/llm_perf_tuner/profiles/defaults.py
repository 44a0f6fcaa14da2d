"""
Bundled reference profiles
Coarse two-knot curves built from published benchmark figures for the
pcie, nvlink and nvswitch reference platforms. Good enough to run the tool
out of the box; ingest measured profiles for real decisions.
"""
from .bandwidth import WILDCARD_SCALE, ingest_bandwidth
from .utilization import ingest_utilization

DEFAULTS_LABEL = 'reference defaults (published benchmark figures)'

KiB = 1024
MiB = 1024 * KiB
GBps = 1e9
LOW_KNOT = 64 * KiB
LOW_FRACTION = 0.15

# Intra-node P2P: peak unidirectional bandwidth and the size where it plateaus
INTRA_P2P = {
    'pcie': (13.2 * GBps, 2 * MiB),
    'nvlink': (48.4 * GBps, 16 * MiB),
    'nvswitch': (174.0 * GBps, 128 * MiB),
}

# Intra-node AllReduce bus bandwidth plateau (50 / 1000 / 1500 Gbps) per group scale
INTRA_ALLREDUCE = {
    'pcie': {2: 6.25 * GBps, 4: 6.25 * GBps, 8: 6.25 * GBps},
    # scale 4 is ~2x scale 2 and ~3x scale 3 on the four-GPU NVLink mesh
    'nvlink': {2: 62.5 * GBps, 3: 41.7 * GBps, 4: 125.0 * GBps},
    'nvswitch': {2: 187.5 * GBps, 4: 187.5 * GBps, 8: 187.5 * GBps},
}

# Inter-node: NIC limited and scale-insensitive
INTER_P2P = {
    'pcie': 11.0 * GBps,
    'nvlink': 22.0 * GBps,
    'nvswitch': 45.0 * GBps,
}
INTER_ALLREDUCE = {
    'pcie': 10.0 * GBps,
    'nvlink': 20.0 * GBps,
    'nvswitch': 40.0 * GBps,
}
INTER_PLATEAU = 16 * MiB

# GPU utilization grid: per-GPU parameter count x micro-batch
MU_PARAMS = (0.6e9, 1.2e9, 2.4e9, 4.8e9)
MU_MICRO_BATCHES = (1, 2, 3, 4, 6, 8)
MU_TABLE = (
    (0.255, 0.340, 0.383, 0.408, 0.442, 0.459),
    (0.276, 0.368, 0.414, 0.442, 0.478, 0.497),
    (0.300, 0.400, 0.450, 0.480, 0.520, 0.540),
    (0.312, 0.416, 0.468, 0.499, 0.541, 0.562),
)


def _curve(op, locality, topology, scale, peak, plateau):
    return [
        dict(op=op, locality=locality, topology=topology, scale=scale,
             msg_bytes=LOW_KNOT, bw_bytes_per_s=peak * LOW_FRACTION),
        dict(op=op, locality=locality, topology=topology, scale=scale,
             msg_bytes=plateau, bw_bytes_per_s=peak),
    ]


def default_bandwidth_records():
    """Rows of the bundled bandwidth profile"""
    rows = []
    for topology, (peak, plateau) in INTRA_P2P.items():
        rows += _curve('p2p', 'intra', topology, 2, peak, plateau)
        for scale, busbw in INTRA_ALLREDUCE[topology].items():
            rows += _curve('allreduce', 'intra', topology, scale, busbw, plateau)
            rows += _curve('alltoall', 'intra', topology, scale, busbw, plateau)
        rows += _curve('p2p', 'inter', topology, WILDCARD_SCALE, INTER_P2P[topology], INTER_PLATEAU)
        rows += _curve('allreduce', 'inter', topology, WILDCARD_SCALE, INTER_ALLREDUCE[topology], INTER_PLATEAU)
        rows += _curve('alltoall', 'inter', topology, WILDCARD_SCALE, INTER_ALLREDUCE[topology], INTER_PLATEAU)
    return rows


def default_utilization_records():
    rows = []
    for params, mus in zip(MU_PARAMS, MU_TABLE):
        for b, mu in zip(MU_MICRO_BATCHES, mus):
            rows.append(dict(params_per_gpu=params, micro_batch=b, mu=mu))
    return rows


def default_bandwidth_profile():
    return ingest_bandwidth(default_bandwidth_records(), source=DEFAULTS_LABEL)


def default_utilization_profile():
    return ingest_utilization(default_utilization_records(), source=DEFAULTS_LABEL)
