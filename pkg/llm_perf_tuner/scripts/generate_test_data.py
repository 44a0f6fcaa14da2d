"""
Synthetic profile and config generator
Writes flat and monotone profiles plus a sample config for trying the tool without measurements
"""
import argparse
import os
import sys

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import numpy as np

from backend.config import Config
from backend.specs import dump_config, reference_setup
from backend.utils import input_digest, write_text
from profiles.bandwidth import LOCALITIES, OP_KINDS, WILDCARD_SCALE, WILDCARD_TOPOLOGY, ingest_bandwidth
from profiles.utilization import ingest_utilization

MSG_SIZES = [2 ** k for k in range(10, 31, 2)]


def flat_bandwidth(bw):
    """Every op and locality at one bandwidth, any scale and topology"""
    rows = [dict(op=op, locality=locality, topology=WILDCARD_TOPOLOGY, scale=WILDCARD_SCALE,
                 msg_bytes=size, bw_bytes_per_s=bw)
            for op in OP_KINDS for locality in LOCALITIES for size in (MSG_SIZES[0], MSG_SIZES[-1])]
    return ingest_bandwidth(rows, source='flat')


def saturating_bandwidth(peak, half_size, seed=0):
    """Curves rising as size / (size + half_size) with a little measurement noise"""
    rng = np.random.default_rng(seed)
    rows = []
    for op in OP_KINDS:
        for locality in LOCALITIES:
            level = peak if locality == 'intra' else peak / 4
            for size in MSG_SIZES:
                bw = level * size / (size + half_size) * (1.0 + 0.02 * rng.standard_normal())
                rows.append(dict(op=op, locality=locality, topology=WILDCARD_TOPOLOGY, scale=WILDCARD_SCALE,
                                 msg_bytes=size, bw_bytes_per_s=max(bw, 1.0)))
    return ingest_bandwidth(rows, source='saturating')


def monotone_utilization(params_points, micro_batches, low=0.3, high=0.55):
    """mu rising with b and saturating, identical for every params point"""
    rows = []
    top = max(micro_batches)
    for params in params_points:
        for b in micro_batches:
            rows.append(dict(params_per_gpu=params, micro_batch=b, mu=low + (high - low) * np.sqrt(b / top)))
    return ingest_utilization(rows, source='monotone')


def main():
    parser = argparse.ArgumentParser(description='Generate synthetic profiles and a sample config')
    parser.add_argument('--out', default=os.path.join(Config.OUTPUT_DIR, 'synthetic'))
    parser.add_argument('--seed', type=int, default=0)
    args = parser.parse_args()

    print("=" * 60)
    print("Synthetic Test Data")
    print("=" * 60)

    digest = input_digest({'script': 'generate_test_data', 'seed': args.seed})
    outputs = {
        'flat_bandwidth.csv': flat_bandwidth(1e9).to_csv(digest),
        'saturating_bandwidth.csv': saturating_bandwidth(100e9, 4 * 2 ** 20, seed=args.seed).to_csv(digest),
        'monotone_utilization.csv': monotone_utilization([1e9, 4e9], [1, 2, 4, 8, 16]).to_csv(digest),
        'gpt_39b_hopper.yaml': dump_config(*reference_setup('gpt-39b', micro_batch=2)),
    }
    for name, text in outputs.items():
        path = write_text(os.path.join(args.out, name), text)
        print(f"✓ {path}")

    print("=" * 60)


if __name__ == '__main__':
    main()
