"""
Report generation
Builds every output artifact in memory; writing happens once computation has finished
"""
import json
import os

import pandas as pd
import yaml

from .config import Config
from .traffic_model import (TRAFFIC_CLASSES, expected_alltoall_matrix, heatmap_csv, predict_alltoall_sequence,
                            sample_alltoall_matrix, synthetic_alltoall_trace, uniformity_metrics,
                            uniformity_trend)
from .utils import get_logger, log_action, provenance, provenance_header, write_text

logger = get_logger('reporting')


class ArtifactSet:
    """Named text artifacts of one command, written together"""

    def __init__(self, digest):
        """
        Initialize artifact set

        Args:
            digest: Input digest recorded in every artifact header
        """
        self.digest = digest
        self.files = {}

    def add(self, name, text):
        self.files[name] = text
        return self

    def add_json(self, name, doc):
        doc = dict(doc)
        doc.setdefault('provenance', provenance(self.digest))
        return self.add(name, json.dumps(doc, indent=2, sort_keys=True) + '\n')

    def write(self, out_dir):
        """Write all artifacts; returns the written paths in name order"""
        Config.init_app(out_dir)
        paths = [write_text(os.path.join(out_dir, name), self.files[name]) for name in sorted(self.files)]
        log_action('artifacts', f"{len(paths)} files in {out_dir}")
        return paths

    def get_stats(self):
        return {'files': len(self.files), 'bytes': sum(len(text) for text in self.files.values())}


def prediction_report(prediction, model, platform, profiles_label):
    """
    Human-readable prediction report

    Args:
        prediction: cost_model.Prediction
        model: ModelSpec
        platform: PlatformSpec
        profiles_label: Where the profiles came from

    Returns:
        Report text without the provenance header
    """
    b = prediction.breakdown
    parallel = prediction.parallel
    lines = [
        f"model      {model.name or model.kind.value}  N={model.param_count}  l={model.layers} "
        f"h={model.hidden} s={model.seq_len} g={model.global_batch}",
        f"layout     {parallel.label()}  v={parallel.interleave}  ep={parallel.ep}  "
        f"m={prediction.derived.micro_batches}",
        f"platform   {platform.machines}x{platform.gpus_per_machine} {platform.intra_topology} "
        f"peak={platform.peak_flops:.4g} FLOP/s",
        f"profiles   {profiles_label}",
        f"mu         {prediction.mu:.6g}",
        "",
        b.format_report().rstrip('\n'),
        "",
        f"throughput         {prediction.throughput_flops:.6g} FLOP/s "
        f"({prediction.throughput_flops_per_gpu:.6g} per GPU)",
        f"tokens_per_s       {prediction.tokens_per_s:.6g}",
        f"memory_per_gpu     {prediction.memory_bytes:.6g} bytes "
        f"({'fits' if prediction.memory_ok else 'exceeds'} {platform.gpu_mem_bytes:.6g})",
    ]
    lines.extend(f"warning            {w}" for w in prediction.warnings)
    return '\n'.join(lines) + '\n'


def predict_artifacts(prediction, model, parallel, platform, profiles_label, config_echo, digest):
    """breakdown.json, report.txt and config_echo.yaml"""
    artifacts = ArtifactSet(digest)
    artifacts.add_json('breakdown.json', prediction.to_dict())
    artifacts.add('report.txt', provenance_header(digest) + prediction_report(prediction, model, platform,
                                                                            profiles_label))
    artifacts.add('config_echo.yaml', provenance_header(digest) + config_echo)
    return artifacts


def heatmap_artifacts(matrix, digest, mapping=None, alltoall=None):
    """
    Traffic heatmap artifacts

    Args:
        matrix: TrafficMatrix
        digest: Input digest
        mapping: RankMapping, written as ranks.csv when given
        alltoall: (model, e, k_active) of a MoE layout, adds the AllToAll views

    Returns:
        ArtifactSet with one CSV per traffic class and the combined JSON document
    """
    artifacts = ArtifactSet(digest)
    for name in TRAFFIC_CLASSES:
        if name == 'ATA' and not matrix.classes[name].any():
            continue
        artifacts.add(f"heatmap_{name}.csv", matrix.class_csv(name, digest))
    artifacts.add('heatmap.json', matrix.to_json(digest) + '\n')
    if mapping is not None:
        artifacts.add('ranks.csv', provenance_header(digest) +
                      mapping.to_frame().to_csv(index=False, lineterminator='\n'))
    if alltoall is not None:
        alltoall_artifacts(artifacts, *alltoall)
    return artifacts


def alltoall_artifacts(artifacts, model, e, k_active, steps=None, skew=None):
    """
    Expected and gate-sampled AllToAll heatmaps of one EP group, the three
    AllToAlls predicted from the sampled first one, and the uniformity trend
    of a synthetic training run
    """
    steps = Config.ATA_TREND_STEPS if steps is None else steps
    skew = Config.ATA_GATE_SKEW if skew is None else skew
    digest = artifacts.digest
    token_bytes = model.precision_bytes * model.hidden
    tokens = model.global_batch * model.seq_len

    expected = expected_alltoall_matrix(model, e, k_active)
    sampled = sample_alltoall_matrix(e, tokens, k_active, skew, token_bytes)
    fw2, bw1, bw2 = predict_alltoall_sequence(sampled)
    trend = uniformity_trend(synthetic_alltoall_trace(e, steps, tokens * token_bytes))

    artifacts.add('alltoall_expected.csv', heatmap_csv(expected, digest))
    artifacts.add('alltoall_sampled.csv', heatmap_csv(sampled, digest))
    frame = pd.DataFrame(trend, columns=['step', 'mean_bytes', 'variance_bytes2'])
    artifacts.add('alltoall_trend.csv', provenance_header(digest) + frame.to_csv(index=False, lineterminator='\n'))
    artifacts.add_json('alltoall.json', {
        'ep': e,
        'k_active': k_active,
        'gate_skew': skew,
        'uniformity': {'expected': uniformity_metrics(expected), 'sampled': uniformity_metrics(sampled)},
        'sequence': {'fw1': sampled.tolist(), 'fw2': fw2.tolist(), 'bw1': bw1.tolist(), 'bw2': bw2.tolist()},
    })
    log_action('alltoall_views', f"e={e} k={k_active} steps={steps}")
    return artifacts


def timeline_artifacts(timeline, digest, name='timeline.csv'):
    return ArtifactSet(digest).add(name, timeline.to_csv(digest))


def sim_artifacts(result, sim, trace_json, digest):
    """trace.json, sim_summary.txt and one timeline CSV per stage"""
    artifacts = ArtifactSet(digest)
    artifacts.add('trace.json', trace_json)
    summary = {'input': {'p': sim.p, 'm': sim.m, 'v': sim.v, 'fwd': sim.fwd, 'bwd': sim.backward,
                         'tp_fwd': sim.tp_fwd, 'tp_bwd': sim.tp_bwd, 'pp_hop': sim.hop},
               **result.summary(),
               'closed_form_bubble_ratio': (sim.p - 1) / ((sim.p - 1 + sim.m) * sim.v)}
    artifacts.add('sim_summary.txt', provenance_header(digest) + yaml.safe_dump(summary, sort_keys=True))
    for stage, timeline in sorted(result.timelines.items()):
        artifacts.add(f"timeline_stage{stage}.csv", timeline.to_csv(digest))
    return artifacts


def tune_artifacts(report, fmt='txt'):
    """tune_report.json plus a table (txt) or CSVs (csv)"""
    artifacts = ArtifactSet(report.digest)
    artifacts.add('tune_report.json', report.to_json())
    if fmt == 'csv':
        artifacts.add('ranking.csv', report.ranking_csv())
        if report.scale:
            artifacts.add('scale.csv', report.scale_csv())
    else:
        artifacts.add('tune_report.txt', report.to_table())
    return artifacts
