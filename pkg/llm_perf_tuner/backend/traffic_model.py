"""
Traffic model
Rank placement, per-iteration communication matrix, On-Off timeline and MoE AllToAll prediction
"""
import json
from dataclasses import dataclass, field
from typing import Dict, Tuple

import numpy as np
import pandas as pd

from .config import Config
from .errors import EmptyHeatmap, GpuCountMismatch, InvalidSpec, NonSquare, UnmappableDpGroup, UnmappableTpGroup
from .utils import get_logger, log_action, provenance, provenance_header

logger = get_logger('traffic')

TRAFFIC_CLASSES = ('TP', 'PP', 'DP', 'EmbSync', 'ATA')
TP_ALLREDUCES_PER_LAYER = 6
TP_ALLREDUCES_NO_RECOMPUTE = 4
ATA_OPS_PER_LAYER = 6
ATA_OPS_NO_RECOMPUTE = 4


# ---------------------------------------------------------------------------
# Rank placement

@dataclass(frozen=True)
class RankInfo:
    rank: int
    machine: int
    local_slot: int
    stage: int
    tp_group: int
    tp_index: int
    dp_group: int
    dp_index: int


@dataclass(frozen=True)
class RankMapping:
    """Placement of every global rank; TP index varies fastest, then DP, then stage"""
    pp: int
    tp: int
    dp: int
    gpus_per_machine: int
    ranks: Tuple[RankInfo, ...]
    tp_spans_machines: bool = False
    warnings: Tuple[str, ...] = ()

    @property
    def world_size(self):
        return len(self.ranks)

    def rank_of(self, stage, dp_index, tp_index):
        return stage * self.tp * self.dp + dp_index * self.tp + tp_index

    def tp_groups(self):
        """TP groups as rank lists ordered by tp index"""
        return [[self.rank_of(s, j, i) for i in range(self.tp)]
                for s in range(self.pp) for j in range(self.dp)]

    def dp_groups(self):
        return [[self.rank_of(s, j, i) for j in range(self.dp)]
                for s in range(self.pp) for i in range(self.tp)]

    def ep_groups(self, ep):
        """Expert-parallel groups: consecutive runs of `ep` members of each DP group"""
        if ep < 1 or self.dp % ep:
            raise InvalidSpec(f"ep={ep} must divide d={self.dp}")
        return [group[k:k + ep] for group in self.dp_groups() for k in range(0, self.dp, ep)]

    def pp_pairs(self):
        """(rank in stage j, rank in stage j+1) pairs at matching (dp, tp) index"""
        return [(self.rank_of(s, j, i), self.rank_of(s + 1, j, i))
                for s in range(self.pp - 1) for j in range(self.dp) for i in range(self.tp)]

    def is_intra_machine(self, members):
        return len({self.ranks[r].machine for r in members}) == 1

    def tp_locality(self):
        return 'intra' if all(self.is_intra_machine(g) for g in self.tp_groups()) else 'inter'

    def dp_locality(self):
        return 'intra' if all(self.is_intra_machine(g) for g in self.dp_groups()) else 'inter'

    def pp_locality(self):
        pairs = self.pp_pairs()
        if not pairs:
            return 'intra'
        return 'intra' if all(self.is_intra_machine(pair) for pair in pairs) else 'inter'

    def ep_locality(self, ep):
        return 'intra' if all(self.is_intra_machine(g) for g in self.ep_groups(ep)) else 'inter'

    def to_frame(self):
        return pd.DataFrame([r.__dict__ for r in self.ranks])


def map_ranks(parallel, platform, strict=None):
    """
    Place ranks on machines

    A stage block of t*d GPUs that fits one machine but splits a DP group across
    two (t*d not dividing gpus_per_machine) raises UnmappableDpGroup.

    Args:
        parallel: ParallelismConfig
        platform: PlatformSpec
        strict: Reject TP groups that cross machines (default Config.STRICT_MAPPING)

    Returns:
        RankMapping
    """
    strict = Config.STRICT_MAPPING if strict is None else strict
    p, t, d = parallel.pp, parallel.tp, parallel.dp
    gpm = platform.gpus_per_machine
    if p * t * d != platform.total_gpus:
        raise GpuCountMismatch(f"p*t*d = {p * t * d} but the platform has {platform.total_gpus} GPUs")

    ranks = []
    for rank in range(p * t * d):
        stage, rest = divmod(rank, t * d)
        dp_index, tp_index = divmod(rest, t)
        ranks.append(RankInfo(
            rank=rank, machine=rank // gpm, local_slot=rank % gpm, stage=stage,
            tp_group=stage * d + dp_index, tp_index=tp_index,
            dp_group=stage * t + tp_index, dp_index=dp_index,
        ))

    spans = t > gpm or gpm % t != 0
    warnings = ()
    if spans:
        message = f"TP groups of {t} cross machines of {gpm} GPUs; TP uses inter-node bandwidth"
        if strict:
            raise UnmappableTpGroup(message, tp=t, gpus_per_machine=gpm)
        logger.warning(message)
        warnings = (message,)

    mapping = RankMapping(pp=p, tp=t, dp=d, gpus_per_machine=gpm, ranks=tuple(ranks),
                          tp_spans_machines=spans, warnings=warnings)

    # a stage block of t*d GPUs that fits one machine must keep its DP groups on it
    if t * d <= gpm:
        crossing = [g for g in mapping.dp_groups() if not mapping.is_intra_machine(g)]
        if crossing:
            raise UnmappableDpGroup(
                f"stage blocks of t*d={t * d} GPUs straddle machines of {gpm} GPUs; "
                f"t*d must divide gpus_per_machine", groups=len(crossing), first=crossing[0])
    return mapping


# ---------------------------------------------------------------------------
# Collective renderers

def chunk_sizes(payload, k):
    """Integer chunk sizes of a payload split k ways (sizes differ by at most one)"""
    base, extra = divmod(int(payload), k)
    return [base + 1 if i < extra else base for i in range(k)]


def ring_allreduce_edges(members, payload):
    """
    Directed ring edges of one ring AllReduce

    Member i sends every chunk except chunk i+1 during reduce-scatter and every
    chunk except chunk i+2 during all-gather.

    Returns:
        List of (src, dst, bytes); empty for single-member groups
    """
    k = len(members)
    if k < 2 or payload <= 0:
        return []
    chunks = chunk_sizes(payload, k)
    edges = []
    for i, src in enumerate(members):
        dst = members[(i + 1) % k]
        edges.append((src, dst, 2 * int(payload) - chunks[(i + 1) % k] - chunks[(i + 2) % k]))
    return edges


COLLECTIVE_RENDERERS = {'ring': ring_allreduce_edges}


# ---------------------------------------------------------------------------
# Traffic matrix

@dataclass
class TrafficMatrix:
    """Per-class n x n byte volumes for one iteration, entry [src, dst]"""
    classes: Dict[str, np.ndarray]
    ranks: int

    def class_total(self, name):
        return int(self.classes[name].sum())

    def totals(self):
        return {name: self.class_total(name) for name in TRAFFIC_CLASSES}

    def total(self):
        return sum(self.totals().values())

    def share(self, name):
        total = self.total()
        return self.class_total(name) / total if total else 0.0

    def combined(self):
        return sum(self.classes[name] for name in TRAFFIC_CLASSES)

    def edges(self, name):
        """Nonzero directed (src, dst) pairs of one class"""
        src, dst = np.nonzero(self.classes[name])
        return list(zip(src.tolist(), dst.tolist()))

    def class_frame(self, name):
        labels = list(range(self.ranks))
        frame = pd.DataFrame(self.classes[name], index=labels, columns=labels)
        frame.index.name = 'rank'
        return frame

    def class_csv(self, name, digest=None):
        text = self.class_frame(name).to_csv(lineterminator='\n')
        return (provenance_header(digest) if digest else '') + text

    def to_dict(self, digest=None):
        doc = {
            'ranks': self.ranks,
            'unit': 'bytes',
            'totals': self.totals(),
            'classes': {name: self.classes[name].tolist() for name in TRAFFIC_CLASSES},
        }
        if digest:
            doc['provenance'] = provenance(digest)
        return doc

    def to_json(self, digest=None):
        return json.dumps(self.to_dict(digest), sort_keys=True, indent=1)


def _layers_on_stage(model, parallel, stage):
    """Global layer indices held by one pipeline stage (all of its chunks)"""
    p, v = parallel.pp, parallel.interleave
    per_chunk = model.layers // (p * v)
    indices = []
    for chunk in range(v):
        start = (chunk * p + stage) * per_chunk
        indices.extend(range(start, start + per_chunk))
    return indices


def expert_layers_on_stage(model, parallel, stage):
    if not model.is_moe:
        return 0
    interval = model.moe_expert_interval
    return sum(1 for layer in _layers_on_stage(model, parallel, stage) if (layer + 1) % interval == 0)


def activation_bytes(model, parallel):
    """Per micro-batch activation payload 2bsh (precision * b * s * h)"""
    return model.precision_bytes * parallel.micro_batch * model.seq_len * model.hidden


def dp_payload_bytes(model, parallel):
    return model.precision_bytes * model.param_count // (parallel.pp * parallel.tp)


def build_traffic_matrix(model, parallel, derived, mapping, recompute=None, k_active=None,
                         renderer='ring', scatter_gather=None):
    """
    Per-iteration communication matrix

    Args:
        model: ModelSpec
        parallel: ParallelismConfig
        derived: DerivedParams from validate
        mapping: RankMapping from map_ranks
        recompute: Six TP AllReduces per layer when on, four when off
        k_active: Experts per token for the ATA class
        renderer: Collective edge renderer name
        scatter_gather: Split each boundary activation across the TP peer pairs

    Returns:
        TrafficMatrix
    """
    recompute = Config.RECOMPUTE if recompute is None else recompute
    k_active = Config.K_ACTIVE if k_active is None else k_active
    scatter_gather = Config.PP_SCATTER_GATHER if scatter_gather is None else scatter_gather
    render = COLLECTIVE_RENDERERS[renderer]

    n = mapping.world_size
    m, v = derived.micro_batches, parallel.interleave
    classes = {name: np.zeros((n, n), dtype=np.int64) for name in TRAFFIC_CLASSES}
    act = activation_bytes(model, parallel)

    # TP: AllReduces of 2bsh per layer per micro-batch
    per_layer = TP_ALLREDUCES_PER_LAYER if recompute else TP_ALLREDUCES_NO_RECOMPUTE
    tp_count = m * derived.layers_per_stage * per_layer
    for group in mapping.tp_groups():
        for src, dst, volume in render(group, act):
            classes['TP'][src, dst] += volume * tp_count

    # PP: activations forward, gradients backward, v hops per micro-batch
    split = chunk_sizes(act, parallel.tp) if scatter_gather else [act] * parallel.tp
    for lower, upper in mapping.pp_pairs():
        volume = m * v * split[mapping.ranks[lower].tp_index]
        classes['PP'][lower, upper] += volume
        classes['PP'][upper, lower] += volume

    # DP: one AllReduce of the gradient shard
    dp_payload = dp_payload_bytes(model, parallel)
    for group in mapping.dp_groups():
        for src, dst, volume in render(group, dp_payload):
            classes['DP'][src, dst] += volume

    # EmbSync: first and last stage peers
    if parallel.pp > 1 and model.vocab_size:
        emb = model.precision_bytes * model.vocab_size * model.hidden
        for j in range(parallel.dp):
            for i in range(parallel.tp):
                first, last = mapping.rank_of(0, j, i), mapping.rank_of(parallel.pp - 1, j, i)
                classes['EmbSync'][first, last] += emb
                classes['EmbSync'][last, first] += emb

    # ATA: expected AllToAll per expert layer, embedded per EP group
    if model.is_moe and parallel.ep > 1:
        ops_per_layer = ATA_OPS_PER_LAYER if recompute else ATA_OPS_NO_RECOMPUTE
        entry = int(round(float(expected_alltoall_matrix(model, parallel.ep, k_active)[0, 0])))
        for group in mapping.ep_groups(parallel.ep):
            stage = mapping.ranks[group[0]].stage
            ops = expert_layers_on_stage(model, parallel, stage) * ops_per_layer
            for src in group:
                for dst in group:
                    if src != dst:
                        classes['ATA'][src, dst] += entry * ops

    matrix = TrafficMatrix(classes=classes, ranks=n)
    log_action('build_traffic_matrix', f"{n} ranks, totals {matrix.totals()}")
    return matrix


def closed_form_class_totals(model, parallel, derived, recompute=None, k_active=None, scatter_gather=None):
    """Per-class byte totals straight from the volume formulas"""
    recompute = Config.RECOMPUTE if recompute is None else recompute
    k_active = Config.K_ACTIVE if k_active is None else k_active
    scatter_gather = Config.PP_SCATTER_GATHER if scatter_gather is None else scatter_gather
    p, t, d, v = parallel.pp, parallel.tp, parallel.dp, parallel.interleave
    m = derived.micro_batches
    act = activation_bytes(model, parallel)
    per_layer = TP_ALLREDUCES_PER_LAYER if recompute else TP_ALLREDUCES_NO_RECOMPUTE

    totals = {
        'TP': p * d * m * derived.layers_per_stage * per_layer * 2 * (t - 1) * act,
        'PP': 2 * (p - 1) * d * m * v * (act if scatter_gather else t * act),
        'DP': p * t * 2 * (d - 1) * dp_payload_bytes(model, parallel),
        'EmbSync': 2 * t * d * model.precision_bytes * model.vocab_size * model.hidden if p > 1 else 0,
        'ATA': 0,
    }
    if model.is_moe and parallel.ep > 1:
        e = parallel.ep
        ops_per_layer = ATA_OPS_PER_LAYER if recompute else ATA_OPS_NO_RECOMPUTE
        entry = int(round(float(expected_alltoall_matrix(model, e, k_active)[0, 0])))
        groups_per_stage = t * (d // e)
        totals['ATA'] = sum(groups_per_stage * expert_layers_on_stage(model, parallel, s) * ops_per_layer
                            for s in range(p)) * (e * e - e) * entry
    return totals


# ---------------------------------------------------------------------------
# On-Off timeline

@dataclass(frozen=True)
class Segment:
    """One timeline interval; duration is the nominal length, end is derived from it"""
    start: float
    duration: float
    kind: str
    block: int

    @property
    def end(self):
        return self.start + self.duration


@dataclass(frozen=True)
class Timeline:
    """Ordered segments of one rank over one iteration"""
    segments: Tuple[Segment, ...]
    blocks: int

    def on_time(self):
        return sum(s.duration for s in self.segments if s.kind != 'off')

    def block_on_times(self):
        totals = [0.0] * self.blocks
        for s in self.segments:
            if s.kind != 'off':
                totals[s.block] += s.duration
        return totals

    def block_signature(self, block):
        """(kind, duration) sequence of one block, for repetitiveness checks"""
        return [(s.kind, s.duration) for s in self.segments if s.block == block]

    def to_frame(self):
        return pd.DataFrame([(s.start, s.end, s.kind) for s in self.segments],
                            columns=['start_s', 'end_s', 'kind'])

    def to_csv(self, digest=None):
        text = self.to_frame().to_csv(index=False, lineterminator='\n')
        return (provenance_header(digest) if digest else '') + text


def onoff_timeline(derived, t_comp_mb, t_tp_mb, t_pp_mb, bursts_per_layer=TP_ALLREDUCES_PER_LAYER):
    """
    On-Off pattern of one rank

    Args:
        derived: DerivedParams (m and layers per stage)
        t_comp_mb: Compute seconds of one block
        t_tp_mb: TP seconds of one block, split evenly over the bursts
        t_pp_mb: PP seconds of one block, one burst at the block end
        bursts_per_layer: TP AllReduces per layer

    Returns:
        Timeline with 2m blocks (m forward, m backward)
    """
    if min(t_comp_mb, t_tp_mb, t_pp_mb) < 0:
        raise InvalidSpec("timeline durations must be >= 0")
    bursts = max(1, derived.layers_per_stage * bursts_per_layer)
    pattern = []
    for _ in range(bursts):
        pattern.append((t_comp_mb / bursts, 'off'))
        pattern.append((t_tp_mb / bursts, 'tp-burst'))
    pattern.append((t_pp_mb, 'pp-burst'))
    pattern = [(duration, kind) for duration, kind in pattern if duration > 0]

    # offsets inside a block are shared by every block; starts anchor to block * period
    offsets = []
    period = 0.0
    for duration, _ in pattern:
        offsets.append(period)
        period += duration

    blocks = 2 * derived.micro_batches
    segments = tuple(Segment(block * period + offset, duration, kind, block)
                     for block in range(blocks)
                     for offset, (duration, kind) in zip(offsets, pattern))
    return Timeline(segments=segments, blocks=blocks)


def timeline_from_breakdown(breakdown, derived, recompute=None):
    """Timeline whose on-time sums to the breakdown's T_TP + T_PP (each pass gets half)"""
    recompute = Config.RECOMPUTE if recompute is None else recompute
    per_layer = TP_ALLREDUCES_PER_LAYER if recompute else TP_ALLREDUCES_NO_RECOMPUTE
    return onoff_timeline(derived, breakdown.t_comp_mb / 2, breakdown.t_tp_mb / 2,
                          breakdown.t_pp_mb / 2, bursts_per_layer=per_layer)


# ---------------------------------------------------------------------------
# MoE AllToAll

def _as_square(matrix):
    array = np.asarray(matrix, dtype=float)
    if array.ndim != 2 or array.shape[0] != array.shape[1]:
        raise NonSquare(f"AllToAll heatmap must be square, got shape {array.shape}")
    if array.size == 0:
        raise EmptyHeatmap("AllToAll heatmap is empty")
    return array


def predict_alltoall_sequence(first_fw):
    """
    Remaining three AllToAlls of a layer from the first forward one

    Returns:
        (second forward, first backward, second backward) = (M^T, M, M^T)
    """
    m = _as_square(first_fw)
    return m.T.copy(), m.copy(), m.T.copy()


def expected_alltoall_matrix(model, e, k_active):
    """e x e matrix of a uniform token scatter carrying k_active * 2gsh bytes in total"""
    if not 1 <= k_active <= model.moe_top_k_max:
        raise InvalidSpec(f"k_active must be in [1, {model.moe_top_k_max}]", k_active=k_active)
    if e < 1:
        raise InvalidSpec("expert parallel degree must be >= 1")
    total = k_active * model.precision_bytes * model.global_batch * model.seq_len * model.hidden
    return np.full((e, e), total / (e * e), dtype=float)


def uniformity_metrics(heatmap):
    """Population mean and variance over all e^2 pairs"""
    array = _as_square(heatmap)
    return float(array.mean()), float(array.var())


def sample_alltoall_matrix(e, tokens, k_active, skew, bytes_per_token, rng=None):
    """
    Simulate one gate decision: every source rank routes its tokens to k experts

    Expert j is preferred with weight exp(-skew * j); k_active may be fractional
    (a token picks two experts with probability k_active - 1).
    """
    rng = rng or np.random.default_rng(0)
    weights = np.exp(-skew * np.arange(e))
    weights = weights / weights.sum()
    per_source = tokens // e
    matrix = np.zeros((e, e), dtype=float)
    second = k_active - 1.0
    for src in range(e):
        matrix[src] += rng.multinomial(per_source, weights)
        if second > 0:
            extra = rng.binomial(per_source, min(second, 1.0))
            matrix[src] += rng.multinomial(extra, weights)
    return matrix * bytes_per_token


@dataclass(frozen=True)
class AllToAllSnapshot:
    step: int
    k_active: float
    skew: float
    heatmap: np.ndarray = field(repr=False)


def synthetic_alltoall_trace(e, steps, total_bytes, initial_skew=0.8, decay=0.7):
    """
    Expected AllToAll heatmaps over a training run converging toward uniform routing

    k drifts from 1 to 2 (adaptive top-2 gating) while expert preference decays,
    so the mean rises and the variance falls step over step.
    """
    if e < 2 or steps < 1:
        raise InvalidSpec("trace needs e >= 2 and steps >= 1")
    offsets = (np.arange(e) - (e - 1) / 2) / ((e - 1) / 2)
    trace = []
    for step in range(steps):
        k = 1.0 + (step / (steps - 1) if steps > 1 else 0.0)
        skew = initial_skew * decay ** step / k
        row = (k * total_bytes / (e * e)) * (1.0 + skew * offsets)
        trace.append(AllToAllSnapshot(step, k, skew, np.tile(row, (e, 1))))
    return trace


def uniformity_trend(trace):
    """(step, mean, variance) rows of a trace"""
    return [(snap.step, *uniformity_metrics(snap.heatmap)) for snap in trace]


def heatmap_csv(heatmap, digest=None):
    """AllToAll heatmap CSV quantized to whole bytes"""
    array = np.rint(_as_square(heatmap)).astype(np.int64)
    labels = list(range(array.shape[0]))
    frame = pd.DataFrame(array, index=labels, columns=labels)
    frame.index.name = 'rank'
    return (provenance_header(digest) if digest else '') + frame.to_csv(lineterminator='\n')
