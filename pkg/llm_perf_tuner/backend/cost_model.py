"""
Iteration cost model
Per-phase times (compute, TP, PP, DP, AllToAll), pipeline bubble and the iteration total
"""
import math
from dataclasses import dataclass, asdict, field
from typing import Optional

from profiles.bandwidth import lookup_bandwidth
from profiles.utilization import lookup_utilization

from .config import Config
from .errors import AssemblyMismatch, InvalidSpec, NotMoeModel
from .specs import check_memory, validate
from .traffic_model import (ATA_OPS_NO_RECOMPUTE, ATA_OPS_PER_LAYER, TP_ALLREDUCES_NO_RECOMPUTE,
                            TP_ALLREDUCES_PER_LAYER, activation_bytes, expected_alltoall_matrix, map_ranks)
from .utils import get_logger

logger = get_logger('cost_model')

FLOPS_PER_PARAM_TOKEN = 8
FLOPS_PER_PARAM_TOKEN_NO_RECOMPUTE = 6


@dataclass(frozen=True)
class CostOptions:
    recompute: bool = True
    dp_overlap: float = 0.0
    dp_buckets: int = 1
    k_active: int = 2

    @classmethod
    def from_config(cls, **overrides):
        values = dict(recompute=Config.RECOMPUTE, dp_overlap=Config.DP_OVERLAP,
                      dp_buckets=Config.DP_BUCKETS, k_active=Config.K_ACTIVE)
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    def check(self):
        if not 0.0 <= self.dp_overlap <= 1.0:
            raise InvalidSpec("dp_overlap must be in [0, 1]")
        if self.dp_buckets < 1:
            raise InvalidSpec("dp_buckets must be >= 1")


@dataclass(frozen=True)
class PhaseBandwidths:
    """Effective bandwidth per phase in bytes/s; None for phases that move no data"""
    c_tp: Optional[float] = None
    c_pp: Optional[float] = None
    c_dp: Optional[float] = None
    c_ata: Optional[float] = None

    def check(self):
        for name, value in asdict(self).items():
            if value is not None and not value > 0:
                raise InvalidSpec(f"{name} must be > 0, got {value}")


@dataclass(frozen=True)
class CostBreakdown:
    t_comp: float
    t_tp: float
    t_pp: float
    t_dp: float
    t_ata: float
    t_bubble: float
    t_iter: float
    t_comp_mb: float
    t_tp_mb: float
    t_pp_mb: float
    flops_per_mb: float
    r_bubble: float
    r_bubble_approx: float
    r_comm: float
    t_iter_factored: float = 0.0

    @property
    def t_comm(self):
        return self.t_tp + self.t_pp + self.t_dp + self.t_ata

    def to_dict(self):
        return asdict(self)

    def format_report(self):
        """Fixed-width text table of every field"""
        lines = []
        for name, value in asdict(self).items():
            unit = 's' if name.startswith('t_') else ('FLOP' if name.startswith('flops') else '')
            lines.append(f"{name:<16} {value:>20.9g} {unit}".rstrip())
        return '\n'.join(lines) + '\n'


def _allreduce_factor(k):
    """Ring AllReduce bytes sent per member, per payload byte: 2(k-1)/k"""
    return 2.0 * (k - 1) / k


def tp_time(model, parallel, derived, c_tp, recompute=True):
    """(t_tp, t_tp_mb): per layer per micro-batch AllReduces of 2bsh bytes"""
    t = parallel.tp
    if t == 1:
        return 0.0, 0.0
    per_layer = TP_ALLREDUCES_PER_LAYER if recompute else TP_ALLREDUCES_NO_RECOMPUTE
    t_tp_mb = derived.layers_per_stage * per_layer * activation_bytes(model, parallel) \
        * _allreduce_factor(t) / c_tp
    return derived.micro_batches * t_tp_mb, t_tp_mb


def pp_time(model, parallel, derived, c_pp, v=None):
    """(t_pp, t_pp_mb): one send and one receive of 2bsh per micro-batch, v times when interleaved"""
    v = parallel.interleave if v is None else v
    if parallel.pp == 1:
        return 0.0, 0.0
    t_pp_mb = 2 * activation_bytes(model, parallel) * v / c_pp
    return derived.micro_batches * t_pp_mb, t_pp_mb


def dp_time(model, parallel, c_dp, overlap=0.0):
    """Gradient AllReduce of 2N/(p*t) bytes; `overlap` hides that fraction behind backward"""
    d = parallel.dp
    if d == 1:
        return 0.0
    payload = model.precision_bytes * model.param_count / (parallel.pp * parallel.tp)
    return payload * _allreduce_factor(d) / c_dp * (1.0 - overlap)


def comp_time(model, parallel, derived, peak_flops, mu, recompute=True):
    """
    Compute time from FLOPs per micro-batch

    Returns:
        (t_comp, t_comp_mb, flops_per_mb)
    """
    if not 0 < mu <= 1:
        raise InvalidSpec(f"mu must be in (0, 1], got {mu}")
    if peak_flops <= 0:
        raise InvalidSpec("peak_flops must be > 0")
    per_token = FLOPS_PER_PARAM_TOKEN if recompute else FLOPS_PER_PARAM_TOKEN_NO_RECOMPUTE
    flops_per_mb = per_token * (model.param_count / (parallel.pp * parallel.tp)) \
        * parallel.micro_batch * model.seq_len
    t_comp_mb = flops_per_mb / (mu * peak_flops)
    return derived.micro_batches * t_comp_mb, t_comp_mb, flops_per_mb


def bubble(p, m, v, t_comp_mb, t_tp_mb, t_pp_mb):
    """
    Pipeline bubble under 1F1B

    Returns:
        (t_bubble, approximate bubble ratio (p-1)/(p-1+m)/v)
    """
    if min(p, m, v) < 1:
        raise InvalidSpec("p, m and v must be >= 1")
    if p == 1:
        return 0.0, 0.0
    t_bubble = (p - 1) * (t_comp_mb + t_tp_mb + t_pp_mb) / v
    return t_bubble, (p - 1) / ((p - 1 + m) * v)


def alltoall_time(model, e, c_ata, k_active=2, recompute=True):
    """MoE AllToAll time: per expert layer, AllToAlls carrying k_active * 2gsh / e bytes per GPU"""
    if not model.is_moe:
        raise NotMoeModel(f"{model.name or 'model'} is {model.kind.value}, AllToAll time needs a MoE model")
    if e < 1:
        raise InvalidSpec("expert parallel degree must be >= 1")
    ops = ATA_OPS_PER_LAYER if recompute else ATA_OPS_NO_RECOMPUTE
    volume = k_active * model.precision_bytes * model.global_batch * model.seq_len * model.hidden
    return (model.layers / model.moe_expert_interval) * ops * volume / (e * c_ata)


def iteration(model, parallel, derived, bandwidths, peak_flops, mu, options=None):
    """
    Assemble the full breakdown

    Args:
        model: ModelSpec
        parallel: ParallelismConfig
        derived: DerivedParams
        bandwidths: PhaseBandwidths
        peak_flops: Peak FLOP/s per GPU
        mu: GPU utilization
        options: CostOptions

    Returns:
        CostBreakdown; raises AssemblyMismatch when the two assemblies disagree
    """
    options = options or CostOptions()
    options.check()
    bandwidths.check()
    p, t, d, v = parallel.pp, parallel.tp, parallel.dp, parallel.interleave
    m = derived.micro_batches

    def need(value, phase):
        if value is None:
            raise InvalidSpec(f"bandwidth for {phase} is required")
        return value

    t_comp, t_comp_mb, flops_per_mb = comp_time(model, parallel, derived, peak_flops, mu, options.recompute)
    t_tp, t_tp_mb = tp_time(model, parallel, derived, need(bandwidths.c_tp, 'TP'), options.recompute) \
        if t > 1 else (0.0, 0.0)
    t_pp, t_pp_mb = pp_time(model, parallel, derived, need(bandwidths.c_pp, 'PP')) if p > 1 else (0.0, 0.0)
    t_dp = dp_time(model, parallel, need(bandwidths.c_dp, 'DP'), options.dp_overlap) if d > 1 else 0.0
    t_ata = 0.0
    if model.is_moe and parallel.ep > 1:
        t_ata = alltoall_time(model, parallel.ep, need(bandwidths.c_ata, 'ATA'),
                              options.k_active, options.recompute)
    t_bubble, r_bubble_approx = bubble(p, m, v, t_comp_mb, t_tp_mb, t_pp_mb)

    # sum of phases
    t_iter = t_comp + t_tp + t_pp + t_dp + t_ata + t_bubble
    # per micro-batch critical path of the first stage
    t_iter_factored = (m + (p - 1) / v) * (t_comp_mb + t_tp_mb + t_pp_mb) + t_dp + t_ata
    if not math.isclose(t_iter, t_iter_factored, rel_tol=Config.ASSEMBLY_RTOL, abs_tol=0.0):
        raise AssemblyMismatch(f"phase sum {t_iter!r} != factored form {t_iter_factored!r}")

    t_comm = t_tp + t_pp + t_dp + t_ata
    return CostBreakdown(
        t_comp=t_comp, t_tp=t_tp, t_pp=t_pp, t_dp=t_dp, t_ata=t_ata, t_bubble=t_bubble, t_iter=t_iter,
        t_comp_mb=t_comp_mb, t_tp_mb=t_tp_mb, t_pp_mb=t_pp_mb, flops_per_mb=flops_per_mb,
        r_bubble=t_bubble / t_iter, r_bubble_approx=r_bubble_approx, r_comm=t_comm / t_iter,
        t_iter_factored=t_iter_factored,
    )


def resolve_bandwidths(model, parallel, mapping, platform, bandwidth_profile, options=None):
    """
    Look up C for every active phase

    Locality comes from the rank mapping; scales are t, 2, d and e. Message sizes:
    2bsh for TP and PP, 2N/(p*t) over the bucket count for DP, the expected
    per-pair volume for AllToAll.
    """
    options = options or CostOptions()
    topology = platform.intra_topology
    act = activation_bytes(model, parallel)
    c_tp = c_pp = c_dp = c_ata = None
    if parallel.tp > 1:
        c_tp = lookup_bandwidth(bandwidth_profile, 'allreduce', mapping.tp_locality(), parallel.tp, act, topology)
    if parallel.pp > 1:
        c_pp = lookup_bandwidth(bandwidth_profile, 'p2p', mapping.pp_locality(), 2, act, topology)
    if parallel.dp > 1:
        payload = model.precision_bytes * model.param_count / (parallel.pp * parallel.tp) / options.dp_buckets
        c_dp = lookup_bandwidth(bandwidth_profile, 'allreduce', mapping.dp_locality(), parallel.dp,
                                max(1.0, payload), topology)
    if model.is_moe and parallel.ep > 1:
        per_pair = float(expected_alltoall_matrix(model, parallel.ep, options.k_active)[0, 0])
        c_ata = lookup_bandwidth(bandwidth_profile, 'alltoall', mapping.ep_locality(parallel.ep),
                                 parallel.ep, max(1.0, per_pair), topology)
    return PhaseBandwidths(c_tp=c_tp, c_pp=c_pp, c_dp=c_dp, c_ata=c_ata)


@dataclass(frozen=True)
class Prediction:
    """Everything predict() derives for one configuration"""
    parallel: object
    derived: object
    bandwidths: PhaseBandwidths
    mu: float
    breakdown: CostBreakdown
    memory_bytes: float
    memory_ok: bool
    throughput_flops: float
    throughput_flops_per_gpu: float
    tokens_per_s: float
    warnings: tuple = field(default=())

    def to_dict(self):
        return {
            'parallel': asdict(self.parallel),
            'derived': asdict(self.derived),
            'bandwidths': asdict(self.bandwidths),
            'mu': self.mu,
            'breakdown': self.breakdown.to_dict(),
            'memory_bytes': self.memory_bytes,
            'memory_ok': self.memory_ok,
            'throughput_flops': self.throughput_flops,
            'throughput_flops_per_gpu': self.throughput_flops_per_gpu,
            'tokens_per_s': self.tokens_per_s,
            'warnings': list(self.warnings),
        }


def predict(model, parallel, platform, profiles, options=None, strict=None, mu=None):
    """
    Validate, map, resolve bandwidths and utilization, then assemble the breakdown

    Args:
        model: ModelSpec
        parallel: ParallelismConfig
        platform: PlatformSpec
        profiles: ProfileSet
        options: CostOptions
        strict: Strict TP mapping
        mu: Utilization override; looked up from the profile when None

    Returns:
        Prediction
    """
    options = options or CostOptions.from_config()
    derived = validate(model, parallel, platform)
    mapping = map_ranks(parallel, platform, strict=strict)
    bandwidths = resolve_bandwidths(model, parallel, mapping, platform, profiles.bandwidth, options)
    if mu is None:
        mu = lookup_utilization(profiles.utilization, derived.params_per_gpu, parallel.micro_batch)
    breakdown = iteration(model, parallel, derived, bandwidths, platform.peak_flops, mu, options)
    memory_bytes, memory_ok = check_memory(model, parallel, platform)

    per_token = FLOPS_PER_PARAM_TOKEN if options.recompute else FLOPS_PER_PARAM_TOKEN_NO_RECOMPUTE
    tokens = model.global_batch * model.seq_len
    throughput = per_token * model.param_count * tokens / breakdown.t_iter
    return Prediction(
        parallel=parallel, derived=derived, bandwidths=bandwidths, mu=mu, breakdown=breakdown,
        memory_bytes=memory_bytes, memory_ok=memory_ok, throughput_flops=throughput,
        throughput_flops_per_gpu=throughput / parallel.world_size,
        tokens_per_s=tokens / breakdown.t_iter, warnings=mapping.warnings,
    )
