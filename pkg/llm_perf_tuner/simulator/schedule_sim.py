"""
Pipeline schedule simulator
Event-driven 1F1B and interleaved 1F1B over static per-stage op orders
"""
from dataclasses import dataclass, field
from typing import Dict, List

from backend.config import Config
from backend.errors import InvalidSimInput, ScheduleDeadlock
from backend.traffic_model import Segment, Timeline
from backend.utils import get_logger

logger = get_logger('simulator')

FORWARD = 'F'
BACKWARD = 'B'


@dataclass(frozen=True)
class SimInput:
    """
    Uniform per-op durations of one stage-chunk (seconds)

    A forward op runs fwd compute, then its TP share, then one PP hop; a
    backward op runs the hop first. Hops are zero when p = 1.
    """
    p: int
    m: int
    v: int = 1
    fwd: float = 1.0
    bwd: float = None
    tp_fwd: float = 0.0
    tp_bwd: float = 0.0
    pp_hop: float = 0.0

    @property
    def backward(self):
        return self.fwd * Config.BWD_FWD_RATIO if self.bwd is None else self.bwd

    @property
    def hop(self):
        return self.pp_hop if self.p > 1 else 0.0

    def forward_duration(self):
        return self.fwd + self.tp_fwd + self.hop

    def backward_duration(self):
        return self.hop + self.backward + self.tp_bwd

    def check(self):
        if self.p < 1 or self.m < 1 or self.v < 1:
            raise InvalidSimInput(f"need p, m, v >= 1, got p={self.p} m={self.m} v={self.v}")
        for name in ('fwd', 'tp_fwd', 'tp_bwd', 'pp_hop'):
            if getattr(self, name) < 0:
                raise InvalidSimInput(f"{name} must be >= 0")
        if self.backward < 0:
            raise InvalidSimInput("bwd must be >= 0")
        if self.v > 1 and self.m % self.p:
            raise InvalidSimInput(f"interleaved schedule needs m divisible by p (m={self.m}, p={self.p})")


@dataclass(frozen=True)
class ScheduledOp:
    stage: int
    kind: str
    mb: int
    chunk: int
    start: float
    end: float


@dataclass
class SimResult:
    """
    bubble_ratio is first-stage idle / iteration time. normalized_bubble_ratio
    measures the same idle time against the non-interleaved iteration doing
    the same work, idle / (busy + v * idle), the value the closed form divides
    by v; the two agree for v = 1.
    """
    iteration_time: float
    bubble_ratio: float
    normalized_bubble_ratio: float
    stage_busy: List[float]
    stage_idle: List[float]
    ops: List[ScheduledOp] = field(repr=False)
    timelines: Dict[int, Timeline] = field(repr=False)

    def stage_bubble_ratios(self):
        return [idle / self.iteration_time if self.iteration_time else 0.0 for idle in self.stage_idle]

    def summary(self):
        return {
            'iteration_time': self.iteration_time,
            'bubble_ratio': self.bubble_ratio,
            'normalized_bubble_ratio': self.normalized_bubble_ratio,
            'stage_bubble_ratios': self.stage_bubble_ratios(),
            'stage_busy': self.stage_busy,
            'stage_idle': self.stage_idle,
        }


def _warmup_count(p, m, v, stage):
    total = m * v
    if v == 1:
        return min(p - stage - 1, m)
    if m == p:
        return total
    return min((p - stage - 1) * 2 + (v - 1) * p, total)


def _chunk_of(k, p, v, forward):
    chunk = (k % (p * v)) // p
    return chunk if forward else v - 1 - chunk


def _microbatch_of(k, p, v):
    return (k // (p * v)) * p + k % p


def stage_order(p, m, v, stage):
    """
    Static op order of one stage: warmup forwards, 1F1B steady state, cooldown backwards

    Returns:
        List of (kind, micro-batch, chunk)
    """
    total = m * v
    if v == 1:
        fwd = [(FORWARD, k, 0) for k in range(m)]
        bwd = [(BACKWARD, k, 0) for k in range(m)]
    else:
        fwd = [(FORWARD, _microbatch_of(k, p, v), _chunk_of(k, p, v, True)) for k in range(total)]
        bwd = [(BACKWARD, _microbatch_of(k, p, v), _chunk_of(k, p, v, False)) for k in range(total)]

    warmup = _warmup_count(p, m, v, stage)
    order = fwd[:warmup]
    for k in range(total - warmup):
        order.append(fwd[warmup + k])
        order.append(bwd[k])
    order.extend(bwd[total - warmup:])
    return order


def _dependency(op, stage, p, v):
    """The op (stage, kind, mb, chunk) that must finish first, or None"""
    kind, mb, chunk = op
    if kind == FORWARD:
        if stage > 0:
            return (stage - 1, FORWARD, mb, chunk)
        if chunk > 0:
            return (p - 1, FORWARD, mb, chunk - 1)
        return None
    if stage < p - 1:
        return (stage + 1, BACKWARD, mb, chunk)
    if chunk == v - 1:
        return (p - 1, FORWARD, mb, chunk)
    return (0, BACKWARD, mb, chunk + 1)


def _run(sim):
    p, m, v = sim.p, sim.m, sim.v
    orders = [stage_order(p, m, v, s) for s in range(p)]
    cursor = [0] * p
    free = [0.0] * p
    finished = {}
    scheduled = []
    durations = {FORWARD: sim.forward_duration(), BACKWARD: sim.backward_duration()}

    remaining = sum(len(o) for o in orders)
    while remaining:
        progress = False
        for s in range(p):
            while cursor[s] < len(orders[s]):
                kind, mb, chunk = orders[s][cursor[s]]
                dep = _dependency((kind, mb, chunk), s, p, v)
                if dep is not None and dep not in finished:
                    break
                start = max(free[s], finished[dep] if dep is not None else 0.0)
                end = start + durations[kind]
                finished[(s, kind, mb, chunk)] = end
                scheduled.append(ScheduledOp(s, kind, mb, chunk, start, end))
                free[s] = end
                cursor[s] += 1
                remaining -= 1
                progress = True
        if not progress:
            raise ScheduleDeadlock(f"no runnable op with p={p} m={m} v={v}", cursors=list(cursor))

    scheduled.sort(key=lambda op: (op.start, op.stage, op.mb, op.chunk, op.kind))
    return scheduled


def _stage_timeline(ops, sim):
    """
    Segments of one stage: compute is 'off', TP and PP shares are bursts, idle gaps are 'off'

    The v chunk ops of one micro-batch pass form one block, so every stage has
    2m blocks; an idle gap belongs to the block of the op that follows it.
    """
    segments = []
    blocks = {}
    clock = 0.0
    hop = sim.hop
    for op in ops:
        block = blocks.setdefault((op.kind, op.mb), len(blocks))
        if op.start > clock:
            segments.append(Segment(clock, op.start - clock, 'off', block))
        if op.kind == FORWARD:
            parts = [(sim.fwd, 'off'), (sim.tp_fwd, 'tp-burst'), (hop, 'pp-burst')]
        else:
            parts = [(hop, 'pp-burst'), (sim.backward, 'off'), (sim.tp_bwd, 'tp-burst')]
        at = op.start
        for duration, kind in parts:
            if duration > 0:
                segments.append(Segment(at, duration, kind, block))
                at += duration
        clock = op.end
    return Timeline(segments=tuple(segments), blocks=len(blocks))


def simulate(sim):
    """
    Run the pipeline schedule

    Args:
        sim: SimInput

    Returns:
        SimResult; iteration time is the end of the last op on the first stage
    """
    sim.check()
    ops = _run(sim)
    by_stage = {s: [op for op in ops if op.stage == s] for s in range(sim.p)}
    for s in by_stage:
        by_stage[s].sort(key=lambda op: op.start)

    iteration_time = by_stage[0][-1].end
    busy = [sum(op.end - op.start for op in by_stage[s]) for s in range(sim.p)]
    idle = [max(0.0, iteration_time - b) for b in busy]
    denominator = busy[0] + sim.v * idle[0]
    result = SimResult(
        iteration_time=iteration_time,
        bubble_ratio=idle[0] / iteration_time if iteration_time else 0.0,
        normalized_bubble_ratio=idle[0] / denominator if denominator else 0.0,
        stage_busy=busy,
        stage_idle=idle,
        ops=ops,
        timelines={s: _stage_timeline(by_stage[s], sim) for s in range(sim.p)},
    )
    logger.debug("simulated p=%d m=%d v=%d: T=%.6g bubble=%.6g", sim.p, sim.m, sim.v,
                 result.iteration_time, result.bubble_ratio)
    return result


def simulate_interleaved(sim):
    """Interleaved 1F1B; v = 1 runs the plain schedule"""
    return simulate(sim)


def critical_path_lower_bound(sim):
    """First-stage busy time: m * v forwards and backwards back to back"""
    return sim.m * sim.v * (sim.forward_duration() + sim.backward_duration())


def closed_form_bubble_ratio(p, m, v=1):
    return (p - 1) / ((p - 1 + m) * v)


def sim_input_from_breakdown(breakdown, parallel, derived, bwd_fwd_ratio=None, recompute=None):
    """
    Per-op durations from a cost breakdown

    Compute is split by the backward:forward ratio, TP by the AllReduce count
    of each pass (2 forward, 4 backward with recomputation, 2 and 2 without).
    """
    ratio = Config.BWD_FWD_RATIO if bwd_fwd_ratio is None else bwd_fwd_ratio
    recompute = Config.RECOMPUTE if recompute is None else recompute
    p, v = parallel.pp, parallel.interleave
    comp = breakdown.t_comp_mb / v
    tp = breakdown.t_tp_mb / v
    tp_fwd_share = 2.0 / 6.0 if recompute else 0.5
    return SimInput(
        p=p, m=derived.micro_batches, v=v,
        fwd=comp / (1.0 + ratio), bwd=comp * ratio / (1.0 + ratio),
        tp_fwd=tp * tp_fwd_share, tp_bwd=tp * (1.0 - tp_fwd_share),
        pp_hop=breakdown.t_pp_mb / (2 * v) if p > 1 else 0.0,
    )
