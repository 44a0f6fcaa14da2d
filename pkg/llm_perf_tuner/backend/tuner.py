"""
Configuration tuner
Searches micro-batch sizes, (t, p, d) layouts and data-parallel scale with the cost model
"""
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import pandas as pd

from .config import Config
from .cost_model import CostOptions, predict
from .errors import (GpuCountMismatch, InvalidTuneRequest, NoFeasibleCandidate, NonDivisibleBatch,
                     NonDivisibleLayers, TunerError)
from .eval_cache import EvalCache
from .specs import ParallelismConfig, check_memory
from .utils import get_logger, log_action, provenance, provenance_header

logger = get_logger('tuner')

SECONDS_PER_HOUR = 3600.0
HOURS_PER_DAY = 24.0


@dataclass
class TuneRequest:
    """
    One search over configurations

    `parallel` fixes (t, p, d) for micro-batch tuning and (t, p) for scale
    analysis; tune_parallelism only takes ep and interleave from it.
    """
    model: object
    platform: object
    profiles: object
    parallel: Optional[ParallelismConfig] = None
    micro_batches: Optional[Sequence[int]] = None
    layouts: Optional[Sequence[Tuple[int, int, int]]] = None
    dp_range: Optional[Sequence[int]] = None
    token_budget: Optional[float] = None
    rent_rate: Optional[float] = None
    gpu_price: Optional[float] = None
    options: Optional[CostOptions] = None
    strict: Optional[bool] = None
    cross_product: bool = False
    workers: Optional[int] = None

    def cost_options(self):
        return self.options or CostOptions.from_config()

    def strict_mapping(self):
        return Config.STRICT_MAPPING if self.strict is None else self.strict


@dataclass(frozen=True)
class Candidate:
    """A feasible configuration with its prediction"""
    parallel: ParallelismConfig
    prediction: object

    @property
    def t_iter(self):
        return self.prediction.breakdown.t_iter

    def to_dict(self):
        p = self.prediction
        return {
            'tp': self.parallel.tp, 'pp': self.parallel.pp, 'dp': self.parallel.dp, 'ep': self.parallel.ep,
            'micro_batch': self.parallel.micro_batch, 'interleave': self.parallel.interleave,
            't_iter': self.t_iter,
            'throughput_flops': p.throughput_flops,
            'throughput_flops_per_gpu': p.throughput_flops_per_gpu,
            'tokens_per_s': p.tokens_per_s,
            'mu': p.mu,
            'memory_bytes': p.memory_bytes,
            'feasible': {'memory': p.memory_ok, 'mapping_warnings': list(p.warnings)},
            'breakdown': p.breakdown.to_dict(),
        }


@dataclass
class ScalePoint:
    """One data-parallel degree of a scale sweep"""
    dp: int
    feasible: bool
    best: Optional[Candidate] = None
    reason: Optional[dict] = None
    gpus: int = 0
    scaling_factor: Optional[float] = None
    iterations: Optional[float] = None
    training_hours: Optional[float] = None
    rent_cost: Optional[float] = None
    buy_cost: Optional[float] = None

    @property
    def days(self):
        return None if self.training_hours is None else self.training_hours / HOURS_PER_DAY

    def to_dict(self):
        return {
            'dp': self.dp, 'gpus': self.gpus, 'feasible': self.feasible,
            'reason': self.reason,
            'best': self.best.to_dict() if self.best else None,
            'scaling_factor': self.scaling_factor,
            'iterations': self.iterations,
            'training_hours': self.training_hours,
            'days': self.days,
            'rent_cost': self.rent_cost,
            'buy_cost': self.buy_cost,
        }


@dataclass
class TuneReport:
    kind: str
    ranked: List[Candidate] = field(default_factory=list)
    exclusions: List[dict] = field(default_factory=list)
    scale: List[ScalePoint] = field(default_factory=list)
    digest: Optional[str] = None

    @property
    def best(self):
        return self.ranked[0] if self.ranked else None

    def to_dict(self):
        doc = {
            'kind': self.kind,
            'ranked': [c.to_dict() for c in self.ranked],
            'exclusions': self.exclusions,
        }
        if self.scale:
            doc['scale'] = [point.to_dict() for point in self.scale]
        if self.digest:
            doc['provenance'] = provenance(self.digest)
        return doc

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + '\n'

    def ranking_frame(self):
        return pd.DataFrame([{
            'rank': i + 1, 't': c.parallel.tp, 'p': c.parallel.pp, 'd': c.parallel.dp,
            'b': c.parallel.micro_batch, 't_iter_s': c.t_iter,
            'tflops_per_gpu': c.prediction.throughput_flops_per_gpu / 1e12,
            'mu': c.prediction.mu,
        } for i, c in enumerate(self.ranked)], columns=['rank', 't', 'p', 'd', 'b', 't_iter_s', 'tflops_per_gpu', 'mu'])

    def to_table(self):
        """Human-readable ranking (and sweep) table"""
        header = provenance_header(self.digest) if self.digest else ''
        text = header + f"{self.kind} tuning: {len(self.ranked)} ranked, {len(self.exclusions)} excluded\n"
        if self.ranked:
            text += self.ranking_frame().to_string(index=False, float_format=lambda x: f"{x:.6g}") + '\n'
        if self.scale:
            text += '\n' + self.scale_frame().to_string(index=False, na_rep='-') + '\n'
        return text

    def scale_frame(self):
        return pd.DataFrame([{
            'd': point.dp,
            'scaling_factor': point.scaling_factor,
            'days': point.days,
            'rent_cost': point.rent_cost,
            'buy_cost': point.buy_cost,
        } for point in self.scale], columns=['d', 'scaling_factor', 'days', 'rent_cost', 'buy_cost'])

    def ranking_csv(self):
        header = provenance_header(self.digest) if self.digest else ''
        return header + self.ranking_frame().to_csv(index=False, lineterminator='\n', float_format='%.10g')

    def scale_csv(self):
        header = provenance_header(self.digest) if self.digest else ''
        return header + self.scale_frame().to_csv(index=False, lineterminator='\n', float_format='%.10g')


def ranking_key(candidate):
    """Ascending t_iter at Config.TIE_DIGITS significant digits, then smaller b, t, p"""
    rounded = float(f"{candidate.t_iter:.{Config.TIE_DIGITS - 1}e}")
    parallel = candidate.parallel
    return rounded, parallel.micro_batch, parallel.tp, parallel.pp


def divisors(n):
    return [k for k in range(1, n + 1) if n % k == 0]


def layout_factorizations(total_gpus):
    """All (t, p, d) with t * p * d = total_gpus, t then p ascending"""
    layouts = []
    for t in divisors(total_gpus):
        for p in divisors(total_gpus // t):
            layouts.append((t, p, total_gpus // (t * p)))
    return layouts


def _exclusion(parallel, code, message, **details):
    entry = {'candidate': parallel.label(), 'tp': parallel.tp, 'pp': parallel.pp, 'dp': parallel.dp,
             'micro_batch': parallel.micro_batch, 'reason': code, 'message': message}
    entry.update(details)
    return entry


def evaluate(request, parallel, platform=None):
    """
    Cost-model evaluation of one candidate

    Returns:
        (Candidate, None) when feasible, (None, exclusion dict) otherwise
    """
    platform = platform or request.platform
    try:
        needed, fits = check_memory(request.model, parallel, platform)
        if not fits:
            return None, _exclusion(parallel, 'InsufficientMemory',
                                    f"needs {needed:.4g} bytes per GPU, has {platform.gpu_mem_bytes:.4g}",
                                    memory_bytes=needed)
        prediction = predict(request.model, parallel, platform, request.profiles,
                             options=request.cost_options(), strict=request.strict_mapping())
    except TunerError as e:
        return None, _exclusion(parallel, e.code, e.message)
    return Candidate(parallel, prediction), None


def _evaluate_all(request, jobs, cache):
    """Evaluate (parallel, platform) jobs concurrently; results come back in job order"""
    def run(job):
        parallel, platform = job
        return cache.get_or_compute((parallel, platform), lambda: evaluate(request, parallel, platform))

    workers = max(1, request.workers or Config.PARALLEL_WORKERS)
    if workers == 1 or len(jobs) < 2:
        return [run(job) for job in jobs]
    with ThreadPoolExecutor(max_workers=workers) as executor:
        return list(executor.map(run, jobs))


def _micro_batch_candidates(model, parallel, requested):
    """
    Micro-batch sizes dividing the per-replica batch

    Returns:
        (sizes, exclusions)
    """
    g, d = model.global_batch, parallel.dp
    if g % d:
        return [], [_exclusion(parallel, NonDivisibleBatch.__name__,
                               f"global batch {g} is not divisible by d = {d}")]
    valid = divisors(g // d)
    if requested is None:
        return valid, []
    sizes, exclusions = [], []
    for b in sorted(set(int(b) for b in requested)):
        if b in valid:
            sizes.append(b)
        else:
            exclusions.append(_exclusion(replace(parallel, micro_batch=b), NonDivisibleBatch.__name__,
                                         f"b = {b} does not divide g/d = {g // d}"))
    return sizes, exclusions


def _rank(results):
    ranked, exclusions = [], []
    for candidate, exclusion in results:
        if candidate is not None:
            ranked.append(candidate)
        else:
            exclusions.append(exclusion)
    ranked.sort(key=ranking_key)
    return ranked, exclusions


def _search_micro_batch(request, parallel, platform, cache):
    sizes, exclusions = _micro_batch_candidates(request.model, parallel, request.micro_batches)
    jobs = [(replace(parallel, micro_batch=b), platform) for b in sizes]
    ranked, excluded = _rank(_evaluate_all(request, jobs, cache))
    return ranked, exclusions + excluded


def tune_micro_batch(request):
    """
    Best micro-batch size for a fixed (t, p, d)

    Args:
        request: TuneRequest with parallel set

    Returns:
        TuneReport ranked by ascending t_iter
    """
    if request.parallel is None:
        raise InvalidTuneRequest("micro-batch tuning needs a fixed parallel layout")
    cache = EvalCache()
    ranked, exclusions = _search_micro_batch(request, request.parallel, request.platform, cache)
    if not ranked:
        raise NoFeasibleCandidate(f"no feasible micro-batch for {request.parallel.label()}",
                                  excluded=len(exclusions))
    best = ranked[0]
    log_action('tune_micro_batch', f"best b={best.parallel.micro_batch} t_iter={best.t_iter:.6g}s "
                                   f"of {len(ranked)} ({len(exclusions)} excluded)")
    logger.debug("eval cache: %s", cache.get_stats())
    return TuneReport(kind='micro-batch', ranked=ranked, exclusions=exclusions)


def _layout_jobs(request, layouts, platform):
    """Expand layouts into micro-batch jobs, excluding layouts that fail up front"""
    base = request.parallel or ParallelismConfig(pp=1, tp=1, dp=1)
    v = base.interleave
    jobs, exclusions = [], []
    for t, p, d in layouts:
        parallel = ParallelismConfig(pp=p, tp=t, dp=d, ep=math.gcd(base.ep, d), micro_batch=1, interleave=v)
        if request.model.layers % (p * v):
            exclusions.append(_exclusion(parallel, NonDivisibleLayers.__name__,
                                         f"{request.model.layers} layers do not split into p*v = {p * v} chunks"))
            continue
        sizes, excluded = _micro_batch_candidates(request.model, parallel, request.micro_batches)
        exclusions.extend(excluded)
        jobs.extend((replace(parallel, micro_batch=b), platform) for b in sizes)
    return jobs, exclusions


def _best_per_layout(ranked):
    best = {}
    for candidate in ranked:
        key = (candidate.parallel.tp, candidate.parallel.pp, candidate.parallel.dp)
        best.setdefault(key, candidate)
    return sorted(best.values(), key=ranking_key)


def tune_parallelism(request):
    """
    Best (t, p, d) layout for the platform's GPU count, each with its best micro-batch

    Args:
        request: TuneRequest; layouts restricts the enumeration when given

    Returns:
        TuneReport with one ranked entry per feasible layout
    """
    total = request.platform.total_gpus
    layouts = request.layouts or layout_factorizations(total)
    for t, p, d in layouts:
        if t * p * d != total:
            raise InvalidTuneRequest(f"layout ({t},{p},{d}) does not use all {total} GPUs")
    cache = EvalCache()
    jobs, exclusions = _layout_jobs(request, layouts, request.platform)
    ranked, excluded = _rank(_evaluate_all(request, jobs, cache))
    exclusions.extend(excluded)
    ranked = _best_per_layout(ranked)
    if not ranked:
        raise NoFeasibleCandidate(f"no feasible layout on {total} GPUs", excluded=len(exclusions))
    best = ranked[0].parallel
    log_action('tune_parallelism', f"best (t,p,d)=({best.tp},{best.pp},{best.dp}) b={best.micro_batch} "
                                   f"t_iter={ranked[0].t_iter:.6g}s of {len(layouts)} layouts")
    return TuneReport(kind='parallelism', ranked=ranked, exclusions=exclusions)


def _best_at_dp(request, d, cache):
    """
    Best candidate with data-parallel degree d

    Returns:
        (Candidate or None, platform or None, exclusions, reason)
    """
    base = request.parallel
    world = base.tp * base.pp * d
    parallel = replace(base, dp=d, ep=math.gcd(base.ep, d))
    try:
        platform = request.platform.resized(world)
    except GpuCountMismatch as e:
        return None, None, [], e.to_dict()
    if request.model.global_batch % d:
        error = NonDivisibleBatch(f"global batch {request.model.global_batch} is not divisible by d = {d}")
        return None, platform, [], error.to_dict()

    if request.cross_product:
        per_replica = base.tp * base.pp
        layouts = [(t, per_replica // t, d) for t in divisors(per_replica)]
        jobs, exclusions = _layout_jobs(replace(request, parallel=parallel), layouts, platform)
        ranked, excluded = _rank(_evaluate_all(request, jobs, cache))
        exclusions.extend(excluded)
    else:
        ranked, exclusions = _search_micro_batch(request, parallel, platform, cache)
    if not ranked:
        return None, platform, exclusions, {'error': NoFeasibleCandidate.__name__,
                                            'message': f"no feasible micro-batch at d = {d}"}
    return ranked[0], platform, exclusions, None


def scale_analysis(request):
    """
    Sweep the data-parallel degree at a fixed global batch

    Scaling factors are relative to d = 1 (evaluated even when not in the
    range); costs use exact hours.

    Args:
        request: TuneRequest with parallel, dp_range and token_budget

    Returns:
        TuneReport whose scale list follows dp_range order
    """
    if request.parallel is None or not request.dp_range:
        raise InvalidTuneRequest("scale analysis needs a fixed (t, p) and a non-empty dp range")
    if not request.token_budget or request.token_budget <= 0:
        raise InvalidTuneRequest("scale analysis needs a positive token budget")
    if any(int(d) < 1 for d in request.dp_range):
        raise InvalidTuneRequest("dp range values must be >= 1")
    rent_rate = Config.RENT_RATE if request.rent_rate is None else request.rent_rate
    gpu_price = Config.GPU_PRICE if request.gpu_price is None else request.gpu_price
    model = request.model
    iterations = request.token_budget / (model.global_batch * model.seq_len)

    cache = EvalCache()
    dp_values = sorted(set(int(d) for d in request.dp_range))
    found = {d: _best_at_dp(request, d, cache) for d in sorted(set(dp_values) | {1})}
    baseline = found[1][0]
    if baseline is None:
        logger.warning("d = 1 is infeasible; scaling factors are left empty")

    points, exclusions, ranked = [], [], []
    for d in dp_values:
        best, platform, excluded, reason = found[d]
        exclusions.extend(excluded)
        gpus = request.parallel.tp * request.parallel.pp * d
        if best is None:
            points.append(ScalePoint(dp=d, feasible=False, reason=reason, gpus=gpus))
            log_action('scale_infeasible', f"d={d}: {reason}")
            continue
        hours = iterations * best.t_iter / SECONDS_PER_HOUR
        points.append(ScalePoint(
            dp=d, feasible=True, best=best, gpus=gpus,
            scaling_factor=baseline.t_iter / best.t_iter if baseline else None,
            iterations=iterations, training_hours=hours,
            rent_cost=rent_rate * gpus * hours, buy_cost=gpu_price * gpus,
        ))
        ranked.append(best)

    ranked.sort(key=ranking_key)
    if not ranked:
        raise NoFeasibleCandidate("no data-parallel degree in the range is feasible", excluded=len(exclusions))
    log_action('scale_analysis', ', '.join(
        f"d={p.dp}:{p.scaling_factor:.4g}x/{p.days:.4g}d" if p.feasible and p.scaling_factor else f"d={p.dp}:-"
        for p in points))
    return TuneReport(kind='scale', ranked=ranked, exclusions=exclusions, scale=points)


def brute_force_argmin(request, parallels, platform=None):
    """
    Sequential exhaustive evaluation with no cache or threads

    Args:
        request: TuneRequest supplying model, profiles and options
        parallels: Candidate ParallelismConfigs

    Returns:
        Best Candidate under ranking_key, or None when none is feasible
    """
    best = None
    for parallel in parallels:
        candidate, _ = evaluate(request, parallel, platform)
        if candidate is not None and (best is None or ranking_key(candidate) < ranking_key(best)):
            best = candidate
    return best
