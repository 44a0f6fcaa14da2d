"""
Tests for micro-batch, parallelism and scale tuning
"""
import os
from dataclasses import replace

import numpy as np
import pytest

from backend.cost_model import CostOptions
from backend.errors import InvalidTuneRequest, NoFeasibleCandidate
from backend.eval_cache import EvalCache
from backend.specs import ModelKind, ModelSpec, ParallelismConfig, PlatformSpec, load_config
from backend.tuner import (TuneRequest, brute_force_argmin, divisors, evaluate, layout_factorizations,
                           scale_analysis, tune_micro_batch, tune_parallelism)
from profiles.bandwidth import LOCALITIES, OP_KINDS, WILDCARD_SCALE, WILDCARD_TOPOLOGY, ingest_bandwidth
from profiles.profile_store import ProfileSet, default_profiles, load_profiles
from profiles.utilization import ingest_utilization


def _model(**overrides):
    fields = dict(kind=ModelKind.DENSE_GPT, param_count=1000, layers=4, hidden=4, seq_len=2, global_batch=8)
    fields.update(overrides)
    return ModelSpec(**fields)


def _platform(machines=1, gpus_per_machine=8, mem=1e12):
    return PlatformSpec(machines=machines, gpus_per_machine=gpus_per_machine, peak_flops=1000.0,
                        gpu_mem_bytes=mem, intra_topology='pcie')


def test_divisors_and_factorizations():
    assert divisors(12) == [1, 2, 3, 4, 6, 12]
    assert layout_factorizations(4) == [(1, 1, 4), (1, 2, 2), (1, 4, 1), (2, 1, 2), (2, 2, 1), (4, 1, 1)]


def test_flat_tie_picks_smallest_micro_batch(flat_profiles):
    request = TuneRequest(_model(), _platform(gpus_per_machine=4), flat_profiles(),
                          parallel=ParallelismConfig(pp=1, tp=2, dp=2))
    report = tune_micro_batch(request)
    assert [c.parallel.micro_batch for c in report.ranked] == [1, 2, 4]
    assert report.ranked[0].t_iter == pytest.approx(report.ranked[-1].t_iter, rel=1e-12)


def test_micro_batch_matches_brute_force(configs_dir):
    model, parallel, platform = load_config(os.path.join(configs_dir, 'gpt_39b.yaml'))
    request = TuneRequest(model, platform, default_profiles(), parallel=parallel)
    report = tune_micro_batch(request)
    candidates = [replace(parallel, micro_batch=b) for b in divisors(model.global_batch // parallel.dp)]
    brute = brute_force_argmin(request, candidates)
    assert report.best.parallel == brute.parallel
    assert report.best.t_iter == brute.t_iter
    assert all(e['reason'] == 'InsufficientMemory' for e in report.exclusions)


def test_requested_micro_batches_are_filtered(flat_profiles):
    request = TuneRequest(_model(), _platform(gpus_per_machine=4), flat_profiles(),
                          parallel=ParallelismConfig(pp=1, tp=2, dp=2), micro_batches=[2, 3])
    report = tune_micro_batch(request)
    assert [c.parallel.micro_batch for c in report.ranked] == [2]
    assert [(e['micro_batch'], e['reason']) for e in report.exclusions] == [(3, 'NonDivisibleBatch')]


def test_memory_filter_runs_first(flat_profiles):
    request = TuneRequest(_model(), _platform(gpus_per_machine=4, mem=10.0), flat_profiles(),
                          parallel=ParallelismConfig(pp=1, tp=2, dp=2))
    candidate, exclusion = evaluate(request, request.parallel)
    assert candidate is None
    assert exclusion['reason'] == 'InsufficientMemory'
    with pytest.raises(NoFeasibleCandidate):
        tune_micro_batch(request)


def test_micro_batch_needs_layout(flat_profiles):
    with pytest.raises(InvalidTuneRequest):
        tune_micro_batch(TuneRequest(_model(), _platform(), flat_profiles()))


def test_parallelism_matches_brute_force(toy_specs, toy_profile_paths):
    model, parallel, platform = toy_specs
    request = TuneRequest(model, platform, load_profiles(toy_profile_paths), parallel=parallel)
    report = tune_parallelism(request)
    assert len(report.ranked) == 3
    assert {(c.parallel.tp, c.parallel.pp, c.parallel.dp) for c in report.ranked} == \
        {(1, 4, 1), (2, 2, 1), (4, 1, 1)}

    candidates = [ParallelismConfig(pp=p, tp=t, dp=d, micro_batch=b)
                  for t, p, d in layout_factorizations(4) if model.global_batch % d == 0
                  for b in divisors(model.global_batch // d)]
    brute = brute_force_argmin(request, candidates)
    assert report.best.parallel == brute.parallel


def _random_profiles(rng):
    rows = [dict(op=op, locality=locality, topology=WILDCARD_TOPOLOGY, scale=WILDCARD_SCALE,
                 msg_bytes=size, bw_bytes_per_s=float(rng.uniform(1e3, 1e9)))
            for op in OP_KINDS for locality in LOCALITIES for size in (1, 2 ** 40)]
    samples = [dict(params_per_gpu=1.0, micro_batch=b, mu=float(rng.uniform(0.05, 1.0)))
               for b in (1, 2, 4, 8, 16, 32, 4096)]
    return ProfileSet(ingest_bandwidth(rows, source='random'), ingest_utilization(samples, source='random'),
                      label='random')


def test_randomized_requests_match_brute_force():
    rng = np.random.default_rng(23)
    for trial in range(100):
        world = int(rng.choice([2, 4, 8]))
        model = _model(param_count=10 ** 6, layers=8, hidden=16, seq_len=8,
                       global_batch=int(rng.choice([8, 16, 32])))
        platform = _platform(gpus_per_machine=world)
        profiles = _random_profiles(rng)
        if trial % 2:
            request = TuneRequest(model, platform, profiles, workers=1)
            candidates = [ParallelismConfig(pp=p, tp=t, dp=d, micro_batch=b)
                          for t, p, d in layout_factorizations(world) if model.global_batch % d == 0
                          for b in divisors(model.global_batch // d)]
            best = tune_parallelism(request).best
        else:
            t, p, d = layout_factorizations(world)[int(rng.integers(len(layout_factorizations(world))))]
            parallel = ParallelismConfig(pp=p, tp=t, dp=d)
            request = TuneRequest(model, platform, profiles, parallel=parallel, workers=1)
            candidates = [replace(parallel, micro_batch=b) for b in divisors(model.global_batch // d)]
            best = tune_micro_batch(request).best
        brute = brute_force_argmin(request, candidates)
        assert best.parallel == brute.parallel
        assert best.t_iter == brute.t_iter


def test_parallelism_rejects_partial_layouts(toy_specs, toy_profile_paths):
    model, parallel, platform = toy_specs
    request = TuneRequest(model, platform, load_profiles(toy_profile_paths), parallel=parallel,
                          layouts=[(2, 1, 1)])
    with pytest.raises(InvalidTuneRequest):
        tune_parallelism(request)


def test_tuning_is_deterministic(toy_specs, toy_profile_paths):
    model, parallel, platform = toy_specs
    profiles = load_profiles(toy_profile_paths)
    threaded = tune_parallelism(TuneRequest(model, platform, profiles, parallel=parallel, workers=4))
    serial = tune_parallelism(TuneRequest(model, platform, profiles, parallel=parallel, workers=1))
    again = tune_parallelism(TuneRequest(model, platform, profiles, parallel=parallel, workers=4))
    assert threaded.to_json() == serial.to_json() == again.to_json()


def _linear_request(flat_profiles, dp_range, **fields):
    model = _model(param_count=10 ** 6, hidden=16, seq_len=8, global_batch=64)
    return TuneRequest(model, _platform(), flat_profiles(), parallel=ParallelismConfig(pp=1, tp=1, dp=1),
                       micro_batches=[1], dp_range=dp_range, token_budget=1e9,
                       options=CostOptions(dp_overlap=1.0), **fields)


def test_ideal_scaling_is_linear(flat_profiles):
    report = scale_analysis(_linear_request(flat_profiles, [1, 2, 4, 8], rent_rate=2.0, gpu_price=100.0))
    assert [point.dp for point in report.scale] == [1, 2, 4, 8]
    for point in report.scale:
        assert point.feasible
        assert point.scaling_factor == pytest.approx(point.dp)
        assert point.iterations == pytest.approx(1e9 / (64 * 8))
        assert point.rent_cost == pytest.approx(2.0 * point.gpus * point.training_hours)
        assert point.buy_cost == pytest.approx(100.0 * point.gpus)
        assert point.days == pytest.approx(point.training_hours / 24)


def test_baseline_is_evaluated_outside_the_range(flat_profiles):
    report = scale_analysis(_linear_request(flat_profiles, [2, 4]))
    assert [point.scaling_factor for point in report.scale] == pytest.approx([2.0, 4.0])


def test_scaling_flattens_with_data_parallel_traffic(configs_dir):
    model, parallel, platform = load_config(os.path.join(configs_dir, 'gpt_145b.yaml'))
    request = TuneRequest(model, platform, default_profiles(), parallel=parallel,
                          dp_range=[1, 2, 4, 8], token_budget=3e11)
    points = scale_analysis(request).scale
    assert points[0].scaling_factor == pytest.approx(1.0)
    gpu_seconds = [point.dp * point.best.t_iter for point in points]
    assert all(a <= b * (1 + 1e-12) for a, b in zip(gpu_seconds, gpu_seconds[1:]))
    for point in points[1:]:
        assert 1.0 < point.scaling_factor < point.dp


def test_scaling_flattens_when_utilization_grows_with_micro_batch(flat_profiles):
    flat = flat_profiles()
    samples = [dict(params_per_gpu=1.0, micro_batch=b, mu=b / (b + 8.0)) for b in (1, 2, 4, 8, 16, 32, 64, 4096)]
    profiles = ProfileSet(flat.bandwidth, ingest_utilization(samples, source='rising'), label='rising')
    request = _linear_request(flat_profiles, [1, 2, 4, 8])
    request.profiles = profiles
    request.micro_batches = None
    points = scale_analysis(request).scale
    per_replica = [point.scaling_factor / point.dp for point in points]
    assert per_replica[0] == pytest.approx(1.0)
    assert all(a >= b - 1e-12 for a, b in zip(per_replica, per_replica[1:]))
    assert per_replica[-1] < 1.0
    assert [point.best.parallel.micro_batch for point in points] == [64, 32, 16, 8]


def test_infeasible_degrees_are_reported(flat_profiles):
    request = _linear_request(flat_profiles, [1, 3, 5, 12, 128])
    request.model = replace(request.model, global_batch=12)
    points = {point.dp: point for point in scale_analysis(request).scale}
    assert points[1].feasible and points[3].feasible
    assert points[5].reason['error'] == 'NonDivisibleBatch'
    assert points[12].reason['error'] == 'GpuCountMismatch'
    assert not points[128].feasible
    assert points[3].scaling_factor == pytest.approx(3.0)


def test_scale_request_validation(flat_profiles):
    with pytest.raises(InvalidTuneRequest):
        scale_analysis(_linear_request(flat_profiles, []))
    request = _linear_request(flat_profiles, [1, 2])
    request.token_budget = 0
    with pytest.raises(InvalidTuneRequest):
        scale_analysis(request)


def test_cross_product_searches_layouts(flat_profiles):
    model = _model(layers=8, global_batch=16)
    base = dict(parallel=ParallelismConfig(pp=2, tp=2, dp=1), dp_range=[1, 2], token_budget=1e6)
    fixed = scale_analysis(TuneRequest(model, _platform(), flat_profiles(), **base))
    crossed = scale_analysis(TuneRequest(model, _platform(), flat_profiles(), cross_product=True, **base))
    for plain, searched in zip(fixed.scale, crossed.scale):
        assert searched.best.parallel.tp * searched.best.parallel.pp == 4
        assert searched.best.t_iter <= plain.best.t_iter * (1 + 1e-9)


def test_scale_report_csv(flat_profiles):
    report = scale_analysis(_linear_request(flat_profiles, [1, 2]))
    lines = report.scale_csv().splitlines()
    assert lines[0] == 'd,scaling_factor,days,rent_cost,buy_cost'
    assert len(lines) == 3
    assert report.ranking_csv().splitlines()[0] == 'rank,t,p,d,b,t_iter_s,tflops_per_gpu,mu'


def test_eval_cache_lru():
    cache = EvalCache(max_size=2)
    cache.set('a', 1)
    cache.set('b', 2)
    assert cache.get('a') == 1
    cache.set('c', 3)
    assert cache.get('b') is None
    assert cache.get_or_compute('c', lambda: 99) == 3
    assert cache.get_or_compute('d', lambda: 4) == 4
    stats = cache.get_stats()
    assert stats['size'] == 2
    assert stats['hits'] == 2
    assert stats['misses'] == 2
