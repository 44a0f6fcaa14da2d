"""
Tests for rank placement, the traffic matrix and the On-Off timeline
"""
import numpy as np
import pytest

from backend.cost_model import pp_time
from backend.errors import GpuCountMismatch, InvalidSpec, UnmappableDpGroup, UnmappableTpGroup
from backend.specs import (DerivedParams, ModelKind, ModelSpec, ParallelismConfig, PlatformSpec, reference_setup,
                           validate)
from backend.traffic_model import (TRAFFIC_CLASSES, activation_bytes, build_traffic_matrix, chunk_sizes,
                                   closed_form_class_totals, map_ranks, onoff_timeline,
                                   ring_allreduce_edges)
from simulator.ring_allreduce import ring_allreduce, ring_edge_bytes


def _platform(world, gpus_per_machine=8):
    gpm = min(world, gpus_per_machine)
    return PlatformSpec(machines=world // gpm, gpus_per_machine=gpm, peak_flops=1e12,
                        gpu_mem_bytes=1e12, intra_topology='nvswitch')


def _matrix(model, parallel, platform, **kwargs):
    derived = validate(model, parallel, platform)
    return build_traffic_matrix(model, parallel, derived, map_ranks(parallel, platform), **kwargs)


def test_rank_order_tp_fastest():
    parallel = ParallelismConfig(pp=2, tp=2, dp=3)
    mapping = map_ranks(parallel, _platform(12, gpus_per_machine=4))
    for info in mapping.ranks:
        assert info.rank == info.stage * 6 + info.dp_index * 2 + info.tp_index
        assert info.machine == info.rank // 4
    assert mapping.tp_groups()[0] == [0, 1]
    assert mapping.dp_groups()[0] == [0, 2, 4]
    assert (0, 6) in mapping.pp_pairs()


def test_mapping_requires_matching_world_size():
    with pytest.raises(GpuCountMismatch):
        map_ranks(ParallelismConfig(pp=2, tp=2, dp=1), _platform(8))


def test_tp_group_across_machines():
    parallel = ParallelismConfig(pp=1, tp=8, dp=1)
    platform = PlatformSpec(machines=2, gpus_per_machine=4, peak_flops=1e12, gpu_mem_bytes=1e12,
                            intra_topology='nvlink')
    with pytest.raises(UnmappableTpGroup):
        map_ranks(parallel, platform, strict=True)
    mapping = map_ranks(parallel, platform, strict=False)
    assert mapping.tp_spans_machines
    assert mapping.tp_locality() == 'inter'
    assert mapping.warnings


def test_localities_on_reference_layout():
    model, parallel, platform = reference_setup('gpt-39b')
    mapping = map_ranks(parallel, platform)
    assert mapping.tp_locality() == 'intra'
    assert mapping.dp_locality() == 'intra'
    assert mapping.pp_locality() == 'inter'


def test_straddling_stage_blocks_are_rejected():
    platform = _platform(24, 8)
    with pytest.raises(UnmappableDpGroup):
        map_ranks(ParallelismConfig(pp=8, tp=1, dp=3), platform)
    with pytest.raises(UnmappableDpGroup):
        map_ranks(ParallelismConfig(pp=8, tp=1, dp=3), platform, strict=False)
    # blocks larger than one machine may span machines
    mapping = map_ranks(ParallelismConfig(pp=2, tp=4, dp=3), platform)
    assert mapping.tp_locality() == 'intra'
    assert mapping.dp_locality() == 'inter'


def test_groups_fit_one_machine_when_blocks_do():
    for gpus_per_machine in (4, 6, 8):
        for t in (1, 2, 3, 4):
            for d in (1, 2, 3, 4):
                if t * d > gpus_per_machine or gpus_per_machine % t:
                    continue
                for p in (1, 2, 3, 4, 8):
                    world = p * t * d
                    if world > gpus_per_machine and world % gpus_per_machine:
                        continue
                    platform = _platform(world, gpus_per_machine)
                    parallel = ParallelismConfig(pp=p, tp=t, dp=d)
                    try:
                        mapping = map_ranks(parallel, platform)
                    except UnmappableDpGroup:
                        assert platform.gpus_per_machine % (t * d) != 0
                        continue
                    assert mapping.tp_locality() == 'intra'
                    assert mapping.dp_locality() == 'intra'


def test_four_stage_layout_structure():
    parallel = ParallelismConfig(pp=4, tp=2, dp=4)
    platform = _platform(32, 8)
    mapping = map_ranks(parallel, platform)
    ranks = mapping.ranks
    assert len({(r.stage, r.tp_index, r.dp_index) for r in ranks}) == 32
    assert all(r.machine == r.stage for r in ranks)

    tp_groups = mapping.tp_groups()
    assert len(tp_groups) == 16
    assert sorted(r for group in tp_groups for r in group) == list(range(32))
    for group in tp_groups:
        assert [ranks[r].tp_index for r in group] == [0, 1]
        assert len({(ranks[r].stage, ranks[r].dp_index) for r in group}) == 1
        assert mapping.is_intra_machine(group)

    dp_groups = mapping.dp_groups()
    assert len(dp_groups) == 8
    assert sorted(r for group in dp_groups for r in group) == list(range(32))
    for group in dp_groups:
        assert [ranks[r].dp_index for r in group] == [0, 1, 2, 3]
        assert len({(ranks[r].stage, ranks[r].tp_index) for r in group}) == 1
        assert mapping.is_intra_machine(group)

    pairs = mapping.pp_pairs()
    assert len(pairs) == 3 * 8
    for lower, upper in pairs:
        assert ranks[upper].stage == ranks[lower].stage + 1
        assert (ranks[upper].tp_index, ranks[upper].dp_index) == (ranks[lower].tp_index, ranks[lower].dp_index)
        assert ranks[upper].machine == ranks[lower].machine + 1

    model = ModelSpec(ModelKind.DENSE_GPT, 10 ** 6, 8, 8, 4, 16)
    matrix = build_traffic_matrix(model, parallel, validate(model, parallel, platform), mapping)
    assert set(matrix.edges('TP')) == {(a, b) for a, b in tp_groups} | {(b, a) for a, b in tp_groups}
    assert set(matrix.edges('DP')) == {(g[i], g[(i + 1) % 4]) for g in dp_groups for i in range(4)}
    assert set(matrix.edges('PP')) == set(pairs) | {(b, a) for a, b in pairs}


def test_full_machine_tp_groups():
    mapping = map_ranks(ParallelismConfig(pp=2, tp=8, dp=4), _platform(64, 8))
    assert len({(r.stage, r.tp_index, r.dp_index) for r in mapping.ranks}) == 64
    for group in mapping.tp_groups():
        assert mapping.is_intra_machine(group)
        assert [mapping.ranks[r].local_slot for r in group] == list(range(8))



def test_chunk_sizes_differ_by_at_most_one():
    assert chunk_sizes(10, 3) == [4, 3, 3]
    assert sum(chunk_sizes(17, 5)) == 17


def test_ring_edges_match_step_by_step_ring():
    for payload in (16, 17, 100):
        for k in (2, 3, 4, 5):
            rendered = {(src, dst): volume for src, dst, volume in ring_allreduce_edges(list(range(k)), payload)}
            assert rendered == ring_edge_bytes(payload, k)


def test_ring_allreduce_sums_buffers():
    rng = np.random.default_rng(3)
    buffers = [rng.integers(0, 100, size=11) for _ in range(4)]
    reduced, _ = ring_allreduce(buffers)
    for data in reduced:
        assert np.array_equal(data, sum(buffers))


def test_single_member_group_has_no_edges():
    assert ring_allreduce_edges([7], 100) == []


def test_toy_tp_entry_matches_ring():
    model = ModelSpec(ModelKind.DENSE_GPT, 1000, 2, 4, 2, 3)
    parallel = ParallelismConfig(pp=1, tp=2, dp=1)
    matrix = _matrix(model, parallel, _platform(2))
    # 2 layers x 6 AllReduces x 3 micro-batches of a 16-byte activation
    assert matrix.classes['TP'][0, 1] == 576
    assert matrix.classes['TP'][0, 1] == 36 * ring_edge_bytes(16, 2)[(0, 1)]
    assert matrix.classes['PP'].sum() == 0
    assert matrix.classes['DP'].sum() == 0


def _random_case(rng):
    p, t, d = (int(rng.choice([1, 2, 4])) for _ in range(3))
    v = int(rng.choice([1, 2])) if p > 1 else 1
    b = int(rng.choice([1, 2]))
    m = int(rng.integers(1, 5))
    moe = bool(rng.integers(0, 2))
    layers = p * v * int(rng.integers(1, 3)) * (2 if moe else 1)
    model = ModelSpec(ModelKind.MOE if moe else ModelKind.DENSE_GPT,
                      param_count=int(rng.integers(1000, 100000)), layers=layers,
                      hidden=int(rng.choice([4, 8])), seq_len=int(rng.choice([2, 4])),
                      global_batch=d * b * m, vocab_size=int(rng.choice([0, 50])))
    ep = int(rng.choice([e for e in (1, 2, 4) if d % e == 0])) if moe else 1
    return model, ParallelismConfig(pp=p, tp=t, dp=d, ep=ep, micro_batch=b, interleave=v)


def test_matrix_conserves_closed_form_volumes():
    rng = np.random.default_rng(7)
    for _ in range(500):
        model, parallel = _random_case(rng)
        recompute = bool(rng.integers(0, 2))
        scatter_gather = bool(rng.integers(0, 2))
        platform = _platform(parallel.world_size)
        derived = validate(model, parallel, platform)
        matrix = build_traffic_matrix(model, parallel, derived, map_ranks(parallel, platform),
                                      recompute=recompute, scatter_gather=scatter_gather)
        expected = closed_form_class_totals(model, parallel, derived, recompute=recompute,
                                            scatter_gather=scatter_gather)
        assert matrix.totals() == expected
        for name in TRAFFIC_CLASSES:
            assert np.all(np.diag(matrix.classes[name]) == 0)


def test_tp_edges_stay_inside_tp_groups():
    model, parallel, platform = reference_setup('gpt-39b', micro_batch=3)
    derived = validate(model, parallel, platform)
    mapping = map_ranks(parallel, platform)
    matrix = build_traffic_matrix(model, parallel, derived, mapping)
    group_of = {r: i for i, group in enumerate(mapping.tp_groups()) for r in group}
    assert all(group_of[src] == group_of[dst] for src, dst in matrix.edges('TP'))


@pytest.mark.parametrize('name,micro_batch,share', [
    ('gpt-39b', 3, 0.9845),
    ('gpt-76b', 2, 0.9834),
    ('gpt-145b', 3, 0.9836),
])
def test_tp_dominates_reference_models(name, micro_batch, share):
    model, parallel, platform = reference_setup(name, micro_batch=micro_batch)
    matrix = _matrix(model, parallel, platform)
    assert matrix.share('TP') == pytest.approx(share, abs=5e-4)
    assert matrix.share('TP') > 0.98


def test_pp_pairs_carry_full_activation_by_default():
    model, parallel, platform = reference_setup('gpt-39b', micro_batch=3)
    derived = validate(model, parallel, platform)
    mapping = map_ranks(parallel, platform)
    matrix = build_traffic_matrix(model, parallel, derived, mapping)
    expected = activation_bytes(model, parallel) * derived.micro_batches
    assert expected == 2 * 3 * 2048 * 8192 * 256
    for lower, upper in mapping.pp_pairs():
        assert matrix.classes['PP'][lower, upper] == expected
        assert matrix.classes['PP'][upper, lower] == expected

    # the cost model charges the same bytes per GPU: one send and one receive of 2bsh
    _, t_pp_mb = pp_time(model, parallel, derived, 1.0)
    assert t_pp_mb == pytest.approx(2 * activation_bytes(model, parallel))


def test_pp_without_scatter_gather_sends_full_activation():
    model, parallel, platform = reference_setup('gpt-39b', micro_batch=3)
    split = _matrix(model, parallel, platform, scatter_gather=True).class_total('PP')
    full = _matrix(model, parallel, platform, scatter_gather=False).class_total('PP')
    assert full == parallel.tp * split


def test_embedding_sync_only_with_pipeline():
    model = ModelSpec(ModelKind.DENSE_GPT, 1000, 4, 4, 2, 4, vocab_size=10)
    flat = _matrix(model, ParallelismConfig(pp=1, tp=2, dp=2), _platform(4))
    piped = _matrix(model, ParallelismConfig(pp=2, tp=2, dp=1), _platform(4))
    assert flat.class_total('EmbSync') == 0
    assert piped.classes['EmbSync'][0, 2] == 2 * 10 * 4


def test_heatmap_csv_has_rank_labels(toy_specs):
    model, parallel, platform = toy_specs
    matrix = _matrix(model, parallel, platform)
    lines = matrix.class_csv('TP').splitlines()
    assert lines[0] == 'rank,0,1,2,3'
    assert len(lines) == 5


def test_onoff_timeline_blocks():
    model = ModelSpec(ModelKind.DENSE_GPT, 1000, 4, 4, 2, 3)
    derived = validate(model, ParallelismConfig(pp=2, tp=2, dp=1), _platform(4))
    timeline = onoff_timeline(derived, t_comp_mb=6.0, t_tp_mb=1.2, t_pp_mb=0.5)
    assert timeline.blocks == 2 * derived.micro_batches
    assert timeline.on_time() == pytest.approx(2 * derived.micro_batches * (1.2 + 0.5))
    signatures = [timeline.block_signature(k) for k in range(timeline.blocks)]
    assert all(sig == signatures[0] for sig in signatures)
    kinds = [kind for kind, _ in signatures[0]]
    assert kinds.count('tp-burst') == derived.layers_per_stage * 6
    assert kinds[-1] == 'pp-burst'
    with pytest.raises(InvalidSpec):
        onoff_timeline(derived, -1.0, 0.0, 0.0)


def test_timeline_blocks_repeat_exactly():
    derived = DerivedParams(micro_batches=6, layers_per_stage=12, params_per_gpu=1.0)
    timeline = onoff_timeline(derived, t_comp_mb=36.0, t_tp_mb=7.2, t_pp_mb=0.5)
    signatures = [timeline.block_signature(k) for k in range(timeline.blocks)]
    assert timeline.blocks == 12
    assert all(sig == signatures[0] for sig in signatures)

    per_block = len(signatures[0])
    period = sum(duration for _, duration in signatures[0])
    for k in range(timeline.blocks):
        assert timeline.segments[k * per_block].start == pytest.approx(k * period)
    segments = timeline.segments
    assert all(a.start < b.start for a, b in zip(segments, segments[1:]))
    assert all(a.end <= b.start + 1e-9 for a, b in zip(segments, segments[1:]))
    assert timeline.block_on_times() == [timeline.block_on_times()[0]] * 12
