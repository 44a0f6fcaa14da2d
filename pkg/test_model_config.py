"""
Tests for model, parallelism and platform specifications
"""
import os

import pytest

from backend.errors import GpuCountMismatch, InvalidSpec, NonDivisibleBatch, NonDivisibleLayers
from backend.specs import (GB, ModelKind, ModelSpec, ParallelismConfig, PlatformSpec, REFERENCE_MODELS,
                           check_memory, config_to_dict, dump_config, estimate_memory_per_gpu,
                           estimate_param_count, load_config, reference_platform, reference_setup,
                           specs_from_dict, validate)


def _unit_model(**overrides):
    fields = dict(kind=ModelKind.DENSE_GPT, param_count=1, layers=1, hidden=1, seq_len=1, global_batch=1)
    fields.update(overrides)
    return ModelSpec(**fields)


def test_toy_derived_params(toy_specs):
    model, parallel, platform = toy_specs
    derived = validate(model, parallel, platform)
    assert derived.micro_batches == 3
    assert derived.layers_per_stage == 2
    assert derived.params_per_gpu == pytest.approx(250.0)


def test_batch_must_divide(toy_specs):
    model, _, platform = toy_specs
    with pytest.raises(NonDivisibleBatch):
        validate(model, ParallelismConfig(pp=2, tp=1, dp=2, micro_batch=1), platform)


def test_layers_must_split_into_chunks(toy_specs):
    model, _, platform = toy_specs
    with pytest.raises(NonDivisibleLayers):
        validate(model, ParallelismConfig(pp=3, tp=1, dp=1), platform)
    with pytest.raises(NonDivisibleLayers):
        validate(model, ParallelismConfig(pp=2, tp=2, dp=1, interleave=4), platform)


def test_world_size_must_match_platform(toy_specs):
    model, _, platform = toy_specs
    with pytest.raises(GpuCountMismatch):
        validate(model, ParallelismConfig(pp=1, tp=2, dp=1), platform)


def test_dense_model_rejects_expert_parallelism(toy_specs):
    model, _, platform = toy_specs
    with pytest.raises(InvalidSpec):
        validate(model, ParallelismConfig(pp=2, tp=2, dp=1, ep=2), platform)


def test_moe_expert_degree_divides_dp():
    model = REFERENCE_MODELS['moe-1.3b']
    platform = reference_platform('tesla-nvlink', 2)
    validate(model, ParallelismConfig(pp=1, tp=1, dp=8, ep=8, micro_batch=4), platform)
    with pytest.raises(InvalidSpec):
        validate(model, ParallelismConfig(pp=1, tp=1, dp=8, ep=3, micro_batch=4), platform)


def test_invalid_fields_are_rejected():
    with pytest.raises(InvalidSpec):
        _unit_model(layers=0).check()
    with pytest.raises(InvalidSpec):
        _unit_model(precision_bytes=3).check()
    with pytest.raises(InvalidSpec):
        PlatformSpec(1, 4, 1e12, 1e9, 'infiniband').check()


def test_memory_of_unit_model():
    needed = estimate_memory_per_gpu(_unit_model(), ParallelismConfig(pp=1, tp=1, dp=1))
    assert needed == pytest.approx(16 + 39)


def test_memory_feasibility_145b():
    model, parallel, platform = reference_setup('gpt-145b', micro_batch=6)
    needed, fits = check_memory(model, parallel, platform)
    assert needed == pytest.approx(57.77e9, rel=1e-3)
    assert fits
    assert platform.gpu_mem_bytes == 80 * GB

    _, fits = check_memory(model, ParallelismConfig(pp=8, tp=8, dp=1, micro_batch=48), platform)
    assert not fits


def test_memory_grows_with_micro_batch():
    model, parallel, _ = reference_setup('gpt-39b')
    sizes = [estimate_memory_per_gpu(model, ParallelismConfig(pp=4, tp=4, dp=2, micro_batch=b))
             for b in (1, 2, 4, 8)]
    assert sizes == sorted(sizes)


def test_estimate_param_count():
    assert estimate_param_count(2, 4) == 12 * 2 * 16
    assert estimate_param_count(2, 4, vocab_size=10) == 12 * 2 * 16 + 40
    with pytest.raises(InvalidSpec):
        estimate_param_count(0, 4)


def test_config_round_trip(toy_specs):
    model, parallel, platform = toy_specs
    assert specs_from_dict(config_to_dict(model, parallel, platform)) == (model, parallel, platform)


def test_dump_config_reloads(tmp_path, toy_specs):
    path = tmp_path / 'echo.yaml'
    path.write_text(dump_config(*toy_specs))
    assert load_config(str(path)) == toy_specs


def test_params_auto(tmp_path):
    path = tmp_path / 'auto.yaml'
    path.write_text(
        "model: {params: auto, layers: 2, hidden: 4, seq_len: 2, global_batch: 2}\n"
        "parallel: {tp: 1, pp: 1, dp: 1}\n"
        "platform: {machines: 1, gpus_per_machine: 1, peak_flops: 1.0e12, gpu_mem_bytes: 1.0e9, "
        "intra_topology: pcie}\n")
    model, _, _ = load_config(str(path))
    assert model.param_count == 12 * 2 * 16


def test_missing_key_and_bad_yaml(tmp_path):
    missing = tmp_path / 'missing.yaml'
    missing.write_text("model: {params: 10, layers: 2, hidden: 4, seq_len: 2}\nparallel: {tp: 1, pp: 1, dp: 1}\n")
    with pytest.raises(InvalidSpec):
        load_config(str(missing))

    broken = tmp_path / 'broken.yaml'
    broken.write_text("model: [unclosed\n")
    with pytest.raises(InvalidSpec):
        load_config(str(broken))

    with pytest.raises(InvalidSpec):
        load_config(str(tmp_path / 'absent.yaml'))


def test_bundled_configs_validate(configs_dir):
    for name in ('toy.yaml', 'gpt_39b.yaml', 'gpt_76b.yaml', 'gpt_145b.yaml', 'moe_1_3b.yaml'):
        model, parallel, platform = load_config(os.path.join(configs_dir, name))
        derived = validate(model, parallel, platform)
        assert derived.micro_batches * parallel.dp * parallel.micro_batch == model.global_batch


def test_resized_platform():
    platform = reference_platform('hopper', 1)
    assert platform.resized(4).gpus_per_machine == 4
    assert platform.resized(64).machines == 8
    with pytest.raises(GpuCountMismatch):
        platform.resized(12)
