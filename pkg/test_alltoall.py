"""
Tests for MoE AllToAll prediction and uniformity metrics
"""
import numpy as np
import pytest

from backend.errors import EmptyHeatmap, InvalidSpec, NonSquare
from backend.specs import REFERENCE_MODELS, ModelKind, ModelSpec
from backend.traffic_model import (expected_alltoall_matrix, heatmap_csv, predict_alltoall_sequence,
                                   sample_alltoall_matrix, synthetic_alltoall_trace, uniformity_metrics,
                                   uniformity_trend)


def _small_moe():
    return ModelSpec(ModelKind.MOE, 1000, 4, 4, 2, 2)


def test_expected_matrix_is_uniform():
    matrix = expected_alltoall_matrix(_small_moe(), e=2, k_active=2)
    assert matrix.shape == (2, 2)
    assert np.all(matrix == 16)


def test_expected_matrix_scales_with_k():
    model = REFERENCE_MODELS['moe-1.3b']
    one = expected_alltoall_matrix(model, 8, 1)
    two = expected_alltoall_matrix(model, 8, 2)
    assert np.allclose(two, 2 * one)
    assert one.sum() == pytest.approx(2 * model.global_batch * model.seq_len * model.hidden)


def test_k_active_range():
    with pytest.raises(InvalidSpec):
        expected_alltoall_matrix(_small_moe(), 2, 3)


def test_remaining_alltoalls_follow_the_first():
    first = np.array([[0.0, 5.0, 1.0], [2.0, 0.0, 3.0], [4.0, 6.0, 0.0]])
    second_fw, first_bw, second_bw = predict_alltoall_sequence(first)
    assert np.array_equal(second_fw, first.T)
    assert np.array_equal(first_bw, first)
    assert np.array_equal(second_bw, first.T)
    # predictions are copies
    second_fw[0, 0] = 99.0
    assert first[0, 0] == 0.0


def test_sequence_relations_on_random_matrices():
    rng = np.random.default_rng(5)
    for _ in range(1000):
        e = int(rng.integers(1, 17))
        first = rng.uniform(0.0, 1e6, size=(e, e))
        second_fw, first_bw, second_bw = predict_alltoall_sequence(first)
        assert np.array_equal(second_fw, first.T)
        assert np.array_equal(first_bw, first)
        assert np.array_equal(second_bw, first.T)
        assert np.array_equal(second_fw.T, first)
        assert uniformity_metrics(second_fw) == pytest.approx(uniformity_metrics(first))


def test_uniformity_metrics():
    mean, variance = uniformity_metrics([[0, 2], [2, 0]])
    assert mean == pytest.approx(1.0)
    assert variance == pytest.approx(1.0)


def test_heatmap_shape_errors():
    with pytest.raises(NonSquare):
        uniformity_metrics(np.zeros((2, 3)))
    with pytest.raises(NonSquare):
        predict_alltoall_sequence(np.zeros(4))
    with pytest.raises(EmptyHeatmap):
        uniformity_metrics(np.zeros((0, 0)))


def test_trace_converges_to_uniform():
    trend = uniformity_trend(synthetic_alltoall_trace(e=8, steps=6, total_bytes=1e9))
    means = [mean for _, mean, _ in trend]
    variances = [variance for _, _, variance in trend]
    assert means == sorted(means)
    assert variances == sorted(variances, reverse=True)


def test_sampled_gate_conserves_tokens():
    matrix = sample_alltoall_matrix(e=4, tokens=4000, k_active=1.0, skew=0.5, bytes_per_token=2.0,
                                    rng=np.random.default_rng(1))
    assert matrix.sum() == pytest.approx(4000 * 2.0)
    # lower experts are preferred
    assert matrix[:, 0].sum() > matrix[:, 3].sum()


def test_heatmap_csv_quantizes():
    text = heatmap_csv([[0.4, 1.6], [2.5, 0.0]])
    assert text.splitlines() == ['rank,0,1', '0,0,2', '1,2,0']
