from dataclasses import replace

import numpy as np
import pytest

from ponderexit import gradcore as gc
from ponderexit.model import (
    STEP_COUNTER,
    ModelConfig,
    classify,
    forward_full,
    forward_incremental,
    halting,
    init_params,
    load_checkpoint,
    param_count,
    save_checkpoint,
)

SMALL = ModelConfig(vocab_size=10, max_seq_len=8, d_model=16, n_heads=2, d_ff=32, max_layers=4, num_classes=3)


def tokens(batch=5, length=6, seed=0, vocab=10):
    return np.random.default_rng(seed).integers(0, vocab, size=(batch, length))


class StopAt:
    def __init__(self, k):
        self.k = k

    def __call__(self, layer, rows, logits, lambdas):
        return np.full(rows.shape, layer >= self.k)


def test_config_validation():
    with pytest.raises(ValueError, match="divisible"):
        ModelConfig(d_model=10, n_heads=3)
    with pytest.raises(ValueError):
        ModelConfig(max_layers=0)
    with pytest.raises(ValueError):
        ModelConfig(num_classes=1)
    with pytest.raises(ValueError):
        ModelConfig(lambda_arch="five_layer")


def test_param_count_independent_of_depth():
    counts = {param_count(init_params(replace(SMALL, max_layers=n))) for n in (1, 4, 12, 24)}
    assert len(counts) == 1


@pytest.mark.parametrize("n", [1, 4, 12])
def test_per_layer_heads_add_n_heads(n):
    cfg = replace(SMALL, max_layers=n)
    shared = param_count(init_params(cfg))
    per_layer = param_count(init_params(replace(cfg, classifier_mode="per_layer")))
    head = cfg.d_model * cfg.num_classes + cfg.num_classes
    # the shared head is replaced by n heads of the same size
    assert per_layer - shared == (n - 1) * head


def test_three_layer_lambda_widths():
    cfg = replace(SMALL, lambda_arch="three_layer", lambda_input="concat_h_prev")
    p = init_params(cfg)
    assert p["lam_w1"].shape == (32, 16)
    assert p["lam_w2"].shape == (16, 8)
    assert p["lam_w3"].shape == (8, 1)


def test_trace_shapes_and_lambda_range():
    trace = forward_full(SMALL, init_params(SMALL), tokens())
    assert len(trace) == 4
    assert trace.logits_array.shape == (5, 4, 3)
    lam = trace.lambdas
    assert lam.shape == (5, 4)
    assert np.all((lam > 0) & (lam < 1))


def test_initial_lambdas_near_prior():
    lam = forward_full(SMALL, init_params(SMALL), tokens(batch=50)).lambdas
    assert abs(lam.mean() - 0.1) < 0.03


def test_single_layer_model():
    cfg = replace(SMALL, max_layers=1)
    trace = forward_full(cfg, init_params(cfg), tokens())
    assert len(trace) == 1


def test_token_errors():
    p = init_params(SMALL)
    with pytest.raises(ValueError, match="token"):
        forward_full(SMALL, p, np.array([[1, 2, 10]]))
    with pytest.raises(ValueError):
        forward_full(SMALL, p, np.zeros((2, 0), dtype=int))
    with pytest.raises(ValueError):
        forward_full(SMALL, p, np.zeros((2, 9), dtype=int))


def test_concat_first_layer_sees_embedding_pool():
    cfg = replace(SMALL, lambda_input="concat_h_prev")
    p = init_params(cfg, seed=3)
    trace = forward_full(cfg, p, tokens())
    expected = halting(cfg, p, trace.pooled[0].value, trace.pooled_input.value)
    np.testing.assert_allclose(trace.lambdas[:, 0], expected, rtol=1e-12)


@pytest.mark.parametrize("mode, sensitive", [("single_h", False), ("concat_h_prev", True)])
def test_history_injection_probe(mode, sensitive):
    cfg = replace(SMALL, lambda_input=mode, lambda_init_prior=None)
    p = init_params(cfg, seed=1)
    rng = np.random.default_rng(0)
    h_i = rng.normal(size=(4, cfg.d_model))
    a = halting(cfg, p, h_i, rng.normal(size=(4, cfg.d_model)))
    b = halting(cfg, p, h_i, rng.normal(size=(4, cfg.d_model)))
    assert np.all((a > 0) & (a < 1))
    assert (not np.array_equal(a, b)) == sensitive


def test_classify_shared_ignores_layer():
    p = init_params(SMALL)
    h = np.random.default_rng(0).normal(size=(2, SMALL.d_model))
    np.testing.assert_array_equal(classify(p, h, 3).value, classify(p, h, 7).value)
    assert classify(p, h, 1).shape == (2, SMALL.num_classes)


def test_classify_per_layer():
    cfg = replace(SMALL, classifier_mode="per_layer")
    p = init_params(cfg)
    h = np.random.default_rng(0).normal(size=(2, cfg.d_model))
    assert not np.array_equal(classify(p, h, 1, "per_layer").value, classify(p, h, 2, "per_layer").value)
    with pytest.raises(ValueError, match="layer index"):
        classify(p, h, 5, "per_layer")


def test_incremental_never_stopping_matches_full_bitwise():
    p = init_params(SMALL, seed=4)
    x = tokens(batch=7)
    full = forward_full(SMALL, p, x)
    part = forward_incremental(SMALL, p, x, lambda layer, rows, logits, lam: np.zeros(rows.shape, bool))
    assert part.logits.tobytes() == full.logits_array.tobytes()
    assert part.lambdas.tobytes() == full.lambdas.tobytes()
    assert np.all(part.layers_evaluated == 4)


def test_incremental_prefix_and_counts():
    p = init_params(SMALL, seed=4)
    x = tokens(batch=6)
    full = forward_full(SMALL, p, x)

    def stop_by_row(layer, rows, logits, lam):
        return layer >= (rows % 4) + 1

    STEP_COUNTER.reset()
    part = forward_incremental(SMALL, p, x, stop_by_row)
    np.testing.assert_array_equal(part.layers_evaluated, np.arange(6) % 4 + 1)
    assert STEP_COUNTER.rows == part.layers_evaluated.sum()
    for r, k in enumerate(part.layers_evaluated):
        assert part.logits[r, :k].tobytes() == full.logits_array[r, :k].tobytes()
        assert np.all(np.isnan(part.logits[r, k:]))


def test_stop_at_first_layer_calls_step_once():
    STEP_COUNTER.reset()
    forward_incremental(SMALL, init_params(SMALL), tokens(batch=1), StopAt(1))
    assert STEP_COUNTER.calls == 1


def test_row_results_do_not_depend_on_batch_company():
    p = init_params(SMALL, seed=2)
    x = tokens(batch=8)
    alone = forward_full(SMALL, p, x[3:4]).logits_array[0]
    np.testing.assert_allclose(forward_full(SMALL, p, x).logits_array[3], alone, rtol=1e-12, atol=1e-14)


def test_checkpoint_round_trip(tmp_path):
    cfg = replace(SMALL, lambda_arch="three_layer", classifier_mode="per_layer")
    p = init_params(cfg, seed=9)
    path = tmp_path / "m.npz"
    save_checkpoint(path, cfg, p, {"note": "x"})
    cfg2, p2, meta = load_checkpoint(path)
    assert cfg2 == cfg and meta == {"note": "x"}
    assert set(p2) == set(p)
    for k in p:
        assert p2[k].tobytes() == p[k].tobytes()


def test_checkpoint_rejects_foreign_file(tmp_path):
    path = tmp_path / "other.npz"
    np.savez(path, a=np.zeros(3))
    with pytest.raises(ValueError, match="not a ponderexit checkpoint"):
        load_checkpoint(path)


def test_training_mode_dropout_needs_rng():
    with pytest.raises(ValueError, match="rng"):
        forward_full(SMALL, init_params(SMALL), tokens(), training=True)


def test_gradients_reach_every_parameter():
    from ponderexit.model import as_tensors

    cfg = replace(SMALL, lambda_input="concat_h_prev")
    leaves = as_tensors(init_params(cfg), requires_grad=True)
    trace = forward_full(cfg, leaves, tokens())
    total = gc.sum(trace.logits[-1]) + gc.sum(trace.halt_logits[0]) + gc.sum(trace.halt_logits[-1])
    grads = gc.backward(total)
    assert set(grads) == set(leaves)
