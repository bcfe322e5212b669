import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ponderexit import gradcore as gc
from ponderexit.gradcore import RngStream, Tensor, backward, grad_check


def leaf(x, name):
    return Tensor(np.asarray(x, dtype=float), requires_grad=True, name=name)


def test_tanh_at_zero():
    x = leaf([0.0], "x")
    y = gc.tanh(x)
    assert y.value[0] == 0.0
    assert backward(gc.sum(y))["x"][0] == 1.0


def test_softmax_symmetric():
    np.testing.assert_array_equal(gc.softmax(Tensor([0.0, 0.0])).value, [0.5, 0.5])


def test_sum_gradient_is_ones():
    x = leaf(np.random.default_rng(0).normal(size=(3, 4, 2)), "x")
    np.testing.assert_array_equal(backward(gc.sum(x))["x"], np.ones((3, 4, 2)))


def test_mean_of_squares_hand_gradient():
    x = leaf([1.0, 2.0, 3.0], "x")
    g = backward(gc.mean(x * x))["x"]
    np.testing.assert_allclose(g, [2 / 3, 4 / 3, 2.0], rtol=1e-15)


def test_non_scalar_root_rejected():
    with pytest.raises(ValueError, match="scalar"):
        backward(leaf([1.0, 2.0], "x") * 2.0)


def test_shape_mismatch_reports_both_shapes():
    with pytest.raises(ValueError, match=r"\(3, 4\).*\(2, 2\)"):
        gc.matmul(Tensor(np.ones((3, 4))), Tensor(np.ones((2, 2))))
    with pytest.raises(ValueError, match=r"\(3,\).*\(4,\)"):
        gc.add(Tensor(np.ones(3)), Tensor(np.ones(4)))


def test_matmul_matches_finite_differences():
    rng = np.random.default_rng(1)
    params = {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(4, 2))}
    w = rng.normal(size=(3, 2))
    report = grad_check(lambda p: gc.sum((p["a"] @ p["b"]) * w), params, step=1e-5, tol=1e-5)
    assert report.passed, report


def test_linear_function_exact():
    rng = np.random.default_rng(2)
    params = {"x": rng.normal(size=5)}
    c = rng.normal(size=5)
    report = grad_check(lambda p: gc.sum(p["x"] * c), params, tol=1e-10)
    assert report.passed, report


def test_composed_graph_matches_finite_differences():
    rng = np.random.default_rng(3)
    params = {"w": rng.normal(size=(4, 6)), "v": rng.normal(size=(6, 3)), "x": rng.normal(size=(5, 4))}
    targets = np.array([0, 2, 1, 1, 0])

    def f(p):
        h = gc.tanh(p["x"] @ p["w"])
        return gc.mean(gc.cross_entropy_with_logits(h @ p["v"], targets))

    assert grad_check(f, params, tol=1e-4).passed


def test_corrupted_backward_is_caught():
    def bad_square(x):
        return gc.custom_op(x.value ** 2, (x,), lambda g: (g * x.value,), "bad_square")  # missing factor 2

    params = {"x": np.array([0.5, -1.5, 2.0])}
    report = grad_check(lambda p: gc.sum(bad_square(p["x"])), params)
    assert not report.passed
    assert "FAIL" in str(report)


OPS = {
    "tanh": lambda p: gc.tanh(p["x"]),
    "sigmoid": lambda p: gc.sigmoid(p["x"]),
    "log_sigmoid": lambda p: gc.log_sigmoid(p["x"]),
    "exp": lambda p: gc.exp(p["x"] * 0.5),
    "log": lambda p: gc.log(gc.exp(p["x"]) + 1.0),
    "relu": lambda p: gc.relu(p["x"]),
    "softmax": lambda p: gc.softmax(p["x"]),
    "mul": lambda p: p["x"] * p["y"],
    "add_broadcast": lambda p: p["x"] + p["b"],
    "mul_broadcast": lambda p: p["x"] * p["b"],
    "sub": lambda p: p["x"] - p["y"],
    "concat": lambda p: gc.concat([p["x"], p["y"] * 2.0], axis=-1),
    "mean_axis": lambda p: gc.mean(p["x"], axis=0),
    "sum_keepdims": lambda p: gc.sum(p["x"], axis=-1, keepdims=True) * p["x"],
    "reshape_transpose": lambda p: gc.transpose(gc.reshape(p["x"], (p["x"].shape[1], -1)), (1, 0)),
    "index": lambda p: p["x"][:, 0],
    "layer_norm": lambda p: gc.layer_norm(p["x"], p["g"], p["b"]),
    "batched_matmul": lambda p: gc.matmul(gc.reshape(p["x"], (1,) + p["x"].shape),
                                          gc.reshape(gc.transpose(p["y"], (1, 0)), (1, p["y"].shape[1], -1))),
    "cross_entropy": lambda p: gc.cross_entropy_with_logits(p["x"], np.zeros(p["x"].shape[0], dtype=int)),
    "embedding": lambda p: gc.embedding_lookup(p["x"], np.array([0, 2, 0, 1]) % p["x"].shape[0]),
}


@pytest.mark.parametrize("op", sorted(OPS))
@given(rows=st.integers(1, 4), cols=st.integers(2, 5), seed=st.integers(0, 10_000))
@settings(max_examples=8, deadline=None)
def test_every_op_matches_finite_differences(op, rows, cols, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(rows, cols))
    if op == "relu":
        x = np.where(np.abs(x) < 1e-3, 0.5, x)  # stay away from the kink
    params = {"x": x, "y": rng.normal(size=(rows, cols)), "b": rng.normal(size=cols),
              "g": rng.normal(size=cols)}
    w = rng.normal(size=OPS[op]({k: Tensor(v) for k, v in params.items()}).shape)
    report = grad_check(lambda p: gc.sum(OPS[op](p) * w), params, step=1e-5, tol=1e-4)
    assert report.passed, f"{op}: {report}"


def test_dropout_train_and_eval():
    x = leaf(np.ones((200, 50)), "x")
    assert gc.dropout(x, 0.1, None, training=False) is x
    y = gc.dropout(x, 0.1, RngStream(0), training=True)
    kept = y.value != 0
    assert 0.85 < kept.mean() < 0.95
    np.testing.assert_allclose(y.value[kept], 1 / 0.9)
    g = backward(gc.sum(y))["x"]
    np.testing.assert_array_equal(g, y.value)
    with pytest.raises(ValueError):
        gc.dropout(x, 1.0, RngStream(0), training=True)


def test_dropout_frozen_rng_is_differentiable():
    rng = np.random.default_rng(5)
    params = {"x": rng.normal(size=(3, 4))}
    report = grad_check(lambda p: gc.sum(gc.tanh(gc.dropout(p["x"], 0.3, RngStream(9), True))), params)
    assert report.passed, report


def test_embedding_rejects_out_of_range():
    with pytest.raises(ValueError, match="ids"):
        gc.embedding_lookup(Tensor(np.zeros((4, 2))), np.array([1, 4]))


def test_repeated_runs_bit_identical():
    def run():
        rng = RngStream(123)
        x = leaf(rng.normal(1.0, (6, 5)), "x")
        w = leaf(rng.normal(1.0, (5, 3)), "w")
        h = gc.dropout(gc.tanh(x @ w), 0.2, rng.child(1), training=True)
        loss = gc.mean(gc.cross_entropy_with_logits(h, np.array([0, 1, 2, 0, 1, 2])))
        return loss.value.copy(), backward(loss)

    (l1, g1), (l2, g2) = run(), run()
    assert l1.tobytes() == l2.tobytes()
    for k in g1:
        assert g1[k].tobytes() == g2[k].tobytes()


def test_chain_of_1000_adds_is_linear():
    x = leaf([1.0], "x")
    with gc.count_ops() as counts:
        y = x
        for _ in range(1000):
            y = y + 1.0
        grads = backward(gc.sum(y))
    assert counts["forward"] == 1001
    assert counts["backward"] == 1001
    assert grads["x"][0] == 1.0


def test_shared_subexpression_accumulates():
    x = leaf([3.0], "x")
    y = x * x
    z = y + y  # y used twice
    assert backward(gc.sum(z))["x"][0] == 12.0


def test_no_grad_builds_no_graph():
    x = leaf([1.0, 2.0], "x")
    with gc.no_grad():
        y = gc.tanh(x) * 2.0
    assert not y.requires_grad and y._parents == ()


def test_rng_stream_reproducible_and_distinct():
    a = RngStream(5).random(4)
    b = RngStream(5).random(4)
    c = RngStream(5).child(1).random(4)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
