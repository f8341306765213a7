import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from samast import autodiff as ad
from samast.autodiff import Tensor, grad_check
from samast.errors import ContractError, DimensionError, LabelError
from samast.model import ModelConfig, forward_batch, init_params

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def fd_grad(f, x, step=1e-5):
    """Independent central-difference gradient of a scalar numpy function."""
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        up, down = x.copy(), x.copy()
        up[idx] += step
        down[idx] -= step
        g[idx] = (f(up) - f(down)) / (2 * step)
    return g


def check(fn, params, tol=1e-6):
    report = grad_check(fn, params, step=1e-5, tolerance=tol)
    assert report.passed, (report.worst_param, report.worst_index, report.max_rel_error)
    return report


# ---------------------------------------------------------------- matmul


def test_matmul_identity_and_zero():
    a = Tensor(np.eye(2))
    b = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
    np.testing.assert_array_equal(ad.matmul(a, b).data, b.data)
    np.testing.assert_array_equal(ad.matmul(Tensor([[1.0, 0.0]]), Tensor([[0.0], [5.0]])).data, [[0.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 2\)"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


def test_matmul_gradient(rng):
    params = {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(4, 2))}
    check(lambda p: ad.tsum(ad.matmul(p["a"], p["b"]) ** 2), params)


def test_matmul_gradient_matches_closed_form(rng):
    a, b, g = rng.normal(size=(3, 4)), rng.normal(size=(4, 2)), rng.normal(size=(3, 2))
    _, grads = ad.value_and_grad(lambda p: ad.tsum(ad.matmul(p["a"], p["b"]) * g), {"a": a, "b": b})
    np.testing.assert_allclose(grads["a"], g @ b.T, rtol=1e-12)
    np.testing.assert_allclose(grads["b"], a.T @ g, rtol=1e-12)


def test_batched_matmul_gradient(rng):
    params = {"a": rng.normal(size=(2, 3, 4)), "b": rng.normal(size=(4, 2)), "c": rng.normal(size=(2, 2, 3))}
    check(lambda p: ad.tsum(ad.matmul(ad.matmul(p["a"], p["b"]), p["c"]) ** 2), params)


# ---------------------------------------------------------------- softmax


def test_softmax_trivial_cases():
    np.testing.assert_array_equal(ad.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    out = ad.softmax(Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(out))
    assert abs(out[0] - 1.0) < 1e-12 and out[1] < 1e-12


def test_softmax_gradient(rng):
    w = rng.normal(size=5)
    check(lambda p: ad.tsum(ad.softmax(p["x"]) * w), {"x": rng.normal(size=5)})


@given(arrays(np.float64, (3, 6), elements=st.floats(-700, 700)))
@settings(max_examples=60, deadline=None)
def test_softmax_rows_are_distributions(x):
    out = ad.softmax(Tensor(x), axis=-1).data
    assert np.all((out >= 0) & (out <= 1))
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)


# ---------------------------------------------------------------- layer norm


def test_layer_norm_constant_row_gives_bias():
    bias = np.array([0.1, -0.2, 0.3])
    out = ad.layer_norm(Tensor(np.full((1, 3), 7.0)), Tensor(np.ones(3)), Tensor(bias), 1e-5).data
    np.testing.assert_allclose(out[0], bias, atol=1e-12)


def test_layer_norm_hand_computation():
    out = ad.layer_norm(Tensor([[1.0, 2.0, 3.0]]), Tensor(np.ones(3)), Tensor(np.zeros(3)), 1e-5).data[0]
    var = 2.0 / 3.0
    expected = np.array([-1.0, 0.0, 1.0]) / np.sqrt(var + 1e-5)
    np.testing.assert_allclose(out, expected, rtol=1e-14)
    # approximately the eps-free value
    np.testing.assert_allclose(out, [-np.sqrt(1.5), 0.0, np.sqrt(1.5)], atol=1e-4)


def test_layer_norm_gradient(rng):
    params = {"x": rng.normal(size=(4, 6)), "g": rng.normal(size=6), "b": rng.normal(size=6)}
    w = rng.normal(size=(4, 6))
    check(lambda p: ad.tsum(ad.layer_norm(p["x"], p["g"], p["b"], 1e-5) * w), params)


def test_layer_norm_rejects_wrong_gain():
    with pytest.raises(DimensionError):
        ad.layer_norm(Tensor(np.ones((2, 3))), Tensor(np.ones(4)), Tensor(np.zeros(3)))


# ---------------------------------------------------------------- gelu


def test_gelu_zero_and_odd_part():
    assert ad.gelu(Tensor([0.0])).data[0] == 0.0
    x = np.linspace(-6, 6, 49)
    diff = ad.gelu(Tensor(x)).data - ad.gelu(Tensor(-x)).data
    np.testing.assert_allclose(diff, x, atol=1e-14)


def test_gelu_gradient_on_grid():
    check(lambda p: ad.tsum(ad.gelu(p["x"])), {"x": np.linspace(-3, 3, 25)})


def test_gelu_monotone_on_positive_grid():
    y = ad.gelu(Tensor(np.linspace(-0.7, 6, 200))).data
    assert np.all(np.diff(y) > 0)


# ---------------------------------------------------------------- cross entropy


def test_cross_entropy_uniform_and_confident():
    assert ad.cross_entropy(Tensor(np.zeros((3, 4))), [0, 1, 3]).item() == pytest.approx(np.log(4), abs=1e-15)
    assert ad.cross_entropy(Tensor([[30.0, -30.0, -30.0, -30.0]]), [0]).item() < 1e-20


def test_cross_entropy_gradient_identity(rng):
    logits = rng.normal(size=(5, 4))
    labels = np.array([0, 3, 2, 2, 1])
    _, grads = ad.value_and_grad(lambda p: ad.cross_entropy(p["z"], labels), {"z": logits})
    p = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    onehot = np.eye(4)[labels]
    np.testing.assert_allclose(grads["z"], (p - onehot) / 5, atol=1e-10)


def test_cross_entropy_label_error_names_index():
    with pytest.raises(LabelError, match="index 1"):
        ad.cross_entropy(Tensor(np.zeros((2, 4))), [0, 4])


def test_cross_entropy_gradient_fd(rng):
    check(lambda p: ad.cross_entropy(p["z"], [1, 0, 3]), {"z": rng.normal(size=(3, 4))})


# ---------------------------------------------------------------- elementwise and structural ops


@pytest.mark.parametrize(
    "name,fn,domain",
    [
        ("add", lambda p: ad.tsum((p["a"] + p["b"]) ** 2), None),
        ("sub", lambda p: ad.tsum((p["a"] - p["b"]) ** 3), None),
        ("mul", lambda p: ad.tsum(p["a"] * p["b"]), None),
        ("div", lambda p: ad.tsum(p["a"] / (p["b"] * p["b"] + 1.0)), None),
        ("neg", lambda p: ad.tsum(-p["a"] * p["b"]), None),
        ("exp", lambda p: ad.tsum(ad.exp(p["a"]) * p["b"]), None),
        ("log", lambda p: ad.tsum(ad.log(p["a"] * p["a"] + 1.0) * p["b"]), None),
        ("power", lambda p: ad.tsum(ad.power(p["a"] * p["a"] + 1.0, 1.5)), None),
        ("mean", lambda p: ad.mean(p["a"] * p["b"], axis=0).sum(), None),
        ("reshape", lambda p: ad.tsum(p["a"].reshape(2, 6) @ p["b"].reshape(6, 2)), None),
        ("transpose", lambda p: ad.tsum(ad.matmul(p["a"], p["b"].T) ** 2), None),
        ("getitem", lambda p: ad.tsum(p["a"][1:, ::2] * p["b"][:2, 1:3]), None),
        ("fancy", lambda p: ad.tsum(p["a"][np.array([0, 0, 2])] ** 2), None),
        ("broadcast", lambda p: ad.tsum(ad.broadcast_to(p["a"][:1], (5, 4)) * 2.0), None),
        ("concat", lambda p: ad.tsum(ad.concat([p["a"], p["b"]], axis=1) ** 2), None),
        ("bias_broadcast", lambda p: ad.tsum((p["a"] + p["b"][0]) ** 2), None),
    ],
)
def test_elementwise_and_structural_gradients(name, fn, domain, rng):
    params = {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(3, 4))}
    check(fn, params)


def test_minimum_gradient_away_from_ties(rng):
    a = rng.normal(size=6)
    b = a + np.where(rng.random(6) < 0.5, 0.5, -0.5)
    check(lambda p: ad.tsum(ad.minimum(p["a"], p["b"]) ** 2), {"a": a, "b": b})


def test_dropout_identity_without_rng_and_scaled_with_rng():
    x = Tensor(np.ones((100, 100)))
    assert ad.dropout(x, 0.5, None) is x
    out = ad.dropout(x, 0.25, np.random.default_rng(0)).data
    assert set(np.unique(out)) <= {0.0, 1.0 / 0.75}
    assert abs(out.mean() - 1.0) < 0.02


# ---------------------------------------------------------------- backward contract


def test_backward_sum_gives_ones(rng):
    w = ad.parameter(rng.normal(size=(2, 3, 4)))
    ad.backward(ad.tsum(w))
    np.testing.assert_array_equal(w.grad, np.ones((2, 3, 4)))


def test_backward_quadratic():
    w = ad.parameter([1.0, 2.0])
    grads = ad.backward(ad.tsum(w * w))
    np.testing.assert_array_equal(w.grad, [2.0, 4.0])
    np.testing.assert_array_equal(grads[w.node_id], [2.0, 4.0])


def test_backward_rejects_non_scalar():
    with pytest.raises(ContractError):
        ad.backward(ad.parameter([1.0, 2.0]) * 2.0)


def test_unreachable_parameter_gets_zero_gradient():
    used, unused = ad.parameter([1.0, 2.0]), ad.parameter(np.ones((2, 2)))
    ad.backward(ad.tsum(used), wrt=[used, unused])
    np.testing.assert_array_equal(unused.grad, np.zeros((2, 2)))


def test_backward_is_linear_over_losses(rng):
    x = rng.normal(size=(3, 4))
    f1 = lambda p: ad.tsum(ad.gelu(p["x"]))  # noqa: E731
    f2 = lambda p: ad.tsum(ad.softmax(p["x"]) * x)  # noqa: E731
    _, g1 = ad.value_and_grad(f1, {"x": x})
    _, g2 = ad.value_and_grad(f2, {"x": x})
    _, g12 = ad.value_and_grad(lambda p: f1(p) + f2(p), {"x": x})
    np.testing.assert_allclose(g12["x"], g1["x"] + g2["x"], rtol=1e-13, atol=1e-15)


def test_graph_replay_is_bit_identical(rng):
    cfg = ModelConfig(patch_size=2, embed_dim=8, depth=1, heads=2, input_bins=4, input_frames=4, dropout=0.1)
    params = init_params(cfg, 3)
    x = rng.normal(size=(2, 4, 4))

    def loss(p):
        return ad.cross_entropy(forward_batch(x, p, cfg, np.random.default_rng(7)), [1, 2])

    a = ad.value_and_grad(loss, params)
    b = ad.value_and_grad(loss, params)
    assert a[0] == b[0]
    for k in params:
        assert np.array_equal(a[1][k], b[1][k])


# ---------------------------------------------------------------- grad_check harness


def test_grad_check_square():
    report = grad_check(lambda p: ad.tsum(p["w"] * p["w"]), {"w": np.array([1.0])}, step=1e-5)
    assert abs(report.analytic - 2.0) < 1e-9 and abs(report.numeric - 2.0) < 1e-9
    assert report.passed


def test_grad_check_flags_corrupted_rule():
    def bad_square(x):
        x = ad.as_tensor(x)
        return ad.custom_op(x.data**2, (x,), lambda g: (g * 3.0 * x.data,), "bad_square")

    report = grad_check(lambda p: ad.tsum(bad_square(p["w"])), {"w": np.array([1.0, -2.0])})
    assert not report.passed
    assert report.worst_param == "w"


def test_grad_check_rejects_nonpositive_step():
    with pytest.raises(ContractError):
        grad_check(lambda p: ad.tsum(p["w"]), {"w": np.ones(1)}, step=0.0)


def test_grad_check_independent_oracle(rng):
    """The harness agrees with a separately written numpy finite-difference loop."""
    a = rng.normal(size=(3, 3))

    def np_loss(x):
        z = x @ a
        e = np.exp(z - z.max(axis=1, keepdims=True))
        return float(np.sum(e / e.sum(axis=1, keepdims=True) * a))

    x0 = rng.normal(size=(3, 3))
    _, grads = ad.value_and_grad(lambda p: ad.tsum(ad.softmax(ad.matmul(p["x"], a), axis=1) * a), {"x": x0})
    np.testing.assert_allclose(grads["x"], fd_grad(np_loss, x0), rtol=1e-6, atol=1e-9)


def _attention_loss(cfg, x, w):
    from samast.model import encode_tokens

    def loss(p):
        return ad.tsum(encode_tokens(x, p, cfg) * w)

    return loss


def test_attention_block_grad_check(rng):
    cfg = ModelConfig(patch_size=2, embed_dim=8, depth=1, heads=2, input_bins=4, input_frames=4, dropout=0.0)
    params = init_params(cfg, 0)
    params = {k: v + 0.1 * rng.normal(size=v.shape) for k, v in params.items()}
    x = rng.normal(size=(1, 4, 4))
    w = rng.normal(size=(1, 5, 8))
    report = grad_check(_attention_loss(cfg, x, w), params, tolerance=1e-4)
    assert report.passed, (report.worst_param, report.max_rel_error)


@given(arrays(np.float64, (2, 3), elements=finite), arrays(np.float64, (3,), elements=finite))
@settings(max_examples=25, deadline=None)
def test_forward_values_finite(x, b):
    out = ad.gelu(ad.layer_norm(Tensor(x), Tensor(np.ones(3)), Tensor(b), 1e-5))
    assert np.all(np.isfinite(ad.softmax(out).data))
