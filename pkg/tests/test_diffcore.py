import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from demf.diffcore import (
    AdamW,
    CheckpointMismatch,
    Linear,
    MissingGrad,
    Module,
    NonScalarLoss,
    Parameter,
    ShapeMismatch,
    Tensor,
    add,
    conv2d,
    default_dtype,
    dropout,
    grad_check,
    layer_norm,
    load_checkpoint,
    log_softmax,
    make_rng,
    matmul,
    mul,
    read_checkpoint,
    relu,
    save_checkpoint,
    softmax,
    tsum,
)


def leaf(x):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


# -- forward examples ---------------------------------------------------------


def test_softmax_uniform():
    out = softmax(Tensor(np.zeros(3))).numpy()
    np.testing.assert_array_equal(out, np.full(3, 1 / 3))


def test_relu_example():
    np.testing.assert_array_equal(relu(Tensor([-1.0, 2.0])).numpy(), [0.0, 2.0])


def test_matmul_identity(rng):
    a = rng.normal(size=(3, 5))
    np.testing.assert_array_equal(matmul(Tensor(np.eye(3)), Tensor(a)).numpy(), a)


@given(st.integers(0, 2**31), st.integers(1, 6), st.integers(1, 6))
def test_softmax_rows_sum_to_one(seed, rows, cols):
    x = np.random.default_rng(seed).normal(scale=10, size=(rows, cols))
    s = softmax(Tensor(x), axis=-1).numpy()
    assert np.all(np.abs(s.sum(axis=-1) - 1.0) <= 1e-12)
    np.testing.assert_allclose(np.exp(log_softmax(Tensor(x)).numpy()), s, rtol=1e-12)


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeMismatch) as err:
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    assert err.value.shapes == ((2, 3), (2, 3))
    with pytest.raises(ShapeMismatch):
        add(Tensor(np.ones(3)), Tensor(np.ones(4)))


def test_dropout_identity_in_eval_and_scaling_in_training():
    x = Tensor(np.arange(1.0, 1001.0))
    np.testing.assert_array_equal(dropout(x, 0.4, False, make_rng(0)).numpy(), x.numpy())
    y = dropout(x, 0.4, True, make_rng(0)).numpy()
    kept = y != 0
    np.testing.assert_allclose(y[kept], x.numpy()[kept] / 0.6, rtol=1e-15)
    assert 0.5 < kept.mean() < 0.7
    with pytest.raises(ValueError):
        dropout(x, 1.0, True, make_rng(0))


def test_dropout_eval_gradient_equals_no_dropout(rng):
    w = rng.normal(size=6)
    a = leaf(rng.normal(size=6))
    tsum(mul(dropout(a, 0.4, False, make_rng(1)), Tensor(w))).backward()
    b = leaf(a.numpy())
    tsum(mul(b, Tensor(w))).backward()
    np.testing.assert_array_equal(a.grad, b.grad)


# -- backward -----------------------------------------------------------------


def test_backward_requires_scalar():
    with pytest.raises(NonScalarLoss):
        mul(leaf([1.0, 2.0]), 2.0).backward()


def test_using_a_tensor_twice_doubles_its_gradient(rng):
    x0 = rng.normal(size=(3, 4))
    w = Tensor(rng.normal(size=(4, 2)))
    once = leaf(x0)
    tsum(relu(matmul(once, w))).backward()
    twice = leaf(x0)
    (tsum(relu(matmul(twice, w))) + tsum(relu(matmul(twice, w)))).backward()
    np.testing.assert_array_equal(twice.grad, 2.0 * once.grad)


def test_gradients_accumulate_across_backward_calls():
    x = leaf([2.0])
    tsum(mul(x, x)).backward()
    tsum(mul(x, x)).backward()
    np.testing.assert_array_equal(x.grad, [8.0])
    x.zero_grad()
    assert x.grad is None or not np.any(x.grad)


def test_diamond_graph_visits_each_node_once():
    x = leaf([3.0])
    y = mul(x, 2.0)
    z = add(y, y)
    tsum(mul(z, z)).backward()  # (4x)^2 -> 32x
    np.testing.assert_array_equal(x.grad, [96.0])


def test_softmax_gradient_is_orthogonal_to_ones(rng):
    x = leaf(rng.normal(size=(3, 5)))
    c = Tensor(rng.normal(size=(3, 5)))
    tsum(mul(softmax(x, axis=-1), c)).backward()
    np.testing.assert_allclose(x.grad.sum(axis=-1), 0.0, atol=1e-15)
    rep = grad_check(lambda *_: tsum(mul(softmax(x, axis=-1), c)), [x], tol=1e-7)
    assert rep.passed


# -- grad_check -----------------------------------------------------------------


def test_grad_check_square():
    x = leaf([3.0])
    rep = grad_check(lambda *_: tsum(mul(x, x)), [x], h=1e-5)
    assert rep.max_rel_error < 1e-9


def test_grad_check_softmax_dot(rng):
    x = leaf(rng.normal(size=8))
    c = Tensor(rng.normal(size=8))
    rep = grad_check(lambda *_: tsum(mul(softmax(x), c)), [x], h=1e-5, tol=1e-7)
    assert rep.passed and rep.max_rel_error < 1e-7


def test_grad_check_reports_wrong_gradient():
    from demf.diffcore.tensor import _result

    x = leaf([1.0, 2.0])

    def broken(a):
        def backward(g):
            a.grad = (a.grad if a.grad is not None else 0) + 3.0 * g * a.data  # should be 2

        return _result(a.data**2, (a,), backward)

    rep = grad_check(lambda *_: tsum(broken(x)), [x], tol=1e-6)
    assert not rep.passed
    assert len(rep.failures) == 2
    assert rep.max_rel_error == pytest.approx(1 / 3, rel=1e-6)


def test_grad_check_rejects_large_step():
    x = leaf([1.0])
    with pytest.raises(ValueError):
        grad_check(lambda *_: tsum(mul(x, x)), [x], h=1e-2)


@pytest.mark.parametrize("seed", range(20))
def test_primitive_gradients(seed):
    r = np.random.default_rng(seed)
    x = leaf(r.normal(size=(2, 4)))
    w = leaf(r.normal(size=(4, 3)))
    g, b = leaf(r.normal(size=4)), leaf(r.normal(size=4))
    c = Tensor(r.normal(size=(2, 3)))
    cases = [
        (lambda *_: tsum(mul(matmul(x, w), c)), [x, w]),
        (lambda *_: tsum(mul(layer_norm(x, g, b), Tensor(np.arange(8.0).reshape(2, 4)))), [x, g, b]),
        (lambda *_: tsum(mul(log_softmax(x), Tensor(np.linspace(-1, 1, 8).reshape(2, 4)))), [x]),
        (lambda *_: tsum(mul(add(x, b), add(x, g))), [x, g, b]),
    ]
    for f, inputs in cases:
        rep = grad_check(f, inputs, h=1e-5, tol=1e-6)
        assert rep.passed, rep


def test_conv2d_matches_direct_sum(rng):
    x = rng.normal(size=(2, 5, 4))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    out = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2, padding=1).numpy()
    pad = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    assert out.shape == (3, 3, 2)
    for o in range(3):
        for i in range(3):
            for j in range(2):
                ref = b[o] + np.sum(w[o] * pad[:, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3])
                assert out[o, i, j] == pytest.approx(ref, abs=1e-12)


# -- AdamW ----------------------------------------------------------------------


def _quadratic_step(opt, w, target=0.0):
    opt.zero_grad()
    d = add(w, -target)
    tsum(mul(d, d)).backward()
    opt.step()


def test_adamw_zero_grad_leaves_weight():
    w = Parameter(np.array([1.0]))
    opt = AdamW([w], lr=0.1, weight_decay=0.0)
    w.grad = np.zeros(1)
    opt.step()
    assert w.data[0] == 1.0


def test_adamw_single_step_descends():
    w = Parameter(np.array([1.0]))
    _quadratic_step(AdamW([w], lr=0.1), w)
    assert w.data[0] < 1.0


def test_adamw_converges_on_quadratic():
    w = Parameter(np.array([0.0]))
    opt = AdamW([w], lr=0.1, weight_decay=0.0)
    for _ in range(200):
        _quadratic_step(opt, w, target=3.0)
    assert abs(w.data[0] - 3.0) < 1e-2


def test_adamw_missing_grad_names_parameter():
    w = Parameter(np.array([1.0]))
    opt = AdamW([("layers.0.w", w)])
    with pytest.raises(MissingGrad) as err:
        opt.step()
    assert err.value.name == "layers.0.w"


def test_adamw_lr_zero_is_bit_identical(rng):
    w = Parameter(rng.normal(size=5))
    before = w.data.copy()
    opt = AdamW([w], lr=0.0, weight_decay=0.01)
    for _ in range(3):
        _quadratic_step(opt, w)
    assert np.array_equal(before, w.data)


def test_adamw_first_step_matches_closed_form():
    w = Parameter(np.array([2.0]))
    opt = AdamW([w], lr=0.01, weight_decay=0.1)
    _quadratic_step(opt, w)
    # bias-corrected first step moves by lr * g / (|g| + eps), after decay
    expected = 2.0 * (1 - 0.01 * 0.1) - 0.01 * 4.0 / (4.0 + 1e-8)
    assert w.data[0] == pytest.approx(expected, abs=1e-14)


def test_adamw_lr_multiplier_longest_prefix():
    a, b = Parameter(np.ones(1)), Parameter(np.ones(1))
    opt = AdamW([("img.w", a), ("img.head.w", b)], lr_multipliers={"img": 0.1, "img.head": 2.0})
    assert opt.multipliers == {"img.w": 0.1, "img.head.w": 2.0}


# -- checkpoint, rng, precision -------------------------------------------------


class Tiny(Module):
    def __init__(self, rng, width=3):
        self.fc = Linear(2, width, rng)
        self.gain = Parameter(np.ones(width))


def test_checkpoint_round_trip(tmp_path):
    src = Tiny(make_rng(0))
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, src.named_parameters())
    assert path.read_bytes()[:4] == b"DEMF"
    dst = Tiny(make_rng(1))
    load_checkpoint(path, dst)
    for (n1, p1), (n2, p2) in zip(src.named_parameters(), dst.named_parameters()):
        assert n1 == n2 and np.array_equal(p1.data, p2.data)
    assert list(read_checkpoint(path)) == [n for n, _ in src.named_parameters()]


def test_checkpoint_rejects_mismatch(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, Tiny(make_rng(0)).named_parameters())
    with pytest.raises(CheckpointMismatch):
        load_checkpoint(path, Tiny(make_rng(0), width=4))
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(CheckpointMismatch):
        read_checkpoint(bad)
    bad.write_bytes(b"NOPE" + path.read_bytes()[4:])
    with pytest.raises(CheckpointMismatch):
        read_checkpoint(bad)


def test_named_rng_streams_are_reproducible_and_independent():
    a = make_rng(7, "dropout").random(4)
    assert np.array_equal(a, make_rng(7, "dropout").random(4))
    assert not np.array_equal(a, make_rng(7, "init").random(4))
    assert not np.array_equal(a, make_rng(8, "dropout").random(4))


def test_float32_mode(rng):
    with default_dtype(np.float32):
        x = Tensor(rng.normal(size=(2, 3)).tolist(), requires_grad=True)
        w = Parameter(rng.normal(size=(3, 2)).tolist())
        loss = tsum(relu(matmul(x, w)))
        loss.backward()
        assert loss.dtype == np.float32 and w.data.dtype == np.float32
    assert Tensor([1.0]).dtype == np.float64


@settings(max_examples=25)
@given(st.integers(0, 2**31))
def test_layer_norm_output_is_normalized(seed):
    x = np.random.default_rng(seed).normal(scale=5, size=(3, 8))
    y = layer_norm(Tensor(x), Tensor(np.ones(8)), Tensor(np.zeros(8))).numpy()
    np.testing.assert_allclose(y.mean(axis=-1), 0.0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=-1), 1.0, rtol=1e-3)
