import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vct import autodiff as ad
from vct.autodiff import NonFiniteError, ShapeError, TapeConsumedError, Tensor, backward, grad_check
from vct.encoder import EncoderConfig, encode, init_encoder, pool
from vct.m2ae import cep_loss
from vct.tokenizer import TokenMeta, TokenSequence


def test_matmul_identity():
    a = np.arange(12.0).reshape(3, 4)
    assert np.array_equal(ad.matmul(Tensor(np.eye(3)), Tensor(a)).data, a)


def test_softmax_of_zeros_is_uniform():
    assert np.allclose(ad.softmax(Tensor(np.zeros(3))).data, 1 / 3, atol=0, rtol=1e-15)


def test_layer_norm_of_constant_is_zero():
    out = ad.layer_norm(Tensor(np.full((2, 5), 3.7)))
    assert np.array_equal(out.data, np.zeros((2, 5)))


def test_softmax_rows_and_layer_norm_means():
    rng = np.random.default_rng(0)
    x = rng.normal(0, 5, (20, 13))
    assert np.all(np.abs(ad.softmax(Tensor(x)).data.sum(axis=-1) - 1) < 1e-12)
    assert np.all(np.abs(ad.layer_norm(Tensor(x)).data.mean(axis=-1)) < 1e-10)


def test_sum_gradient_is_ones():
    x = Tensor(np.random.default_rng(1).normal(size=(3, 2, 4)), requires_grad=True)
    backward(ad.sum(x))
    assert np.array_equal(x.grad, np.ones((3, 2, 4)))


def test_mse_of_self_has_zero_gradient():
    x = Tensor(np.random.default_rng(2).normal(size=(5, 3)), requires_grad=True)
    backward(ad.mse(x, x))
    assert np.array_equal(x.grad, np.zeros((5, 3)))


def test_backward_errors():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        backward(ad.mul(x, 2.0))
    loss = ad.sum(ad.square(x))
    backward(loss)
    with pytest.raises(TapeConsumedError):
        backward(loss)


def test_shape_error_names_op_and_shapes():
    with pytest.raises(ShapeError) as err:
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    msg = str(err.value)
    assert "matmul" in msg and "(2, 3)" in msg


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_debug_mode_rejects_non_finite():
    ad.set_debug(True)
    try:
        with pytest.raises(NonFiniteError):
            ad.log(Tensor(np.array([0.0, 1.0])))
    finally:
        ad.set_debug(False)


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(2), requires_grad=True)
    with ad.no_grad():
        y = ad.mul(x, 3.0)
    assert not y.requires_grad
    assert ad.mul(x, 3.0).requires_grad


def test_grad_check_square():
    rep = grad_check(lambda x: ad.sum(ad.square(x)), Tensor(np.array(3.0)))
    assert rep.analytic == pytest.approx(6.0, abs=0)
    assert abs(rep.numeric - 6.0) < 1e-8
    assert rep.passed


def test_grad_check_step_range():
    with pytest.raises(ValueError):
        grad_check(lambda x: ad.sum(x), Tensor(np.ones(2)), h=1e-3)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_grad_check_non_finite_at_perturbed_point():
    with pytest.raises(NonFiniteError):
        grad_check(lambda x: ad.sum(ad.log(x)), Tensor(np.array([1e-6, 1.0])), h=1e-5)


def test_grad_check_info_nce_three_pairs():
    rng = np.random.default_rng(3)
    p = Tensor(rng.normal(size=(3, 4)))
    rep = grad_check(lambda e: cep_loss(e, p, 0.5), Tensor(rng.normal(size=(3, 4))))
    assert rep.max_rel_err < 1e-4


def _two_layer_loss(params, cfg, x):
    seq = TokenSequence(x, [TokenMeta("ecg", "special", 0)] + [TokenMeta("ecg", "patch", t) for t in range(3)])
    return ad.sum(ad.square(pool(encode(seq, params, cfg), params)))


def test_two_layer_fusion_gradients_match_finite_differences():
    cfg = EncoderConfig(patch_len=2, dim=4, depth=2, heads=2)
    rng = np.random.default_rng(4)
    params = init_encoder(cfg, rng)
    x = Tensor(rng.normal(size=(1, 4, 4)), requires_grad=True)
    enc = {n: t for n, t in params.items() if not n.startswith("tokenizer.")}
    reports = ad.grad_check_params(lambda: _two_layer_loss(params, cfg, x), {**enc, "x": x})
    worst = max(r.max_rel_err for r in reports.values())
    assert worst < 1e-4, worst


def test_forward_backward_bitwise_deterministic():
    def run():
        cfg = EncoderConfig(patch_len=2, dim=4, depth=2, heads=2)
        rng = np.random.default_rng(5)
        params = init_encoder(cfg, rng)
        x = Tensor(rng.normal(size=(2, 4, 4)))
        loss = _two_layer_loss(params, cfg, x)
        backward(loss)
        return loss.data.copy(), {n: t.grad.copy() for n, t in params.items() if t.grad is not None}

    (l1, g1), (l2, g2) = run(), run()
    assert l1.tobytes() == l2.tobytes()
    assert g1.keys() == g2.keys()
    assert all(g1[n].tobytes() == g2[n].tobytes() for n in g1)


# -------------------------------------------------------------------- every op, many seeds

_UNARY = {
    "exp": lambda x: ad.exp(x),
    "log": lambda x: ad.log(ad.add(ad.square(x), 0.5)),
    "sqrt": lambda x: ad.sqrt(ad.add(ad.square(x), 0.5)),
    "square": ad.square,
    "tanh": ad.tanh,
    "gelu": ad.gelu,
    "scale": lambda x: ad.scale(x, -2.5),
    "neg": lambda x: -x,
    "transpose": lambda x: ad.transpose(x),
    "reshape": lambda x: ad.reshape(x, (-1,)),
    "getitem": lambda x: x[1:, ::2],
    "take": lambda x: ad.take(x, np.array([2, 0, 2]), axis=0),
    "sum_axis": lambda x: ad.sum(x, axis=0),
    "mean": lambda x: ad.mean(x, axis=1, keepdims=True),
    "logsumexp": lambda x: ad.logsumexp(x, axis=-1),
    "softmax": lambda x: ad.softmax(x, axis=-1),
    "log_softmax": lambda x: ad.log_softmax(x, axis=0),
    "layer_norm": lambda x: ad.layer_norm(x),
    "l2_normalize": lambda x: ad.l2_normalize(x),
    "concat": lambda x: ad.concat([x, ad.square(x)], axis=1),
}

_BINARY = {
    "add": ad.add,
    "sub": ad.sub,
    "mul": ad.mul,
    "div": lambda a, b: ad.div(a, ad.add(ad.square(b), 1.0)),
    "matmul": lambda a, b: ad.matmul(a, ad.transpose(b)),
    "mse": ad.mse,
    "linear": lambda a, b: ad.linear(a, ad.transpose(b), b[0, :3]),
    "broadcast_add": lambda a, b: ad.add(a, b[0]),
}


def _readout(out, rng):
    # random projection so no output coordinate is trivially symmetric
    return ad.sum(ad.mul(out, Tensor(rng.normal(size=out.shape))))


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_every_unary_op_passes_grad_check(seed):
    rng = np.random.default_rng(seed)
    point = Tensor(rng.normal(size=(3, 4)))
    for name, op in _UNARY.items():
        rep = grad_check(lambda x, op=op: _readout(op(x), np.random.default_rng(seed + 1)), point)
        assert rep.max_rel_err < 1e-4, (name, rep.max_rel_err)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_every_binary_op_passes_grad_check(seed):
    rng = np.random.default_rng(seed)
    a0, b0 = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    for name, op in _BINARY.items():
        b = Tensor(b0)
        rep_a = grad_check(lambda a, op=op: _readout(op(a, b), np.random.default_rng(seed + 2)), Tensor(a0))
        a = Tensor(a0)
        rep_b = grad_check(lambda b, op=op: _readout(op(a, b), np.random.default_rng(seed + 2)), Tensor(b0))
        assert rep_a.max_rel_err < 1e-4, (name, "a", rep_a.max_rel_err)
        assert rep_b.max_rel_err < 1e-4, (name, "b", rep_b.max_rel_err)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_gather_rows_and_affine_layer_norm_grad_check(seed):
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, 5, size=(2, 3))
    r1 = grad_check(lambda x: _readout(ad.gather_rows(x, idx), np.random.default_rng(seed)), Tensor(rng.normal(size=(2, 5, 3))))
    assert r1.max_rel_err < 1e-4
    gain, bias = Tensor(rng.normal(size=4)), Tensor(rng.normal(size=4))
    r2 = grad_check(
        lambda x: _readout(ad.layer_norm(x, gain, bias), np.random.default_rng(seed)), Tensor(rng.normal(size=(3, 4)))
    )
    assert r2.max_rel_err < 1e-4


def test_gradient_accumulates_over_reuse():
    x = Tensor(np.array([2.0]), requires_grad=True)
    backward(ad.sum(ad.add(ad.mul(x, x), x)))
    assert x.grad[0] == pytest.approx(2 * 2.0 + 1, abs=1e-15)
    assert math.isclose(float(ad.relative_error(np.array(1.0), np.array(1.0))), 0.0)
