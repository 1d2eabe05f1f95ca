import os

import numpy as np
import pytest

from fbm_lab import autodiff as ad
from fbm_lab.autodiff import ContractViolation
from helpers import REL_TOL, gradcheck, leaf

N_INSTANCES = 20


def _project(rng, y):
    # random linear functional so every output entry matters
    w = rng.normal(size=y.shape)
    return ad.sum_(y * w)


UNARY = {
    "square": ad.square,
    "tanh": ad.tanh,
    "sigmoid": ad.sigmoid,
    "relu": ad.relu,
    "neg": lambda x: -x,
    "transpose": ad.transpose,
    "reshape": lambda x: ad.reshape(x, (-1,)),
    "sum_axis": lambda x: ad.sum_(x, axis=0),
    "sum_keepdims": lambda x: ad.sum_(x, axis=1, keepdims=True),
    "mean_all": lambda x: ad.mean(x),
    "mean_axis": lambda x: ad.mean(x, axis=1),
    "slice_basic": lambda x: x[1:, :2],
    "slice_fancy": lambda x: x[np.array([0, 2, 0, 1])],
    "l2_normalize": lambda x: ad.l2_normalize(x, 3.0),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_op_gradients(name):
    rng = np.random.default_rng(1)
    for _ in range(N_INSTANCES):
        x = leaf(rng, 3, 4, low=1e-3)
        w = rng.normal(size=UNARY[name](x).shape)
        err = gradcheck(lambda: ad.sum_(UNARY[name](x) * w), [x])
        assert err < REL_TOL, name


BINARY = {
    "add": ((3, 4), (4,), ad.add),
    "sub": ((3, 1), (3, 4), ad.sub),
    "mul": ((3, 4), (1, 4), ad.mul),
    "matmul": ((3, 5), (5, 2), ad.matmul),
    "linear": ((3, 5), (5, 2), ad.linear),
    "concat": ((3, 2), (3, 4), lambda a, b: ad.concat([a, b], axis=-1)),
    "stack": ((3, 4), (3, 4), lambda a, b: ad.stack([a, b], axis=1)),
}


@pytest.mark.parametrize("name", sorted(BINARY))
def test_binary_op_gradients(name):
    rng = np.random.default_rng(2)
    sa, sb, fn = BINARY[name]
    for _ in range(N_INSTANCES):
        a, b = leaf(rng, *sa), leaf(rng, *sb)
        w = rng.normal(size=fn(a, b).shape)
        assert gradcheck(lambda: ad.sum_(fn(a, b) * w), [a, b]) < REL_TOL


def test_linear_with_bias_and_norm_gradients():
    rng = np.random.default_rng(3)
    for _ in range(N_INSTANCES):
        x, W, b = leaf(rng, 4, 5), leaf(rng, 5, 3), leaf(rng, 3)
        g, beta = leaf(rng, 3), leaf(rng, 3)
        w = rng.normal(size=(4, 3))
        assert gradcheck(lambda: ad.sum_(ad.linear(x, W, b) * w), [x, W, b]) < REL_TOL
        assert gradcheck(lambda: ad.sum_(ad.rms_norm(ad.linear(x, W, b), g) * w), [x, W, g]) < REL_TOL
        assert gradcheck(lambda: ad.sum_(ad.layer_norm(x @ W, g, beta) * w), [x, W, g, beta]) < REL_TOL


def _gru_steps(xp, h0, Wzr, Wn):
    """Reference GRU built from elementary ops."""
    H = h0.shape[1]
    h = h0
    for t in range(xp.shape[1]):
        x = xp[:, t, :]
        hzr = ad.matmul(h, Wzr)
        z = ad.sigmoid(x[:, :H] + hzr[:, :H])
        r = ad.sigmoid(x[:, H:2 * H] + hzr[:, H:])
        n = ad.tanh(x[:, 2 * H:] + ad.matmul(r * h, Wn))
        h = (1.0 - z) * n + z * h
    return h


def test_gru_scan_gradients_and_reference():
    rng = np.random.default_rng(4)
    for _ in range(N_INSTANCES):
        B, L, H = 2, 8, 3
        xp, h0 = leaf(rng, B, L, 3 * H), leaf(rng, B, H)
        Wzr, Wn = leaf(rng, H, 2 * H), leaf(rng, H, H)
        w = rng.normal(size=(B, H))
        params = [xp, h0, Wzr, Wn]
        assert gradcheck(lambda: ad.sum_(ad.gru_scan(xp, h0, Wzr, Wn) * w), params) < REL_TOL
        with ad.no_tape():
            fused = ad.gru_scan(xp, h0, Wzr, Wn).data
            ref = _gru_steps(xp, h0, Wzr, Wn).data
        np.testing.assert_allclose(fused, ref, atol=1e-12)


def test_shared_input_accumulates():
    rng = np.random.default_rng(5)
    x = leaf(rng, 3)
    with ad.Tape() as tape:
        loss = ad.sum_(x * x + x)
    g = tape.backward(loss)[x]
    np.testing.assert_allclose(g, 2 * x.data + 1)


def test_untouched_leaf_gets_zero_gradient():
    rng = np.random.default_rng(6)
    x, y = leaf(rng, 3), leaf(rng, 2)
    with ad.Tape() as tape:
        loss = ad.sum_(x)
    grads = tape.backward(loss, wrt=[y])
    np.testing.assert_array_equal(grads[y], np.zeros(2))


def test_shape_errors_are_contract_violations():
    with pytest.raises(ContractViolation):
        ad.matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(ContractViolation):
        ad.add(np.ones((2, 3)), np.ones((4,)))
    with pytest.raises(ContractViolation):
        ad.concat([np.ones((2, 3)), np.ones((3, 3))], axis=-1)
    with ad.Tape() as tape:
        x = ad.Tensor(np.ones(3), requires_grad=True)
        y = x * 2.0
    with pytest.raises(ContractViolation):
        tape.backward(y)


def test_no_tape_records_nothing():
    x = ad.Tensor(np.ones(3), requires_grad=True)
    with ad.Tape() as tape:
        with ad.no_tape():
            ad.sum_(x * 2.0)
    assert tape.nodes == []


def test_adam_matches_hand_computation():
    p = ad.Parameter(np.array([1.0, -2.0]), "p")
    opt = ad.Adam([p], lr=0.1)
    g = np.array([0.5, -1.0])
    opt.step({p: g})
    # first bias-corrected step moves each entry by lr * sign(g)
    np.testing.assert_allclose(p.data, [0.9, -1.9], atol=1e-7)
    with pytest.raises(ContractViolation):
        opt.step({p: np.ones(3)})


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(7)
    params = [ad.Parameter(rng.normal(size=(3, 2)), "a"), ad.Parameter(rng.normal(size=4), "b")]
    path = os.path.join(tmp_path, "x.fbm")
    ad.save_checkpoint(path, params, {"step": 3})
    header, arrays = ad.load_checkpoint(path)
    assert header["meta"]["step"] == 3
    for p in params:
        np.testing.assert_array_equal(arrays[p.name], p.data)
    with open(path, "rb") as fh:
        first = fh.read()
    ad.save_checkpoint(path, params, {"step": 3})
    with open(path, "rb") as fh:
        assert fh.read() == first
    bad = os.path.join(tmp_path, "bad.fbm")
    with open(bad, "wb") as fh:
        fh.write(b"nope")
    with pytest.raises(ContractViolation):
        ad.load_checkpoint(bad)
    dup = [ad.Parameter(np.ones(1), "a"), ad.Parameter(np.ones(1), "a")]
    with pytest.raises(ContractViolation):
        ad.save_checkpoint(path, dup)
