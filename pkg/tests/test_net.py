import math

import numpy as np
import pytest

from hop3d.model import HopModel, ModelConfig, flatten_phi, scatter_phi
from hop3d.net import (IGNORE, Mlp, StaleTapeError, backbone_forward, flatten_tensors, head_forward,
                       scatter_tensors, softmax, softmax_cross_entropy)

from oracles import central_fd, logsumexp_ce, loop_mlp, max_rel_err


def random_mlp(dims, seed):
    rng = np.random.default_rng(seed)
    return Mlp([(rng.standard_normal((o, i)) * 0.7, rng.standard_normal(o) * 0.3)
                for i, o in zip(dims[:-1], dims[1:])])


@pytest.mark.parametrize("fwd", [backbone_forward, head_forward])
def test_zero_network_gives_zero_output(fwd):
    out, _ = fwd(Mlp.zeros([3, 5, 4]), np.ones((2, 3)))
    np.testing.assert_array_equal(out, 0.0)


@pytest.mark.parametrize("fwd", [backbone_forward, head_forward])
def test_identity_linear_layer(fwd):
    x = np.arange(12.0).reshape(4, 3)
    out, _ = fwd(Mlp([(np.eye(3), np.zeros(3))]), x)
    np.testing.assert_array_equal(out, x)


@pytest.mark.parametrize("fwd", [backbone_forward, head_forward])
def test_two_layer_forward_matches_loop_oracle(fwd):
    net = random_mlp([4, 6, 3], seed=5)
    x = np.random.default_rng(6).standard_normal((5, 4))
    out, _ = fwd(net, x)
    expected = np.vstack([loop_mlp(net.layers, row) for row in x])
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_forward_dimension_mismatch():
    with pytest.raises(ValueError):
        Mlp.zeros([3, 2]).forward(np.ones((2, 4)))
    with pytest.raises(ValueError):
        Mlp([(np.zeros((2, 3)), np.zeros(2)), (np.zeros((1, 4)), np.zeros(1))])


def test_softmax_cross_entropy_uniform_and_saturated():
    loss, _ = softmax_cross_entropy(np.zeros((1, 4)), [2])
    assert loss == pytest.approx(math.log(4), abs=1e-12)
    logits = np.zeros((1, 3))
    logits[0, 1] = 1000.0
    loss, grad = softmax_cross_entropy(logits, [1])
    assert loss == pytest.approx(0.0, abs=1e-12)
    np.testing.assert_allclose(grad, 0.0, atol=1e-12)


def test_softmax_cross_entropy_matches_logsumexp_oracle():
    rng = np.random.default_rng(7)
    logits = rng.standard_normal((3, 5))
    labels = [0, 4, 2]
    loss, _ = softmax_cross_entropy(logits, labels)
    assert abs(loss - logsumexp_ce(logits, labels)) <= 1e-10


def test_softmax_cross_entropy_ignore_rows():
    rng = np.random.default_rng(8)
    logits = rng.standard_normal((4, 3))
    loss, grad = softmax_cross_entropy(logits, [IGNORE] * 4)
    assert loss == 0.0 and not grad.any()
    loss, grad = softmax_cross_entropy(logits, [0, IGNORE, 2, IGNORE])
    assert not grad[[1, 3]].any()
    assert loss == pytest.approx(logsumexp_ce(logits, [0, -1, 2, -1]))
    fd = central_fd(lambda: softmax_cross_entropy(logits, [0, IGNORE, 2, IGNORE])[0], logits)
    assert max_rel_err(grad, fd) <= 1e-5


def test_softmax_rows_sum_to_one():
    p = softmax(np.random.default_rng(9).standard_normal((50, 7)) * 20)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)


def test_backward_zero_upstream_gives_zero_grads():
    net = random_mlp([3, 4, 2], seed=1)
    out, tape = net.forward(np.ones((2, 3)))
    grads, dx = net.backward(tape, np.zeros_like(out))
    assert all(not g.any() for g in grads) and not dx.any()


def test_backward_linear_layer_outer_product():
    net = Mlp([(np.random.default_rng(2).standard_normal((3, 2)), np.zeros(3))])
    x = np.array([[0.5, -1.5]])
    _, tape = net.forward(x)
    grads, _ = net.backward(tape, np.array([[1.0, 0.0, 0.0]]))
    np.testing.assert_array_equal(grads[0], np.outer([1.0, 0.0, 0.0], x[0]))
    np.testing.assert_array_equal(grads[1], [1.0, 0.0, 0.0])


@pytest.mark.parametrize("seed", range(4))
def test_backward_matches_finite_differences(seed):
    net = random_mlp([3, 5, 4], seed=seed)
    rng = np.random.default_rng(100 + seed)
    x = rng.standard_normal((6, 3))
    w = rng.standard_normal((6, 4))

    def loss():
        return float(np.sum(net.forward(x)[0] * w))

    _, tape = net.forward(x)
    grads, dx = net.backward(tape, w)
    for g, p in zip(grads, net.tensors()):
        assert max_rel_err(g, central_fd(loss, p)) <= 1e-5
    assert max_rel_err(dx, central_fd(loss, x)) <= 1e-5


def test_stale_tape_rejected():
    net = random_mlp([2, 3, 1], seed=3)
    out, tape = net.forward(np.ones((1, 2)))
    net.layers[0][0][0, 0] += 1.0
    with pytest.raises(StaleTapeError):
        net.backward(tape, np.ones_like(out))


def test_determinism():
    cfg = ModelConfig()
    x = np.random.default_rng(0).standard_normal((10, cfg.f_in))
    a = HopModel.init_phase1(cfg, np.random.default_rng(42)).forward(x)[0]
    b = HopModel.init_phase1(cfg, np.random.default_rng(42)).forward(x)[0]
    assert a.tobytes() == b.tobytes()


def _phase2_model(seed=0, cfg=ModelConfig()):
    rng = np.random.default_rng(seed)
    m1 = HopModel.init_phase1(cfg, rng)
    return m1.to_phase2(rng.standard_normal((cfg.k_novel, cfg.feat_dim)), rng)


def test_flatten_scatter_round_trip_bitwise():
    m = _phase2_model(1)
    flat, index = flatten_phi(m)
    before = {k: v.copy() for k, v in m.named_tensors().items()}
    scatter_phi(m, np.zeros_like(flat), index)
    assert not flatten_phi(m)[0].any()
    scatter_phi(m, flat, index)
    for k, v in m.named_tensors().items():
        assert v.tobytes() == before[k].tobytes()


def test_flatten_of_zero_model_is_zero():
    m = _phase2_model(2)
    flat, index = flatten_phi(m)
    scatter_phi(m, np.zeros_like(flat), index)
    assert flatten_phi(m)[0].shape == (index.size,) and not flatten_phi(m)[0].any()


@pytest.mark.parametrize("cfg", [ModelConfig(), ModelConfig(feat_dim=8, head_hidden=5, k_base=3, k_novel=2)])
def test_phi_size_matches_hand_count(cfg):
    C, H, kb, kn = cfg.feat_dim, cfg.head_hidden, cfg.k_base, cfg.k_novel
    protos = (kb + kn) * C
    h_b = H * C + H + kb * H + kb
    h_n = H * 2 * C + H + (kn + 1) * H + (kn + 1)
    assert flatten_phi(_phase2_model(0, cfg))[1].size == protos + h_b + h_n
    m1 = HopModel.init_phase1(cfg, np.random.default_rng(0))
    assert flatten_phi(m1)[1].size == kb * C + H * 2 * C + H + (kb + 1) * H + kb + 1


def test_scatter_length_mismatch():
    m = _phase2_model(3)
    flat, index = flatten_phi(m)
    with pytest.raises(ValueError):
        scatter_phi(m, flat[:-1], index)


def test_generic_flatten_scatter():
    a, b = np.arange(6.0).reshape(2, 3), np.array([7.0])
    flat, index = flatten_tensors([("a", a), ("b", b)])
    np.testing.assert_array_equal(flat, [0, 1, 2, 3, 4, 5, 7])
    tgt = {"a": np.zeros((2, 3)), "b": np.zeros(1)}
    scatter_tensors(tgt, flat, index)
    np.testing.assert_array_equal(tgt["a"], a)
    assert [e.offset for e in index.entries] == [0, 6]
