import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from jafr import autodiff as ad
from jafr.autodiff import ContractViolation, Tensor
from jafr.models import (Model, ModelSpec, cross_entropy, jacobian, load_checkpoint, one_hot, predict,
                         save_checkpoint)

from conftest import central_diff, rel_err

TINY_CNN = ModelSpec(architecture="small-cnn", input_shape=(2, 6, 6), num_classes=3, hidden=(5,),
                     conv_channels=(3, 4), activation="softplus")
TINY_MLP = ModelSpec(architecture="mlp", input_shape=(1, 4, 4), num_classes=3, hidden=(6,),
                     activation="softplus")


@pytest.mark.parametrize("arch", ["mlp", "small-cnn"])
def test_zero_head_gives_uniform_softmax(arch, rng):
    spec = ModelSpec(architecture=arch, input_shape=(1, 8, 8), num_classes=10, zero_init_head=True)
    p = ad.softmax(Model(spec, seed=0)(rng.random((4, 1, 8, 8))), axis=-1).data
    np.testing.assert_allclose(p, 0.1, atol=1e-15)


@pytest.mark.parametrize("spec", [TINY_CNN, TINY_MLP])
def test_rows_are_independent_and_permutation_equivariant(spec, rng):
    m = Model(spec, seed=3)
    x = rng.random((5,) + spec.input_shape)
    full = m(x).data
    assert full.shape == (5, spec.num_classes)
    for i in range(5):
        np.testing.assert_allclose(m(x[i]).data, full[i], rtol=1e-12, atol=1e-14)
    perm = rng.permutation(5)
    np.testing.assert_allclose(m(x[perm]).data, full[perm], rtol=1e-12, atol=1e-14)


def test_input_shape_mismatch_raises():
    with pytest.raises(ContractViolation):
        Model(TINY_MLP)(np.zeros((2, 1, 5, 4)))


def test_odd_sizes_pool_by_truncation(rng):
    spec = ModelSpec(architecture="small-cnn", input_shape=(1, 7, 9), num_classes=2, hidden=(4,),
                     conv_channels=(2,))
    assert Model(spec)(rng.random((3, 1, 7, 9))).shape == (3, 2)


def test_cross_entropy_examples():
    assert cross_entropy(Tensor(np.zeros(10)), one_hot([3], 10)[0]).item() == pytest.approx(np.log(10), abs=1e-12)
    losses = [cross_entropy(Tensor(np.array([t, 0.0, 0.0])), [1.0, 0.0, 0.0]).item() for t in range(0, 40, 4)]
    assert all(a > b for a, b in zip(losses, losses[1:]))
    assert losses[-1] < 1e-12
    with pytest.raises(ContractViolation):
        cross_entropy(Tensor(np.zeros(3)), [0.5, 0.5, 0.0])
    with pytest.raises(ContractViolation):
        cross_entropy(Tensor(np.zeros((2, 3))), one_hot([0], 3))


def test_cross_entropy_reductions(rng):
    z = Tensor(rng.normal(size=(4, 5)))
    y = one_hot([0, 1, 4, 2], 5)
    per = cross_entropy(z, y, reduction="none").data
    ref = -np.log(np.exp(z.data) / np.exp(z.data).sum(1, keepdims=True))[np.arange(4), [0, 1, 4, 2]]
    np.testing.assert_allclose(per, ref, rtol=1e-12)
    assert cross_entropy(z, y, reduction="sum").item() == pytest.approx(per.sum(), rel=1e-12)
    assert cross_entropy(z, y).item() == pytest.approx(per.mean(), rel=1e-12)


@given(st.integers(0, 2**31 - 1))
def test_cross_entropy_gradient_matches_fd(seed):
    rng = np.random.default_rng(seed)
    z0 = rng.normal(scale=3.0, size=7)
    y = one_hot([rng.integers(7)], 7)[0]
    z = Tensor(z0, requires_grad=True)
    g = ad.grad(cross_entropy(z, y), z).data
    fd = central_diff(lambda v: cross_entropy(Tensor(v), y).item(), z0, h=1e-6)
    assert rel_err(g, fd) < 1e-6


def test_jacobian_of_linear_model_matches_closed_form(rng):
    spec = ModelSpec(architecture="mlp", input_shape=(1, 3, 4), num_classes=5, hidden=())
    m = Model(spec, seed=1)
    W, b = m.params[0].data, m.params[1].data
    x = rng.random((6, 1, 3, 4))
    y = one_hot(rng.integers(0, 5, 6), 5)
    J, _ = jacobian(m, x, y)
    z = x.reshape(6, -1) @ W + b
    p = np.exp(z - z.max(1, keepdims=True))
    p /= p.sum(1, keepdims=True)
    closed = ((p - y) @ W.T).reshape(x.shape)
    assert np.max(np.abs(J.data - closed)) < 1e-10


def test_jacobian_single_image(rng):
    m = Model(TINY_CNN, seed=0)
    x = rng.random(TINY_CNN.input_shape)
    y = one_hot([2], 3)[0]
    J, per = jacobian(m, x, y)
    Jb, _ = jacobian(m, x[None], y[None])
    assert J.shape == x.shape
    np.testing.assert_allclose(J.data, Jb.data[0], rtol=1e-12)


def test_weight_tied_duplicate_pixels_give_duplicate_jacobian(rng):
    # an mlp whose first layer treats pixels 0 and 1 identically
    spec = ModelSpec(architecture="mlp", input_shape=(1, 1, 4), num_classes=3, hidden=(5,), activation="softplus")
    m = Model(spec, seed=2)
    m.params[0].data[1] = m.params[0].data[0]
    x = rng.random((3, 1, 1, 4))
    x[..., 1] = x[..., 0]
    J, _ = jacobian(m, x, one_hot([0, 1, 2], 3))
    np.testing.assert_array_equal(J.data[..., 0], J.data[..., 1])


def test_jacobian_is_continuous_for_softplus(rng):
    m = Model(TINY_CNN, seed=4)
    x = rng.random((2,) + TINY_CNN.input_shape)
    u = rng.normal(size=x.shape)
    u /= np.linalg.norm(u)
    y = one_hot([0, 1], 3)
    J0, _ = jacobian(m, x, y, create_graph=False)
    J1, _ = jacobian(m, x + 1e-6 * u, y, create_graph=False)
    assert np.linalg.norm(J0.data - J1.data) < 1e-3


def test_parameter_gradient_matches_fd(rng):
    m = Model(TINY_CNN, seed=5)
    x = rng.random((3,) + TINY_CNN.input_shape)
    y = one_hot([0, 2, 1], 3)
    flat = m.get_flat()

    def loss(theta):
        m.set_flat(theta)
        return cross_entropy(m(x), y).item()

    m.set_flat(flat)
    g = np.concatenate([v.data.ravel() for v in ad.grad(cross_entropy(m(x), y), m.params)])
    idx = rng.choice(flat.size, 25, replace=False)
    fd = []
    for i in idx:
        e = np.zeros_like(flat)
        e[i] = 1e-6
        fd.append((loss(flat + e) - loss(flat - e)) / 2e-6)
    assert rel_err(g[idx], fd) < 1e-5


def test_frozen_restores_flags():
    m = Model(TINY_MLP)
    with m.frozen():
        assert not any(p.requires_grad for p in m.params)
    assert all(p.requires_grad for p in m.params)


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    m = Model(TINY_CNN, seed=9)
    path = tmp_path / "m.ckpt"
    save_checkpoint(m, path)
    back = load_checkpoint(path)
    assert back.spec == m.spec
    assert back.get_flat().tobytes() == m.get_flat().tobytes()
    raw = path.read_bytes()
    (tmp_path / "bad").write_bytes(b"XXXXXXXX" + raw[8:])
    with pytest.raises(ValueError, match="offset 0"):
        load_checkpoint(tmp_path / "bad")
    (tmp_path / "short").write_bytes(raw[:-5])
    with pytest.raises(ValueError, match="truncated"):
        load_checkpoint(tmp_path / "short")


def test_predict_batches_consistently(rng):
    m = Model(TINY_MLP, seed=0)
    x = rng.random((7, 1, 4, 4))
    np.testing.assert_array_equal(predict(m, x, batch_size=3), predict(m, x))
    assert predict(m, x[:0]).shape == (0,)


def test_spec_validation():
    with pytest.raises(ContractViolation):
        ModelSpec(architecture="resnet")
    with pytest.raises(ContractViolation):
        ModelSpec(activation="tanh")
    assert ModelSpec.from_dict(json.loads(TINY_CNN.to_json())) == TINY_CNN

