import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from prextract import nn

finite = st.floats(-30, 30, allow_nan=False, allow_infinity=False)


def logits_arrays(max_rows=6, max_cols=8):
    shape = st.tuples(st.integers(1, max_rows), st.integers(2, max_cols))
    return shape.flatmap(lambda s: arrays(np.float64, s, elements=finite))


def dense_arch(d_in, d_hidden, d_out):
    return nn.Architecture("mlp", (d_in,), (
        nn.Layer("dense", "l1", d_in, d_hidden), nn.Layer("relu"), nn.Layer("dense", "l2", d_hidden, d_out),
    ))


# ---------------------------------------------------------------- forward

def test_zero_weight_linear_gives_zero_logits():
    arch = nn.dense_stack("fc", [5, 3])
    params = {k: torch.zeros(s) for k, s in arch.param_shapes().items()}
    out = nn.forward(arch, params, torch.randn(4, 5))
    assert torch.equal(out, torch.zeros(4, 3))


def test_identity_linear_returns_input():
    arch = nn.dense_stack("fc", [4, 4])
    params = {"fc.weight": torch.eye(4, dtype=torch.float64), "fc.bias": torch.zeros(4, dtype=torch.float64)}
    v = torch.randn(3, 4, dtype=torch.float64)
    assert torch.equal(nn.forward(arch, params, v), v)


def test_two_layer_matches_hand_matmul_chain():
    arch = dense_arch(6, 5, 3)
    params = nn.init_params(arch, seed=11, dtype=torch.float64)
    x = np.random.default_rng(0).normal(size=(7, 6))
    w1, b1 = params["l1.weight"].numpy(), params["l1.bias"].numpy()
    w2, b2 = params["l2.weight"].numpy(), params["l2.bias"].numpy()
    h = np.maximum(x @ w1.T + b1, 0.0)
    expected = h @ w2.T + b2
    got = nn.forward(arch, params, torch.as_tensor(x)).numpy()
    np.testing.assert_allclose(got, expected, rtol=1e-12, atol=1e-12)


def test_forward_shape_error_names_layer():
    arch = nn.classifier_architecture("cnn-s", (3, 8, 8), 4, latent_dim=8)
    params = nn.init_params(arch, 0)
    with pytest.raises(nn.ShapeError, match="input"):
        nn.forward(arch, params, torch.zeros(2, 3, 12, 12))
    bad = nn.Architecture("bad", (4,), (nn.Layer("dense", "a", 4, 3), nn.Layer("dense", "b", 5, 2)))
    with pytest.raises(nn.ShapeError, match="'b'"):
        nn.forward(bad, nn.init_params(bad, 0), torch.zeros(1, 4))


def test_registry_shapes():
    cnn = nn.classifier_architecture("cnn-s", (3, 16, 16), 10)
    assert sum(l.kind == "conv" for l in cnn.layers) == 2
    assert sum(l.kind == "dense" for l in cnn.layers) == 2
    mlp = nn.classifier_architecture("mlp-s", (3, 16, 16), 10)
    assert sum(l.kind == "dense" for l in mlp.layers) == 3
    out = nn.forward(cnn, nn.init_params(cnn, 0), torch.rand(2, 3, 16, 16))
    assert out.shape == (2, 10)
    with pytest.raises(ValueError):
        nn.encoder_architecture("vgg", (3, 16, 16), 8)


def test_forward_is_deterministic():
    arch = nn.classifier_architecture("cnn-s", (3, 8, 8), 4, latent_dim=8)
    params = nn.init_params(arch, 5)
    x = torch.rand(6, 3, 8, 8, generator=torch.Generator().manual_seed(0))
    assert torch.equal(nn.forward(arch, params, x), nn.forward(arch, params, x))


def test_init_params_seeded():
    arch = nn.classifier_architecture("mlp-s", (3, 8, 8), 4)
    assert nn.params_equal(nn.init_params(arch, 1), nn.init_params(arch, 1))
    assert not nn.params_equal(nn.init_params(arch, 1), nn.init_params(arch, 2))


def test_l2norm_gradient_bounded_at_zero_activation():
    arch = nn.Architecture("n", (4,), (nn.Layer("l2norm"),))
    x = torch.zeros(1, 4, dtype=torch.float64, requires_grad=True)
    out = nn.forward(arch, {}, x).sum()
    (g,) = torch.autograd.grad(out, x)
    assert torch.isfinite(g).all() and g.abs().max() <= 2.0


# ---------------------------------------------------------------- softmax / CE

def test_ce_uniform_logits_is_log_n():
    logits = torch.zeros(1, 10, dtype=torch.float64)
    y = nn.one_hot([3], 10, torch.float64)
    assert abs(float(nn.cross_entropy(logits, y)) - math.log(10)) < 1e-9


def test_ce_saturated_correct_is_tiny():
    logits = torch.tensor([[50.0, 0.0, 0.0]], dtype=torch.float64)
    assert float(nn.cross_entropy(logits, nn.one_hot([0], 3, torch.float64))) < 1e-6


def test_ce_random_matches_hand_log_sum_exp():
    rng = np.random.default_rng(4)
    z = rng.normal(size=(5, 4)) * 3
    y = rng.dirichlet(np.ones(4), size=5)
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    expected = float(np.mean(-(y * (z - lse[:, None])).sum(axis=1)))
    got = float(nn.cross_entropy(torch.as_tensor(z), torch.as_tensor(y)))
    assert abs(got - expected) < 1e-12


def test_ce_rejects_unnormalized_targets():
    with pytest.raises(ValueError):
        nn.cross_entropy(torch.zeros(1, 3), torch.tensor([[0.5, 0.2, 0.2]]))
    with pytest.raises(ValueError):
        nn.cross_entropy(torch.zeros(1, 3), torch.zeros(1, 4))


@settings(max_examples=60, deadline=None)
@given(logits_arrays())
def test_softmax_rows_are_distributions(z):
    p = nn.softmax(torch.as_tensor(z))
    assert (p >= 0).all()
    assert torch.allclose(p.sum(dim=-1), torch.ones(z.shape[0], dtype=torch.float64), atol=1e-6)


@settings(max_examples=60, deadline=None)
@given(logits_arrays(), st.integers(0, 2**31 - 1))
def test_gibbs_inequality(z, seed):
    logits = torch.as_tensor(z)
    y = torch.as_tensor(np.random.default_rng(seed).dirichlet(np.ones(z.shape[1]), size=z.shape[0]))
    p = nn.softmax(logits)
    p = p / p.sum(dim=-1, keepdim=True)
    assert float(nn.cross_entropy(logits, p)) <= float(nn.cross_entropy(logits, y)) + 1e-9
    assert float(nn.cross_entropy(logits, y)) >= 0


# ---------------------------------------------------------------- SGD

def test_sgd_zero_gradient_is_identity():
    p = {"w": torch.randn(3, 2)}
    out = nn.sgd_step(p, {"w": torch.zeros(3, 2)}, nn.TrainConfig(0.1, 4, 1))
    assert torch.equal(out["w"], p["w"])


def test_sgd_unit_step():
    p = {"w": torch.tensor([1.0, 2.0])}
    out = nn.sgd_step(p, {"w": torch.tensor([0.5, -1.0])}, nn.TrainConfig(1.0, 1, 1))
    assert torch.equal(out["w"], torch.tensor([0.5, 3.0]))


def test_sgd_hand_computed_update():
    p = {"a": torch.tensor([1.0], dtype=torch.float64), "b": torch.tensor([-2.0], dtype=torch.float64)}
    g = {"a": torch.tensor([0.4], dtype=torch.float64), "b": torch.tensor([-1.0], dtype=torch.float64)}
    out = nn.sgd_step(p, g, nn.TrainConfig(0.1, 2, 1))
    assert float(out["a"]) == pytest.approx(1.0 - 0.05 * 0.4, abs=1e-15)
    assert float(out["b"]) == pytest.approx(-2.0 + 0.05 * 1.0, abs=1e-15)


def test_sgd_missing_gradient_key():
    with pytest.raises(KeyError):
        nn.sgd_step({"a": torch.zeros(1), "b": torch.zeros(1)}, {"a": torch.zeros(1)}, nn.TrainConfig())


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (3, 4), elements=finite), arrays(np.float64, (3, 4), elements=finite))
def test_sgd_zero_lr_is_identity(w, g):
    p = {"w": torch.as_tensor(w)}
    out = nn.sgd_step(p, {"w": torch.as_tensor(g)}, nn.TrainConfig(0.0, 3, 1))
    assert torch.equal(out["w"], p["w"])


def test_train_config_validation():
    with pytest.raises(ValueError):
        nn.TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        nn.TrainConfig(momentum=1.0)
    with pytest.raises(ValueError):
        nn.TrainConfig(learning_rate=-1)


def test_fit_frozen_params_untouched_and_loss_drops():
    arch = dense_arch(4, 8, 3)
    params = nn.init_params(arch, 0)
    rng = np.random.default_rng(0)
    x = torch.as_tensor(rng.normal(size=(30, 4)), dtype=torch.float32)
    y = nn.one_hot(rng.integers(0, 3, 30), 3)
    new, hist = nn.fit(arch, params, x, y, nn.TrainConfig(0.1, 10, 20), trainable=["l2.weight", "l2.bias"])
    assert torch.equal(new["l1.weight"], params["l1.weight"])
    assert not torch.equal(new["l2.weight"], params["l2.weight"])
    assert hist[-1] < hist[0]


def test_fit_zero_epochs_returns_copy():
    arch = dense_arch(4, 8, 3)
    params = nn.init_params(arch, 0)
    new, hist = nn.fit(arch, params, torch.zeros(5, 4), nn.one_hot([0] * 5, 3), nn.TrainConfig(epochs=0))
    assert hist == [] and nn.params_equal(new, params)


# ---------------------------------------------------------------- grad check

def test_grad_check_linear_ce():
    arch = nn.dense_stack("fc", [5, 3])
    params = nn.init_params(arch, 1, torch.float64)
    rng = np.random.default_rng(1)
    x = torch.as_tensor(rng.normal(size=(4, 5)))
    y = nn.one_hot(rng.integers(0, 3, 4), 3, torch.float64)
    rep = nn.grad_check(lambda p: nn.cross_entropy(nn.forward(arch, p, x), y), params)
    assert rep.ok(1e-4), rep


def test_grad_check_constant_loss():
    params = {"w": torch.randn(3)}
    rep = nn.grad_check(lambda p: torch.tensor(2.0, dtype=torch.float64), params)
    assert rep.max_rel_error == 0.0 and rep.n_checked == 3


def test_grad_check_conv_dense_8x8():
    arch = nn.classifier_architecture("cnn-s", (1, 8, 8), 3, latent_dim=6)
    params = nn.init_params(arch, 2, torch.float64)
    rng = np.random.default_rng(2)
    x = torch.as_tensor(rng.uniform(size=(3, 1, 8, 8)))
    y = nn.one_hot([0, 1, 2], 3, torch.float64)
    rep = nn.grad_check(lambda p: nn.cross_entropy(nn.forward(arch, p, x), y), params, max_entries=400)
    assert rep.ok(1e-3), rep


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip_and_byte_identity(tmp_path):
    arch = nn.classifier_architecture("cnn-s", (3, 8, 8), 4, latent_dim=8)
    params = nn.init_params(arch, 3)
    blob = nn.dump_checkpoint(arch, params)
    arch2, params2 = nn.load_checkpoint_bytes(blob, torch.float32)
    assert arch2 == arch and nn.params_equal(params, params2)
    assert nn.dump_checkpoint(arch2, params2) == blob
    path = tmp_path / "m.ckpt"
    nn.save_checkpoint(path, arch, params)
    assert path.read_bytes() == blob
    assert blob.startswith(nn.CHECKPOINT_MAGIC)


def test_checkpoint_rejects_garbage():
    with pytest.raises(ValueError):
        nn.load_checkpoint_bytes(b"nope" * 10)
    arch = nn.dense_stack("fc", [2, 2])
    blob = nn.dump_checkpoint(arch, nn.init_params(arch, 0))
    with pytest.raises(ValueError):
        nn.load_checkpoint_bytes(blob + b"\x00")
