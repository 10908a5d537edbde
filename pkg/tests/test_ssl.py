import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from prextract import nn
from prextract.datasets import make_split, stack_images
from prextract.ssl import (
    AugmentConfig, EncoderArtifact, SSLConfig, augment, augment_batch, info_nce, moco_momentum_update, nt_xent,
    pretrain, rs_encoder, train_bae, train_dae, train_moco, train_simclr,
)

from helpers import random_samples

SHAPE = (3, 8, 8)
vec = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


@pytest.fixture(scope="module")
def proxy():
    return make_split("IID", 4, 1, 12, 1, SHAPE, seed=0).proxy


def small_ssl(**kw):
    base = dict(latent_dim=16, queue_size=64, batch_N=16, projection_dim=8)
    base.update(kw)
    return SSLConfig(**base)


def pair_stats(art, proxy, aug, seed):
    """Mean cosine of two views of one sample vs. mean cosine across samples."""
    x = stack_images(proxy)
    rng = np.random.default_rng(seed)
    a = F.normalize(art.encode(augment_batch(x, aug, rng)), dim=1)
    b = F.normalize(art.encode(augment_batch(x, aug, rng)), dim=1)
    sim = a @ b.T
    n = len(x)
    pos = sim.diagonal().mean()
    neg = (sim.sum() - sim.diagonal().sum()) / (n * n - n)
    return float(pos), float(neg)


# ---------------------------------------------------------------- augment

def test_identity_augment():
    s = random_samples(1, SHAPE)[0]
    out = augment(s, AugmentConfig.identity(), np.random.default_rng(0))
    assert np.array_equal(out.image, s.image) and out.id == s.id


def test_full_grayscale_equalizes_channels():
    cfg = AugmentConfig(crop_scale=(1.0, 1.0), brightness=0, contrast=0, saturation=0, grayscale_prob=1.0,
                        blur_prob=0.0)
    v = augment(random_samples(1, SHAPE)[0], cfg, np.random.default_rng(0)).image
    assert np.allclose(v[0], v[1], atol=1e-6) and np.allclose(v[1], v[2], atol=1e-6)


def test_augment_deterministic_given_draw_state():
    s = random_samples(1, SHAPE)[0]
    cfg = AugmentConfig(hue=0.3, hflip_prob=0.5)
    a = augment(s, cfg, np.random.default_rng(42)).image
    b = augment(s, cfg, np.random.default_rng(42)).image
    assert np.array_equal(a, b)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 1.0), st.floats(0, 0.5), st.floats(0, 1))
def test_augment_shape_and_range(seed, crop, hue, p):
    cfg = AugmentConfig(crop_scale=(crop, 1.0), hue=hue, grayscale_prob=p, blur_prob=p, hflip_prob=p)
    x = np.stack([s.image for s in random_samples(3, SHAPE, seed=seed)])
    out = augment_batch(x, cfg, np.random.default_rng(seed))
    assert out.shape == x.shape
    assert float(out.min()) >= 0.0 and float(out.max()) <= 1.0


def test_augment_config_validation():
    with pytest.raises(ValueError):
        AugmentConfig(grayscale_prob=1.5)
    with pytest.raises(ValueError):
        AugmentConfig(crop_scale=(0.0, 1.0))
    with pytest.raises(ValueError):
        AugmentConfig(blur_kernel=4)


# ---------------------------------------------------------------- autoencoders

def test_bae_memorizes_single_sample():
    one = random_samples(1, SHAPE, seed=3)
    art = train_bae(one, small_ssl(), nn.TrainConfig(0.5, 1, 300, seed=0, momentum=0.9))
    assert art.provenance["final_loss"] < 1e-2
    assert art.provenance["clean_reconstruction_mse"] < 1e-2
    assert art.method == "BAE" and set(art.params) == set(art.arch.param_shapes())


def test_bae_zero_epochs_keeps_init(proxy):
    art = train_bae(proxy, small_ssl(), nn.TrainConfig(epochs=0, seed=4))
    init = nn.init_params(art.arch, 4)
    assert nn.params_equal(art.params, init)


def test_bae_loss_non_increasing(proxy):
    art = train_bae(proxy, small_ssl(), nn.TrainConfig(0.05, 16, 30, seed=0, momentum=0.9))
    h = art.provenance["loss_history"]
    assert all(b <= a * 1.05 for a, b in zip(h, h[1:])), h


def test_latent_must_be_smaller_than_input(proxy):
    with pytest.raises(ValueError):
        train_bae(proxy, SSLConfig(latent_dim=3 * 8 * 8, architecture="mlp-s"), nn.TrainConfig(epochs=1))


def test_dae_at_zero_noise_equals_bae(proxy):
    tc = nn.TrainConfig(0.05, 16, 5, seed=1)
    bae = train_bae(proxy, small_ssl(), tc)
    dae = train_dae(proxy, small_ssl(noise_level=0.0), tc)
    np.testing.assert_allclose(bae.provenance["loss_history"], dae.provenance["loss_history"], atol=1e-6)


def test_dae_full_mask_predicts_mean(proxy):
    art = train_dae(proxy, small_ssl(noise_level=1.0), nn.TrainConfig(0.5, 48, 400, seed=0, momentum=0.9))
    x = stack_images(proxy).reshape(len(proxy), -1).astype(np.float64)
    const_loss = float(((x - x.mean(axis=0)) ** 2).mean())
    assert art.provenance["final_loss"] == pytest.approx(const_loss, rel=0.1)


def test_dae_beats_random_encoder(proxy):
    tc = nn.TrainConfig(0.05, 16, 40, seed=0, momentum=0.9)
    trained = train_dae(proxy, small_ssl(), tc)
    untrained = train_dae(proxy, small_ssl(), nn.TrainConfig(epochs=0, seed=0))
    assert trained.provenance["clean_reconstruction_mse"] < untrained.provenance["clean_reconstruction_mse"]


# ---------------------------------------------------------------- momentum update

def rand_params(seed):
    g = torch.Generator().manual_seed(seed)
    return {"a": torch.randn(3, 4, generator=g, dtype=torch.float64),
            "b": torch.randn(5, generator=g, dtype=torch.float64)}


def test_momentum_examples():
    k, q = rand_params(0), rand_params(1)
    assert nn.params_equal(moco_momentum_update(k, q, 0.0), q)
    out = moco_momentum_update(k, q, 0.999)
    for n in k:
        assert torch.allclose(out[n], 0.999 * k[n] + 0.001 * q[n], rtol=0, atol=1e-15)
    same = moco_momentum_update(k, k, 0.7)
    assert all(torch.allclose(same[n], k[n], rtol=0, atol=1e-12) for n in k)


def test_momentum_shape_mismatch():
    with pytest.raises(ValueError):
        moco_momentum_update({"a": torch.zeros(2)}, {"a": torch.zeros(3)}, 0.5)
    with pytest.raises(ValueError):
        moco_momentum_update({"a": torch.zeros(2)}, {"b": torch.zeros(2)}, 0.5)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 10_000), st.floats(0, 0.9999), st.floats(-5, 5))
def test_momentum_is_affine(s1, s2, m, a):
    k, q = rand_params(s1), rand_params(s2)
    lhs = moco_momentum_update({n: a * v for n, v in k.items()}, {n: a * v for n, v in q.items()}, m)
    rhs = moco_momentum_update(k, q, m)
    assert all(torch.allclose(lhs[n], a * rhs[n], rtol=0, atol=1e-12) for n in k)


# ---------------------------------------------------------------- InfoNCE

def info_nce_reference(q, kp, kn, tau):
    q, kp, kn = (np.asarray(v, dtype=np.float64) for v in (q, kp, kn))
    pos = math.exp(q @ kp / tau)
    neg = sum(math.exp(q @ k / tau) for k in kn)
    return -math.log(pos / (pos + neg))


def test_info_nce_no_negatives_is_zero():
    q = torch.randn(4, dtype=torch.float64)
    assert float(info_nce(q, torch.randn(4, dtype=torch.float64), torch.zeros(0, 4, dtype=torch.float64), 0.1)) == 0.0


@pytest.mark.parametrize("K", [1, 3, 16])
def test_info_nce_equal_logits(K):
    q = torch.tensor([1.0, 0.0], dtype=torch.float64)
    keys = torch.tensor([[0.5, 2.0]] * K, dtype=torch.float64)
    loss = float(info_nce(q, torch.tensor([0.5, -1.0], dtype=torch.float64), keys, 0.3))
    assert abs(loss - math.log(1 + K)) < 1e-9
    if K == 1:
        assert abs(loss - 0.6931) < 1e-4


def test_info_nce_matches_direct_formula():
    rng = np.random.default_rng(5)
    q, kp, kn = rng.normal(size=3), rng.normal(size=3), rng.normal(size=(4, 3))
    got = float(info_nce(*(torch.as_tensor(v) for v in (q, kp, kn)), 0.7))
    assert abs(got - info_nce_reference(q, kp, kn, 0.7)) < 1e-12


def test_info_nce_rejects_bad_tau():
    with pytest.raises(ValueError):
        info_nce(torch.ones(2), torch.ones(2), torch.ones(1, 2), 0.0)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, 4, elements=vec), arrays(np.float64, 4, elements=vec),
       arrays(np.float64, (3, 4), elements=vec), st.floats(0.05, 2.0), st.floats(0.01, 2.0))
def test_info_nce_nonnegative_and_decreasing_in_positive(q, kp, kn, tau, delta):
    q_t, kn_t = torch.as_tensor(q), torch.as_tensor(kn)
    base = float(info_nce(q_t, torch.as_tensor(kp), kn_t, tau))
    assert base >= 0
    if np.linalg.norm(q) < 1e-3:
        return
    # move k+ along q so q.k+ strictly grows while negatives stay fixed
    bumped = float(info_nce(q_t, torch.as_tensor(kp + delta * q / (q @ q)), kn_t, tau))
    assert bumped < base or base < 1e-12


# ---------------------------------------------------------------- NT-Xent

def nt_xent_reference(z, tau):
    z = np.asarray(z, dtype=np.float64)
    m = len(z)
    zn = z / np.linalg.norm(z, axis=1, keepdims=True)
    total = 0.0
    for i in range(m):
        j = (i + m // 2) % m
        num = math.exp(zn[i] @ zn[j] / tau)
        den = sum(math.exp(zn[i] @ zn[k] / tau) for k in range(m) if k != i)
        total += -math.log(num / den)
    return total / m


def test_nt_xent_single_pair_is_zero():
    z = torch.randn(2, 5, dtype=torch.float64)
    assert float(nt_xent(z, 0.5)) == 0.0


@pytest.mark.parametrize("N", [2, 3, 8])
def test_nt_xent_identical_embeddings(N):
    z = torch.ones(2 * N, 4, dtype=torch.float64)
    assert abs(float(nt_xent(z, 0.5)) - math.log(2 * N - 1)) < 1e-9


def test_nt_xent_matches_direct_formula():
    z = np.random.default_rng(6).normal(size=(4, 5))
    assert abs(float(nt_xent(torch.as_tensor(z), 0.5)) - nt_xent_reference(z, 0.5)) < 1e-12


def test_nt_xent_zero_norm_rejected():
    z = torch.ones(4, 3)
    z[2] = 0
    with pytest.raises(ValueError):
        nt_xent(z, 0.5)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 4).flatmap(lambda n: arrays(np.float64, (2 * n, 3), elements=vec)),
       st.floats(0.1, 2.0), st.floats(0.01, 100.0), st.integers(0, 7))
def test_nt_xent_nonnegative_and_scale_invariant(z, tau, c, row):
    if np.any(np.linalg.norm(z, axis=1) < 1e-3):
        return
    base = float(nt_xent(torch.as_tensor(z), tau))
    assert base >= -1e-12
    scaled = z.copy()
    scaled[row % len(z)] *= c
    assert abs(float(nt_xent(torch.as_tensor(scaled), tau)) - base) < 1e-9


# ---------------------------------------------------------------- contrastive training

def test_moco_key_encoder_is_momentum_blend(proxy):
    checks = []

    def audit(before, q, after):
        for n in before:
            checks.append(torch.allclose(after[n], 0.9 * before[n] + 0.1 * q[n], rtol=0, atol=1e-6))

    train_moco(proxy, small_ssl(momentum=0.9), nn.TrainConfig(0.01, 16, 2, seed=0), AugmentConfig(), audit=audit)
    assert checks and all(checks)


def test_moco_queue_smaller_than_batch_rejected(proxy):
    with pytest.raises(ValueError):
        train_moco(proxy, small_ssl(queue_size=8), nn.TrainConfig(batch_size=16), AugmentConfig())


def test_simclr_needs_two_per_batch(proxy):
    with pytest.raises(ValueError):
        train_simclr(proxy, small_ssl(batch_N=1), nn.TrainConfig(), AugmentConfig())


@pytest.mark.parametrize("method", ["MoCo", "SimCLR"])
def test_contrastive_loss_drops_and_views_align(proxy, method):
    aug = AugmentConfig(brightness=0.4, contrast=0.4, saturation=0.4)
    ssl_cfg = small_ssl(tau=0.5, momentum=0.99)
    drops, gaps = [], []
    for seed in range(5):
        tc = nn.TrainConfig(0.05 if method == "SimCLR" else 0.01, 16, 30, seed=seed, momentum=0.9)
        art = pretrain(method, proxy, ssl_cfg, tc, aug)
        h = art.provenance["loss_history"]
        drops.append(h[-1] < h[0])
        pos, neg = pair_stats(art, proxy, aug, seed)
        gaps.append(pos - neg)
    assert np.median(drops) == 1
    assert np.mean(gaps) > 0


def test_simclr_deterministic(proxy):
    tc = nn.TrainConfig(0.05, 16, 2, seed=3)
    a = train_simclr(proxy, small_ssl(), tc, AugmentConfig())
    b = train_simclr(proxy, small_ssl(), tc, AugmentConfig())
    assert nn.params_equal(a.params, b.params)
    assert "proj1.weight" not in a.params and set(a.params) == set(a.arch.param_shapes())


# ---------------------------------------------------------------- RS and artifacts

def test_rs_encoder_seeding_and_shape():
    a, b, c = rs_encoder(SHAPE, 16, 1), rs_encoder(SHAPE, 16, 1), rs_encoder(SHAPE, 16, 2)
    assert nn.params_equal(a.params, b.params) and not nn.params_equal(a.params, c.params)
    assert a.method == "RS"
    assert a.encode(np.zeros((5, *SHAPE), np.float32)).shape == (5, 16)


def test_artifact_round_trip_and_bitwise_repeatability(proxy, tmp_path):
    tc = nn.TrainConfig(0.05, 16, 2, seed=0)
    a = pretrain("BAE", proxy, small_ssl(), tc)
    b = pretrain("BAE", proxy, small_ssl(), tc)
    assert nn.dump_checkpoint(a.arch, a.params) == nn.dump_checkpoint(b.arch, b.params)
    a.save(tmp_path / "enc.ckpt")
    back = EncoderArtifact.load(tmp_path / "enc.ckpt")
    assert back.method == "BAE" and back.provenance == a.provenance
    assert nn.params_equal(back.params, a.params)


def test_unknown_method():
    with pytest.raises(ValueError, match="allowed"):
        pretrain("BYOL", random_samples(2, SHAPE))


def test_ssl_config_validation():
    with pytest.raises(ValueError):
        SSLConfig(momentum=1.0)
    with pytest.raises(ValueError):
        SSLConfig(tau=0.0)
    with pytest.raises(ValueError):
        SSLConfig(noise_level=1.5)
