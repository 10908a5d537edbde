"""Self-supervised encoder pretraining on the unlabeled proxy set.

Five ways to obtain the substitute's feature extractor:

* ``RS``      random initialization, no pretraining
* ``BAE``     bottleneck autoencoder, reconstruct ``x`` from ``f_enc(x)``
* ``DAE``     same with block-masked inputs
* ``MoCo``    InfoNCE against a FIFO queue of momentum-encoder keys
* ``SimCLR``  NT-Xent over 2N augmented views of N samples
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import nn
from .datasets import Sample, dataset_hash, stack_images

log = logging.getLogger(__name__)

METHODS = ("RS", "BAE", "DAE", "MoCo", "SimCLR")
DEFAULT_TAU = {"MoCo": 0.07, "SimCLR": 0.5}


def canonical_method(name: str) -> str:
    for m in METHODS:
        if m.lower() == str(name).lower():
            return m
    raise ValueError(f"unknown SSL method {name!r}; allowed: {', '.join(METHODS)}")


@dataclass(frozen=True)
class SSLConfig:
    """Hyper-parameters of the pretext tasks. ``tau=None`` picks the per-method default."""

    tau: float | None = None
    momentum: float = 0.999
    noise_level: float = 0.3
    latent_dim: int = 64
    queue_size: int = 1024
    batch_N: int = 64
    projection_dim: int = 32
    architecture: str = "cnn-s"

    def __post_init__(self):
        if self.tau is not None and not self.tau > 0:
            raise ValueError("tau must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if not 0.0 <= self.noise_level <= 1.0:
            raise ValueError("noise_level must lie in [0, 1]")
        if self.latent_dim < 1 or self.queue_size < 1 or self.batch_N < 1:
            raise ValueError("latent_dim, queue_size and batch_N must be positive")

    def temperature(self, method: str) -> float:
        return self.tau if self.tau is not None else DEFAULT_TAU.get(method, 0.5)


@dataclass(frozen=True)
class AugmentConfig:
    crop_scale: tuple[float, float] = (0.5, 1.0)
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    hue: float = 0.0
    grayscale_prob: float = 0.2
    blur_prob: float = 0.5
    blur_sigma: tuple[float, float] = (0.1, 1.0)
    blur_kernel: int = 3
    hflip_prob: float = 0.0
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.crop_scale
        if not 0 < lo <= hi <= 1:
            raise ValueError("crop_scale must satisfy 0 < low <= high <= 1")
        for p in (self.grayscale_prob, self.blur_prob, self.hflip_prob):
            if not 0.0 <= p <= 1.0:
                raise ValueError("probabilities must lie in [0, 1]")
        if min(self.brightness, self.contrast, self.saturation, self.hue) < 0:
            raise ValueError("jitter strengths must be non-negative")
        if self.hue > 0.5:
            raise ValueError("hue jitter is a fraction of a full turn, at most 0.5")
        if self.blur_kernel < 1 or self.blur_kernel % 2 == 0:
            raise ValueError("blur_kernel must be a positive odd integer")

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls(crop_scale=(1.0, 1.0), brightness=0.0, contrast=0.0, saturation=0.0, hue=0.0,
                   grayscale_prob=0.0, blur_prob=0.0, hflip_prob=0.0)


# ---------------------------------------------------------------- augmentation

def _gray(x: torch.Tensor) -> torch.Tensor:
    if x.shape[1] != 3:
        return x.mean(dim=1, keepdim=True)
    w = torch.tensor([0.299, 0.587, 0.114], dtype=x.dtype).view(1, 3, 1, 1)
    return (x * w).sum(dim=1, keepdim=True)


_RGB2YIQ = torch.tensor([[0.299, 0.587, 0.114], [0.596, -0.274, -0.322], [0.211, -0.523, 0.312]])


def _rotate_hue(x: torch.Tensor, angle: torch.Tensor) -> torch.Tensor:
    """Rotate the chroma plane of YIQ by a per-image angle."""
    m = _RGB2YIQ.to(x.dtype)
    yiq = torch.einsum("ij,njhw->nihw", m, x)
    cos, sin = torch.cos(angle).view(-1, 1, 1), torch.sin(angle).view(-1, 1, 1)
    i, q = yiq[:, 1], yiq[:, 2]
    yiq = torch.stack([yiq[:, 0], cos * i - sin * q, sin * i + cos * q], dim=1)
    return torch.einsum("ij,njhw->nihw", torch.linalg.inv(m), yiq)


def augment_batch(images: np.ndarray | torch.Tensor, cfg: AugmentConfig, rng: np.random.Generator) -> torch.Tensor:
    """One stochastic view per image: crop-resize, flip, colour jitter, grayscale, blur.

    All random draws come from ``rng`` in a fixed order, so a given generator
    state always yields the same views. Output shape equals input shape and
    values are clipped to ``[0, 1]``.
    """
    x = torch.as_tensor(np.asarray(images) if not isinstance(images, torch.Tensor) else images)
    if not x.is_floating_point():
        x = x.float()
    n, c, h, w = x.shape
    if n == 0:
        return x.clone()

    lo, hi = cfg.crop_scale
    scale = rng.uniform(lo, hi, size=n)
    frac = np.sqrt(scale)
    oy = rng.uniform(0, 1, size=n) * (1 - frac)
    ox = rng.uniform(0, 1, size=n) * (1 - frac)
    flip = rng.uniform(size=n) < cfg.hflip_prob
    bright = rng.uniform(1 - cfg.brightness, 1 + cfg.brightness, size=n)
    contr = rng.uniform(1 - cfg.contrast, 1 + cfg.contrast, size=n)
    satur = rng.uniform(1 - cfg.saturation, 1 + cfg.saturation, size=n)
    hue = rng.uniform(-cfg.hue, cfg.hue, size=n)
    gray = rng.uniform(size=n) < cfg.grayscale_prob
    blur = rng.uniform(size=n) < cfg.blur_prob
    sigma = rng.uniform(cfg.blur_sigma[0], cfg.blur_sigma[1], size=n)

    if hi < 1.0 or lo < 1.0:
        theta = np.zeros((n, 2, 3))
        theta[:, 0, 0] = frac
        theta[:, 1, 1] = frac
        theta[:, 0, 2] = 2 * ox + frac - 1
        theta[:, 1, 2] = 2 * oy + frac - 1
        grid = F.affine_grid(torch.as_tensor(theta, dtype=x.dtype), list(x.shape), align_corners=False)
        x = F.grid_sample(x, grid, mode="bilinear", padding_mode="border", align_corners=False)
    if flip.any():
        x = torch.where(torch.as_tensor(flip).view(n, 1, 1, 1), x.flip(-1), x)
    if cfg.brightness:
        x = x * torch.as_tensor(bright, dtype=x.dtype).view(n, 1, 1, 1)
    if cfg.contrast:
        mean = _gray(x).mean(dim=(1, 2, 3), keepdim=True)
        x = (x - mean) * torch.as_tensor(contr, dtype=x.dtype).view(n, 1, 1, 1) + mean
    if cfg.saturation and c == 3:
        g = _gray(x)
        x = g + (x - g) * torch.as_tensor(satur, dtype=x.dtype).view(n, 1, 1, 1)
    if cfg.hue and c == 3:
        x = _rotate_hue(x, torch.as_tensor(hue * 2 * math.pi, dtype=x.dtype))
    if gray.any():
        x = torch.where(torch.as_tensor(gray).view(n, 1, 1, 1), _gray(x).expand_as(x), x)
    if blur.any():
        k = cfg.blur_kernel
        r = torch.arange(k, dtype=x.dtype) - k // 2
        s = torch.as_tensor(sigma, dtype=x.dtype).view(n, 1)
        g1 = torch.exp(-(r.view(1, k) ** 2) / (2 * s ** 2))
        g1 = g1 / g1.sum(dim=1, keepdim=True)
        kern = (g1[:, :, None] * g1[:, None, :])  # (n, k, k)
        weight = kern.repeat_interleave(c, dim=0).unsqueeze(1)  # (n*c, 1, k, k)
        padded = F.pad(x.reshape(1, n * c, h, w), (k // 2,) * 4, mode="replicate")
        blurred = F.conv2d(padded, weight, groups=n * c).reshape(n, c, h, w)
        x = torch.where(torch.as_tensor(blur).view(n, 1, 1, 1), blurred, x)
    return x.clamp(0.0, 1.0)


def augment(sample: Sample, cfg: AugmentConfig, rng: np.random.Generator) -> Sample:
    view = augment_batch(sample.image[None], cfg, rng)[0].numpy()
    return Sample(sample.id, view.astype(np.float32))


# ---------------------------------------------------------------- losses

def info_nce(q: torch.Tensor, k_pos: torch.Tensor, k_negs: torch.Tensor, tau: float) -> torch.Tensor:
    """InfoNCE ``-log(e^{q.k+/tau} / (e^{q.k+/tau} + sum e^{q.k-/tau}))``.

    ``q`` and ``k_pos`` are single vectors or row-aligned batches; ``k_negs``
    is a ``(K, d)`` matrix of negatives shared by every row. Batches return
    the mean loss.
    """
    if not tau > 0:
        raise ValueError("temperature must be positive")
    single = q.dim() == 1
    q2, kp = (q[None], k_pos[None]) if single else (q, k_pos)
    if k_negs.dim() == 1:
        k_negs = k_negs[None]
    if kp.shape != q2.shape or (k_negs.numel() and k_negs.shape[-1] != q2.shape[-1]):
        raise ValueError("query, positive and negative keys must share their dimension")
    pos = (q2 * kp).sum(dim=-1, keepdim=True) / tau
    if k_negs.numel():
        logits = torch.cat([pos, q2 @ k_negs.T / tau], dim=1)
    else:
        logits = pos
    loss = torch.logsumexp(logits, dim=1) - logits[:, 0]
    return loss[0] if single else loss.mean()


def nt_xent(z: torch.Tensor, tau: float, partners: Sequence[int] | None = None) -> torch.Tensor:
    """NT-Xent over ``2N`` embeddings; ``partners[i]`` is the positive of anchor ``i``.

    By default rows ``i`` and ``i + N`` form the positive pairs. Similarities
    are cosine, so rescaling any row by a positive factor leaves the loss
    unchanged.
    """
    if not tau > 0:
        raise ValueError("temperature must be positive")
    m = z.shape[0]
    if m % 2:
        raise ValueError("nt_xent needs an even number of embeddings (N positive pairs)")
    norms = z.norm(dim=1)
    if torch.any(norms == 0):
        raise ValueError("zero-norm embedding; cosine similarity undefined")
    if partners is None:
        half = m // 2
        partners = [i + half if i < half else i - half for i in range(m)]
    partners_t = torch.as_tensor(list(partners), dtype=torch.long)
    zn = z / norms[:, None]
    sim = zn @ zn.T / tau
    eye = torch.eye(m, dtype=torch.bool)
    sim_masked = sim.masked_fill(eye, float("-inf"))
    pos = sim[torch.arange(m), partners_t]
    return (torch.logsumexp(sim_masked, dim=1) - pos).mean()


def moco_momentum_update(
    theta_k: Mapping[str, torch.Tensor], theta_q: Mapping[str, torch.Tensor], m: float
) -> nn.ParamSet:
    """Key-encoder update ``m * theta_k + (1 - m) * theta_q``, elementwise."""
    if theta_k.keys() != theta_q.keys():
        raise ValueError("key and query parameter sets have different names")
    out = {}
    with torch.no_grad():
        for k in theta_k:
            if theta_k[k].shape != theta_q[k].shape:
                raise ValueError(f"shape mismatch for {k!r}: {tuple(theta_k[k].shape)} vs {tuple(theta_q[k].shape)}")
            out[k] = m * theta_k[k] + (1 - m) * theta_q[k]
    return out


# ---------------------------------------------------------------- artifacts

@dataclass
class EncoderArtifact:
    arch: nn.Architecture
    params: nn.ParamSet
    method: str
    latent_dim: int
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.latent_dim >= self.arch.input_dim:
            raise ValueError(
                f"latent_dim {self.latent_dim} must be smaller than the input dimensionality {self.arch.input_dim}"
            )

    def encode(self, images) -> torch.Tensor:
        x = torch.as_tensor(np.asarray(images), dtype=next(iter(self.params.values())).dtype)
        with torch.no_grad():
            return nn.forward(self.arch, self.params, x)

    def save(self, path: str | Path) -> None:
        """Checkpoint at ``path`` plus a JSON provenance sidecar at ``path.json``."""
        path = Path(path)
        nn.save_checkpoint(path, self.arch, self.params)
        side = {"method": self.method, "latent_dim": self.latent_dim, "provenance": self.provenance}
        Path(str(path) + ".json").write_text(json.dumps(side, indent=2, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path, dtype: torch.dtype = torch.float32) -> "EncoderArtifact":
        arch, params = nn.load_checkpoint(path, dtype)
        side = json.loads(Path(str(path) + ".json").read_text())
        return cls(arch, params, side["method"], side["latent_dim"], side["provenance"])


def _provenance(proxy: Sequence[Sample], ssl_cfg: SSLConfig, train_cfg: nn.TrainConfig,
                aug_cfg: AugmentConfig | None, history: Sequence[float]) -> dict:
    return {
        "proxy_hash": dataset_hash(proxy) if proxy else None,
        "ssl_config": asdict(ssl_cfg),
        "train_config": asdict(train_cfg),
        "augment_config": asdict(aug_cfg) if aug_cfg is not None else None,
        "seed": train_cfg.seed,
        "loss_history": [float(v) for v in history],
        "final_loss": float(history[-1]) if history else None,
    }


def _encoder_arch(input_shape, ssl_cfg: SSLConfig) -> nn.Architecture:
    arch = nn.encoder_architecture(ssl_cfg.architecture, input_shape, ssl_cfg.latent_dim)
    if ssl_cfg.latent_dim >= arch.input_dim:
        raise ValueError(
            f"latent_dim {ssl_cfg.latent_dim} must be smaller than the input dimensionality {arch.input_dim}"
        )
    return arch


def rs_encoder(input_shape: Sequence[int], latent_dim: int, seed: int, architecture: str = "cnn-s") -> EncoderArtifact:
    arch = nn.encoder_architecture(architecture, input_shape, latent_dim)
    params = nn.init_params(arch, seed)
    return EncoderArtifact(arch, params, "RS", latent_dim, {"seed": seed, "proxy_hash": None})


def _split(params: Mapping[str, torch.Tensor], arch: nn.Architecture) -> tuple[nn.ParamSet, nn.ParamSet]:
    keys = set(arch.param_shapes())
    return ({k: v for k, v in params.items() if k in keys}, {k: v for k, v in params.items() if k not in keys})


def _sgd_loop(
    params: nn.ParamSet,
    n: int,
    batch: int,
    cfg: nn.TrainConfig,
    loss_fn: Callable[[nn.ParamSet, np.ndarray, int], torch.Tensor],
    after_step: Callable[[nn.ParamSet], None] | None = None,
) -> tuple[nn.ParamSet, list[float]]:
    """Shared mini-batch loop; ``loss_fn(params, idx, epoch)`` returns a batch-mean loss."""
    names = list(params)
    opt = nn.SGD(cfg, names)
    rng = np.random.default_rng(cfg.seed)
    history: list[float] = []
    for epoch in range(cfg.epochs):
        total, seen = 0.0, 0
        for idx in nn.minibatches(n, batch, rng):
            leaves = {k: v.detach().requires_grad_(True) for k, v in params.items()}
            loss = loss_fn(leaves, idx, epoch)
            grads = torch.autograd.grad(loss, [leaves[k] for k in names])
            b = len(idx)
            params = {k: v.detach() for k, v in opt.step(leaves, {k: g * b for k, g in zip(names, grads)}, b).items()}
            if after_step is not None:
                after_step(params)
            total += float(loss.detach()) * b
            seen += b
        history.append(total / max(seen, 1))
    return params, history


# ---------------------------------------------------------------- autoencoders

def block_mask(n: int, shape: Sequence[int], level: float, rng: np.random.Generator, block: int = 4) -> np.ndarray:
    """Binary keep-masks hiding ``round(level * blocks)`` random ``block x block`` patches per image."""
    c, h, w = shape
    by, bx = math.ceil(h / block), math.ceil(w / block)
    nblocks = by * bx
    k = int(round(level * nblocks))
    keep = np.ones((n, nblocks), dtype=np.float32)
    for i in range(n):
        if k:
            keep[i, rng.choice(nblocks, size=k, replace=False)] = 0.0
    grid = keep.reshape(n, by, bx).repeat(block, axis=1).repeat(block, axis=2)[:, :h, :w]
    return np.broadcast_to(grid[:, None], (n, c, h, w)).copy()


def _train_autoencoder(proxy, ssl_cfg, train_cfg, noise_level: float, method: str) -> EncoderArtifact:
    x = torch.as_tensor(stack_images(proxy))
    shape = tuple(x.shape[1:])
    enc = _encoder_arch(shape, ssl_cfg)
    dec = nn.dense_stack("dec", [ssl_cfg.latent_dim, 256, enc.input_dim], final="sigmoid")
    params = nn.init_params(enc, train_cfg.seed)
    params.update(nn.init_params(dec, train_cfg.seed + 1))
    init = nn.copy_params(params)
    mask_rng = np.random.default_rng([train_cfg.seed, 7919])
    masks: dict[int, torch.Tensor] = {}

    def loss_fn(p, idx, epoch):
        xb = x[torch.as_tensor(idx)]
        inp = xb
        if noise_level > 0:
            if epoch not in masks:
                masks.clear()
                masks[epoch] = torch.as_tensor(block_mask(len(x), shape, noise_level, mask_rng))
            inp = xb * masks[epoch][torch.as_tensor(idx)]
        recon = nn.forward(dec, p, nn.forward(enc, p, inp))
        return ((recon - xb.reshape(len(idx), -1)) ** 2).mean()

    params, history = _sgd_loop(params, len(x), train_cfg.batch_size, train_cfg, loss_fn)
    if train_cfg.epochs == 0:
        params = init
    with torch.no_grad():
        clean = float(((nn.forward(dec, params, nn.forward(enc, params, x)) - x.reshape(len(x), -1)) ** 2).mean())
    enc_params, _ = _split(params, enc)
    prov = _provenance(proxy, ssl_cfg, train_cfg, None, history)
    prov["clean_reconstruction_mse"] = clean
    return EncoderArtifact(enc, enc_params, method, ssl_cfg.latent_dim, prov)


def train_bae(proxy: Sequence[Sample], ssl_cfg: SSLConfig, train_cfg: nn.TrainConfig) -> EncoderArtifact:
    """Bottleneck autoencoder; returns the encoder half. Loss is per-pixel MSE."""
    return _train_autoencoder(proxy, ssl_cfg, train_cfg, 0.0, "BAE")


def train_dae(proxy: Sequence[Sample], ssl_cfg: SSLConfig, train_cfg: nn.TrainConfig) -> EncoderArtifact:
    """Denoising autoencoder: reconstruct clean ``x`` from block-masked ``x``.

    Masks cover ``noise_level`` of the 4x4 blocks and are redrawn every epoch.
    """
    return _train_autoencoder(proxy, ssl_cfg, train_cfg, ssl_cfg.noise_level, "DAE")


# ---------------------------------------------------------------- contrastive

def _projector(ssl_cfg: SSLConfig) -> nn.Architecture:
    return nn.dense_stack("proj", [ssl_cfg.latent_dim, ssl_cfg.latent_dim, ssl_cfg.projection_dim])


def train_moco(
    proxy: Sequence[Sample], ssl_cfg: SSLConfig, train_cfg: nn.TrainConfig, aug_cfg: AugmentConfig,
    audit: Callable[[nn.ParamSet, nn.ParamSet, nn.ParamSet], None] | None = None,
) -> EncoderArtifact:
    """MoCo pretraining with a momentum key encoder and a FIFO negative queue.

    ``audit(theta_k_before, theta_q_after_step, theta_k_after)`` is called after
    every update when given (used by tests to check the momentum rule).
    """
    if ssl_cfg.queue_size < train_cfg.batch_size:
        raise ValueError(f"queue_size {ssl_cfg.queue_size} is smaller than the batch size {train_cfg.batch_size}")
    x = torch.as_tensor(stack_images(proxy))
    enc = _encoder_arch(tuple(x.shape[1:]), ssl_cfg)
    net = enc.then(_projector(ssl_cfg), name=f"{enc.name}+proj")
    tau = ssl_cfg.temperature("MoCo")
    theta_q = nn.init_params(net, train_cfg.seed)
    theta_k = nn.copy_params(theta_q)

    aug_rng = np.random.default_rng([aug_cfg.seed, train_cfg.seed, 1])
    queue_rng = np.random.default_rng([train_cfg.seed, 2])
    with torch.no_grad():
        pick = queue_rng.choice(len(x), size=ssl_cfg.queue_size, replace=len(x) < ssl_cfg.queue_size)
        queue = F.normalize(nn.forward(net, theta_k, x[torch.as_tensor(pick)]), dim=1)
    state = {"k": theta_k, "queue": queue, "keys": None}

    def loss_fn(p, idx, epoch):
        xb = x[torch.as_tensor(idx)]
        v1 = augment_batch(xb, aug_cfg, aug_rng)
        v2 = augment_batch(xb, aug_cfg, aug_rng)
        q = F.normalize(nn.forward(net, p, v1), dim=1)
        with torch.no_grad():
            k = F.normalize(nn.forward(net, state["k"], v2), dim=1)
        state["keys"] = k
        return info_nce(q, k, state["queue"], tau)

    def after_step(p):
        before = state["k"]
        state["k"] = moco_momentum_update(before, p, ssl_cfg.momentum)
        if audit is not None:
            audit(before, p, state["k"])
        state["queue"] = torch.cat([state["queue"], state["keys"]])[-ssl_cfg.queue_size:]

    theta_q, history = _sgd_loop(theta_q, len(x), train_cfg.batch_size, train_cfg, loss_fn, after_step)
    enc_params, _ = _split(theta_q, enc)
    return EncoderArtifact(enc, enc_params, "MoCo", ssl_cfg.latent_dim,
                           _provenance(proxy, ssl_cfg, train_cfg, aug_cfg, history))


def train_simclr(
    proxy: Sequence[Sample], ssl_cfg: SSLConfig, train_cfg: nn.TrainConfig, aug_cfg: AugmentConfig
) -> EncoderArtifact:
    """SimCLR: N samples per step, two views each, NT-Xent through a projection head.

    The step size is ``ssl_cfg.batch_N``; the projection head is dropped from
    the returned artifact.
    """
    if ssl_cfg.batch_N < 2:
        raise ValueError("SimCLR needs batch_N >= 2 (with one pair the loss is identically zero)")
    x = torch.as_tensor(stack_images(proxy))
    enc = _encoder_arch(tuple(x.shape[1:]), ssl_cfg)
    net = enc.then(_projector(ssl_cfg), name=f"{enc.name}+proj")
    tau = ssl_cfg.temperature("SimCLR")
    params = nn.init_params(net, train_cfg.seed)
    aug_rng = np.random.default_rng([aug_cfg.seed, train_cfg.seed, 1])

    def loss_fn(p, idx, epoch):
        if len(idx) < 2:
            return sum(v.sum() * 0.0 for v in p.values())
        xb = x[torch.as_tensor(idx)]
        views = torch.cat([augment_batch(xb, aug_cfg, aug_rng), augment_batch(xb, aug_cfg, aug_rng)])
        return nt_xent(nn.forward(net, p, views), tau)

    params, history = _sgd_loop(params, len(x), ssl_cfg.batch_N, train_cfg, loss_fn)
    enc_params, _ = _split(params, enc)
    return EncoderArtifact(enc, enc_params, "SimCLR", ssl_cfg.latent_dim,
                           _provenance(proxy, ssl_cfg, train_cfg, aug_cfg, history))


def pretrain(
    method: str,
    proxy: Sequence[Sample],
    ssl_cfg: SSLConfig | None = None,
    train_cfg: nn.TrainConfig | None = None,
    aug_cfg: AugmentConfig | None = None,
) -> EncoderArtifact:
    """Dispatch to the trainer for ``method``."""
    method = canonical_method(method)
    ssl_cfg = ssl_cfg or SSLConfig()
    train_cfg = train_cfg or nn.TrainConfig()
    aug_cfg = aug_cfg or AugmentConfig()
    if method == "RS":
        shape = proxy[0].image.shape
        art = rs_encoder(shape, ssl_cfg.latent_dim, train_cfg.seed, ssl_cfg.architecture)
        art.provenance = _provenance(proxy, ssl_cfg, replace(train_cfg, epochs=0), None, [])
        return art
    if method == "BAE":
        return train_bae(proxy, ssl_cfg, train_cfg)
    if method == "DAE":
        return train_dae(proxy, ssl_cfg, train_cfg)
    if method == "MoCo":
        return train_moco(proxy, ssl_cfg, train_cfg, aug_cfg)
    return train_simclr(proxy, ssl_cfg, train_cfg, aug_cfg)
