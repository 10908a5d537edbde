"""Small functional neural-network stack.

Parameters live in a plain ``ParamSet`` (ordered ``name -> torch.Tensor`` map)
and an ``Architecture`` describes how to apply them, so parameter sets can be
copied, blended (momentum encoders), frozen or serialized without touching any
module state. Autograd comes from torch; everything else (layer shapes, init,
losses, the SGD update and the checkpoint format) is defined here.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

ParamSet = dict[str, torch.Tensor]

CHECKPOINT_MAGIC = b"PRXCKPT\x00"
CHECKPOINT_VERSION = 1

# Feature rescaling h * sqrt(d) / sqrt(|h|^2 + eps): unit-scale features for any
# |h| >> 1, while the gradient stays bounded when a sample's activations vanish.
L2NORM_EPS = 1.0
LAYER_KINDS = ("conv", "dense", "relu", "pool", "flatten", "sigmoid", "l2norm")


class ShapeError(ValueError):
    """Input does not fit the layer it is fed to."""


@dataclass(frozen=True)
class Layer:
    kind: str
    name: str = ""
    in_dim: int = 0
    out_dim: int = 0
    kernel: int = 0
    stride: int = 1

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")

    @property
    def has_params(self) -> bool:
        return self.kind in ("conv", "dense")

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        if self.kind == "conv":
            return {
                f"{self.name}.weight": (self.out_dim, self.in_dim, self.kernel, self.kernel),
                f"{self.name}.bias": (self.out_dim,),
            }
        if self.kind == "dense":
            return {
                f"{self.name}.weight": (self.out_dim, self.in_dim),
                f"{self.name}.bias": (self.out_dim,),
            }
        return {}

    def to_dict(self) -> dict:
        return {"kind": self.kind, "name": self.name, "in": self.in_dim, "out": self.out_dim,
                "k": self.kernel, "s": self.stride}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Layer":
        return cls(d["kind"], d.get("name", ""), d.get("in", 0), d.get("out", 0), d.get("k", 0), d.get("s", 1))


@dataclass(frozen=True)
class Architecture:
    """A sequential network descriptor: input shape plus an ordered layer list."""

    name: str
    input_shape: tuple[int, ...]
    layers: tuple[Layer, ...]

    def __post_init__(self):
        names = [l.name for l in self.layers if l.has_params]
        if len(names) != len(set(names)):
            raise ValueError(f"duplicate layer names in architecture {self.name!r}")

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        for layer in self.layers:
            shapes.update(layer.param_shapes())
        return shapes

    @property
    def input_dim(self) -> int:
        return int(np.prod(self.input_shape))

    @property
    def output_dim(self) -> int:
        for layer in reversed(self.layers):
            if layer.has_params:
                return layer.out_dim
        return self.input_dim

    def then(self, other: "Architecture", name: str | None = None) -> "Architecture":
        """Sequential composition; ``other`` consumes this network's output."""
        if other.input_shape != (self.output_dim,):
            raise ShapeError(
                f"cannot stack {other.name!r} (input {other.input_shape}) on "
                f"{self.name!r} (output {self.output_dim})"
            )
        return Architecture(name or f"{self.name}+{other.name}", self.input_shape, self.layers + other.layers)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "layers": [l.to_dict() for l in self.layers],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Architecture":
        return cls(d["name"], tuple(d["input_shape"]), tuple(Layer.from_dict(l) for l in d["layers"]))


# ---------------------------------------------------------------- registry

ARCHITECTURES = ("cnn-s", "mlp-s")


def encoder_architecture(name: str, input_shape: Sequence[int], latent_dim: int) -> Architecture:
    """Feature extractor of a registry network (everything but the final ``fc``).

    ``cnn-s``: two stride-2 3x3 conv/relu stages and a dense projection to
    ``latent_dim``; ``mlp-s``: two dense layers.  Adding the classification
    head gives 2 conv + 2 dense and 3 dense layers respectively.
    """
    input_shape = tuple(int(s) for s in input_shape)
    if name == "cnn-s":
        c, h, w = input_shape
        if h % 4 or w % 4:
            raise ShapeError(f"cnn-s needs height/width divisible by 4, got {input_shape}")
        layers = (
            Layer("conv", "conv1", c, 16, 3, stride=2),
            Layer("relu"),
            Layer("conv", "conv2", 16, 32, 3, stride=2),
            Layer("relu"),
            Layer("flatten"),
            Layer("dense", "enc_fc", 32 * (h // 4) * (w // 4), latent_dim),
            Layer("relu"),
            Layer("l2norm"),
        )
    elif name == "mlp-s":
        d = int(np.prod(input_shape))
        layers = (
            Layer("flatten"),
            Layer("dense", "enc_fc1", d, 128),
            Layer("relu"),
            Layer("dense", "enc_fc2", 128, latent_dim),
            Layer("relu"),
            Layer("l2norm"),
        )
    else:
        raise ValueError(f"unknown architecture {name!r}; expected one of {ARCHITECTURES}")
    return Architecture(name, input_shape, layers)


def dense_stack(name: str, dims: Sequence[int], final: str | None = None) -> Architecture:
    """Dense layers ``dims[0] -> ... -> dims[-1]`` with relu between them."""
    layers: list[Layer] = []
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        layers.append(Layer("dense", f"{name}{i + 1}" if len(dims) > 2 else name, a, b))
        if i < len(dims) - 2:
            layers.append(Layer("relu"))
    if final is not None:
        layers.append(Layer(final))
    return Architecture(name, (dims[0],), tuple(layers))


def classifier_architecture(
    name: str, input_shape: Sequence[int], num_classes: int, latent_dim: int = 64
) -> Architecture:
    enc = encoder_architecture(name, input_shape, latent_dim)
    return enc.then(dense_stack("fc", [latent_dim, num_classes]), name=name)


# ---------------------------------------------------------------- params

def init_params(arch: Architecture, seed: int, dtype: torch.dtype = torch.float32) -> ParamSet:
    """Fan-in scaled uniform init, U(-sqrt(6/fan_in), sqrt(6/fan_in)); zero biases."""
    rng = np.random.default_rng(seed)
    params: ParamSet = {}
    for pname, shape in arch.param_shapes().items():
        if pname.endswith(".bias"):
            arr = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = math.sqrt(6.0 / fan_in)
            arr = rng.uniform(-bound, bound, size=shape)
        params[pname] = torch.as_tensor(arr, dtype=dtype)
    return params


def copy_params(params: Mapping[str, torch.Tensor]) -> ParamSet:
    return {k: v.detach().clone() for k, v in params.items()}


def cast_params(params: Mapping[str, torch.Tensor], dtype: torch.dtype) -> ParamSet:
    return {k: v.detach().to(dtype).clone() for k, v in params.items()}


def params_equal(a: Mapping[str, torch.Tensor], b: Mapping[str, torch.Tensor]) -> bool:
    return a.keys() == b.keys() and all(torch.equal(a[k], b[k]) for k in a)


def num_params(params: Mapping[str, torch.Tensor]) -> int:
    return sum(int(v.numel()) for v in params.values())


# ---------------------------------------------------------------- forward

def forward(arch: Architecture, params: Mapping[str, torch.Tensor], x: torch.Tensor) -> torch.Tensor:
    """Apply ``arch`` to a batch ``x`` of shape ``(n, *arch.input_shape)``."""
    if tuple(x.shape[1:]) != arch.input_shape:
        raise ShapeError(
            f"layer 'input' of {arch.name!r}: expected batch shape (n, {', '.join(map(str, arch.input_shape))}), "
            f"got {tuple(x.shape)}"
        )
    h = x
    for layer in arch.layers:
        kind = layer.kind
        if kind == "conv":
            if h.dim() != 4 or h.shape[1] != layer.in_dim:
                raise ShapeError(
                    f"layer {layer.name!r}: expected (n, {layer.in_dim}, h, w) input, got {tuple(h.shape)}"
                )
            h = F.conv2d(h, params[f"{layer.name}.weight"], params[f"{layer.name}.bias"],
                         stride=layer.stride, padding=layer.kernel // 2)
        elif kind == "dense":
            if h.dim() != 2 or h.shape[1] != layer.in_dim:
                raise ShapeError(f"layer {layer.name!r}: expected (n, {layer.in_dim}) input, got {tuple(h.shape)}")
            h = F.linear(h, params[f"{layer.name}.weight"], params[f"{layer.name}.bias"])
        elif kind == "relu":
            h = torch.relu(h)
        elif kind == "sigmoid":
            h = torch.sigmoid(h)
        elif kind == "l2norm":
            h = h * (math.sqrt(h.shape[1]) / torch.sqrt((h * h).sum(dim=1, keepdim=True) + L2NORM_EPS))
        elif kind == "pool":
            if h.dim() != 4 or h.shape[2] % 2 or h.shape[3] % 2:
                raise ShapeError(f"pool layer: expected even spatial dims, got {tuple(h.shape)}")
            h = F.max_pool2d(h, 2)
        elif kind == "flatten":
            h = h.reshape(h.shape[0], -1)
    return h


def softmax(logits: torch.Tensor) -> torch.Tensor:
    return torch.softmax(logits, dim=-1)


def log_softmax(logits: torch.Tensor) -> torch.Tensor:
    return logits - torch.logsumexp(logits, dim=-1, keepdim=True)


def cross_entropy(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Batch mean of ``-sum_i y_i log softmax(logits)_i`` for one-hot or soft targets."""
    if logits.shape != targets.shape:
        raise ValueError(f"logits {tuple(logits.shape)} and targets {tuple(targets.shape)} differ in shape")
    sums = targets.detach().sum(dim=-1)
    if torch.any((sums - 1.0).abs() > 1e-6) or torch.any(targets.detach() < 0):
        raise ValueError("every target row must be a probability vector summing to 1")
    return -(targets * log_softmax(logits)).sum(dim=-1).mean()


def one_hot(labels: Sequence[int] | np.ndarray, num_classes: int, dtype=torch.float32) -> torch.Tensor:
    return F.one_hot(torch.as_tensor(np.asarray(labels), dtype=torch.long), num_classes).to(dtype)


# ---------------------------------------------------------------- training

@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    batch_size: int = 32
    epochs: int = 20
    seed: int = 0
    momentum: float = 0.0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")


def sgd_step(
    params: Mapping[str, torch.Tensor],
    grads: Mapping[str, torch.Tensor],
    cfg: TrainConfig,
    batch_size: int | None = None,
) -> ParamSet:
    """One SGD update ``p - (lr / b) * g`` where ``g`` is the gradient summed over the batch.

    ``batch_size`` is the effective size of the batch the gradients were
    accumulated over (the last batch of an epoch may be short); defaults to
    ``cfg.batch_size``. Parameters without a gradient entry are an error.
    """
    b = cfg.batch_size if batch_size is None else batch_size
    missing = [k for k in params if k not in grads]
    if missing:
        raise KeyError(f"no gradient for parameter(s) {missing}")
    scale = cfg.learning_rate / b
    with torch.no_grad():
        return {k: p - scale * grads[k] for k, p in params.items()}


class SGD:
    """Mini-batch SGD over a subset of a ParamSet, optionally with heavy-ball momentum.

    With ``momentum == 0`` each update is exactly :func:`sgd_step`.
    """

    def __init__(self, cfg: TrainConfig, trainable: Iterable[str]):
        self.cfg = cfg
        self.trainable = list(trainable)
        self._velocity: dict[str, torch.Tensor] = {}

    def step(self, params: ParamSet, summed_grads: Mapping[str, torch.Tensor], batch_size: int) -> ParamSet:
        sub = {k: params[k] for k in self.trainable}
        if self.cfg.momentum:
            mixed = {}
            for k in self.trainable:
                g = summed_grads[k] / batch_size
                v = self._velocity.get(k)
                v = g if v is None else self.cfg.momentum * v + g
                self._velocity[k] = v
                mixed[k] = v
            updated = sgd_step(sub, mixed, self.cfg, batch_size=1)
        else:
            updated = sgd_step(sub, summed_grads, self.cfg, batch_size=batch_size)
        out = dict(params)
        out.update(updated)
        return out


def minibatches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    b = min(batch_size, n)
    return [order[i:i + b] for i in range(0, n, b)]


def fit(
    arch: Architecture,
    params: Mapping[str, torch.Tensor],
    x: torch.Tensor,
    targets: torch.Tensor,
    cfg: TrainConfig,
    trainable: Iterable[str] | None = None,
) -> tuple[ParamSet, list[float]]:
    """Train on ``(x, targets)`` with CE loss; returns new params and per-epoch mean loss.

    Parameters outside ``trainable`` are left bitwise untouched.
    """
    params = copy_params(params)
    names = list(params) if trainable is None else [k for k in params if k in set(trainable)]
    opt = SGD(cfg, names)
    rng = np.random.default_rng(cfg.seed)
    history: list[float] = []
    n = x.shape[0]
    for _ in range(cfg.epochs):
        total = 0.0
        for idx in minibatches(n, cfg.batch_size, rng):
            idx_t = torch.as_tensor(idx)
            leaves = {k: params[k].requires_grad_(True) for k in names}
            loss = cross_entropy(forward(arch, params, x[idx_t]), targets[idx_t])
            gs = torch.autograd.grad(loss, [leaves[k] for k in names])
            b = len(idx)
            summed = {k: g * b for k, g in zip(names, gs)}
            params = {k: v.detach() for k, v in opt.step(params, summed, b).items()}
            total += float(loss.detach()) * b
        history.append(total / n)
    return params, history


# ---------------------------------------------------------------- classifier

@dataclass
class Classifier:
    """An architecture with concrete parameters; ``trained`` marks fitted models."""

    arch: Architecture
    params: ParamSet
    trained: bool = False
    eval_batch: int = field(default=512, repr=False)

    @property
    def num_classes(self) -> int:
        return self.arch.output_dim

    @property
    def dtype(self) -> torch.dtype:
        return next(iter(self.params.values())).dtype

    def logits(self, images: np.ndarray | torch.Tensor) -> torch.Tensor:
        x = torch.as_tensor(np.asarray(images) if not isinstance(images, torch.Tensor) else images)
        x = x.to(self.dtype)
        with torch.no_grad():
            chunks = [forward(self.arch, self.params, x[i:i + self.eval_batch])
                      for i in range(0, x.shape[0], self.eval_batch)]
        if not chunks:
            return torch.zeros((0, self.num_classes), dtype=self.dtype)
        return torch.cat(chunks)

    def posterior(self, images) -> np.ndarray:
        return softmax(self.logits(images)).double().numpy()

    def predict(self, images) -> np.ndarray:
        # argmax picks the lowest index among ties
        return self.logits(images).argmax(dim=-1).numpy()


def train_classifier(
    arch: Architecture, images: np.ndarray, labels: Sequence[int], cfg: TrainConfig,
    dtype: torch.dtype = torch.float32,
) -> tuple[Classifier, list[float]]:
    params = init_params(arch, cfg.seed, dtype)
    x = torch.as_tensor(np.asarray(images), dtype=dtype)
    y = one_hot(labels, arch.output_dim, dtype)
    params, history = fit(arch, params, x, y, cfg)
    return Classifier(arch, params, trained=True), history


# ---------------------------------------------------------------- gradient check

@dataclass(frozen=True)
class GradCheckReport:
    max_rel_error: float
    worst_param: str
    n_checked: int

    def ok(self, tolerance: float) -> bool:
        return self.max_rel_error < tolerance


def grad_check(
    loss_fn: Callable[[Mapping[str, torch.Tensor]], torch.Tensor],
    params: Mapping[str, torch.Tensor],
    h: float = 1e-5,
    max_entries: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare autograd gradients of ``loss_fn(params)`` with central differences.

    Relative error per entry is ``|a - n| / max(|a|, |n|, 1e-8)``. Parameters
    are promoted to float64. ``max_entries`` caps the number of entries probed
    (sampled uniformly per tensor) for larger models.
    """
    base = cast_params(params, torch.float64)
    leaves = {k: v.clone().requires_grad_(True) for k, v in base.items()}
    loss = loss_fn(leaves)
    if loss.requires_grad:
        analytic = torch.autograd.grad(loss, list(leaves.values()), allow_unused=True)
    else:
        analytic = [None] * len(leaves)
    analytic = {
        k: (torch.zeros_like(base[k]) if g is None else g.detach()) for k, g in zip(leaves, analytic)
    }

    rng = np.random.default_rng(seed)
    total = sum(v.numel() for v in base.values())
    worst, worst_name, checked = 0.0, "", 0
    with torch.no_grad():
        for name, tensor in base.items():
            flat_n = tensor.numel()
            if max_entries is not None and total > max_entries:
                take = max(1, int(round(max_entries * flat_n / total)))
                idx = rng.choice(flat_n, size=min(take, flat_n), replace=False)
            else:
                idx = np.arange(flat_n)
            for i in idx:
                probe = dict(base)
                up = tensor.clone().reshape(-1)
                down = tensor.clone().reshape(-1)
                up[i] += h
                down[i] -= h
                probe[name] = up.reshape(tensor.shape)
                f_up = float(loss_fn(probe))
                probe[name] = down.reshape(tensor.shape)
                f_down = float(loss_fn(probe))
                numeric = (f_up - f_down) / (2 * h)
                a = float(analytic[name].reshape(-1)[i])
                err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
                checked += 1
                if err > worst:
                    worst, worst_name = err, f"{name}[{int(i)}]"
    return GradCheckReport(worst, worst_name, checked)


# ---------------------------------------------------------------- checkpoints

def _header_bytes(arch: Architecture, params: Mapping[str, torch.Tensor]) -> bytes:
    header = {
        "format_version": CHECKPOINT_VERSION,
        "architecture": arch.to_dict(),
        "shapes": [[k, list(v.shape)] for k, v in params.items()],
    }
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def dump_checkpoint(arch: Architecture, params: Mapping[str, torch.Tensor]) -> bytes:
    """Serialize to ``magic | u32 header length | JSON header | float64 LE blocks``."""
    expected = arch.param_shapes()
    for k, v in params.items():
        if k in expected and tuple(v.shape) != expected[k]:
            raise ShapeError(f"parameter {k!r} has shape {tuple(v.shape)}, architecture says {expected[k]}")
    head = _header_bytes(arch, params)
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", len(head)))
    buf.write(head)
    for v in params.values():
        buf.write(v.detach().to(torch.float64).numpy().astype("<f8", copy=False).tobytes())
    return buf.getvalue()


def load_checkpoint_bytes(data: bytes, dtype: torch.dtype = torch.float64) -> tuple[Architecture, ParamSet]:
    if data[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError("not a checkpoint file (bad magic)")
    off = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack_from("<I", data, off)
    off += 4
    header = json.loads(data[off:off + hlen].decode("utf-8"))
    off += hlen
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header.get('format_version')}")
    arch = Architecture.from_dict(header["architecture"])
    params: ParamSet = {}
    for name, shape in header["shapes"]:
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(shape)
        off += 8 * count
        params[name] = torch.as_tensor(arr.copy(), dtype=dtype)
    if off != len(data):
        raise ValueError("trailing bytes after parameter blocks")
    return arch, params


def save_checkpoint(path, arch: Architecture, params: Mapping[str, torch.Tensor]) -> None:
    with open(path, "wb") as fh:
        fh.write(dump_checkpoint(arch, params))


def load_checkpoint(path, dtype: torch.dtype = torch.float64) -> tuple[Architecture, ParamSet]:
    with open(path, "rb") as fh:
        return load_checkpoint_bytes(fh.read(), dtype)
