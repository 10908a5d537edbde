"""Shared builders for small synthetic test inputs."""

import numpy as np
import torch

from prextract import nn
from prextract.datasets import LabeledSample, Sample


def random_samples(n, shape=(3, 16, 16), seed=0, id_start=0):
    rng = np.random.default_rng(seed)
    return [Sample(id_start + i, rng.uniform(0, 1, size=shape).astype(np.float32)) for i in range(n)]


def random_labeled(n, num_classes, shape=(3, 16, 16), seed=0, id_start=0):
    rng = np.random.default_rng(seed + 1)
    return [LabeledSample(s, int(rng.integers(num_classes))) for s in random_samples(n, shape, seed, id_start)]


def linear_classifier(weight, bias=None, trained=True):
    """Classifier computing ``W x + b`` on flattened (1, 1, d) images."""
    weight = torch.as_tensor(weight, dtype=torch.float64)
    out_dim, d = weight.shape
    arch = nn.Architecture("linear", (1, 1, d), (nn.Layer("flatten"), nn.Layer("dense", "fc", d, out_dim)))
    b = torch.zeros(out_dim, dtype=torch.float64) if bias is None else torch.as_tensor(bias, dtype=torch.float64)
    return nn.Classifier(arch, {"fc.weight": weight, "fc.bias": b}, trained=trained)


# a campaign small enough to run in about a second
TINY = {
    "schema_version": 1,
    "dataset": {"num_classes": 4, "victim_per_class": 40, "proxy_per_class": 30, "test_per_class": 10,
                "image_shape": [3, 8, 8]},
    "victim": {"latent_dim": 16, "train": {"epochs": 8}},
    "ssl": {"latent_dim": 16, "batch_N": 16, "queue_size": 32},
    "methods": {"RS": {}, "SimCLR": {"train": {"epochs": 2, "batch_size": 16}}},
    "extraction": {"budgets": [20, 40], "itera": 2, "train": {"epochs": 3}},
    "epsilons": [0.03, 0.24],
    "seeds": [0, 1],
}
