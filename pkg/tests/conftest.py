import pytest
import torch

from prextract import nn
from prextract.datasets import labels_of, make_split, stack_images

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_split():
    """4 classes, 8x8 images: small enough for per-test training."""
    return make_split("IID", num_classes=4, victim_per_class=40, proxy_per_class=30, test_per_class=15,
                      image_shape=(3, 8, 8), seed=0)


@pytest.fixture(scope="session")
def tiny_victim(tiny_split):
    arch = nn.classifier_architecture("cnn-s", (3, 8, 8), 4, latent_dim=16)
    model, _ = nn.train_classifier(arch, stack_images(tiny_split.victim_train), labels_of(tiny_split.victim_train),
                                   nn.TrainConfig(0.02, 16, 15, seed=3, momentum=0.9))
    return model
