"""Shared fixtures and small builders used across the test modules."""

import numpy as np
import pytest
import torch

from cohetseg.backbone import BackboneConfig, PhnnNet
from cohetseg.synthdata import SynthConfig, generate_datasets


@pytest.fixture(scope="session", autouse=True)
def _single_thread():
    # One BLAS/conv thread keeps reductions bit-reproducible across runs
    # inside the same session, which the determinism tests rely on.
    torch.set_num_threads(1)


def tiny_backbone_config(**overrides) -> BackboneConfig:
    """A few-hundred-parameter five-stage config for closed-form tests."""
    kw = dict(channels=(2, 2, 2, 2, 2), downsample=(1, 2, 1, 2, 1),
              blocks_per_stage=1, in_channels=1, n_classes=3)
    kw.update(overrides)
    return BackboneConfig(**kw)


def tiny_phnn(seed: int = 0, **overrides) -> PhnnNet:
    torch.manual_seed(seed)
    return PhnnNet(tiny_backbone_config(**overrides))


def tiny_synth_config(**overrides) -> SynthConfig:
    """Six-slice 16x16 phantoms so training smoke tests finish in seconds."""
    kw = dict(n_source_train=3, n_source_val=2, n_target_train=4,
              n_target_val=2, n_target_test=2, shape=(6, 16, 16))
    kw.update(overrides)
    return SynthConfig(**kw)


@pytest.fixture(scope="session")
def tiny_datasets():
    return generate_datasets(tiny_synth_config())


def random_prob_maps(rng: np.random.Generator, n_maps: int,
                     shape=(1, 3, 6, 6)) -> list[torch.Tensor]:
    """Random softmax maps; probabilities stay well above the log clamps."""
    out = []
    for _ in range(n_maps):
        logits = rng.normal(0.0, 1.5, size=shape)
        out.append(torch.softmax(torch.from_numpy(logits), dim=1))
    return out
