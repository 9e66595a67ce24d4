"""Shared fixtures and the central-difference gradient oracle."""

from __future__ import annotations

import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from brainfuse.data import SynthConfig, synth_cases
from brainfuse.segnet import NetworkConfig
from brainfuse.semantic import SemanticConfig

# Reduced widths for fast end-to-end runs; same topology as the defaults.
SMALL_NET = NetworkConfig(encoder_channels=(4, 8, 12, 16), bottleneck_channels=20, head_hidden=8,
                          norm_groups=4)
SMALL_SEM = SemanticConfig(embed_dim=16, shared_dim=8, num_heads=2, slice_hidden=4, image_size=16,
                           attention_hidden=4)


def central_difference_error(fn, tensors, eps: float = 1e-3, seed: int = 0) -> float:
    """Relative error between autograd and central differences of ``fn``.

    ``fn`` maps nothing to a tensor; ``tensors`` are the float64 leaves it
    reads (parameters and inputs). The scalar checked is a fixed random
    projection of the output, so every output element contributes.
    """
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        w = torch.randn(fn().shape, generator=gen, dtype=torch.float64)

    def scalar():
        return (fn() * w).sum()

    for t in tensors:
        t.grad = None
    scalar().backward()
    analytic = torch.cat([t.grad.flatten() for t in tensors])
    numeric = []
    with torch.no_grad():
        for t in tensors:
            flat = t.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                hi = scalar().item()
                flat[i] = orig - eps
                lo = scalar().item()
                flat[i] = orig
                numeric.append((hi - lo) / (2 * eps))
    numeric = torch.tensor(numeric, dtype=torch.float64)
    scale = max(analytic.norm().item(), numeric.norm().item(), 1e-12)
    return (analytic - numeric).norm().item() / scale


def relu_margin(fn) -> float:
    """Smallest |input| seen by any ReLU while evaluating ``fn``.

    Central differences are only meaningful away from ReLU kinks; tests use
    this to pick evaluation points where no pre-activation sits within the
    perturbation radius of zero.
    """
    seen = [math.inf]
    orig = F.relu

    def recording(x, inplace=False):
        if x.numel():
            seen[0] = min(seen[0], x.detach().abs().min().item())
        return orig(x, inplace=inplace)

    F.relu = recording
    try:
        with torch.no_grad():
            fn()
    finally:
        F.relu = orig
    return seen[0]


def smooth_point(make, min_margin: float = 1e-2, tries: int = 500):
    """First ``make(seed) -> (fn, leaves)`` whose ReLU margin exceeds ``min_margin``."""
    for seed in range(tries):
        fn, leaves = make(seed)
        if relu_margin(fn) >= min_margin:
            return fn, leaves
    raise RuntimeError("no kink-free evaluation point found")


def module_leaves(module: torch.nn.Module, *inputs: torch.Tensor) -> list[torch.Tensor]:
    return [p for p in module.parameters() if p.requires_grad] + [x for x in inputs if x.requires_grad]


@pytest.fixture
def smooth():
    return smooth_point


@pytest.fixture
def gradcheck():
    return central_difference_error


@pytest.fixture(scope="session")
def synth16():
    return synth_cases(2, 0, SynthConfig(shape=(16, 16, 16)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
