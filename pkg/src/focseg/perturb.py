"""Multiplicative uniform noise injected into intermediate encoder features."""
from __future__ import annotations

from typing import Sequence

import numpy as np
import torch

DEFAULT_NOISE_BOUND = 0.3


def _inner_bound(bound: float, dtype: torch.dtype) -> float:
    # largest value representable in ``dtype`` that does not exceed ``bound``
    np_dtype = torch.empty((), dtype=dtype).numpy().dtype
    b = np_dtype.type(bound)
    if float(b) > bound:
        b = np.nextafter(b, np_dtype.type(0))
    return float(b)


def sample_noise(
    shape: Sequence[int],
    seed: int | Sequence[int],
    bound: float = DEFAULT_NOISE_BOUND,
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    """Noise tensor with i.i.d. elements uniform on ``[-bound, bound]``.

    ``seed`` may be an int or a sequence of ints such as ``(global_seed, step)``;
    the same seed and shape always give identical values.
    """
    shape = tuple(int(s) for s in shape)
    if not shape or any(s <= 0 for s in shape):
        raise ValueError(f"noise shape must have positive extents, got {shape}")
    if bound < 0:
        raise ValueError("noise bound must be nonnegative")
    rng = np.random.default_rng(seed)
    values = rng.uniform(-bound, bound, size=shape)
    b = _inner_bound(bound, dtype)
    return torch.from_numpy(values).to(dtype).clamp_(-b, b)


def inject(z_in: torch.Tensor, noise: torch.Tensor) -> torch.Tensor:
    """Return ``z_in * noise + z_in``; differentiable in ``z_in`` only."""
    noise = torch.as_tensor(noise)
    if tuple(z_in.shape) != tuple(noise.shape):
        raise ValueError(f"shape mismatch: features {tuple(z_in.shape)} vs noise {tuple(noise.shape)}")
    noise = noise.detach().to(dtype=z_in.dtype, device=z_in.device)
    return z_in * noise + z_in
