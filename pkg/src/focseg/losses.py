"""Supervised and consistency losses plus the two training schedules."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import torch
import torch.nn.functional as F

PROB_EPS = 1e-7


@dataclass
class LossWeights:
    alpha: float = 0.6
    omega_u: float = 0.2
    ramp_frac: float = 0.3
    eta_start: float = 0.5
    eta_end: float = 0.9
    anneal_frac: float = 0.3

    def __post_init__(self):
        if self.alpha < 0 or self.omega_u < 0:
            raise ValueError("alpha and omega_u must be nonnegative")
        if not (0 < self.ramp_frac <= 1 and 0 < self.anneal_frac <= 1):
            raise ValueError("ramp_frac and anneal_frac must lie in (0, 1]")
        if not (0 <= self.eta_start <= self.eta_end <= 1):
            raise ValueError("need 0 <= eta_start <= eta_end <= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class LossBreakdown:
    l_s: float
    l_up: float
    l_uf: float
    l_cons: float
    lambda_t: float
    total: float
    masked_pixel_fraction: float = 0.0


def _check_same_shape(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def bootstrapped_ce(
    pred_probs: torch.Tensor, labels: torch.Tensor, eta: float, return_fraction: bool = False
):
    """Cross-entropy over pixels whose true-class probability is below ``eta``.

    ``pred_probs`` has shape (N, C, H, W) and ``labels`` (N, H, W) with integer
    class ids. The mean is taken over contributing pixels only; an empty set
    gives exactly 0.
    """
    if pred_probs.dim() != 4 or labels.shape != (pred_probs.shape[0], *pred_probs.shape[2:]):
        raise ValueError(
            f"shape mismatch: probs {tuple(pred_probs.shape)} vs labels {tuple(labels.shape)}"
        )
    with torch.no_grad():
        if not torch.isfinite(pred_probs).all() or pred_probs.min() < 0 or pred_probs.max() > 1:
            raise ValueError("probabilities must lie in [0, 1]")
    labels = labels.long()
    if labels.numel() and (labels.min() < 0 or labels.max() >= pred_probs.shape[1]):
        raise ValueError("labels out of range for the class dimension")
    p_true = pred_probs.gather(1, labels.unsqueeze(1)).squeeze(1)
    keep = p_true.detach() < eta
    n_keep = int(keep.sum())
    if n_keep == 0:
        loss = pred_probs.sum() * 0.0
    else:
        loss = -torch.log(p_true[keep].clamp(PROB_EPS, 1 - PROB_EPS)).mean()
    if return_fraction:
        return loss, n_keep / max(labels.numel(), 1)
    return loss


def output_consistency(main_out: torch.Tensor, aux_out: torch.Tensor) -> torch.Tensor:
    """Mean squared difference; ``main_out`` is used as a fixed target."""
    _check_same_shape(main_out, aux_out)
    return F.mse_loss(aux_out, main_out.detach())


def feature_consistency(
    main_taps: Sequence[torch.Tensor], aux_taps: Sequence[torch.Tensor]
) -> torch.Tensor:
    """Sum over decoder depths of per-depth mean squared differences."""
    if len(main_taps) != len(aux_taps) or len(main_taps) == 0:
        raise ValueError(f"tap lists differ in length or are empty: {len(main_taps)} vs {len(aux_taps)}")
    total = None
    for m, a in zip(main_taps, aux_taps):
        term = output_consistency(m, a)
        total = term if total is None else total + term
    return total


def lambda_schedule(t: float, total_iters: int, w: LossWeights) -> float:
    """Gaussian ramp-up of the consistency weight towards ``w.alpha``."""
    if total_iters <= 0:
        raise ValueError("total_iters must be positive")
    ramp = w.ramp_frac * total_iters
    if t >= ramp:
        return w.alpha
    phase = 1.0 - max(t, 0) / ramp
    return w.alpha * math.exp(-5.0 * phase * phase)


def eta_schedule(t: float, total_iters: int, w: LossWeights) -> float:
    if total_iters <= 0:
        raise ValueError("total_iters must be positive")
    window = w.anneal_frac * total_iters
    if t >= window:
        return w.eta_end
    return w.eta_start + (w.eta_end - w.eta_start) * max(t, 0) / window


def total_loss(
    l_s: float, l_up: float, l_uf: float, lambda_t: float, omega_u: float,
    masked_pixel_fraction: float = 0.0,
) -> LossBreakdown:
    values = (l_s, l_up, l_uf, lambda_t, omega_u)
    if not all(math.isfinite(float(v)) for v in values):
        raise ValueError(f"non-finite loss input: {values}")
    if min(l_s, l_up, l_uf) < 0:
        raise ValueError("loss terms must be nonnegative")
    l_cons = l_up + omega_u * l_uf
    return LossBreakdown(
        l_s=float(l_s),
        l_up=float(l_up),
        l_uf=float(l_uf),
        l_cons=float(l_cons),
        lambda_t=float(lambda_t),
        total=float(l_s + lambda_t * l_cons),
        masked_pixel_fraction=float(masked_pixel_fraction),
    )
