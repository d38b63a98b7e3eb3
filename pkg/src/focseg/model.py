"""Encoder with an injection hook, and tapped decoders sharing it.

Depth ``d`` of the encoder is the activation after ``d`` stride-2 stages, so
its spatial size is ``input_size / 2**d``; depth 0 is the raw input. A decoder
has one upsampling stage per encoder stage and exposes the post-activation
output of every stage as a feature tap.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import torch
import torch.nn as nn
import torch.nn.functional as F

from .perturb import DEFAULT_NOISE_BOUND, inject, sample_noise

GROUPS = ("E", "D", "G")


@dataclass
class ModelConfig:
    in_channels: int = 3
    num_classes: int = 2
    base_width: int = 8
    depth: int = 5
    width_cap_depth: int = 4
    skip_connections: bool = False

    def widths(self) -> list[int]:
        return [self.base_width * 2 ** (min(d, self.width_cap_depth) - 1) for d in range(1, self.depth + 1)]


@dataclass
class EncoderState:
    activations: list[torch.Tensor]  # index d -> depth-d activation, 0 = input

    @property
    def z_out(self) -> torch.Tensor:
        return self.activations[-1]

    @property
    def max_depth(self) -> int:
        return len(self.activations) - 1


@dataclass
class DecoderOutputs:
    logits: torch.Tensor
    taps: list[torch.Tensor]  # index j-1 -> tap after the j-th upsampling

    @property
    def probs(self) -> torch.Tensor:
        return torch.softmax(self.logits, dim=1)


def _norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(4 if channels % 4 == 0 else 1, channels)


class ConvBlock(nn.Sequential):
    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__(
            nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
            _norm(cout),
            nn.ReLU(inplace=True),
        )


class Encoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        widths = cfg.widths()
        cins = [cfg.in_channels] + widths[:-1]
        self.stages = nn.ModuleList(
            nn.Sequential(ConvBlock(cin, c, stride=2), ConvBlock(c, c)) for cin, c in zip(cins, widths)
        )

    @property
    def max_depth(self) -> int:
        return len(self.stages)

    def run(self, activation: torch.Tensor, start: int, stop: int | None = None) -> list[torch.Tensor]:
        """Activations for depths ``start+1 .. stop`` given the depth-``start`` one."""
        stop = self.max_depth if stop is None else stop
        out = []
        for stage in self.stages[start:stop]:
            activation = stage(activation)
            out.append(activation)
        return out

    def forward(self, x: torch.Tensor) -> EncoderState:
        return EncoderState([x] + self.run(x, 0))


class Decoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        widths = cfg.widths()
        outs = list(reversed(widths[:-1])) + [cfg.base_width]
        cins = [widths[-1]] + outs[:-1]
        self.skip = cfg.skip_connections
        if self.skip:
            # stage j sees the encoder activation at depth D - j (none for the input level)
            skip_ch = list(reversed(widths[:-1])) + [0]
            cins = [c + s for c, s in zip(cins, skip_ch)]
        self.stages = nn.ModuleList(ConvBlock(cin, c) for cin, c in zip(cins, outs))
        self.head = nn.Conv2d(outs[-1], cfg.num_classes, 1)

    def forward(self, z_out: torch.Tensor, skips: list[torch.Tensor] | None = None) -> DecoderOutputs:
        taps = []
        h = z_out
        n = len(self.stages)
        for j, stage in enumerate(self.stages, start=1):
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            if self.skip and j < n:
                if skips is None:
                    raise ValueError("decoder built with skip connections needs encoder activations")
                h = torch.cat([h, skips[n - j]], dim=1)
            h = stage(h)
            taps.append(h)
        return DecoderOutputs(self.head(h), taps)


class Segmenter(nn.Module):
    """Shared encoder ``E`` with a main decoder ``D`` and an auxiliary decoder ``G``."""

    def __init__(self, cfg: ModelConfig | None = None, with_aux: bool = True):
        super().__init__()
        self.cfg = cfg or ModelConfig()
        self.E = Encoder(self.cfg)
        self.D = Decoder(self.cfg)
        self.G = Decoder(self.cfg) if with_aux else None

    @property
    def max_depth(self) -> int:
        return self.E.max_depth

    def _check_input(self, x: torch.Tensor) -> None:
        factor = 2 ** self.max_depth
        if x.dim() != 4 or x.shape[-1] % factor or x.shape[-2] % factor:
            raise ValueError(f"input spatial size {tuple(x.shape[-2:])} must be divisible by {factor}")

    def encode(self, x: torch.Tensor) -> EncoderState:
        self._check_input(x)
        return self.E(x)

    def encode_with_injection(
        self,
        x: torch.Tensor,
        depth: int,
        seed,
        noise_bound: float = DEFAULT_NOISE_BOUND,
        prefix: list[torch.Tensor] | None = None,
    ) -> EncoderState:
        """Encode with multiplicative noise applied to the depth-``depth`` activation.

        ``prefix`` optionally supplies already computed activations for depths
        ``1..depth`` so they are not recomputed.
        """
        if not 1 <= depth <= self.max_depth:
            raise ValueError(f"perturbation depth {depth} outside [1, {self.max_depth}]")
        self._check_input(x)
        if prefix is None:
            prefix = self.E.run(x, 0, depth)
        z_in = prefix[depth - 1]
        noise = sample_noise(z_in.shape, seed, noise_bound, dtype=z_in.dtype)
        z_tilde = inject(z_in, noise)
        return EncoderState([x] + list(prefix[: depth - 1]) + [z_tilde] + self.E.run(z_tilde, depth))

    def _skips(self, state: EncoderState | None) -> list[torch.Tensor] | None:
        return state.activations if (self.cfg.skip_connections and state is not None) else None

    def decode_main(self, z_out: torch.Tensor, state: EncoderState | None = None) -> DecoderOutputs:
        return self.D(z_out, self._skips(state))

    def decode_aux(self, z_out: torch.Tensor, state: EncoderState | None = None) -> DecoderOutputs:
        if self.G is None:
            raise RuntimeError("model was built without an auxiliary decoder")
        return self.G(z_out, self._skips(state))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Class probabilities of the main branch ``D(E(x))``."""
        state = self.encode(x)
        return self.decode_main(state.z_out, state).probs

    def group_parameters(self, group: str) -> Iterator[tuple[str, nn.Parameter]]:
        module = getattr(self, group)
        if module is None:
            return iter(())
        return module.named_parameters()

    def named_group_arrays(self) -> dict[str, torch.Tensor]:
        """All parameters keyed as ``<group>/<layer path>``."""
        out = {}
        for g in GROUPS:
            for name, p in self.group_parameters(g):
                out[f"{g}/{name}"] = p
        return out
