"""SPADE-modulated U-Net decoder, guided reconstruction, and the patch
discriminator.

The decoder walks the skip pyramid from the deepest scale upward; at every
scale the activations are instance-normalized and re-dressed with an affine
field computed from the appearance map m_i and the style tokens
(out = α ⊙ IN(h) + δ, α = 1 + γ_m(m_i) + γ_t(t), δ = β_m(m_i) + β_t(t)).
The global token rides along with each per-scale token (t = t_i + tG) so the
bundle's global appearance reaches every scale.  Guided reconstruction R is
the same generator applied to the pyramid of a stylized image — R shares G's
weights by construction.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoders import ContentEncoder, SkipPyramid, StyleBundle, content_widths, style_widths
from .tensorops import OpError, Tensor, instance_norm


class SpadeBlock(nn.Module):
    """Spatially-adaptive affine modulation of instance-normalized activations.

    γ_m/β_m are two-conv networks over the appearance map; γ_t/β_t are linear
    in the token, broadcast over space.  With all four zero-parameterized the
    block reduces to plain instance normalization (the "+1" gain).
    """

    def __init__(self, h_channels: int, m_channels: int, d_t: int, eps: float = 1e-5) -> None:
        super().__init__()
        self.eps = eps
        self.h_channels = h_channels
        self.m_channels = m_channels
        self.gamma_m = self._map_net(m_channels, h_channels)
        self.beta_m = self._map_net(m_channels, h_channels)
        self.gamma_t = nn.Linear(d_t, h_channels)
        self.beta_t = nn.Linear(d_t, h_channels)

    @staticmethod
    def _map_net(c_in: int, c_out: int) -> nn.Sequential:
        return nn.Sequential(
            nn.Conv2d(c_in, c_out, 3, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(c_out, c_out, 3, padding=1),
        )

    def forward(self, h: Tensor, m: Tensor, t: Tensor) -> Tensor:
        if h.shape[1] != self.h_channels:
            raise OpError(f"spade_modulate: activations have {h.shape[1]} channels, block expects {self.h_channels}")
        if m.shape[1] != self.m_channels:
            raise OpError(f"spade_modulate: appearance map has {m.shape[1]} channels, block expects {self.m_channels}")
        if m.shape[-2:] != h.shape[-2:]:
            m = F.interpolate(m, size=h.shape[-2:], mode="nearest")
        gain_t = self.gamma_t(t).unsqueeze(-1).unsqueeze(-1)
        bias_t = self.beta_t(t).unsqueeze(-1).unsqueeze(-1)
        alpha = 1.0 + self.gamma_m(m) + gain_t
        delta = self.beta_m(m) + bias_t
        return alpha * instance_norm(h, self.eps) + delta

    def zero_(self) -> None:
        """Zero every modulation parameter (identity-modulation probes)."""
        with torch.no_grad():
            for p in self.parameters():
                p.zero_()


def spade_modulate(h: Tensor, m: Tensor, t: Tensor, block: SpadeBlock) -> Tensor:
    return block(h, m, t)


class Generator(nn.Module):
    """Five-scale SPADE decoder over a skip pyramid, tanh output in [-1, 1]."""

    def __init__(self, base: int = 16, style_base: int | None = None, d_t: int = 128) -> None:
        super().__init__()
        c = content_widths(base)
        s = style_widths(style_base if style_base is not None else base)
        self.spades = nn.ModuleList(
            [SpadeBlock(c[i], s[i], d_t) for i in range(5)]
        )
        self.convs = nn.ModuleList(
            [nn.Conv2d(c[i], c[i], 3, padding=1) for i in range(5)]
        )
        # fuse upsampled deeper features with the skip connection at scales 4..1
        self.fuses = nn.ModuleList(
            [nn.Conv2d(c[i] + c[i + 1], c[i], 3, padding=1) for i in range(4)]
        )
        self.to_rgb = nn.Conv2d(c[0], 3, 3, padding=1)

    def forward(self, pyramid: SkipPyramid, style: StyleBundle) -> Tensor:
        skips = pyramid.scales()
        maps = style.maps()
        tokens = [t + style.tG for t in style.scale_tokens()]
        h = skips[4]
        for i in range(4, -1, -1):
            if i < 4:
                up = F.interpolate(h, scale_factor=2, mode="nearest")
                if up.shape[-2:] != skips[i].shape[-2:]:
                    raise OpError(
                        f"generate: skip s{i + 1} extent {tuple(skips[i].shape[-2:])} does not "
                        f"match decoder extent {tuple(up.shape[-2:])}"
                    )
                h = F.leaky_relu(self.fuses[i](torch.cat([up, skips[i]], dim=1)), 0.2)
            h = self.spades[i](h, maps[i], tokens[i])
            h = F.leaky_relu(self.convs[i](h), 0.2)
        return torch.tanh(self.to_rgb(h))


def stylize(x: Tensor, style: StyleBundle, content_encoder: ContentEncoder, generator: Generator) -> Tensor:
    """x̃ = G(x; Style(y)): x supplies structure via skips, y supplies appearance."""
    return generator(content_encoder(x), style)


def reconstruct_guided(
    x_sty: Tensor, style_ref: StyleBundle, content_encoder: ContentEncoder, generator: Generator
) -> Tensor:
    """x̂ = R(x̃; Style(x)).  R is the generator itself — shared weights."""
    return generator(content_encoder(x_sty), style_ref)


class PatchDiscriminator(nn.Module):
    """Shallow PatchGAN: three stride-2 4×4 convolutions plus a 1×1 score head.

    On 64×64 input the grid is 8×8 and each cell's receptive field is exactly
    22×22 input pixels.
    """

    def __init__(self, width: int = 64) -> None:
        super().__init__()
        # no normalization anywhere: feature norms would couple distant
        # positions through their statistics and break the 22 px locality
        self.net = nn.Sequential(
            nn.Conv2d(3, width, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(width, 2 * width, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(2 * width, 4 * width, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(4 * width, 1, 1),
        )

    def forward(self, img: Tensor) -> Tensor:
        scores = self.net(img)
        return scores.squeeze(1)
