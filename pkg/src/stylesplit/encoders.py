"""Content and style encoders.

The content encoder is the U-Net analysis path: five scales of feature maps
(s1..s5) whose spatial extents halve from the input resolution.  The style
encoder is a stride-2 pyramid producing appearance maps m1..m5 plus six
compact style tokens: one per scale (average-pool then learned projection)
and one global token from the deepest map.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .tensorops import OpError, Tensor


def content_widths(base: int) -> list[int]:
    return [base, 2 * base, 4 * base, 8 * base, 8 * base]


def style_widths(base: int) -> list[int]:
    return [base * 2 ** min(i - 1, 3) for i in range(1, 6)]


@dataclass
class SkipPyramid:
    """Five content feature maps with strictly decreasing spatial extents."""

    s1: Tensor
    s2: Tensor
    s3: Tensor
    s4: Tensor
    s5: Tensor

    def __post_init__(self) -> None:
        sizes = [m.shape[-1] for m in self.scales()]
        if any(later >= earlier for later, earlier in zip(sizes[1:], sizes[:-1])):
            raise OpError(f"SkipPyramid: spatial extents must strictly decrease, got {sizes}")

    def scales(self) -> list[Tensor]:
        return [self.s1, self.s2, self.s3, self.s4, self.s5]


@dataclass
class StyleBundle:
    """Appearance maps m1..m5 plus the six d_t-dimensional style tokens."""

    m1: Tensor
    m2: Tensor
    m3: Tensor
    m4: Tensor
    m5: Tensor
    t1: Tensor
    t2: Tensor
    t3: Tensor
    t4: Tensor
    t5: Tensor
    tG: Tensor

    def __post_init__(self) -> None:
        dims = {t.shape[-1] for t in self.all_tokens()}
        if len(dims) != 1:
            raise OpError(f"StyleBundle: tokens must share one dimension, got {sorted(dims)}")

    def maps(self) -> list[Tensor]:
        return [self.m1, self.m2, self.m3, self.m4, self.m5]

    def scale_tokens(self) -> list[Tensor]:
        return [self.t1, self.t2, self.t3, self.t4, self.t5]

    def all_tokens(self) -> list[Tensor]:
        return [self.tG, *self.scale_tokens()]

    def detach(self) -> "StyleBundle":
        return StyleBundle(*(t.detach() for t in (*self.maps(), *self.scale_tokens(), self.tG)))


def zero_bundle_like(bundle: StyleBundle) -> StyleBundle:
    """All-zero maps and tokens with the same shapes (structure-path probes)."""
    parts = [torch.zeros_like(t) for t in (*bundle.maps(), *bundle.scale_tokens(), bundle.tG)]
    return StyleBundle(*parts)


class TokenProjection(nn.Module):
    """Learned projections t_i = W_i·u_i + b_i and t_G = W_G·u_G + b_G."""

    def __init__(self, channels: list[int], d_t: int) -> None:
        super().__init__()
        if len(channels) != 5:
            raise OpError(f"TokenProjection: need 5 scale widths, got {len(channels)}")
        self.scale = nn.ModuleList([nn.Linear(c, d_t) for c in channels])
        self.global_proj = nn.Linear(channels[-1], d_t)
        self.d_t = d_t


def pool_and_project(m_i: Tensor, proj: TokenProjection, scale: int) -> Tensor:
    """u_i = spatial average of m_i per channel; t_i = W_i·u_i + b_i."""
    if not 1 <= scale <= 5:
        raise OpError(f"pool_and_project: scale must be in 1..5, got {scale}")
    linear = proj.scale[scale - 1]
    if m_i.shape[1] != linear.in_features:
        raise OpError(
            f"pool_and_project: map has {m_i.shape[1]} channels, W_{scale} expects {linear.in_features}"
        )
    u = m_i.mean(dim=(2, 3))
    return linear(u)


def global_token(m5: Tensor, proj: TokenProjection) -> Tensor:
    """u_G = GAP(m5); t_G = W_G·u_G + b_G."""
    if m5.shape[1] != proj.global_proj.in_features:
        raise OpError(
            f"global_token: map has {m5.shape[1]} channels, W_G expects {proj.global_proj.in_features}"
        )
    return proj.global_proj(m5.mean(dim=(2, 3)))


def _check_resolution(x: Tensor, resolution: int, who: str) -> None:
    if x.dim() != 4 or x.shape[1] != 3 or x.shape[2] != resolution or x.shape[3] != resolution:
        raise OpError(
            f"{who}: expected [B, 3, {resolution}, {resolution}] input, got {tuple(x.shape)}"
        )


class ContentEncoder(nn.Module):
    """U-Net analysis path; emits the five-scale skip pyramid."""

    def __init__(self, base: int = 16, resolution: int = 64) -> None:
        super().__init__()
        widths = content_widths(base)
        self.resolution = resolution
        self.widths = widths
        self.stem = nn.Conv2d(3, widths[0], 3, stride=1, padding=1)
        self.downs = nn.ModuleList(
            [nn.Conv2d(widths[i], widths[i + 1], 3, stride=2, padding=1) for i in range(4)]
        )

    def forward(self, x: Tensor) -> SkipPyramid:
        _check_resolution(x, self.resolution, "encode_content")
        maps = [F.leaky_relu(self.stem(x), 0.2)]
        for down in self.downs:
            maps.append(F.leaky_relu(down(maps[-1]), 0.2))
        return SkipPyramid(*maps)


class StyleEncoder(nn.Module):
    """Five stride-2 stages with instance norm; owns the token projections."""

    def __init__(self, base: int = 16, d_t: int = 128, resolution: int = 64) -> None:
        super().__init__()
        widths = style_widths(base)
        self.resolution = resolution
        self.widths = widths
        self.d_t = d_t
        stages = []
        in_ch = 3
        for w in widths:
            stages.append(nn.Conv2d(in_ch, w, 3, stride=2, padding=1))
            in_ch = w
        self.stages = nn.ModuleList(stages)
        self.norms = nn.ModuleList([nn.InstanceNorm2d(w, affine=True) for w in widths])
        self.proj = TokenProjection(widths, d_t)

    def forward(self, y: Tensor) -> StyleBundle:
        _check_resolution(y, self.resolution, "encode_style")
        maps = []
        h = y
        for stage, norm in zip(self.stages, self.norms):
            h = F.leaky_relu(norm(stage(h)), 0.2)
            maps.append(h)
        tokens = [pool_and_project(m, self.proj, i + 1) for i, m in enumerate(maps)]
        t_global = global_token(maps[-1], self.proj)
        return StyleBundle(*maps, *tokens, t_global)
