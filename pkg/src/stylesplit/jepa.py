"""Masked token prediction with EMA teacher targets and anti-collapse
penalties, shared by the style branch (six-token scale sequence) and the
content branch (4×4 grid of deep spatial tokens).

The predictor sees the student sequence with masked slots replaced by a
learned embedding, mixes information across slots, and is scored only at the
masked positions against stop-gradient teacher tokens.  Variance / covariance
penalties keep the student's token distribution from collapsing; both use
per-slot batch statistics so constant-per-slot solutions cannot hide behind
inter-slot spread.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from .encoders import StyleBundle
from .tensorops import OpError, Tensor

STYLE_SEQ_LEN = 6
CONTENT_SEQ_LEN = 16


# ---------------------------------------------------------------------------
# token sequences
# ---------------------------------------------------------------------------

def style_token_sequence(bundle: StyleBundle) -> Tensor:
    """[B, 6, d_t] sequence ordered t1..t5 then tG."""
    return torch.stack([*bundle.scale_tokens(), bundle.tG], dim=1)


class ContentTokenizer(nn.Module):
    """Projects each spatial position of the deepest content map to d_t."""

    def __init__(self, c5: int, d_t: int) -> None:
        super().__init__()
        self.proj = nn.Linear(c5, d_t)

    def forward(self, s5: Tensor) -> Tensor:
        b, c, h, w = s5.shape
        flat = s5.reshape(b, c, h * w).transpose(1, 2)  # [B, HW, C]
        return self.proj(flat)


# ---------------------------------------------------------------------------
# masking
# ---------------------------------------------------------------------------

@dataclass
class MaskSet:
    """Hidden (sample, slot) pairs; every sample keeps ≥1 visible slot."""

    pairs: list[tuple[int, int]]
    batch: int
    seq_len: int

    def __post_init__(self) -> None:
        if not self.pairs:
            raise OpError("MaskSet: empty mask")
        per_sample: dict[int, set[int]] = {}
        for b, s in self.pairs:
            if not (0 <= b < self.batch and 0 <= s < self.seq_len):
                raise OpError(f"MaskSet: pair ({b}, {s}) outside [{self.batch}, {self.seq_len}]")
            per_sample.setdefault(b, set()).add(s)
        for b, slots in per_sample.items():
            if len(slots) >= self.seq_len:
                raise OpError(f"MaskSet: sample {b} has no visible context token")
        self.pairs = sorted(set(self.pairs))

    def bool_grid(self) -> Tensor:
        grid = torch.zeros(self.batch, self.seq_len, dtype=torch.bool)
        for b, s in self.pairs:
            grid[b, s] = True
        return grid

    def __len__(self) -> int:
        return len(self.pairs)


def sample_mask(seq_len: int, batch: int, ratio: float, gen: torch.Generator) -> MaskSet:
    """Per sample, round(ratio·seq_len) slots uniformly without replacement,
    at least one."""
    if not 0 < ratio < 1:
        raise OpError(f"sample_mask: ratio must be in (0,1), got {ratio}")
    count = max(1, math.floor(ratio * seq_len + 0.5))
    if count >= seq_len:
        raise OpError(
            f"sample_mask: ratio {ratio} masks all {seq_len} slots; need a visible context"
        )
    pairs = []
    for b in range(batch):
        chosen = torch.randperm(seq_len, generator=gen)[:count]
        pairs.extend((b, int(s)) for s in chosen)
    return MaskSet(pairs, batch, seq_len)


# ---------------------------------------------------------------------------
# predictor
# ---------------------------------------------------------------------------

class _MixBlock(nn.Module):
    """Residual slot-mixing + per-token MLP.

    Deliberately norm-free: normalization layers would make the prediction
    path scale-invariant, quietly ruling out the constant-token solution that
    the variance/covariance penalties are supposed to rule out.  Keeping the
    path scale-sensitive leaves collapse reachable by gradient descent, so
    the penalties actually carry that responsibility.
    """

    def __init__(self, d_t: int, seq_len: int) -> None:
        super().__init__()
        self.mix = nn.Linear(seq_len, seq_len)
        self.mlp = nn.Sequential(nn.Linear(d_t, 2 * d_t), nn.GELU(), nn.Linear(2 * d_t, d_t))

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.mix(x.transpose(1, 2)).transpose(1, 2)
        return x + self.mlp(x)


class TokenPredictor(nn.Module):
    """Small residual map from the visible context to the masked tokens."""

    def __init__(self, d_t: int, seq_len: int, n_blocks: int = 2) -> None:
        super().__init__()
        self.seq_len = seq_len
        self.d_t = d_t
        self.mask_embed = nn.Parameter(torch.zeros(d_t))
        self.pos_embed = nn.Parameter(torch.zeros(seq_len, d_t))
        self.blocks = nn.ModuleList([_MixBlock(d_t, seq_len) for _ in range(n_blocks)])
        self.head = nn.Linear(d_t, d_t)  # non-residual: zero init => bias output

    def forward(self, tokens: Tensor, grid: Tensor) -> Tensor:
        x = torch.where(grid.unsqueeze(-1), self.mask_embed.expand_as(tokens), tokens)
        x = x + self.pos_embed
        for block in self.blocks:
            x = block(x)
        return self.head(x)


def predict_masked(student_tokens: Tensor, mask: MaskSet, predictor: TokenPredictor) -> Tensor:
    """One d_t prediction per masked pair, ordered like mask.pairs."""
    b, s, d = student_tokens.shape
    if (b, s) != (mask.batch, mask.seq_len):
        raise OpError(
            f"predict_masked: tokens [{b}, {s}] do not match mask [{mask.batch}, {mask.seq_len}]"
        )
    if s != predictor.seq_len or d != predictor.d_t:
        raise OpError(
            f"predict_masked: predictor expects [{predictor.seq_len}, {predictor.d_t}], got [{s}, {d}]"
        )
    full = predictor(student_tokens, mask.bool_grid())
    rows = torch.tensor([p[0] for p in mask.pairs])
    cols = torch.tensor([p[1] for p in mask.pairs])
    return full[rows, cols]


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def jepa_mse(pred: Tensor, target_tokens: Tensor, mask: MaskSet) -> Tensor:
    """(1/|ℳ|)·Σ over masked pairs of the squared L2 gap to the (detached)
    teacher token."""
    if pred.shape[0] != len(mask):
        raise OpError(f"jepa_mse: {pred.shape[0]} predictions for {len(mask)} masked pairs")
    rows = torch.tensor([p[0] for p in mask.pairs])
    cols = torch.tensor([p[1] for p in mask.pairs])
    target = target_tokens[rows, cols].detach()
    return ((pred - target) ** 2).sum(dim=-1).mean()


def _flatten_slots(tokens: Tensor) -> Tensor:
    """[B, d] -> [B, 1, d]; [B, S, d] unchanged."""
    if tokens.dim() == 2:
        return tokens.unsqueeze(1)
    if tokens.dim() == 3:
        return tokens
    raise OpError(f"expected [B, d] or [B, S, d] tokens, got shape {tuple(tokens.shape)}")


def variance_penalty(tokens: Tensor, target_std: float = 1.0, eps: float = 1e-4) -> Tensor:
    """Hinge on the per-slot batch standard deviation of every dimension."""
    t = _flatten_slots(tokens)
    var = t.var(dim=0, unbiased=True)  # [S, d]
    return torch.relu(target_std - torch.sqrt(var + eps)).mean()


def covariance_penalty(tokens: Tensor) -> Tensor:
    """(1/d)·Σ_{i≠j} Cov²_ij, per-slot sample covariance, averaged over slots."""
    t = _flatten_slots(tokens)
    b, s, d = t.shape
    if b < 2:
        raise OpError("covariance_penalty: need at least two samples")
    centered = t - t.mean(dim=0, keepdim=True)
    total = None
    for slot in range(s):
        z = centered[:, slot, :]
        cov = z.t() @ z / (b - 1)
        off = cov - torch.diag_embed(torch.diagonal(cov))
        term = (off ** 2).sum() / d
        total = term if total is None else total + term
    return total / s


def style_jepa_total(mse: Tensor, var: Tensor, cov: Tensor, lambda_var: float, lambda_cov: float) -> Tensor:
    return mse + lambda_var * var + lambda_cov * cov


# ---------------------------------------------------------------------------
# teacher
# ---------------------------------------------------------------------------

def update_teacher(teacher: nn.Module, student: nn.Module, m: float) -> None:
    """θ_t ← m·θ_t + (1−m)·θ_s, elementwise, in place; buffers copied."""
    if not 0 <= m < 1:
        raise OpError(f"update_teacher: momentum must be in [0,1), got {m}")
    with torch.no_grad():
        for p_t, p_s in zip(teacher.parameters(), student.parameters()):
            p_t.mul_(m).add_(p_s, alpha=1 - m)
        for b_t, b_s in zip(teacher.buffers(), student.buffers()):
            b_t.copy_(b_s)


@dataclass
class TeacherState:
    """Gradient-free EMA copy of a student module."""

    module: nn.Module
    momentum: float = 0.99

    @classmethod
    def of(cls, student: nn.Module, momentum: float = 0.99) -> "TeacherState":
        twin = copy.deepcopy(student)
        for p in twin.parameters():
            p.requires_grad_(False)
        return cls(module=twin, momentum=momentum)

    def update(self, student: nn.Module) -> None:
        update_teacher(self.module, student, self.momentum)
