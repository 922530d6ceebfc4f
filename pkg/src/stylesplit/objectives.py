"""Loss terms for the dual-branch trainer.

Adversarial hinge pair, style-token consistency, InfoNCE (global and
patchwise), L1 reconstruction, and the two frequency/texture diagnostics
(log-amplitude spectra, sliced Wasserstein over Laplacian patches), plus the
weighted total.  Embedding normalization is the caller's job: the NCE losses
assume unit vectors.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Mapping, Sequence

import torch
import torch.nn.functional as F

from .tensorops import OpError, Tensor

# ---------------------------------------------------------------------------
# adversarial pair (hinge)
# ---------------------------------------------------------------------------

def hinge_d(real_scores: Tensor, fake_scores: Tensor) -> Tensor:
    """Discriminator hinge: E[max(0, 1 - D(real))] + E[max(0, 1 + D(fake))]."""
    return F.relu(1.0 - real_scores).mean() + F.relu(1.0 + fake_scores).mean()


def adv_g(fake_scores: Tensor) -> Tensor:
    """Generator hinge: -E[D(fake)]."""
    return -fake_scores.mean()


# ---------------------------------------------------------------------------
# style-token consistency
# ---------------------------------------------------------------------------

def _token_list(bundle) -> list[Tensor]:
    if hasattr(bundle, "all_tokens"):
        return list(bundle.all_tokens())
    return list(bundle)


def style_token_consistency(bundle_fake, bundle_ref) -> Tensor:
    """L1 between the six style tokens (global + 5 scales), summed over tokens
    and coordinates, averaged over the batch.  The reference side is detached:
    the constraint pulls the generated image toward the reference style, never
    the reverse.
    """
    fake = _token_list(bundle_fake)
    ref = _token_list(bundle_ref)
    if len(fake) != len(ref):
        raise OpError(f"style_token_consistency: {len(fake)} vs {len(ref)} tokens")
    total = None
    for tf, tr in zip(fake, ref):
        if tf.shape != tr.shape:
            raise OpError(
                f"style_token_consistency: token shapes {tuple(tf.shape)} vs {tuple(tr.shape)}"
            )
        term = (tf - tr.detach()).abs().sum(dim=-1).mean()
        total = term if total is None else total + term
    return total


# ---------------------------------------------------------------------------
# InfoNCE
# ---------------------------------------------------------------------------

def info_nce(q: Tensor, k: Tensor, queue: Tensor | None, tau: float) -> Tensor:
    """-log exp(q·k/τ) / (exp(q·k/τ) + Σ_i exp(q·n_i/τ)); q, k, queue unit-norm.

    Accepts single vectors or [B, d] batches; queue is [K, d] (K may be 0).
    """
    if tau <= 0:
        raise OpError(f"info_nce: temperature must be positive, got {tau}")
    if q.dim() == 1:
        q, k = q.unsqueeze(0), k.unsqueeze(0)
    l_pos = (q * k).sum(dim=1, keepdim=True) / tau
    if queue is not None and queue.numel() > 0:
        l_neg = q @ queue.t() / tau
        logits = torch.cat([l_pos, l_neg], dim=1)
    else:
        logits = l_pos
    log_denom = torch.logsumexp(logits, dim=1)
    return (log_denom - l_pos.squeeze(1)).mean()


def patch_nce(
    feats_src: Mapping[str, Tensor],
    feats_sty: Mapping[str, Tensor],
    tau: float,
) -> Tensor:
    """Per-position InfoNCE summed over layers.

    feats_src / feats_sty map a layer name to [B, P, d] unit vectors sampled
    at identical positions on both sides.  For query position p the positive
    is the stylized vector at p; negatives are the other P-1 stylized
    positions of the same sample.
    """
    if tau <= 0:
        raise OpError(f"patch_nce: temperature must be positive, got {tau}")
    if set(feats_src) != set(feats_sty):
        raise OpError(f"patch_nce: layer sets differ: {sorted(feats_src)} vs {sorted(feats_sty)}")
    total = None
    for name in sorted(feats_src):
        fq, fk = feats_src[name], feats_sty[name]
        if fq.shape != fk.shape:
            raise OpError(
                f"patch_nce: layer '{name}' sampling mismatch {tuple(fq.shape)} vs {tuple(fk.shape)}"
            )
        logits = fq @ fk.transpose(1, 2) / tau  # [B, P, P]
        b, p, _ = logits.shape
        target = torch.arange(p).expand(b, p).reshape(-1)
        term = F.cross_entropy(logits.reshape(b * p, p), target)
        total = term if total is None else total + term
    return total


# ---------------------------------------------------------------------------
# reconstruction
# ---------------------------------------------------------------------------

def reconstruction_loss(x_hat: Tensor, x: Tensor) -> Tensor:
    if x_hat.shape != x.shape:
        raise OpError(f"reconstruction_loss: shapes {tuple(x_hat.shape)} vs {tuple(x.shape)}")
    return (x_hat - x).abs().mean()


# ---------------------------------------------------------------------------
# frequency / texture diagnostics
# ---------------------------------------------------------------------------

def fft_amplitude_loss(x: Tensor, y: Tensor, eps: float = 1e-6) -> Tensor:
    """L1 between log-amplitude spectra, mean over bins, channels, batch."""
    if eps <= 0:
        raise OpError(f"fft_amplitude_loss: eps must be positive, got {eps}")
    if x.shape != y.shape:
        raise OpError(f"fft_amplitude_loss: shapes {tuple(x.shape)} vs {tuple(y.shape)}")
    ax = torch.log(torch.abs(torch.fft.fft2(x)) + eps)
    ay = torch.log(torch.abs(torch.fft.fft2(y)) + eps)
    return (ax - ay).abs().mean()


def laplacian_pyramid(x: Tensor, levels: int = 3) -> list[Tensor]:
    """Band-pass stack: levels-1 detail residuals plus the final low-pass."""
    bands = []
    cur = x
    for _ in range(levels - 1):
        down = F.avg_pool2d(cur, 2)
        up = F.interpolate(down, scale_factor=2, mode="nearest")
        bands.append(cur - up)
        cur = down
    bands.append(cur)
    return bands


def extract_patches(x: Tensor, size: int = 4, stride: int = 4) -> Tensor:
    """Non-overlapping-by-default k×k windows, flattened to [N, C*size*size]."""
    cols = F.unfold(x, kernel_size=size, stride=stride)  # [B, C*k*k, L]
    return cols.transpose(1, 2).reshape(-1, cols.shape[1])


def sliced_wasserstein(patches_a: Tensor, patches_b: Tensor, directions: Tensor) -> Tensor:
    """Mean over directions of the 1-D W1 distance between projections."""
    proj_a = torch.sort(patches_a @ directions.t(), dim=0, stable=True).values
    proj_b = torch.sort(patches_b @ directions.t(), dim=0, stable=True).values
    return (proj_a - proj_b).abs().mean()


def swd_loss(
    patches_a: Tensor,
    patches_b: Tensor,
    n_proj: int,
    gen: torch.Generator,
) -> Tensor:
    """Sliced Wasserstein distance between two patch sets.

    Directions are resampled from `gen` on every call.  Unequal set sizes are
    equalized by resampling the smaller set with replacement.
    """
    if patches_a.numel() == 0 or patches_b.numel() == 0:
        raise OpError("swd_loss: empty patch set")
    if n_proj < 1:
        raise OpError(f"swd_loss: n_proj must be >= 1, got {n_proj}")
    na, nb = patches_a.shape[0], patches_b.shape[0]
    if na != nb:
        n = max(na, nb)
        if na < n:
            idx = torch.randint(na, (n,), generator=gen)
            patches_a = patches_a[idx]
        else:
            idx = torch.randint(nb, (n,), generator=gen)
            patches_b = patches_b[idx]
    dirs = torch.randn(n_proj, patches_a.shape[1], generator=gen, dtype=patches_a.dtype)
    dirs = dirs / dirs.norm(dim=1, keepdim=True)
    return sliced_wasserstein(patches_a, patches_b, dirs)


def swd_pyramid_loss(
    x: Tensor,
    y: Tensor,
    gen: torch.Generator,
    n_proj: int = 32,
    levels: int = 3,
    patch: int = 4,
    stride: int = 4,
) -> Tensor:
    """SWD between 4×4 texture patches at each of 3 Laplacian levels, averaged."""
    if x.shape != y.shape:
        raise OpError(f"swd_pyramid_loss: shapes {tuple(x.shape)} vs {tuple(y.shape)}")
    pyr_x = laplacian_pyramid(x, levels)
    pyr_y = laplacian_pyramid(y, levels)
    total = None
    for lx, ly in zip(pyr_x, pyr_y):
        term = swd_loss(extract_patches(lx, patch, stride), extract_patches(ly, patch, stride), n_proj, gen)
        total = term if total is None else total + term
    return total / levels


def gram_matrix(feat: Tensor) -> Tensor:
    """Co-activation statistics G = (1/S)·X·Xᵀ, X the C×S flattening.

    Diagnostic only; accepts [C, H, W] or [B, C, H, W].
    """
    if feat.dim() == 3:
        c = feat.shape[0]
        x = feat.reshape(c, -1)
        return x @ x.t() / x.shape[1]
    if feat.dim() == 4:
        b, c = feat.shape[:2]
        x = feat.reshape(b, c, -1)
        return x @ x.transpose(1, 2) / x.shape[2]
    raise OpError(f"gram_matrix: expected CHW or NCHW, got shape {tuple(feat.shape)}")


# ---------------------------------------------------------------------------
# weighted total
# ---------------------------------------------------------------------------

@dataclass
class LossWeights:
    """λ coefficients of the full objective; frequency terms off by default."""

    adv: float = 1.0
    sty: float = 1.0
    jepa_sty: float = 1.0
    rec: float = 10.0
    moco: float = 1.0
    patch: float = 1.0
    content_nce: float = 1.0
    jepa_cnt: float = 1.0
    fft: float = 0.0
    swd: float = 0.0

    def __post_init__(self) -> None:
        for f in fields(self):
            v = getattr(self, f.name)
            if v < 0:
                raise OpError(f"LossWeights.{f.name} must be nonnegative, got {v}")

    def active(self) -> set[str]:
        return {f.name for f in fields(self) if getattr(self, f.name) > 0}


def total_loss(parts: Mapping[str, Tensor], weights: LossWeights) -> Tensor:
    """Σ λ·L over supplied terms.  Zero-weight terms are skipped entirely (no
    graph contribution); a nonzero-weight term missing from `parts` is a bug
    in the calling phase and is rejected by name.
    """
    known = {f.name for f in fields(weights)}
    unknown = set(parts) - known
    if unknown:
        raise OpError(f"total_loss: unknown loss terms {sorted(unknown)}")
    total = torch.zeros(())
    for name in sorted(parts):
        lam = getattr(weights, name)
        if lam == 0:
            continue
        total = total + lam * parts[name]
    missing = weights.active() - set(parts)
    if missing:
        raise OpError(f"total_loss: active terms missing from parts: {sorted(missing)}")
    return total
