"""Token aggregation, gated style/content fusion, and linear probing.

The fusion gate is a convex combination in a shared projection space:
both inputs are layer-normalized, projected to d_f, and blended by a
sigmoid gate computed from their concatenation; the blend is normalized
once more on the way out.  Probes are deliberately the strictest linear
kind so the embeddings, not the head, carry the result.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoders import SkipPyramid, StyleBundle
from .tensorops import OpError, Tensor, init_module, new_generator

AGGREGATE_MODES = ("global", "concat", "mean", "weighted")


def aggregate_tokens(bundle: StyleBundle, mode: str, weights: Tensor | None = None) -> Tensor:
    """Collapse a style bundle's seven tokens into one probe embedding.

    global  -> tG alone                         [B, d]
    concat  -> [tG ‖ t5 ‖ t4 ‖ t3 ‖ t2 ‖ t1]    [B, 6d]
    mean    -> unweighted mean of those six     [B, d]
    weighted-> Σ w_i · token_i with given w     [B, d]
    """
    if mode not in AGGREGATE_MODES:
        raise OpError(f"aggregate_tokens: unknown mode '{mode}' (choose from {AGGREGATE_MODES})")
    ordered = [bundle.tG, bundle.t5, bundle.t4, bundle.t3, bundle.t2, bundle.t1]
    if mode == "global":
        return bundle.tG
    if mode == "concat":
        return torch.cat(ordered, dim=1)
    if mode == "mean":
        # identical arithmetic to the weighted path so mean == weighted(1/6) exactly
        weights = torch.full((len(ordered),), 1.0 / len(ordered), dtype=ordered[0].dtype)
    elif weights is None:
        raise OpError("aggregate_tokens: mode 'weighted' requires a weights tensor")
    if weights.numel() != len(ordered):
        raise OpError(f"aggregate_tokens: need {len(ordered)} weights, got {weights.numel()}")
    stacked = torch.stack(ordered, dim=0)  # [6, B, d]
    return (weights.reshape(-1, 1, 1) * stacked).sum(dim=0)


def style_embedding(bundle: StyleBundle, mode: str = "mean", weights: Tensor | None = None) -> Tensor:
    return aggregate_tokens(bundle, mode, weights)


def content_embedding(pyramid: SkipPyramid) -> Tensor:
    """Pooled deepest content map, the frozen-branch probe representation."""
    return pyramid.s5.mean(dim=(2, 3))


class GateFusion(nn.Module):
    """Sigmoid-gated convex blend of style and content embeddings.

    z̃ = LN(input) per branch, projected to d_f; g = σ(W_g [ẑ_sty ‖ ẑ_sem] + b_g);
    z_fus = g ⊙ ẑ_sem + (1 − g) ⊙ ẑ_sty, layer-normalized on output.  When the
    gate logits saturate (|logit| ≥ 20) the pre-norm blend equals the selected
    branch to well under 1e-6.
    """

    def __init__(self, d_sty: int, d_sem: int, d_f: int = 128) -> None:
        super().__init__()
        self.d_f = d_f
        self.proj_sty = nn.Linear(d_sty, d_f)
        self.proj_sem = nn.Linear(d_sem, d_f)
        self.gate = nn.Linear(2 * d_f, d_f)

    def _normalize(self, z: Tensor) -> Tensor:
        return F.layer_norm(z, z.shape[-1:])

    def components(self, z_sty: Tensor, z_sem: Tensor) -> dict[str, Tensor]:
        zh_sty = self.proj_sty(self._normalize(z_sty))
        zh_sem = self.proj_sem(self._normalize(z_sem))
        logits = self.gate(torch.cat([zh_sty, zh_sem], dim=1))
        g = torch.sigmoid(logits)
        z_pre = g * zh_sem + (1 - g) * zh_sty
        return {
            "style_proj": zh_sty,
            "content_proj": zh_sem,
            "gate_logits": logits,
            "gate": g,
            "pre_norm": z_pre,
            "fused": self._normalize(z_pre),
        }

    def forward(self, z_sty: Tensor, z_sem: Tensor) -> Tensor:
        return self.components(z_sty, z_sem)["fused"]


def fuse(z_sty: Tensor, z_sem: Tensor, gate: GateFusion) -> Tensor:
    return gate(z_sty, z_sem)


class FusionProbe(nn.Module):
    """GateFusion followed by a linear classifier, trained as one probe."""

    def __init__(self, d_sty: int, d_sem: int, n_classes: int, d_f: int = 128) -> None:
        super().__init__()
        self.fusion = GateFusion(d_sty, d_sem, d_f)
        self.head = nn.Linear(d_f, n_classes)

    def forward(self, z_sty: Tensor, z_sem: Tensor) -> Tensor:
        return self.head(self.fusion(z_sty, z_sem))


def _fit(model: nn.Module, inputs: tuple[Tensor, ...], labels: Tensor, epochs: int, lr: float) -> nn.Module:
    if epochs < 0:
        raise OpError(f"probe_train: epochs must be >= 0, got {epochs}")
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    for _ in range(epochs):
        opt.zero_grad(set_to_none=True)
        loss = F.cross_entropy(model(*inputs), labels)
        loss.backward()
        opt.step()
    return model


def probe_train(
    embeddings: Tensor,
    labels: Tensor,
    n_classes: int,
    *,
    epochs: int = 200,
    lr: float = 0.05,
    seed: int = 0,
) -> nn.Linear:
    """Full-batch linear probe on frozen embeddings; zero epochs returns the
    freshly initialized head untouched."""
    if embeddings.dim() != 2:
        raise OpError(f"probe_train: embeddings must be [N, d], got {tuple(embeddings.shape)}")
    if labels.shape[0] != embeddings.shape[0]:
        raise OpError(
            f"probe_train: {embeddings.shape[0]} embeddings vs {labels.shape[0]} labels"
        )
    head = nn.Linear(embeddings.shape[1], n_classes)
    init_module(head, new_generator(seed))
    return _fit(head, (embeddings.detach(),), labels, epochs, lr)


def probe_train_fusion(
    z_sty: Tensor,
    z_sem: Tensor,
    labels: Tensor,
    n_classes: int,
    *,
    d_f: int = 128,
    epochs: int = 200,
    lr: float = 0.05,
    seed: int = 0,
) -> FusionProbe:
    """Train gate + linear head jointly on frozen branch embeddings."""
    if z_sty.shape[0] != z_sem.shape[0]:
        raise OpError(f"probe_train_fusion: batch mismatch {z_sty.shape[0]} vs {z_sem.shape[0]}")
    model = FusionProbe(z_sty.shape[1], z_sem.shape[1], n_classes, d_f)
    init_module(model, new_generator(seed))
    return _fit(model, (z_sty.detach(), z_sem.detach()), labels, epochs, lr)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def accuracy(pred: Tensor, labels: Tensor) -> float:
    if pred.shape != labels.shape:
        raise OpError(f"accuracy: shapes {tuple(pred.shape)} vs {tuple(labels.shape)}")
    return int((pred == labels).sum()) / pred.numel()


def per_class_f1(pred: Tensor, labels: Tensor, n_classes: int) -> list[float]:
    """F1 per class from confusion counts; empty classes score 0."""
    scores = []
    for c in range(n_classes):
        tp = int(((pred == c) & (labels == c)).sum())
        fp = int(((pred == c) & (labels != c)).sum())
        fn = int(((pred != c) & (labels == c)).sum())
        denom = 2 * tp + fp + fn
        scores.append(2 * tp / denom if denom > 0 else 0.0)
    return scores


def macro_f1(pred: Tensor, labels: Tensor, n_classes: int) -> float:
    scores = per_class_f1(pred, labels, n_classes)
    return sum(scores) / n_classes


def probe_eval(model: nn.Module, inputs: tuple[Tensor, ...], labels: Tensor, n_classes: int) -> dict:
    """Accuracy, macro-F1, and per-class F1 of a trained probe."""
    with torch.no_grad():
        pred = model(*inputs).argmax(dim=1)
    return {
        "accuracy": accuracy(pred, labels),
        "macro_f1": macro_f1(pred, labels, n_classes),
        "per_class_f1": per_class_f1(pred, labels, n_classes),
    }


def evaluate_attributes(
    model_by_attr: dict[str, nn.Module],
    inputs: tuple[Tensor, ...],
    labels_by_attr: dict[str, Tensor],
    n_classes_by_attr: dict[str, int],
) -> dict:
    """Per-attribute metric blocks plus their unweighted mean."""
    blocks = {
        name: probe_eval(model_by_attr[name], inputs, labels_by_attr[name], n_classes_by_attr[name])
        for name in sorted(model_by_attr)
    }
    if blocks:
        blocks["mean"] = {
            "accuracy": sum(b["accuracy"] for b in blocks.values()) / len(blocks),
            "macro_f1": sum(b["macro_f1"] for b in blocks.values()) / len(blocks),
        }
    return blocks
