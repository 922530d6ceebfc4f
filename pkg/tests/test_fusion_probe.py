"""Token aggregation, gate fusion saturation, and probe metrics."""

import pytest
import torch

from stylesplit.encoders import StyleBundle
from stylesplit.fusion_probe import (
    FusionProbe,
    GateFusion,
    accuracy,
    aggregate_tokens,
    content_embedding,
    evaluate_attributes,
    fuse,
    macro_f1,
    per_class_f1,
    probe_eval,
    probe_train,
    probe_train_fusion,
    style_embedding,
)
from stylesplit.tensorops import OpError, new_generator, randn


def bundle_with_tokens(values, d_t=4, batch=2):
    """tG, t5, t4, t3, t2, t1 constant at the given values."""
    tG, t5, t4, t3, t2, t1 = values
    maps = [torch.zeros(batch, c, r, r) for c, r in
            [(4, 32), (8, 16), (16, 8), (32, 4), (32, 2)]]
    mk = lambda v: torch.full((batch, d_t), float(v))
    return StyleBundle(*maps, mk(t1), mk(t2), mk(t3), mk(t4), mk(t5), mk(tG))


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------

def test_aggregate_global_is_tG():
    b = bundle_with_tokens([1, 2, 3, 4, 5, 6])
    assert torch.equal(aggregate_tokens(b, "global"), b.tG)


def test_aggregate_concat_order():
    b = bundle_with_tokens([1, 2, 3, 4, 5, 6], d_t=2, batch=1)
    out = aggregate_tokens(b, "concat")
    assert out.shape == (1, 12)
    assert out[0].tolist() == [1, 1, 2, 2, 3, 3, 4, 4, 5, 5, 6, 6]


def test_aggregate_mean_value():
    b = bundle_with_tokens([1, 2, 3, 4, 5, 6])
    out = aggregate_tokens(b, "mean")
    assert torch.allclose(out, torch.full_like(out, 3.5))


def test_mean_equals_weighted_sixth_exactly():
    gen = new_generator(3)
    maps = [randn((2, c, r, r), gen) for c, r in
            [(4, 32), (8, 16), (16, 8), (32, 4), (32, 2)]]
    tokens = [randn((2, 8), gen) for _ in range(6)]
    b = StyleBundle(*maps, *tokens)
    w = torch.full((6,), 1.0 / 6)
    assert torch.equal(aggregate_tokens(b, "mean"), aggregate_tokens(b, "weighted", w))


def test_aggregate_weighted_picks_single_token():
    b = bundle_with_tokens([1, 2, 3, 4, 5, 6])
    w = torch.tensor([0.0, 1.0, 0.0, 0.0, 0.0, 0.0])  # t5 slot
    out = aggregate_tokens(b, "weighted", w)
    assert torch.allclose(out, torch.full_like(out, 2.0))


def test_aggregate_rejections():
    b = bundle_with_tokens([1, 2, 3, 4, 5, 6])
    with pytest.raises(OpError, match="weighted"):
        aggregate_tokens(b, "weighted")
    with pytest.raises(OpError, match="6 weights"):
        aggregate_tokens(b, "weighted", torch.ones(3))
    with pytest.raises(OpError, match="unknown mode"):
        aggregate_tokens(b, "median")


def test_style_and_content_embedding_shapes():
    from stylesplit.encoders import ContentEncoder, StyleEncoder

    x = torch.rand(3, 3, 64, 64) * 2 - 1
    sty = StyleEncoder(base=4, d_t=16)
    cnt = ContentEncoder(base=4)
    z_sty = style_embedding(sty(x), "mean")
    z_sem = content_embedding(cnt(x))
    assert z_sty.shape == (3, 16)
    assert z_sem.shape == (3, 32)


# ---------------------------------------------------------------------------
# gate fusion
# ---------------------------------------------------------------------------

def test_gate_saturation_selects_branch():
    gen = new_generator(0)
    fusion = GateFusion(8, 8, d_f=6)
    z_sty = randn((4, 8), gen)
    z_sem = randn((4, 8), gen)
    with torch.no_grad():
        fusion.gate.weight.zero_()
        fusion.gate.bias.fill_(20.0)
    parts = fusion.components(z_sty, z_sem)
    assert (parts["gate_logits"] == 20.0).all()
    assert (parts["pre_norm"] - parts["content_proj"]).abs().max() <= 1e-6
    with torch.no_grad():
        fusion.gate.bias.fill_(-20.0)
    parts = fusion.components(z_sty, z_sem)
    assert (parts["pre_norm"] - parts["style_proj"]).abs().max() <= 1e-6


def test_gate_blend_is_convex():
    gen = new_generator(1)
    fusion = GateFusion(5, 7, d_f=4)
    parts = fusion.components(randn((6, 5), gen), randn((6, 7), gen))
    lo = torch.minimum(parts["style_proj"], parts["content_proj"])
    hi = torch.maximum(parts["style_proj"], parts["content_proj"])
    assert (parts["pre_norm"] >= lo - 1e-6).all()
    assert (parts["pre_norm"] <= hi + 1e-6).all()
    assert ((parts["gate"] > 0) & (parts["gate"] < 1)).all()


def test_fused_output_is_layer_normed():
    gen = new_generator(2)
    fusion = GateFusion(8, 8, d_f=16)
    out = fuse(randn((5, 8), gen), randn((5, 8), gen), fusion)
    assert torch.allclose(out.mean(dim=1), torch.zeros(5), atol=1e-5)
    assert torch.allclose(out.var(dim=1, unbiased=False), torch.ones(5), atol=1e-3)


def test_fusion_input_invariance_to_scale():
    # leading LN means rescaling an input branch barely moves the output
    # (exact up to the normalization epsilon)
    gen = new_generator(3)
    fusion = GateFusion(8, 8, d_f=6)
    z_sty, z_sem = randn((4, 8), gen), randn((4, 8), gen)
    a = fusion(z_sty, z_sem)
    b = fusion(z_sty * 10, z_sem)
    assert torch.allclose(a, b, atol=1e-3)


# ---------------------------------------------------------------------------
# probes
# ---------------------------------------------------------------------------

def _separable(n=80, d=6, seed=0):
    gen = new_generator(seed)
    x = randn((n, d), gen)
    labels = (x[:, 0] > 0).long()
    x[:, 0] += torch.where(labels.bool(), torch.tensor(3.0), torch.tensor(-3.0))
    return x, labels


def test_probe_zero_epochs_returns_init():
    x, labels = _separable()
    h0 = probe_train(x, labels, 2, epochs=0, seed=7)
    h1 = probe_train(x, labels, 2, epochs=0, seed=7)
    assert torch.equal(h0.weight, h1.weight) and torch.equal(h0.bias, h1.bias)


def test_probe_learns_separable_data():
    x, labels = _separable()
    head = probe_train(x, labels, 2, epochs=100, seed=1)
    metrics = probe_eval(head, (x,), labels, 2)
    assert metrics["accuracy"] == 1.0


def test_probe_is_deterministic():
    x, labels = _separable()
    a = probe_train(x, labels, 2, epochs=20, seed=3)
    b = probe_train(x, labels, 2, epochs=20, seed=3)
    assert torch.equal(a.weight, b.weight)


def test_probe_leaves_embeddings_gradient_free():
    x, labels = _separable()
    x.requires_grad_(True)
    probe_train(x, labels, 2, epochs=5)
    assert x.grad is None


def test_probe_shape_rejections():
    with pytest.raises(OpError):
        probe_train(torch.rand(4, 3, 2), torch.zeros(4, dtype=torch.long), 2)
    with pytest.raises(OpError):
        probe_train(torch.rand(4, 3), torch.zeros(5, dtype=torch.long), 2)


def test_fusion_probe_uses_informative_branch():
    gen = new_generator(5)
    n = 120
    labels = (torch.arange(n) % 2).long()
    z_sem = randn((n, 6), gen)
    z_sem[:, 0] = labels.float() * 4 - 2  # content branch carries the labels
    z_sty = randn((n, 6), gen)  # style branch is noise
    model = probe_train_fusion(z_sty, z_sem, labels, 2, d_f=8, epochs=300, lr=0.02, seed=2)
    metrics = probe_eval(model, (z_sty, z_sem), labels, 2)
    assert metrics["accuracy"] >= 0.95


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def test_constant_predictor_balanced_two_class():
    labels = torch.tensor([0, 0, 1, 1])
    pred = torch.zeros(4, dtype=torch.long)
    assert accuracy(pred, labels) == 0.5
    assert abs(macro_f1(pred, labels, 2) - 1 / 3) < 1e-12
    f1s = per_class_f1(pred, labels, 2)
    assert abs(f1s[0] - 2 / 3) < 1e-12 and f1s[1] == 0.0


def test_metrics_match_sklearn():
    from sklearn.metrics import accuracy_score, f1_score

    gen = new_generator(9)
    labels = torch.randint(0, 4, (200,), generator=gen)
    pred = torch.randint(0, 4, (200,), generator=gen)
    assert abs(accuracy(pred, labels) - accuracy_score(labels, pred)) < 1e-9
    assert abs(macro_f1(pred, labels, 4) - f1_score(labels, pred, average="macro")) < 1e-9
    ours = per_class_f1(pred, labels, 4)
    ref = f1_score(labels, pred, average=None, labels=list(range(4)))
    assert all(abs(a - b) < 1e-9 for a, b in zip(ours, ref))


def test_evaluate_attributes_mean_block():
    x, labels = _separable()
    head = probe_train(x, labels, 2, epochs=50)
    blocks = evaluate_attributes({"parity": head}, (x,), {"parity": labels}, {"parity": 2})
    assert "parity" in blocks and "mean" in blocks
    assert blocks["mean"]["accuracy"] == blocks["parity"]["accuracy"]
