"""Round/phase scheduler, pseudo-domain partition, style bank with replay,
MoCo machinery, and the training step that assembles the full objective.

A round walks three phases of `steps_per_phase` steps each: A-stylize
(stylize source images toward real target references), A-diversify (stylize
toward mixed bank styles, replaying old fakes to the discriminator), and
B-reconstruct (guided reconstruction of the source image from a stylized
view, no adversary).  The discriminator only trains in A phases.  The EMA key
encoder, both JEPA teachers, the negative queue, and the style bank are
updated every step regardless of phase.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import jepa as jepa_mod
from . import objectives as obj
from .encoders import ContentEncoder, StyleBundle, StyleEncoder
from .generator import Generator, PatchDiscriminator
from .objectives import LossWeights
from .tensorops import (
    NonFiniteError,
    OpError,
    Tensor,
    derive_seed,
    init_module,
    new_generator,
)

log = logging.getLogger(__name__)

PHASES = ("A-stylize", "A-diversify", "B-reconstruct")

# loss terms each phase is allowed to touch; everything else is zero-weighted
# for that phase so its graph is never built
TERMS_BY_PHASE = {
    "A-stylize": {"adv", "sty", "patch", "content_nce", "moco", "jepa_sty", "jepa_cnt", "fft", "swd"},
    "A-diversify": {"adv", "sty", "patch", "content_nce", "moco", "jepa_sty", "jepa_cnt"},
    "B-reconstruct": {"rec", "moco", "content_nce", "jepa_sty", "jepa_cnt"},
}


# ---------------------------------------------------------------------------
# schedule
# ---------------------------------------------------------------------------

@dataclass
class PseudoDomainPartition:
    k: int
    subsets: list[list[int]]
    seed: int

    def membership(self) -> dict[int, int]:
        return {idx: ki for ki, sub in enumerate(self.subsets) for idx in sub}


def partition(dataset_size: int, k: int, seed: int) -> PseudoDomainPartition:
    """Seeded permutation split into K near-equal contiguous chunks."""
    if k < 2:
        raise OpError(f"partition: K must be >= 2, got {k}")
    if dataset_size < k:
        raise OpError(f"partition: dataset of {dataset_size} cannot fill K={k} domains")
    perm = torch.randperm(dataset_size, generator=new_generator(seed)).tolist()
    base, extra = divmod(dataset_size, k)
    subsets, at = [], 0
    for ki in range(k):
        size = base + (1 if ki < extra else 0)
        subsets.append(perm[at : at + size])
        at += size
    return PseudoDomainPartition(k=k, subsets=subsets, seed=seed)


def round_domains(r: int, k: int) -> tuple[int, int]:
    return r % k, (r + 1) % k


@dataclass
class RoundPlan:
    r: int
    k_src: int
    k_tgt: int
    steps_per_phase: int

    def __post_init__(self) -> None:
        if self.k_src == self.k_tgt:
            raise OpError(f"RoundPlan: source and target domain both {self.k_src}")


def make_round_plan(r: int, k: int, steps_per_phase: int) -> RoundPlan:
    k_src, k_tgt = round_domains(r, k)
    return RoundPlan(r=r, k_src=k_src, k_tgt=k_tgt, steps_per_phase=steps_per_phase)


def phase_schedule(step_in_round: int, plan: RoundPlan) -> str:
    return PHASES[(step_in_round // plan.steps_per_phase) % 3]


# ---------------------------------------------------------------------------
# negative queue
# ---------------------------------------------------------------------------

class NegativeQueue:
    """Fixed-capacity FIFO ring of unit-norm key embeddings."""

    def __init__(self, capacity: int, dim: int) -> None:
        if capacity < 1:
            raise OpError(f"NegativeQueue: capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self.store = torch.zeros(capacity, dim)
        self.ptr = 0
        self.size = 0

    def enqueue(self, keys: Tensor) -> None:
        keys = keys.detach()
        norms = keys.norm(dim=1)
        if (norms - 1).abs().max().item() > 1e-6:
            raise OpError("NegativeQueue: keys must be unit-norm within 1e-6")
        for row in keys:
            self.store[self.ptr] = row
            self.ptr = (self.ptr + 1) % self.capacity
            self.size = min(self.size + 1, self.capacity)

    def contents(self) -> Tensor:
        """Current entries, oldest first."""
        if self.size < self.capacity:
            return self.store[: self.size]
        return torch.cat([self.store[self.ptr :], self.store[: self.ptr]])

    def __len__(self) -> int:
        return self.size


# ---------------------------------------------------------------------------
# style bank
# ---------------------------------------------------------------------------

def _bundle_rows(bundle: StyleBundle) -> list[StyleBundle]:
    batch = bundle.tG.shape[0]
    rows = []
    parts = [*bundle.maps(), *bundle.scale_tokens(), bundle.tG]
    for b in range(batch):
        rows.append(StyleBundle(*(p[b : b + 1].detach().clone() for p in parts)))
    return rows


def expand_bundle(bundle: StyleBundle, batch: int) -> StyleBundle:
    """Broadcast a single-sample bundle across a batch (no copy)."""
    if bundle.tG.shape[0] == batch:
        return bundle
    if bundle.tG.shape[0] != 1:
        raise OpError(f"expand_bundle: cannot expand batch {bundle.tG.shape[0]} to {batch}")
    parts = [*bundle.maps(), *bundle.scale_tokens(), bundle.tG]
    return StyleBundle(*(p.expand(batch, *p.shape[1:]) for p in parts))


class StyleBank:
    """Reservoir of per-sample style bundles plus a replay store of old fakes.

    Reservoir sampling keeps each stream a uniform draw over everything ever
    offered; sampling is uniform over current contents.
    """

    def __init__(self, bundle_capacity: int = 256, replay_capacity: int = 256) -> None:
        self.bundle_capacity = bundle_capacity
        self.replay_capacity = replay_capacity
        self.bundles: list[StyleBundle] = []
        self.replay: list[Tensor] = []
        self._bundle_seen = 0
        self._replay_seen = 0

    @staticmethod
    def _reservoir_add(store: list, capacity: int, item, seen: int, gen: torch.Generator) -> int:
        seen += 1
        if len(store) < capacity:
            store.append(item)
        else:
            j = int(torch.randint(seen, (1,), generator=gen))
            if j < capacity:
                store[j] = item
        return seen

    def add_bundle(self, bundle: StyleBundle, gen: torch.Generator) -> None:
        for row in _bundle_rows(bundle):
            self._bundle_seen = self._reservoir_add(
                self.bundles, self.bundle_capacity, row, self._bundle_seen, gen
            )

    def add_replay(self, images: Tensor, gen: torch.Generator) -> None:
        for b in range(images.shape[0]):
            self._replay_seen = self._reservoir_add(
                self.replay, self.replay_capacity, images[b].detach().clone(), self._replay_seen, gen
            )

    def sample_bundle(self, gen: torch.Generator) -> StyleBundle:
        if not self.bundles:
            raise OpError("StyleBank: no bundles stored")
        i = int(torch.randint(len(self.bundles), (1,), generator=gen))
        return self.bundles[i]

    def mix(self, gen: torch.Generator, low: float = 0.3, high: float = 0.7) -> StyleBundle:
        """Convex combination of two stored bundles, weight ~ U(low, high)."""
        if len(self.bundles) < 2:
            raise OpError("StyleBank: need at least two bundles to mix")
        i = int(torch.randint(len(self.bundles), (1,), generator=gen))
        j = int(torch.randint(len(self.bundles), (1,), generator=gen))
        w = low + (high - low) * torch.rand((), generator=gen).item()
        a, b = self.bundles[i], self.bundles[j]
        parts_a = [*a.maps(), *a.scale_tokens(), a.tG]
        parts_b = [*b.maps(), *b.scale_tokens(), b.tG]
        return StyleBundle(*(w * pa + (1 - w) * pb for pa, pb in zip(parts_a, parts_b)))

    def sample_replay(self, n: int, gen: torch.Generator) -> Tensor:
        if not self.replay:
            raise OpError("StyleBank: no replay images stored")
        idx = torch.randint(len(self.replay), (n,), generator=gen)
        return torch.stack([self.replay[int(i)] for i in idx])

    def __len__(self) -> int:
        return len(self.bundles)


# ---------------------------------------------------------------------------
# augmentation and positive pairs
# ---------------------------------------------------------------------------

@dataclass
class AugmentConfig:
    crop: bool = True
    min_scale: float = 0.8
    flip: bool = True
    jitter: float = 0.2

    @staticmethod
    def identity() -> "AugmentConfig":
        return AugmentConfig(crop=False, min_scale=1.0, flip=False, jitter=0.0)

    @property
    def is_identity(self) -> bool:
        return not self.crop and not self.flip and self.jitter == 0.0


def augment(x: Tensor, cfg: AugmentConfig, gen: torch.Generator) -> Tensor:
    """Seeded crop/flip/jitter; exact identity when every knob is off."""
    if cfg.is_identity:
        return x
    out = []
    _, _, h, w = x.shape
    for b in range(x.shape[0]):
        img = x[b : b + 1]
        if cfg.crop:
            s = cfg.min_scale + (1 - cfg.min_scale) * torch.rand((), generator=gen).item()
            ch = max(1, round(h * s))
            cw = max(1, round(w * s))
            top = int(torch.randint(h - ch + 1, (1,), generator=gen))
            left = int(torch.randint(w - cw + 1, (1,), generator=gen))
            img = img[:, :, top : top + ch, left : left + cw]
            img = F.interpolate(img, size=(h, w), mode="bilinear", align_corners=False)
        if cfg.flip and torch.rand((), generator=gen).item() < 0.5:
            img = torch.flip(img, dims=[-1])
        if cfg.jitter > 0:
            bright = (torch.rand((), generator=gen).item() * 2 - 1) * cfg.jitter
            contrast = 1 + (torch.rand((), generator=gen).item() * 2 - 1) * cfg.jitter
            mean = img.mean(dim=(2, 3), keepdim=True)
            img = ((img - mean) * contrast + mean + bright).clamp(-1, 1)
        out.append(img)
    return torch.cat(out, dim=0)


def make_positive_pair(
    x: Tensor,
    mode: str,
    bank: StyleBank,
    gen: torch.Generator,
    aug: AugmentConfig,
    stylize_fn=None,
) -> tuple[Tensor, Tensor]:
    """Query view = augmentation of x; key view per mode: another augmentation,
    a bank-stylized rendering, or a stylized-then-augmented view.  An empty
    bank demotes stylize modes to plain augmentation (logged)."""
    if mode not in ("augment", "stylize", "both"):
        raise OpError(f"make_positive_pair: unknown mode '{mode}'")
    x_q = augment(x, aug, gen)
    wants_style = mode in ("stylize", "both")
    if wants_style and (len(bank) == 0 or stylize_fn is None):
        log.warning("make_positive_pair: style bank empty, falling back to augment mode")
        wants_style = False
    if wants_style:
        bundle = bank.sample_bundle(gen)
        with torch.no_grad():
            x_k = stylize_fn(x, bundle)
        if mode == "both":
            x_k = augment(x_k, aug, gen)
    else:
        x_k = augment(x, aug, gen)
    return x_q, x_k


# ---------------------------------------------------------------------------
# MoCo pieces
# ---------------------------------------------------------------------------

class MocoHead(nn.Module):
    """Projection from the pooled deepest content map to the embedding space."""

    def __init__(self, c5: int, d_emb: int) -> None:
        super().__init__()
        self.proj = nn.Linear(c5, d_emb)

    def forward(self, s5: Tensor) -> Tensor:
        return self.proj(s5.mean(dim=(2, 3)))


def content_embed(encoder: ContentEncoder, head: MocoHead, x: Tensor) -> Tensor:
    """L2-normalized query embedding; gradients flow to encoder and head."""
    return F.normalize(head(encoder(x).s5), dim=1)


def moco_keys(x_view: Tensor, key_encoder: ContentEncoder, key_head: MocoHead) -> Tensor:
    """Key embedding from the EMA pair; unit norm, no gradient."""
    with torch.no_grad():
        return F.normalize(key_head(key_encoder(x_view).s5), dim=1)


def ema_update(key_module: nn.Module, query_module: nn.Module, m: float) -> None:
    """θ_k ← m·θ_k + (1−m)·θ_q; m = 1 leaves the keys unchanged."""
    if not 0 <= m <= 1:
        raise OpError(f"ema_update: momentum must be in [0,1], got {m}")
    with torch.no_grad():
        for p_k, p_q in zip(key_module.parameters(), query_module.parameters()):
            p_k.mul_(m).add_(p_q, alpha=1 - m)


def in_batch_info_nce(q: Tensor, k: Tensor, tau: float) -> Tensor:
    """Mean InfoNCE where sample i's negatives are the other keys in batch."""
    b = q.shape[0]
    if b == 1:
        return obj.info_nce(q[0], k[0], None, tau)
    total = None
    for i in range(b):
        negatives = torch.cat([k[:i], k[i + 1 :]])
        term = obj.info_nce(q[i], k[i], negatives, tau)
        total = term if total is None else total + term
    return total / b


# ---------------------------------------------------------------------------
# configuration and state
# ---------------------------------------------------------------------------

@dataclass
class TrainerConfig:
    base_channels: int = 16
    d_t: int = 128
    disc_width: int = 64
    resolution: int = 64
    batch: int = 16
    k_domains: int = 2
    steps_per_phase: int = 50
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    queue_capacity: int = 1024
    moco_momentum: float = 0.99
    teacher_momentum: float = 0.99
    tau: float = 0.2
    style_mask_ratio: float = 1 / 3
    content_mask_ratio: float = 0.5
    jepa_lambda_var: float = 25.0
    jepa_lambda_cov: float = 1.0
    jepa_target_std: float = 1.0
    bank_capacity: int = 256
    replay_capacity: int = 256
    mix_low: float = 0.3
    mix_high: float = 0.7
    n_patch_positions: int = 64
    patch_layers: tuple[str, ...] = ("s2", "s3")
    swd_projections: int = 32
    replay_fakes: int = 4
    positive_mode: str = "both"
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    aug: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self) -> None:
        checks = [
            ("tau", self.tau > 0),
            ("k_domains", self.k_domains >= 2),
            ("style_mask_ratio", 0 < self.style_mask_ratio < 1),
            ("content_mask_ratio", 0 < self.content_mask_ratio < 1),
            ("moco_momentum", 0 <= self.moco_momentum <= 1),
            ("teacher_momentum", 0 <= self.teacher_momentum < 1),
            ("batch", self.batch >= 1),
            ("steps_per_phase", self.steps_per_phase >= 1),
            ("lr", self.lr > 0),
            ("mix_low/mix_high", 0 <= self.mix_low <= self.mix_high <= 1),
            ("positive_mode", self.positive_mode in ("augment", "stylize", "both")),
            # deepest encoder stage is stride 32 and needs >= 2x2 spatial
            ("resolution", self.resolution >= 64 and self.resolution % 32 == 0),
        ]
        for name, ok in checks:
            if not ok:
                raise OpError(f"TrainerConfig.{name}: value out of range")


class TrainState:
    """Everything a run owns: modules, EMA copies, optimizers, queue, bank,
    schedule position, and the run generator."""

    def __init__(self, cfg: TrainerConfig) -> None:
        self.cfg = cfg
        b, d = cfg.base_channels, cfg.d_t
        c5 = 8 * b

        self.content_encoder = ContentEncoder(base=b, resolution=cfg.resolution)
        self.style_encoder = StyleEncoder(base=b, d_t=d, resolution=cfg.resolution)
        self.generator = Generator(base=b, d_t=d)
        self.discriminator = PatchDiscriminator(width=cfg.disc_width)
        self.moco_head = MocoHead(c5, d)
        self.style_predictor = jepa_mod.TokenPredictor(d_t=d, seq_len=jepa_mod.STYLE_SEQ_LEN)
        self.content_tokenizer = jepa_mod.ContentTokenizer(c5, d)
        self.content_predictor = jepa_mod.TokenPredictor(d_t=d, seq_len=jepa_mod.CONTENT_SEQ_LEN)

        for name, module in self.trainable_modules().items():
            init_module(module, new_generator(derive_seed(cfg.seed, "init", name)))

        self.key_encoder = jepa_mod.TeacherState.of(self.content_encoder).module
        self.key_head = jepa_mod.TeacherState.of(self.moco_head).module
        self.style_teacher = jepa_mod.TeacherState.of(self.style_encoder, cfg.teacher_momentum)
        self._content_student = nn.ModuleDict(
            {"encoder": self.content_encoder, "tokenizer": self.content_tokenizer}
        )
        self.content_teacher = jepa_mod.TeacherState.of(self._content_student, cfg.teacher_momentum)

        g_params = []
        for module in self.trainable_modules().values():
            if module is not self.discriminator:
                g_params.extend(module.parameters())
        self.opt_g = torch.optim.Adam(g_params, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))
        self.opt_d = torch.optim.Adam(
            self.discriminator.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2)
        )

        self.queue = NegativeQueue(cfg.queue_capacity, d)
        self.bank = StyleBank(cfg.bank_capacity, cfg.replay_capacity)
        self.gen = new_generator(derive_seed(cfg.seed, "trainer"))
        self.step = 0

    def trainable_modules(self) -> dict[str, nn.Module]:
        return {
            "content_encoder": self.content_encoder,
            "style_encoder": self.style_encoder,
            "generator": self.generator,
            "discriminator": self.discriminator,
            "moco_head": self.moco_head,
            "style_predictor": self.style_predictor,
            "content_tokenizer": self.content_tokenizer,
            "content_predictor": self.content_predictor,
        }

    def frozen_modules(self) -> dict[str, nn.Module]:
        return {
            "key_encoder": self.key_encoder,
            "key_head": self.key_head,
            "style_teacher": self.style_teacher.module,
            "content_teacher": self.content_teacher.module,
        }

    # -- schedule position --------------------------------------------------

    def round_length(self) -> int:
        return 3 * self.cfg.steps_per_phase

    def current_round(self) -> int:
        return self.step // self.round_length()

    def current_plan(self) -> RoundPlan:
        return make_round_plan(self.current_round(), self.cfg.k_domains, self.cfg.steps_per_phase)

    def current_phase(self) -> str:
        return phase_schedule(self.step % self.round_length(), self.current_plan())

    def stylize_fn(self):
        def run(x: Tensor, bundle: StyleBundle) -> Tensor:
            return self.generator(self.content_encoder(x), bundle)

        return run


def _phase_weights(w: LossWeights, phase: str) -> LossWeights:
    active = TERMS_BY_PHASE[phase]
    zeros = {f.name: 0.0 for f in dataclasses.fields(w) if f.name not in active}
    return dataclasses.replace(w, **zeros)


def _sample_patch_feats(
    pyr_src, pyr_sty, layers: tuple[str, ...], n_positions: int, gen: torch.Generator
):
    feats_src, feats_sty = {}, {}
    for layer in layers:
        idx_map = {"s1": 0, "s2": 1, "s3": 2, "s4": 3, "s5": 4}
        map_src = pyr_src.scales()[idx_map[layer]]
        map_sty = pyr_sty.scales()[idx_map[layer]]
        b, c, h, w = map_src.shape
        n = min(n_positions, h * w)
        pos = torch.randperm(h * w, generator=gen)[:n]
        fs = map_src.reshape(b, c, h * w)[:, :, pos].transpose(1, 2)
        ft = map_sty.reshape(b, c, h * w)[:, :, pos].transpose(1, 2)
        feats_src[layer] = F.normalize(fs, dim=-1)
        feats_sty[layer] = F.normalize(ft, dim=-1)
    return feats_src, feats_sty


def _style_jepa_term(state: TrainState, y: Tensor) -> Tensor:
    cfg = state.cfg
    seq_s = jepa_mod.style_token_sequence(state.style_encoder(y))
    with torch.no_grad():
        seq_t = jepa_mod.style_token_sequence(state.style_teacher.module(y))
    mask = jepa_mod.sample_mask(jepa_mod.STYLE_SEQ_LEN, y.shape[0], cfg.style_mask_ratio, state.gen)
    pred = jepa_mod.predict_masked(seq_s, mask, state.style_predictor)
    return jepa_mod.style_jepa_total(
        jepa_mod.jepa_mse(pred, seq_t, mask),
        jepa_mod.variance_penalty(seq_s, cfg.jepa_target_std),
        jepa_mod.covariance_penalty(seq_s),
        cfg.jepa_lambda_var,
        cfg.jepa_lambda_cov,
    )


def _content_jepa_term(state: TrainState, x: Tensor) -> Tensor:
    cfg = state.cfg
    seq_s = state.content_tokenizer(state.content_encoder(x).s5)
    with torch.no_grad():
        teacher = state.content_teacher.module
        seq_t = teacher["tokenizer"](teacher["encoder"](x).s5)
    mask = jepa_mod.sample_mask(
        jepa_mod.CONTENT_SEQ_LEN, x.shape[0], cfg.content_mask_ratio, state.gen
    )
    pred = jepa_mod.predict_masked(seq_s, mask, state.content_predictor)
    return jepa_mod.style_jepa_total(
        jepa_mod.jepa_mse(pred, seq_t, mask),
        jepa_mod.variance_penalty(seq_s, cfg.jepa_target_std),
        jepa_mod.covariance_penalty(seq_s),
        cfg.jepa_lambda_var,
        cfg.jepa_lambda_cov,
    )


def _discriminator_step(state: TrainState, real: Tensor, fake: Tensor) -> float:
    state.opt_d.zero_grad(set_to_none=True)
    loss = obj.hinge_d(state.discriminator(real), state.discriminator(fake.detach()))
    loss.backward()
    state.opt_d.step()
    return float(loss.detach())


def _generator_backward(state: TrainState, total: Tensor) -> None:
    """Backprop the generator-side objective with the discriminator frozen."""
    state.opt_g.zero_grad(set_to_none=True)
    for p in state.discriminator.parameters():
        p.requires_grad_(False)
    total.backward()
    for p in state.discriminator.parameters():
        p.requires_grad_(True)
    state.opt_g.step()


def training_step(
    batch_src: Tensor, batch_tgt: Tensor, state: TrainState, w: LossWeights | None = None
) -> dict:
    """One optimization step of the phase the schedule is currently in.

    Returns every computed loss component (plus `d_loss` when the adversary
    trained) for logging.  Raises NonFiniteError naming the first non-finite
    component.
    """
    cfg = state.cfg
    w = cfg.weights if w is None else w
    phase = state.current_phase()
    pw = _phase_weights(w, phase)
    x, y = batch_src, batch_tgt
    parts: dict[str, Tensor] = {}
    logs: dict[str, float] = {"step": state.step, "phase": phase}

    if pw.jepa_sty > 0:
        parts["jepa_sty"] = _style_jepa_term(state, y)
    if pw.jepa_cnt > 0:
        parts["jepa_cnt"] = _content_jepa_term(state, x)

    pending_keys = None
    if pw.moco > 0:
        x_q, x_k = make_positive_pair(
            x, cfg.positive_mode, state.bank, state.gen, cfg.aug, state.stylize_fn()
        )
        q = content_embed(state.content_encoder, state.moco_head, x_q)
        k = moco_keys(x_k, state.key_encoder, state.key_head)
        parts["moco"] = obj.info_nce(q, k, state.queue.contents(), cfg.tau)
        pending_keys = k

    needs_stylized = any(getattr(pw, t) > 0 for t in ("adv", "sty", "patch", "content_nce", "fft", "swd"))
    if phase in ("A-stylize", "A-diversify") and needs_stylized:
        if phase == "A-stylize":
            style_ref = state.style_encoder(y)
        elif len(state.bank) >= 2:
            style_ref = expand_bundle(state.bank.mix(state.gen, cfg.mix_low, cfg.mix_high), x.shape[0])
        else:
            style_ref = state.style_encoder(y)
        pyr_x = state.content_encoder(x)
        x_sty = state.generator(pyr_x, style_ref)

        if pw.adv > 0:
            fake_for_d = x_sty
            if phase == "A-diversify" and state.bank.replay:
                replay = state.bank.sample_replay(min(cfg.replay_fakes, len(state.bank.replay)), state.gen)
                fake_for_d = torch.cat([x_sty.detach(), replay])
            logs["d_loss"] = _discriminator_step(state, y, fake_for_d)
            parts["adv"] = obj.adv_g(state.discriminator(x_sty))
        if pw.sty > 0:
            parts["sty"] = obj.style_token_consistency(state.style_encoder(x_sty), style_ref)
        if pw.patch > 0 or pw.content_nce > 0:
            pyr_sty = state.content_encoder(x_sty)
            if pw.patch > 0:
                feats_src, feats_sty = _sample_patch_feats(
                    pyr_x, pyr_sty, cfg.patch_layers, cfg.n_patch_positions, state.gen
                )
                parts["patch"] = obj.patch_nce(feats_src, feats_sty, cfg.tau)
            if pw.content_nce > 0:
                q_c = F.normalize(state.moco_head(pyr_sty.s5), dim=1)
                k_c = moco_keys(x, state.key_encoder, state.key_head)
                parts["content_nce"] = in_batch_info_nce(q_c, k_c, cfg.tau)
        if pw.fft > 0:
            parts["fft"] = obj.fft_amplitude_loss(x_sty, y)
        if pw.swd > 0:
            parts["swd"] = obj.swd_pyramid_loss(x_sty, y, state.gen, n_proj=cfg.swd_projections)

        with torch.no_grad():
            if phase == "A-stylize":
                state.bank.add_bundle(style_ref, state.gen)
            state.bank.add_replay(x_sty, state.gen)

    elif phase == "B-reconstruct" and (pw.rec > 0 or pw.content_nce > 0):
        mixed = (
            expand_bundle(state.bank.mix(state.gen, cfg.mix_low, cfg.mix_high), x.shape[0])
            if len(state.bank) >= 2
            else state.style_encoder(y).detach()
        )
        with torch.no_grad():
            x_view = state.generator(state.content_encoder(x), mixed)
        if pw.rec > 0:
            x_hat = state.generator(state.content_encoder(x_view), state.style_encoder(x))
            parts["rec"] = obj.reconstruction_loss(x_hat, x)
        if pw.content_nce > 0:
            q_c = content_embed(state.content_encoder, state.moco_head, x_view)
            k_c = moco_keys(x, state.key_encoder, state.key_head)
            parts["content_nce"] = in_batch_info_nce(q_c, k_c, cfg.tau)

    for name, value in parts.items():
        if not torch.isfinite(value.detach()).all():
            raise NonFiniteError(
                f"training_step: non-finite loss component '{name}' at step {state.step}"
            )

    total = obj.total_loss(parts, pw)
    if total.requires_grad:
        _generator_backward(state, total)

    ema_update(state.key_encoder, state.content_encoder, cfg.moco_momentum)
    ema_update(state.key_head, state.moco_head, cfg.moco_momentum)
    state.style_teacher.update(state.style_encoder)
    state.content_teacher.update(state._content_student)
    if pending_keys is not None:
        state.queue.enqueue(pending_keys)

    state.step += 1
    logs.update({name: float(v.detach()) for name, v in parts.items()})
    logs["total"] = float(total.detach())
    return logs


class Trainer:
    """Drives training_step over a dataset tensor with the round schedule."""

    def __init__(self, cfg: TrainerConfig, images: Tensor) -> None:
        if images.dim() != 4 or images.shape[1] != 3:
            raise OpError(f"Trainer: images must be [N, 3, H, W], got {tuple(images.shape)}")
        self.cfg = cfg
        self.images = images
        self.partition = partition(
            images.shape[0], cfg.k_domains, derive_seed(cfg.seed, "partition")
        )
        self.state = TrainState(cfg)

    def _draw(self, subset: list[int]) -> Tensor:
        idx = torch.randint(len(subset), (self.cfg.batch,), generator=self.state.gen)
        rows = [subset[int(i)] for i in idx]
        return self.images[rows]

    def step(self, w: LossWeights | None = None) -> dict:
        plan = self.state.current_plan()
        batch_src = self._draw(self.partition.subsets[plan.k_src])
        batch_tgt = self._draw(self.partition.subsets[plan.k_tgt])
        return training_step(batch_src, batch_tgt, self.state, w)

    def run(self, total_steps: int, on_metrics=None) -> list[dict]:
        history = []
        for _ in range(total_steps):
            logs = self.step()
            history.append(logs)
            if on_metrics is not None:
                on_metrics(logs)
        return history
