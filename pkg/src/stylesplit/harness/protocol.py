"""Shared experiment protocol: pretrain runs, probe evaluation, ablations.

The CLI subcommands and the evaluation suite both drive these functions so
numbers quoted anywhere come from one code path.  Finished pretraining runs
can be cached by config hash: the checkpoint directory doubles as the cache
entry, so "load the cache" exercises the same reload path as resuming a run.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os

import torch
import torch.nn.functional as F

from ..fusion_probe import (
    aggregate_tokens,
    content_embedding,
    probe_eval,
    probe_train,
    probe_train_fusion,
)
from ..tensorops import OpError, Tensor, derive_seed, init_module, new_generator
from ..training import Trainer, TrainState
from .config import RunConfig, config_to_dict
from .checkpoint import load_checkpoint, save_checkpoint
from .data import SHAPE_NAMES, STYLE_NAMES, SyntheticDataset, make_dataset
from .metrics import MetricsWriter

BRANCHES = ("style", "content", "fusion")
TARGETS = ("style", "content")

# weight overrides defining each ablation variant
VARIANTS = {
    "full": {},
    "no-fft": {"fft": 0.0},
    "no-swd": {"swd": 0.0},
    "no-fft-swd": {"fft": 0.0, "swd": 0.0},
    "no-jepa": {"jepa_sty": 0.0, "jepa_cnt": 0.0},
}


def apply_variant(cfg: RunConfig, variant: str) -> RunConfig:
    if variant not in VARIANTS:
        raise OpError(f"unknown ablation variant '{variant}' (choose from {sorted(VARIANTS)})")
    weights = dataclasses.replace(cfg.trainer.weights, **VARIANTS[variant])
    trainer = dataclasses.replace(cfg.trainer, weights=weights)
    return dataclasses.replace(cfg, trainer=trainer)


def run_pretrain(
    cfg: RunConfig,
    metrics: MetricsWriter | None = None,
    log_every: int = 1,
    save_dir: str | None = None,
    save_every: int | None = None,
) -> tuple[Trainer, SyntheticDataset]:
    """Build the dataset, train for cfg.steps, optionally checkpoint."""
    dataset = make_dataset(cfg.n_samples, cfg.seed, cfg.resolution)
    trainer = Trainer(cfg.trainer, dataset.images)
    run_echo = config_to_dict(cfg)

    def on_metrics(logs: dict) -> None:
        if metrics is not None and logs["step"] % log_every == 0:
            metrics.write("train", **logs)
        if save_dir and save_every and (logs["step"] + 1) % save_every == 0:
            save_checkpoint(trainer.state, save_dir, run_config=run_echo)

    trainer.run(cfg.steps, on_metrics=on_metrics)
    if save_dir:
        save_checkpoint(trainer.state, save_dir, run_config=run_echo)
    return trainer, dataset


def config_hash(cfg: RunConfig) -> str:
    blob = json.dumps(config_to_dict(cfg), sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def pretrained_state(cfg: RunConfig, cache_root: str | None = None) -> tuple[TrainState, SyntheticDataset]:
    """Train (or reload a cached run of) cfg and return state + dataset.

    Cache entries are ordinary checkpoints keyed by config hash, so hits go
    through the exact reload path a resumed run would use.
    """
    if cache_root is None:
        trainer, dataset = run_pretrain(cfg)
        return trainer.state, dataset
    entry = os.path.join(cache_root, config_hash(cfg))
    if os.path.exists(os.path.join(entry, "manifest.json")):
        state, _ = load_checkpoint(entry)
        dataset = make_dataset(cfg.n_samples, cfg.seed, cfg.resolution)
        return state, dataset
    trainer, dataset = run_pretrain(cfg, save_dir=entry)
    return trainer.state, dataset


# ---------------------------------------------------------------------------
# probes
# ---------------------------------------------------------------------------

def embed_dataset(
    state: TrainState,
    images: Tensor,
    aggregate: str = "mean",
    batch: int = 256,
    content_mode: str = "pooled",
) -> tuple[Tensor, Tensor]:
    """Frozen (style, content) embeddings for every image.

    `content_mode` picks the content-branch representation: "pooled" reads the
    spatially averaged deepest backbone map; "projected" reads the branch's
    own contrastive projection of it (unit-normalized), i.e. the vector the
    stylized-positive invariance objective actually trains.
    """
    z_sty, z_sem = [], []
    with torch.no_grad():
        for chunk in images.split(batch):
            z_sty.append(aggregate_tokens(state.style_encoder(chunk), aggregate))
            pyramid = state.content_encoder(chunk)
            if content_mode == "projected":
                z_sem.append(F.normalize(state.moco_head(pyramid.s5), dim=1))
            else:
                z_sem.append(content_embedding(pyramid))
    return torch.cat(z_sty), torch.cat(z_sem)


def run_probe(
    state: TrainState,
    dataset: SyntheticDataset,
    branch: str,
    target: str,
    fraction: float,
    cfg: RunConfig,
    metrics: MetricsWriter | None = None,
    embeddings: tuple[Tensor, Tensor] | None = None,
) -> dict:
    """Train a probe on `fraction` of the labels; evaluate on the rest.

    Pass `embeddings` (from embed_dataset) to amortize the frozen forward
    passes when probing the same state against several targets.
    """
    if branch not in BRANCHES:
        raise OpError(f"probe branch must be one of {BRANCHES}, got '{branch}'")
    if target not in TARGETS:
        raise OpError(f"probe target must be one of {TARGETS}, got '{target}'")
    labels = dataset.style_labels if target == "style" else dataset.content_labels
    n_classes = len(STYLE_NAMES) if target == "style" else len(SHAPE_NAMES)

    if embeddings is None:
        embeddings = embed_dataset(
            state,
            dataset.images,
            cfg.probe.aggregate,
            content_mode=cfg.probe.content_embedding,
        )
    z_sty, z_sem = embeddings
    n = len(dataset)
    n_train = max(1, round(fraction * n))
    if n_train >= n:
        raise OpError(f"probe fraction {fraction} leaves no evaluation samples")
    split_gen = new_generator(derive_seed(cfg.seed, "probe-split", target))
    perm = torch.randperm(n, generator=split_gen)
    train_idx = perm[:n_train]
    eval_idx = perm[n_train:][: cfg.probe.eval_samples]

    probe_seed = derive_seed(cfg.seed, "probe", branch, target)
    if branch == "fusion":
        model = probe_train_fusion(
            z_sty[train_idx],
            z_sem[train_idx],
            labels[train_idx],
            n_classes,
            d_f=cfg.probe.d_f,
            epochs=cfg.probe.epochs,
            lr=cfg.probe.lr,
            seed=probe_seed,
        )
        eval_inputs = (z_sty[eval_idx], z_sem[eval_idx])
    else:
        feats = z_sty if branch == "style" else z_sem
        model = probe_train(
            feats[train_idx],
            labels[train_idx],
            n_classes,
            epochs=cfg.probe.epochs,
            lr=cfg.probe.lr,
            seed=probe_seed,
        )
        eval_inputs = (feats[eval_idx],)

    result = probe_eval(model, eval_inputs, labels[eval_idx], n_classes)
    record = {
        "branch": branch,
        "target": target,
        "fraction": fraction,
        "n_train": int(n_train),
        "n_eval": int(eval_idx.numel()),
        "accuracy": result["accuracy"],
        "macro_f1": result["macro_f1"],
        "per_class_f1": result["per_class_f1"],
    }
    if metrics is not None:
        metrics.write("probe", **record)
    return record


def collapse_probe(
    lambda_var: float,
    lambda_cov: float,
    *,
    steps: int = 500,
    seed: int = 0,
    d_in: int = 16,
    d_t: int = 16,
    batch: int = 128,
    n_inputs: int = 256,
    mask_ratio: float = 1 / 3,
    lr_student: float = 5e-2,
    lr_predictor: float = 2e-3,
    teacher_momentum: float = 0.9,
) -> float:
    """Mean per-dimension std of student tokens after masked-prediction training.

    A fixed token task isolating the role of the variance/covariance penalties:
    a small student maps fixed random sequences to tokens, a teacher tracks it
    by EMA, and the predictor is trained to fill in masked slots against the
    (stop-gradient) teacher.  The slots are independent noise, so the masked
    targets carry no predictable signal — the only way to shrink the
    prediction error is to shrink the tokens themselves.  With the penalties
    off that is exactly what happens; with them on the std is held up.

    The student runs hotter than the predictor so the collapse pressure
    outlives the predictor's own deflation within the step budget.  Both
    settings share every hyperparameter; only the lambdas differ.
    """
    from torch import nn

    from .. import jepa

    gen = new_generator(derive_seed(seed, "collapse"))
    inputs = torch.randn(n_inputs, jepa.STYLE_SEQ_LEN, d_in, generator=gen)
    student = nn.Sequential(nn.Linear(d_in, 2 * d_t), nn.GELU(), nn.Linear(2 * d_t, d_t))
    init_module(student, new_generator(derive_seed(seed, "collapse", "student")))
    predictor = jepa.TokenPredictor(d_t=d_t, seq_len=jepa.STYLE_SEQ_LEN)
    init_module(predictor, new_generator(derive_seed(seed, "collapse", "predictor")))
    teacher = jepa.TeacherState.of(student, teacher_momentum)
    opt = torch.optim.Adam([
        {"params": student.parameters(), "lr": lr_student},
        {"params": predictor.parameters(), "lr": lr_predictor},
    ])
    for _ in range(steps):
        idx = torch.randint(n_inputs, (batch,), generator=gen)
        x = inputs[idx]
        tokens = student(x)
        with torch.no_grad():
            targets = teacher.module(x)
        mask = jepa.sample_mask(jepa.STYLE_SEQ_LEN, batch, mask_ratio, gen)
        pred = jepa.predict_masked(tokens, mask, predictor)
        total = jepa.style_jepa_total(
            jepa.jepa_mse(pred, targets, mask),
            jepa.variance_penalty(tokens),
            jepa.covariance_penalty(tokens),
            lambda_var,
            lambda_cov,
        )
        opt.zero_grad()
        total.backward()
        opt.step()
        teacher.update(student)
    with torch.no_grad():
        tokens = student(inputs)
    return tokens.reshape(-1, d_t).std(dim=0).mean().item()


def run_ablation(
    cfg: RunConfig,
    variants: list[str],
    metrics: MetricsWriter | None = None,
    cache_root: str | None = None,
) -> list[dict]:
    """Pretrain each variant and measure its style-branch style probe."""
    records = []
    for variant in variants:
        v_cfg = apply_variant(cfg, variant)
        state, dataset = pretrained_state(v_cfg, cache_root)
        probe = run_probe(state, dataset, "style", "style", cfg.probe.fraction, v_cfg)
        record = {"variant": variant, **probe}
        if metrics is not None:
            metrics.write("ablate", **record)
        records.append(record)
    return records
