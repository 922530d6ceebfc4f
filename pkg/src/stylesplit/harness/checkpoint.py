"""Checkpointing: a JSON manifest plus one little-endian float64 blob.

The manifest lists every tensor by name with its shape and element offset
into the blob; the blob is nothing but concatenated float64 values.  Covered
state: all trainable parameters and buffers, the EMA key encoder/head and
both JEPA teachers, Adam moments for both optimizers, the negative queue
(with pointer/size), the style bank (bundles, replay images, reservoir
counters), the step counter, and the run generator's RNG state.  Reloading
into a freshly built TrainState continues a run bit-identically.
"""

from __future__ import annotations

import base64
import json
import os

import numpy as np
import torch

from ..encoders import StyleBundle
from ..tensorops import OpError
from ..training import TrainState
from .config import trainer_from_dict

MANIFEST_NAME = "manifest.json"
BLOB_NAME = "state.f64"
_BUNDLE_PARTS = ("m1", "m2", "m3", "m4", "m5", "t1", "t2", "t3", "t4", "t5", "tG")
_ADAM_KEYS = ("step", "exp_avg", "exp_avg_sq")


def _named_tensors(state: TrainState) -> list[tuple[str, torch.Tensor]]:
    """Deterministic (name, tensor) enumeration of everything worth saving."""
    out: list[tuple[str, torch.Tensor]] = []
    modules = {**state.trainable_modules(), **state.frozen_modules()}
    for mod_name, mod in modules.items():
        for p_name, p in mod.named_parameters():
            out.append((f"{mod_name}.{p_name}", p))
        for b_name, b in mod.named_buffers():
            out.append((f"{mod_name}.buffer.{b_name}", b))
    for opt_name, opt in (("opt_g", state.opt_g), ("opt_d", state.opt_d)):
        for i, p in enumerate(opt.param_groups[0]["params"]):
            slot = opt.state.get(p, {})
            for key in _ADAM_KEYS:
                if key in slot:
                    out.append((f"{opt_name}.{i}.{key}", slot[key]))
    out.append(("queue.store", state.queue.store))
    for i, bundle in enumerate(state.bank.bundles):
        parts = [*bundle.maps(), *bundle.scale_tokens(), bundle.tG]
        for part_name, t in zip(_BUNDLE_PARTS, parts):
            out.append((f"bank.bundle.{i}.{part_name}", t))
    for i, img in enumerate(state.bank.replay):
        out.append((f"bank.replay.{i}", img))
    return out


def save_checkpoint(state: TrainState, directory: str, run_config: dict | None = None) -> str:
    os.makedirs(directory, exist_ok=True)
    entries = []
    chunks = []
    offset = 0
    for name, tensor in _named_tensors(state):
        flat = tensor.detach().cpu().numpy().astype("<f8").reshape(-1)
        entries.append({"name": name, "shape": list(tensor.shape), "offset": offset, "numel": int(flat.size)})
        chunks.append(flat)
        offset += int(flat.size)
    manifest = {
        "version": 1,
        "step": state.step,
        "trainer_config": _jsonable(state.cfg),
        "run_config": run_config,
        "rng": base64.b64encode(state.gen.get_state().numpy().tobytes()).decode("ascii"),
        "scalars": {
            "queue.ptr": state.queue.ptr,
            "queue.size": state.queue.size,
            "bank.bundle_seen": state.bank._bundle_seen,
            "bank.replay_seen": state.bank._replay_seen,
            "bank.n_bundles": len(state.bank.bundles),
            "bank.n_replay": len(state.bank.replay),
        },
        "tensors": entries,
        "blob": BLOB_NAME,
    }
    with open(os.path.join(directory, MANIFEST_NAME), "w") as fh:
        json.dump(manifest, fh, indent=1)
    blob = np.concatenate(chunks) if chunks else np.zeros(0, dtype="<f8")
    blob.tofile(os.path.join(directory, BLOB_NAME))
    return directory


def _jsonable(cfg) -> dict:
    import dataclasses

    return dataclasses.asdict(cfg)


def read_manifest(directory: str) -> dict:
    with open(os.path.join(directory, MANIFEST_NAME)) as fh:
        return json.load(fh)


def load_checkpoint(directory: str) -> tuple[TrainState, dict]:
    """Rebuild a TrainState from disk; returns (state, manifest)."""
    manifest = read_manifest(directory)
    blob = np.fromfile(os.path.join(directory, BLOB_NAME), dtype="<f8")
    cfg = trainer_from_dict(_untuple(manifest["trainer_config"]))
    state = TrainState(cfg)
    state.step = manifest["step"]

    values: dict[str, torch.Tensor] = {}
    for e in manifest["tensors"]:
        arr = blob[e["offset"] : e["offset"] + e["numel"]].reshape(e["shape"])
        values[e["name"]] = torch.from_numpy(arr.copy())

    scalars = manifest["scalars"]
    _restore_bank(state, values, scalars)
    _restore_queue(state, values, scalars)
    _restore_modules(state, values)
    _restore_optimizers(state, values)

    if values:
        name = next(iter(values))
        raise OpError(f"load_checkpoint: {len(values)} unmatched tensors, e.g. '{name}'")

    rng_bytes = base64.b64decode(manifest["rng"])
    state.gen.set_state(torch.from_numpy(np.frombuffer(rng_bytes, dtype=np.uint8).copy()))
    return state, manifest


def _untuple(trainer_cfg: dict) -> dict:
    d = dict(trainer_cfg)
    if "patch_layers" in d:
        d["patch_layers"] = tuple(d["patch_layers"])
    return d


def _restore_modules(state: TrainState, values: dict) -> None:
    modules = {**state.trainable_modules(), **state.frozen_modules()}
    for mod_name, mod in modules.items():
        with torch.no_grad():
            for p_name, p in mod.named_parameters():
                key = f"{mod_name}.{p_name}"
                if key not in values:
                    raise OpError(f"load_checkpoint: manifest missing tensor '{key}'")
                p.copy_(values.pop(key).to(p.dtype))
            for b_name, b in mod.named_buffers():
                key = f"{mod_name}.buffer.{b_name}"
                b.copy_(values.pop(key).to(b.dtype))


def _restore_optimizers(state: TrainState, values: dict) -> None:
    for opt_name, opt in (("opt_g", state.opt_g), ("opt_d", state.opt_d)):
        for i, p in enumerate(opt.param_groups[0]["params"]):
            slot = {}
            for key in _ADAM_KEYS:
                name = f"{opt_name}.{i}.{key}"
                if name in values:
                    loaded = values.pop(name)
                    slot[key] = loaded.to(torch.float32)
            if slot:
                opt.state[p] = slot


def _restore_queue(state: TrainState, values: dict, scalars: dict) -> None:
    state.queue.store = values.pop("queue.store").to(torch.float32)
    state.queue.ptr = scalars["queue.ptr"]
    state.queue.size = scalars["queue.size"]


def _restore_bank(state: TrainState, values: dict, scalars: dict) -> None:
    state.bank.bundles = []
    for i in range(scalars["bank.n_bundles"]):
        parts = [values.pop(f"bank.bundle.{i}.{part}").to(torch.float32) for part in _BUNDLE_PARTS]
        state.bank.bundles.append(StyleBundle(*parts))
    state.bank.replay = [
        values.pop(f"bank.replay.{i}").to(torch.float32) for i in range(scalars["bank.n_replay"])
    ]
    state.bank._bundle_seen = scalars["bank.bundle_seen"]
    state.bank._replay_seen = scalars["bank.replay_seen"]
