"""Differentiable tensor substrate: named forward ops, reverse-mode gradients,
finite-difference verification, and explicit-seed RNG plumbing.

All heavy numerics are delegated to torch; this module pins down the exact op
set the rest of the package is allowed to rely on, the gradient/verification
contracts, and the determinism conventions (one generator per run, threaded
through every sampling call).
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
import torch

Tensor = torch.Tensor


class OpError(ValueError):
    """Raised when an op is called with incompatible shapes or attributes."""


class NonFiniteError(FloatingPointError):
    """Raised when a computation that must stay finite produces NaN/Inf."""


# ---------------------------------------------------------------------------
# RNG plumbing
# ---------------------------------------------------------------------------

def new_generator(seed: int) -> torch.Generator:
    """One seeded generator per run; every sampling call takes it explicitly."""
    gen = torch.Generator()
    gen.manual_seed(int(seed))
    return gen


def derive_seed(seed: int, *keys: int | str) -> int:
    """Stable child seed from a run seed and a key path (e.g. a sample index)."""
    material = [int(seed)]
    for key in keys:
        if isinstance(key, str):
            material.extend(key.encode("utf-8"))
        else:
            material.append(int(key))
    return int(np.random.SeedSequence(material).generate_state(1)[0])


def randn(shape: Sequence[int], gen: torch.Generator, dtype=torch.float32) -> Tensor:
    return torch.randn(tuple(shape), generator=gen, dtype=dtype)


def rand(shape: Sequence[int], gen: torch.Generator, dtype=torch.float32) -> Tensor:
    return torch.rand(tuple(shape), generator=gen, dtype=dtype)


def init_module(module: torch.nn.Module, gen: torch.Generator) -> None:
    """Re-initialize a module's parameters from an explicit generator.

    Conv/linear weights get fan-in scaled normal init, biases zero; built-in
    norm affine parameters are left at their (deterministic) defaults.
    """
    with torch.no_grad():
        for m in module.modules():
            weight = getattr(m, "weight", None)
            if isinstance(m, (torch.nn.Conv2d, torch.nn.ConvTranspose2d, torch.nn.Linear)):
                fan_in = weight.shape[1] * (weight[0, 0].numel() if weight.dim() > 2 else 1)
                std = math.sqrt(2.0 / max(fan_in, 1))
                weight.copy_(torch.randn(weight.shape, generator=gen, dtype=weight.dtype) * std)
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, torch.nn.Embedding):
                weight.copy_(torch.randn(weight.shape, generator=gen, dtype=weight.dtype) * 0.02)


# ---------------------------------------------------------------------------
# Graph recording
# ---------------------------------------------------------------------------

class Graph:
    """Ordered record of named ops executed in a forward pass.

    Confined to the thread that builds it. Used for introspection and for
    resolving which leaf tensors a loss depends on; the actual derivative
    bookkeeping lives in torch autograd.
    """

    def __init__(self) -> None:
        self.records: list[tuple[str, tuple[int, ...], int]] = []
        self._seen: set[int] = set()

    def record(self, name: str, inputs: Sequence[Tensor], output: Tensor) -> None:
        in_ids = tuple(id(t) for t in inputs)
        self._seen.update(in_ids)
        self.records.append((name, in_ids, id(output)))
        self._seen.add(id(output))

    def produced(self) -> set[int]:
        return {rec[2] for rec in self.records}

    def __enter__(self) -> "Graph":
        _graph_stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _graph_stack.pop()


_graph_stack: list[Graph] = []


def _active_graph() -> Graph | None:
    return _graph_stack[-1] if _graph_stack else None


# ---------------------------------------------------------------------------
# Forward ops
# ---------------------------------------------------------------------------

def _check_broadcast(name: str, a: Tensor, b: Tensor) -> None:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError as exc:
        raise OpError(f"{name}: incompatible shapes {tuple(a.shape)} vs {tuple(b.shape)}") from exc


def _binary(fn):
    def op(a: Tensor, b: Tensor, *, _name: str) -> Tensor:
        _check_broadcast(_name, a, b)
        return fn(a, b)

    return op


def _matmul(a: Tensor, b: Tensor, *, _name: str) -> Tensor:
    if a.shape[-1] != b.shape[-2 if b.dim() > 1 else -1]:
        raise OpError(f"{_name}: incompatible shapes {tuple(a.shape)} vs {tuple(b.shape)}")
    return a @ b


def _conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, *, stride: int = 1, _name: str = "conv2d") -> Tensor:
    if x.dim() != 4 or w.dim() != 4 or x.shape[1] != w.shape[1]:
        raise OpError(f"{_name}: incompatible shapes {tuple(x.shape)} vs {tuple(w.shape)}")
    # zero padding, "same" spatial size at stride 1 (odd kernels)
    pad = w.shape[-1] // 2
    return torch.nn.functional.conv2d(x, w, b, stride=stride, padding=pad)


def _upsample_nearest(x: Tensor, *, scale: int = 2, _name: str = "upsample_nearest") -> Tensor:
    return torch.nn.functional.interpolate(x, scale_factor=scale, mode="nearest")


def _avg_pool(x: Tensor, *, output_size: int | tuple[int, int], _name: str = "avg_pool") -> Tensor:
    return torch.nn.functional.adaptive_avg_pool2d(x, output_size)


def _global_avg_pool(x: Tensor, *, _name: str = "global_avg_pool") -> Tensor:
    return x.mean(dim=(-2, -1))


def instance_norm(h: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-sample, per-channel zero mean / unit variance over spatial positions."""
    if h.dim() != 4:
        raise OpError(f"instance_norm: expected NCHW input, got shape {tuple(h.shape)}")
    mu = h.mean(dim=(2, 3), keepdim=True)
    var = h.var(dim=(2, 3), unbiased=False, keepdim=True)
    return (h - mu) / torch.sqrt(var + eps)


def _layer_norm(x: Tensor, *, eps: float = 1e-5, _name: str = "layer_norm") -> Tensor:
    return torch.nn.functional.layer_norm(x, (x.shape[-1],), eps=eps)


def dft2_magnitude(x: Tensor) -> Tensor:
    """Magnitude of the (unnormalized) 2-D DFT over the last two axes."""
    return torch.abs(torch.fft.fft2(x))


def _sort(x: Tensor, *, axis: int = -1, _name: str = "sort") -> Tensor:
    # stable sort: ties broken by original index, so subgradients are deterministic
    return torch.sort(x, dim=axis, stable=True).values


def _concat(*xs: Tensor, axis: int = 0, _name: str = "concat") -> Tensor:
    return torch.cat(xs, dim=axis)


def _slice(x: Tensor, *, axis: int, start: int, length: int, _name: str = "slice") -> Tensor:
    return x.narrow(axis, start, length)


def _mask(x: Tensor, mask: Tensor, *, _name: str = "mask") -> Tensor:
    _check_broadcast(_name, x, mask)
    return x * mask


OPS: dict[str, Callable[..., Tensor]] = {
    "add": _binary(torch.add),
    "sub": _binary(torch.sub),
    "mul": _binary(torch.mul),
    "div": _binary(torch.div),
    "matmul": _matmul,
    "conv2d": _conv2d,
    "upsample_nearest": _upsample_nearest,
    "avg_pool": _avg_pool,
    "global_avg_pool": _global_avg_pool,
    "instance_norm": lambda x, *, eps=1e-5, _name="instance_norm": instance_norm(x, eps),
    "layer_norm": _layer_norm,
    "sigmoid": lambda x, *, _name="sigmoid": torch.sigmoid(x),
    "tanh": lambda x, *, _name="tanh": torch.tanh(x),
    "leaky_relu": lambda x, *, slope=0.2, _name="leaky_relu": torch.nn.functional.leaky_relu(x, slope),
    "softmax": lambda x, *, axis=-1, _name="softmax": torch.softmax(x, dim=axis),
    "log": lambda x, *, _name="log": torch.log(x),
    "exp": lambda x, *, _name="exp": torch.exp(x),
    "sqrt": lambda x, *, _name="sqrt": torch.sqrt(x),
    "l1_norm": lambda x, *, _name="l1_norm": x.abs().sum(),
    "l2_norm": lambda x, *, _name="l2_norm": torch.sqrt((x * x).sum()),
    "sort": _sort,
    "dft2_magnitude": lambda x, *, _name="dft2_magnitude": dft2_magnitude(x),
    "concat": _concat,
    "slice": _slice,
    "mask": _mask,
    "sum": lambda x, *, axis=None, _name="sum": x.sum() if axis is None else x.sum(dim=axis),
    "mean": lambda x, *, axis=None, _name="mean": x.mean() if axis is None else x.mean(dim=axis),
    "max": lambda x, *, axis=None, _name="max": x.max() if axis is None else x.max(dim=axis).values,
}


def forward_op(name: str, *inputs: Tensor, **attrs) -> Tensor:
    """Execute a named op; records into the active Graph when one is open."""
    if name not in OPS:
        raise OpError(f"unknown op '{name}'")
    out = OPS[name](*inputs, _name=name, **attrs)
    graph = _active_graph()
    if graph is not None:
        tensor_inputs = [t for t in inputs if isinstance(t, torch.Tensor)]
        graph.record(name, tensor_inputs, out)
    return out


# ---------------------------------------------------------------------------
# Reverse mode + verification
# ---------------------------------------------------------------------------

def backprop(loss: Tensor, wrt: Sequence[Tensor]) -> list[Tensor]:
    """Gradients of a scalar loss for each tensor in `wrt`.

    Tensors the loss does not depend on get zero gradients of matching shape.
    """
    if loss.dim() != 0:
        raise OpError(f"backprop: loss must be scalar, got shape {tuple(loss.shape)}")
    grads = torch.autograd.grad(loss, list(wrt), allow_unused=True, retain_graph=False)
    return [g if g is not None else torch.zeros_like(t) for g, t in zip(grads, wrt)]


def finite_diff_check(
    fn: Callable[[Tensor], Tensor],
    point: Tensor,
    step: float,
    floor: float = 1e-8,
) -> float:
    """Max relative error between autograd and central differences at `point`.

    Returns max over entries of |analytic - central| / max(|central|, floor).
    Non-finite central differences are reported as an infinite error. Callers
    are responsible for choosing points where `fn` is smooth.
    """
    if step <= 0:
        raise OpError("finite_diff_check: step must be positive")
    x = point.detach().to(torch.float64).clone().requires_grad_(True)
    loss = fn(x)
    if loss.dim() != 0:
        raise OpError(f"finite_diff_check: fn must return a scalar, got shape {tuple(loss.shape)}")
    (analytic,) = torch.autograd.grad(loss, x)
    analytic = analytic.reshape(-1)

    base = x.detach().clone()
    flat = base.reshape(-1)
    worst = 0.0
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + step
            f_plus = float(fn(base))
            flat[i] = orig - step
            f_minus = float(fn(base))
            flat[i] = orig
            central = (f_plus - f_minus) / (2.0 * step)
            if not math.isfinite(central):
                return math.inf
            err = abs(analytic[i].item() - central) / max(abs(central), floor)
            worst = max(worst, err)
    return worst
