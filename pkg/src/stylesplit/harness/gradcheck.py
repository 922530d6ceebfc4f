"""Finite-difference sweep over every op in the registry.

Each op gets one sub-check per differentiable input: the op runs through
forward_op (the same dispatch the models use), the output is scalarized
against a fixed random probe tensor so every output entry contributes, and
the analytic gradient is compared entry-by-entry against central
differences.  Inputs stay tiny (spatial extents <= 8) and are sampled away
from the non-smooth points of |.|, leaky_relu, sort, and max.
"""

from __future__ import annotations

import torch

from ..tensorops import OPS, Tensor, finite_diff_check, forward_op, new_generator, randn

DEFAULT_STEP = 1e-6


def _away_from_zero(x: Tensor, margin: float = 0.25) -> Tensor:
    return x + margin * torch.sign(x)


def _spread(x: Tensor, gap: float = 1e-3) -> Tensor:
    """Separate entries so sort/max comparisons cannot flip under FD steps."""
    flat = x.reshape(-1)
    order = torch.argsort(flat)
    ranks = torch.empty_like(order)
    ranks[order] = torch.arange(flat.numel())
    return (flat + ranks.to(flat.dtype) * gap).reshape(x.shape)


def _bounded(shape, gen) -> Tensor:
    """Random values with magnitude in [0.5, 1.5]: keeps elementwise-op
    gradients away from zero, where relative FD error is meaningless."""
    from ..tensorops import rand

    mag = rand(shape, gen, dtype=torch.float64) + 0.5
    sign = torch.where(randn(shape, gen, dtype=torch.float64) > 0, 1.0, -1.0)
    return mag * sign


def _probe_fn(op: str, point_index: int, fixed: list[Tensor], gen: torch.Generator, **attrs):
    """Scalarizing closure: vary input `point_index`, hold the others fixed."""
    with torch.no_grad():
        inputs = list(fixed)
        out = forward_op(op, *inputs, **attrs)
        weights = _bounded(out.shape, gen)

    def fn(x: Tensor) -> Tensor:
        inputs = list(fixed)
        inputs[point_index] = x
        result = forward_op(op, *[t.to(x.dtype) if i != point_index else x for i, t in enumerate(inputs)], **attrs)
        return (result * weights.to(x.dtype)).sum()

    return fn


def _cases(gen: torch.Generator) -> list[tuple[str, int, list[Tensor], dict]]:
    """(op, wrt-index, inputs, attrs) for every registered op."""
    r = lambda *shape: randn(shape, gen, dtype=torch.float64)
    a, b = _bounded((2, 3, 4, 4), gen), _bounded((2, 3, 4, 4), gen)
    pos = r(2, 3, 4, 4).abs() + 0.5
    mat_a, mat_b = r(3, 4), r(4, 5)
    img = r(1, 2, 6, 6)
    kern = r(3, 2, 3, 3)
    bias = r(3)
    keep = (randn((2, 3, 4, 4), gen) > 0).to(torch.float64)

    cases = [
        ("add", 0, [a, b], {}),
        ("add", 1, [a, b], {}),
        ("sub", 0, [a, b], {}),
        ("sub", 1, [a, b], {}),
        ("mul", 0, [a, b], {}),
        ("mul", 1, [a, b], {}),
        ("div", 0, [a, pos], {}),
        ("div", 1, [a, pos], {}),
        ("matmul", 0, [mat_a, mat_b], {}),
        ("matmul", 1, [mat_a, mat_b], {}),
        ("conv2d", 0, [img, kern, bias], {"stride": 1}),
        ("conv2d", 1, [img, kern, bias], {"stride": 1}),
        ("conv2d", 2, [img, kern, bias], {"stride": 2}),
        ("upsample_nearest", 0, [r(1, 2, 3, 3)], {"scale": 2}),
        ("avg_pool", 0, [r(1, 2, 6, 6)], {"output_size": 2}),
        ("global_avg_pool", 0, [r(1, 3, 4, 4)], {}),
        ("instance_norm", 0, [r(2, 2, 4, 4)], {}),
        ("layer_norm", 0, [r(3, 6)], {}),
        ("sigmoid", 0, [r(3, 5)], {}),
        ("tanh", 0, [r(3, 5)], {}),
        ("leaky_relu", 0, [_away_from_zero(r(3, 5))], {}),
        ("softmax", 0, [r(3, 5)], {"axis": -1}),
        ("log", 0, [pos.clone()], {}),
        ("exp", 0, [r(3, 4)], {}),
        ("sqrt", 0, [pos.clone()], {}),
        ("l1_norm", 0, [_away_from_zero(r(3, 4))], {}),
        ("l2_norm", 0, [_away_from_zero(r(3, 4))], {}),
        ("sort", 0, [_spread(r(3, 8))], {"axis": -1}),
        ("dft2_magnitude", 0, [r(1, 2, 4, 4)], {}),
        ("concat", 0, [r(2, 3), r(2, 3)], {"axis": 1}),
        ("concat", 1, [r(2, 3), r(2, 3)], {"axis": 1}),
        ("slice", 0, [r(2, 6)], {"axis": 1, "start": 1, "length": 3}),
        ("mask", 0, [a.clone(), keep], {}),
        ("sum", 0, [r(2, 4)], {}),
        ("mean", 0, [r(2, 4)], {"axis": 1}),
        ("max", 0, [_spread(r(2, 8))], {"axis": 1}),
    ]
    return cases


def _away_from(x: Tensor, kink: float, margin: float = 0.3) -> Tensor:
    """Push entries at least `margin` away from a hinge location."""
    return kink + torch.where(x >= kink, x - kink + margin, x - kink - margin)


def _loss_cases(gen: torch.Generator) -> list[tuple[str, object, Tensor]]:
    """(label, scalar fn, point) for every loss in objectives and jepa.

    Losses already return scalars, so no probe weights are needed; points are
    chosen away from the hinge/L1/sort kinks so central differences are valid.
    """
    import dataclasses

    from .. import jepa, objectives as obj
    from ..encoders import StyleBundle
    from ..tensorops import derive_seed

    r = lambda *shape: randn(shape, gen, dtype=torch.float64)
    cases: list[tuple[str, object, Tensor]] = []

    real = _away_from(r(3, 5), 1.0)
    fake = _away_from(r(3, 5), -1.0)
    cases.append(("hinge_d", lambda x: obj.hinge_d(x, fake), real))
    cases.append(("hinge_d", lambda x: obj.hinge_d(real, x), fake))
    cases.append(("adv_g", obj.adv_g, r(3, 5)))

    d_t = 6
    fake_bundle = StyleBundle(*(r(2, 3, 4, 4) for _ in range(5)), *(r(2, d_t) for _ in range(6)))
    ref_bundle = dataclasses.replace(
        fake_bundle, **{f: _away_from(r(2, d_t), 0.0) + getattr(fake_bundle, f)
                        for f in ("t1", "t2", "t3", "t4", "t5", "tG")}
    )
    for token in ("t3", "tG"):
        cases.append((
            "style_token_consistency",
            lambda x, _t=token: obj.style_token_consistency(
                dataclasses.replace(fake_bundle, **{_t: x}), ref_bundle
            ),
            getattr(fake_bundle, token),
        ))

    # unit vectors per the contract; unnormalized points saturate the softmax
    # and leave gradient entries below the FD noise floor
    unit = lambda t: t / t.norm(dim=-1, keepdim=True)
    q, k, queue = unit(r(4, 6)), unit(r(4, 6)), unit(r(8, 6))
    cases.append(("info_nce", lambda x: obj.info_nce(x, k, queue, 0.2), q))
    cases.append(("info_nce", lambda x: obj.info_nce(q, x, queue, 0.2), k))
    cases.append(("info_nce", lambda x: obj.info_nce(q, k, x, 0.2), queue))

    fq = {"s2": unit(r(2, 5, 6)), "s3": unit(r(2, 5, 6))}
    fk = {"s2": unit(r(2, 5, 6)), "s3": unit(r(2, 5, 6))}
    cases.append(("patch_nce", lambda x: obj.patch_nce({**fq, "s2": x}, fk, 0.2), fq["s2"]))
    cases.append(("patch_nce", lambda x: obj.patch_nce(fq, {**fk, "s3": x}, 0.2), fk["s3"]))

    x_hat = r(2, 3, 4, 4)
    x_ref = x_hat + _away_from(r(2, 3, 4, 4), 0.0)
    cases.append(("reconstruction", lambda x: obj.reconstruction_loss(x, x_ref), x_hat))

    img_a, img_b = r(1, 2, 4, 4), r(1, 2, 4, 4)
    cases.append(("fft_amplitude", lambda x: obj.fft_amplitude_loss(x, img_b), img_a))
    cases.append(("fft_amplitude", lambda x: obj.fft_amplitude_loss(img_a, x), img_b))

    pa, pb = _spread(r(6, 5)), _spread(r(6, 5))
    swd_seed = int(derive_seed(7, "gradcheck", "swd"))
    cases.append(("swd", lambda x: obj.swd_loss(x, pb, 8, new_generator(swd_seed)), pa))
    cases.append(("swd", lambda x: obj.swd_loss(pa, x, 8, new_generator(swd_seed)), pb))
    py_a, py_b = r(1, 2, 8, 8), r(1, 2, 8, 8)
    cases.append((
        "swd_pyramid",
        lambda x: obj.swd_pyramid_loss(x, py_b, new_generator(swd_seed), n_proj=4, levels=2),
        py_a,
    ))

    parts = {name: r(1).squeeze() for name in ("adv", "sty", "jepa_sty", "rec", "moco",
                                               "patch", "content_nce", "jepa_cnt")}
    weights = obj.LossWeights()
    cases.append((
        "total_loss",
        lambda x: obj.total_loss({**parts, "moco": x}, weights),
        parts["moco"],
    ))

    mask = jepa.sample_mask(6, 2, 1 / 3, gen)
    targets = r(2, 6, d_t)
    pred = r(len(mask.pairs), d_t)
    cases.append(("jepa_mse", lambda x: jepa.jepa_mse(x, targets, mask), pred))

    # Entries sitting on their column mean have near-zero gradients that
    # drown in central-difference rounding noise, so build the batch from a
    # fixed zero-sum deviation profile: every entry stays >= 0.3 |dev| from
    # its column mean, and per-dim stds stay far below the target_std hinge.
    profile = torch.tensor([-2.0, -1.5, 0.5, 1.0, 2.0], dtype=torch.float64)
    tokens = r(1, 6, d_t) + profile.view(5, 1, 1) * (1.0 + 0.1 * r(1, 6, d_t))
    cases.append(
        ("variance_penalty", lambda x: jepa.variance_penalty(x, target_std=4.0), tokens)
    )
    cases.append(("covariance_penalty", jepa.covariance_penalty, tokens))
    mse_part, var_part, cov_part = r(1).squeeze(), r(1).squeeze(), r(1).squeeze()
    cases.append((
        "style_jepa_total",
        lambda x: jepa.style_jepa_total(x, var_part, cov_part, 25.0, 1.0),
        mse_part,
    ))
    return cases


def run_gradcheck(seeds: int = 20, step: float = DEFAULT_STEP) -> dict[str, float]:
    """Max relative gradient error per op and per loss over all seeds."""
    worst: dict[str, float] = {name: 0.0 for name in OPS}
    for seed in range(seeds):
        gen = new_generator(derive(seed))
        for op, idx, inputs, attrs in _cases(gen):
            fn = _probe_fn(op, idx, inputs, gen, **attrs)
            err = finite_diff_check(fn, inputs[idx], step)
            worst[op] = max(worst[op], err)
        for label, fn, point in _loss_cases(gen):
            err = finite_diff_check(fn, point, step)
            worst[label] = max(worst.get(label, 0.0), err)
    return worst


def derive(seed: int) -> int:
    from ..tensorops import derive_seed

    return derive_seed(seed, "gradcheck")


def format_table(results: dict[str, float], tol: float) -> str:
    lines = [f"{'op':<18} {'max rel err':>12}  status"]
    for op in sorted(results):
        status = "ok" if results[op] <= tol else "FAIL"
        lines.append(f"{op:<18} {results[op]:>12.3e}  {status}")
    return "\n".join(lines)
