"""Finite-difference checks for every differentiable op and a tiny full model."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import ops
from .autodiff import GradCheckReport, grad_check
from .bsm import BSMParams, ConcatParams, bsm_forward, concat_fusion
from .kfc import KFcParams, kfc_forward
from .model import PNeRVConfig, build_model, decode_frame, encode

__all__ = ["TINY_CONFIG", "projected", "suite_cases", "run_suite"]

TOL = 1e-4

TINY_CONFIG = dict(
    variant="L", embed_content_shape=(4, 1, 2), embed_temporal_shape=(2, 2, 4),
    mainstream_strides=(2, 2, 1, 1, 1, 1), channel_widths=(4, 4, 4, 4, 4, 4), encoder_width=4,
)


def projected(fn: Callable, out_shape, rng: np.random.Generator) -> Callable:
    """Wrap a tensor-valued ``fn(leaves)`` into the scalar ``sum(fn(leaves) * R)`` for a fixed random ``R``."""
    r = rng.standard_normal(out_shape)
    return lambda v: ops.total(ops.mul(fn(v), r))


def _bn_case(rng, training):
    c = 3
    mean, var = rng.standard_normal(c), rng.uniform(0.5, 2.0, c)

    def f(v):
        return ops.batch_norm2d(v["x"], v["gamma"], v["beta"], mean.copy(), var.copy(),
                                training=training, update_stats=False)

    params = {"x": rng.standard_normal((c, 4, 5)), "gamma": rng.uniform(0.5, 1.5, c), "beta": rng.standard_normal(c)}
    return f, params, (c, 4, 5)


def _tiny_model_case(rng, seed):
    model = build_model(PNeRVConfig(**TINY_CONFIG, seed=seed))
    # nonzero biases so their gradients are exercised away from the init point
    for k, v in model.params.items():
        if k.endswith("bias") or k.split(".")[-1] in ("b_c", "b_h", "b_w"):
            model.params[k] = 0.1 * rng.standard_normal(v.shape)
    frames = rng.uniform(0, 1, size=(3, 3, *model.cfg.output_hw))
    target = frames[1]
    dec = {k: v for k, v in model.params.items() if k.startswith("dec.")}
    content, temporal = encode(model, frames, 1)

    def decoder_only(v):
        params = {k: v[k] for k in dec}
        out = decode_frame(model, v["content"], v["temporal"], params=params, training=True)
        return ops.mean_squared_error(out, target)

    def end_to_end(v):
        c, z = encode(model, frames, 1, params=v)
        return ops.mean_squared_error(decode_frame(model, c, z, params=v, training=True), target)

    return [
        ("pnerv_l_tiny.decoder", decoder_only, {**dec, "content": content, "temporal": temporal}, None),
        ("pnerv_l_tiny.end_to_end", end_to_end, dict(model.params), 6),
    ]


def suite_cases(seed: int = 0):
    """``(name, scalar_fn, params, max_entries)`` for the whole suite."""
    rng = np.random.default_rng(seed)
    cases = []

    def add(name, fn, params, out_shape, max_entries=None):
        cases.append((name, projected(fn, out_shape, rng), params, max_entries))

    x = rng.standard_normal((2, 5, 6))
    add("conv2d.s1", lambda v: ops.conv2d(v["x"], v["w"], v["b"]),
        {"x": x, "w": rng.standard_normal((3, 2, 3, 3)), "b": rng.standard_normal(3)}, (3, 5, 6))
    add("conv2d.s2", lambda v: ops.conv2d(v["x"], v["w"], v["b"], stride=2, padding=1),
        {"x": x, "w": rng.standard_normal((3, 2, 3, 3)), "b": rng.standard_normal(3)}, (3, 3, 3))
    add("deconv2d.k2s2", lambda v: ops.deconv2d(v["x"], v["w"], v["b"], stride=2),
        {"x": rng.standard_normal((2, 3, 4)), "w": rng.standard_normal((2, 3, 2, 2)), "b": rng.standard_normal(3)},
        (3, 6, 8))
    add("deconv2d.k3s2p1", lambda v: ops.deconv2d(v["x"], v["w"], None, stride=2, padding=1),
        {"x": rng.standard_normal((2, 3, 3)), "w": rng.standard_normal((2, 2, 3, 3))}, (2, 5, 5))
    add("pixel_shuffle.conv_path", lambda v: ops.pixel_shuffle(ops.conv2d(v["x"], v["w"], v["b"]), 2),
        {"x": x, "w": rng.standard_normal((8, 2, 3, 3)), "b": rng.standard_normal(8)}, (2, 10, 12))
    add("bilinear", lambda v: ops.bilinear_upsample(v["x"], 3), {"x": x}, (2, 15, 18))
    for name, fn in (("relu", ops.relu), ("gelu", ops.gelu), ("sigmoid", ops.sigmoid)):
        add(name, lambda v, fn=fn: fn(v["x"]), {"x": rng.standard_normal((3, 4, 4)) * 2}, (3, 4, 4))
    for training in (True, False):
        fn, params, shape = _bn_case(rng, training)
        add(f"batch_norm2d.{'train' if training else 'eval'}", fn, params, shape)

    kfc = KFcParams(rng.standard_normal((3, 4, 2)), rng.standard_normal((3, 3, 5)),
                    rng.standard_normal(3), rng.standard_normal(4), rng.standard_normal(5))
    add("kfc_forward", lambda v: kfc_forward(v["x"], KFcParams(v["K1"], v["K2"], v["b_c"], v["b_h"], v["b_w"])),
        {"x": rng.standard_normal((3, 2, 3)), **kfc.arrays()}, (3, 4, 5))

    bsm = BSMParams.init(rng, 2, 3)
    bsm_params = {k: v + 0.1 * rng.standard_normal(v.shape) for k, v in bsm.arrays().items()}
    add("bsm_forward", lambda v: bsm_forward(v["z"], v["h"], BSMParams(*(v[k] for k in bsm.arrays()))),
        {"z": rng.standard_normal((2, 4, 5)), "h": rng.standard_normal((3, 4, 5)), **bsm_params}, (3, 4, 5))
    cat = ConcatParams.init(rng, 2, 3)
    add("concat_fusion", lambda v: concat_fusion(v["z"], v["h"], ConcatParams(v["weight"], v["bias"])),
        {"z": rng.standard_normal((2, 4, 5)), "h": rng.standard_normal((3, 4, 5)),
         "weight": cat.weight, "bias": rng.standard_normal(3)}, (3, 4, 5))

    cases.extend(_tiny_model_case(rng, seed))
    return cases


def run_suite(seed: int = 0, tol: float = TOL, verbose: Callable[[str], None] | None = None
              ) -> list[tuple[str, GradCheckReport]]:
    results = []
    for name, fn, params, max_entries in suite_cases(seed):
        rep = grad_check(fn, params, tol=tol, max_entries=max_entries, seed=seed)
        results.append((name, rep))
        if verbose is not None:
            verbose(f"{'PASS' if rep.passed else 'FAIL'} {name}: max rel err {rep.max_error:.2e} (tol {tol:g})")
    return results
