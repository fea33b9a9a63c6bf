"""Finite-difference validation of every primitive and the full pipeline."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import grad_check, reduce_sum
from .generator import GeneratorConfig
from .model import full_forward, init_params, param_nodes
from .refiner import RefinerConfig
from .synth import ShapeSpec, sample_surface
from .training import total_loss

TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    max_error: float

    @property
    def passed(self) -> bool:
        return self.max_error < TOLERANCE


def _scalarize(node, seed):
    # Fresh generator per call so repeated builder evaluations (the finite
    # difference probes) see identical projection weights.
    w_rng = np.random.default_rng(seed)
    w = ad.constant(w_rng.normal(size=node.value.shape))
    flat = (node * w).reshape((node.value.size,))
    return reduce_sum(flat, axis=0)


def _distinct(rng, shape):
    # Values with comfortable gaps so max/relu kinks sit far from the probe.
    vals = np.linspace(-1.0, 1.0, int(np.prod(shape))) + 0.013
    return rng.permutation(vals).reshape(shape)


def _primitive_case(kind: str, seed: int):
    """Returns (input array, builder) exercising `kind` for one seed."""
    rng = np.random.default_rng(hash(kind) % (2**32) + seed)
    if kind == "matmul":
        if seed % 3 == 0:
            w = ad.constant(rng.normal(size=(3, 4)))
            return rng.normal(size=(2, 3)), lambda x: _scalarize(x @ w, seed)
        if seed % 3 == 1:
            a = ad.constant(rng.normal(size=(2, 3)))
            return rng.normal(size=(3, 4)), lambda x: _scalarize(a @ x, seed)
        w = ad.constant(rng.normal(size=(2, 4, 3)))
        return rng.normal(size=(2, 3, 4)), lambda x: _scalarize(x @ w, seed)
    if kind in ("add", "subtract", "multiply"):
        op = {"add": ad.ValueNode.__add__, "subtract": ad.ValueNode.__sub__,
              "multiply": ad.ValueNode.__mul__}[kind]
        if seed % 3 == 0:
            b = ad.constant(rng.normal(size=(4,)))
            return rng.normal(size=(3, 4)), lambda x: _scalarize(op(x, b), seed)
        if seed % 3 == 1:
            a = ad.constant(rng.normal(size=(3, 4)))
            return rng.normal(size=(4,)), lambda x: _scalarize(op(a, x), seed)
        b = ad.constant(rng.normal(size=(1,)))
        return rng.normal(size=(2, 3)), lambda x: _scalarize(op(x, b), seed)
    if kind == "concat":
        other = ad.constant(rng.normal(size=(2, 3)))
        axis = seed % 2
        return rng.normal(size=(2, 3)), lambda x: _scalarize(ad.concat([x, other], axis=axis), seed)
    if kind == "relu":
        x = _distinct(rng, (3, 4))
        return x, lambda n: _scalarize(n.relu(), seed)
    if kind == "tanh":
        return rng.normal(size=(3, 4)), lambda n: _scalarize(n.tanh(), seed)
    if kind == "softmax":
        return rng.normal(size=(3, 5)), lambda n: _scalarize(ad.softmax(n, axis=seed % 2), seed)
    if kind == "reduce_max":
        return _distinct(rng, (3, 4)), lambda n: _scalarize(ad.reduce_max(n, axis=seed % 2), seed)
    if kind == "reduce_sum":
        return rng.normal(size=(3, 4)), lambda n: _scalarize(ad.reduce_sum(n, axis=seed % 2), seed)
    if kind == "reduce_mean":
        return rng.normal(size=(3, 4)), lambda n: _scalarize(ad.reduce_mean(n, axis=seed % 2), seed)
    if kind == "tile":
        return rng.normal(size=(2, 3)), lambda n: _scalarize(ad.tile(n, axis=seed % 2, factor=3), seed)
    if kind == "gather":
        idx = rng.integers(0, 5, size=(4, 2))
        axis = 0 if seed % 2 == 0 else 1
        src = rng.normal(size=(5, 3)) if axis == 0 else rng.normal(size=(3, 5))
        return src, lambda n: _scalarize(ad.gather(n, idx, axis=axis), seed)
    if kind == "reshape":
        return rng.normal(size=(3, 4)), lambda n: _scalarize(n.reshape((2, 6)), seed)
    if kind == "transpose":
        return rng.normal(size=(2, 3, 4)), lambda n: _scalarize(n.transpose((2, 0, 1)), seed)
    if kind == "scalar_mul":
        return rng.normal(size=(3, 4)), lambda n: _scalarize(n * 1.7, seed)
    raise ValueError(f"no case for primitive {kind!r}")


def check_primitive(kind: str, seeds: int = 20) -> CheckResult:
    worst = 0.0
    for seed in range(seeds):
        x, builder = _primitive_case(kind, seed)
        worst = max(worst, grad_check(builder, x, step=1e-5))
    return CheckResult(f"primitive:{kind}", worst)


def _pipeline_setup(seed: int = 0):
    gen_cfg = GeneratorConfig(C=16, r=2, feat_blocks=2, feat_knn=4)
    ref_cfg = RefinerConfig(K=4, C=16, attn_reduction=4)
    store = init_params(gen_cfg, ref_cfg, seed=seed, dtype=np.float64)
    # Jitter every entry so zero-initialized layers and the attention gate
    # carry real gradient signal through the check.
    rng = np.random.default_rng(seed + 1)
    for name in store.sorted_names():
        store.entries[name] = store.entries[name] + rng.normal(0, 0.05, store.entries[name].shape)
    sphere = ShapeSpec("sphere", {"radius": 1.0})
    p = sample_surface(sphere, 16, seed=seed).points
    target = sample_surface(sphere, 32, seed=seed + 7).points
    return gen_cfg, ref_cfg, store, p, target


def check_pipeline_wrt_input(seed: int = 0) -> CheckResult:
    gen_cfg, ref_cfg, store, p, target = _pipeline_setup(seed)

    def builder(leaf):
        pnodes = param_nodes(store)
        q_coarse, q = full_forward(leaf, pnodes, gen_cfg, ref_cfg, "full")
        return total_loss(q_coarse, q, target, lam=0.7)

    return CheckResult("pipeline:input", grad_check(builder, p, step=1e-5))


def check_pipeline_wrt_param(name: str, seed: int = 0) -> CheckResult:
    gen_cfg, ref_cfg, store, p, target = _pipeline_setup(seed)

    def builder(leaf):
        pnodes = param_nodes(store)
        pnodes[name] = leaf
        q_coarse, q = full_forward(ad.constant(p), pnodes, gen_cfg, ref_cfg, "full")
        return total_loss(q_coarse, q, target, lam=0.7)

    return CheckResult(f"pipeline:{name}", grad_check(builder, store.entries[name], step=1e-5))


PIPELINE_PARAM_PROBES = (
    "gen.feat.block0.mlp.weight",
    "gen.reg.fc1.weight",
    "ref.local.w0.weight",
    "ref.local.enc1.bias",
    "ref.global.gamma",
    "ref.global.value.weight",
    "ref.off.fc1.weight",
)


def run_gradient_suite(seeds_per_kind: int = 20) -> list[CheckResult]:
    results = [check_primitive(kind, seeds_per_kind) for kind in sorted(ad.PRIMITIVES)]
    results.append(check_pipeline_wrt_input())
    results.extend(check_pipeline_wrt_param(name) for name in PIPELINE_PARAM_PROBES)
    return results
