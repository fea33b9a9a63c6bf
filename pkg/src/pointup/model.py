"""Parameter initialization and the composed generator + refiner forward."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import generator, refiner
from .autodiff import ParamStore, ValueNode
from .generator import GeneratorConfig
from .refiner import RefinerConfig

VARIANTS = ("full", "A", "B", "C", "D")

# Offset-head final layer starts at zero so refinement begins at the identity;
# variant D regresses absolute coordinates, so it gets a live init instead.
_ZERO_INIT = ("ref.off.fc1.weight", "ref.off.fc1.bias")


def init_params(
    gen_cfg: GeneratorConfig,
    ref_cfg: RefinerConfig,
    seed: int = 0,
    dtype=np.float64,
    variant: str = "full",
) -> ParamStore:
    """Glorot-uniform weights, zero biases, zero attention gate."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    shapes = dict(generator.param_shapes(gen_cfg))
    if variant != "A":
        shapes.update(refiner.param_shapes(ref_cfg))
    rng = np.random.default_rng(seed)
    entries: dict[str, np.ndarray] = {}
    for name in sorted(shapes):
        shape = shapes[name]
        if name == "ref.global.gamma" or name.endswith(".bias"):
            entries[name] = np.zeros(shape, dtype=dtype)
        elif name.endswith(".weight"):
            if name in _ZERO_INIT and variant != "D":
                entries[name] = np.zeros(shape, dtype=dtype)
            else:
                fan_in, fan_out = shape
                bound = np.sqrt(6.0 / (fan_in + fan_out))
                entries[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
        else:
            raise AssertionError(f"unclassified parameter {name}")
    if variant != "D" and variant != "A":
        entries["ref.off.fc1.bias"] = np.zeros(shapes["ref.off.fc1.bias"], dtype=dtype)
    return ParamStore(entries, rng_seed=seed)


def param_nodes(store: ParamStore) -> dict[str, ValueNode]:
    """Fresh leaf nodes for one forward/backward pass."""
    return {name: ad.constant(arr) for name, arr in store.entries.items()}


def full_forward(
    P: ValueNode,
    params: dict[str, ValueNode],
    gen_cfg: GeneratorConfig,
    ref_cfg: RefinerConfig,
    variant: str = "full",
) -> tuple[ValueNode, ValueNode | None]:
    """Returns (coarse Q', refined Q); Q is None for variant A."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    q_coarse, f_e = generator.generator_forward(P, params, gen_cfg)
    if variant == "A":
        return q_coarse, None
    out = refiner.refiner_forward(q_coarse, f_e, params, ref_cfg, variant=variant)
    return q_coarse, out.Q


def upsample_points(points: np.ndarray, store: ParamStore, gen_cfg: GeneratorConfig,
                    ref_cfg: RefinerConfig, variant: str = "full",
                    batch_size: int = 16) -> np.ndarray:
    """Inference on a stack of normalized patches (B, N, 3) -> (B, rN, 3)."""
    dtype = next(iter(store.entries.values())).dtype if store.entries else np.float64
    outs = []
    for start in range(0, len(points), batch_size):
        chunk = np.asarray(points[start:start + batch_size], dtype=dtype)
        pnodes = param_nodes(store)
        q_coarse, q = full_forward(ad.constant(chunk), pnodes, gen_cfg, ref_cfg, variant)
        outs.append((q if q is not None else q_coarse).value.astype(np.float64))
    return np.concatenate(outs, axis=0)
