"""Spatial refiner: local and global refinement units plus residual offsets."""

from __future__ import annotations

from dataclasses import dataclass

from .autodiff import ValueNode, concat, reduce_max, reduce_sum, softmax, tile
from .cloud import knn_indices_batch
from .generator import _ensure_batched, _group, _linear


@dataclass
class RefinerConfig:
    K: int = 16
    C: int = 64
    attn_reduction: int = 4

    def __post_init__(self):
        if self.K < 2:
            raise ValueError("K must be >= 2")
        if self.C % self.attn_reduction != 0:
            raise ValueError("attn_reduction must divide C")


@dataclass
class RefinerOutput:
    Q: ValueNode
    delta: ValueNode
    F_R: ValueNode


def local_refine(Q_coarse: ValueNode, F_E: ValueNode, params: dict[str, ValueNode], cfg: RefinerConfig) -> ValueNode:
    """Neighborhood-grouped feature refinement with regressed spatial weights.

    Groups the K nearest coarse points, encodes grouped features next to the
    relative offsets, then fuses a max-pooled branch with a branch that sums
    features under softmax weights regressed from the offsets alone.
    """
    Q_coarse, was_2d = _ensure_batched(Q_coarse)
    F_E, _ = _ensure_batched(F_E)
    b, m, _ = Q_coarse.value.shape
    if m < cfg.K:
        raise ValueError(f"need at least K={cfg.K} points, got {m}")
    idx = knn_indices_batch(Q_coarse.value, cfg.K, include_self=True)

    grouped_pts = _group(Q_coarse.reshape((b * m, 3)), idx, b, m)            # (b, m, K, 3)
    centers = tile(Q_coarse.reshape((b, m, 1, 3)), axis=2, factor=cfg.K)
    rel = grouped_pts - centers

    c_e = F_E.value.shape[-1]
    grouped_feats = _group(F_E.reshape((b * m, c_e)), idx, b, m)             # (b, m, K, C+2)
    h = _linear(concat([rel, grouped_feats], axis=3), params, "ref.local.enc0")
    F_L = _linear(h, params, "ref.local.enc1")

    pooled = reduce_max(_linear(F_L, params, "ref.local.post"), axis=2)

    w = _linear(rel, params, "ref.local.w0")
    w = _linear(w, params, "ref.local.w1", act=None)
    w = softmax(w, axis=2)
    weighted = reduce_sum(w * F_L, axis=2)

    out = pooled + weighted
    return out.reshape((m, cfg.C)) if was_2d else out


def global_refine(Q_coarse: ValueNode, F_E: ValueNode, params: dict[str, ValueNode], cfg: RefinerConfig) -> ValueNode:
    """Self-attention over all points, gated by a scalar that starts at zero."""
    Q_coarse, was_2d = _ensure_batched(Q_coarse)
    F_E, _ = _ensure_batched(F_E)
    b, m, _ = Q_coarse.value.shape

    x = _linear(concat([F_E, Q_coarse], axis=2), params, "ref.global.embed")  # (b, m, C)
    q = x @ params["ref.global.query.weight"]
    k = x @ params["ref.global.key.weight"]
    v = x @ params["ref.global.value.weight"]
    scores = q @ k.transpose((0, 2, 1))
    attn = softmax(scores, axis=2)
    out = params["ref.global.gamma"] * (attn @ v) + x
    return out.reshape((m, cfg.C)) if was_2d else out


def regress_offsets(F_R: ValueNode, params: dict[str, ValueNode]) -> ValueNode:
    """Offset head; its final layer is zero-initialized so offsets start at 0."""
    h = _linear(F_R, params, "ref.off.fc0")
    return _linear(h, params, "ref.off.fc1", act=None)


def refiner_forward(
    Q_coarse: ValueNode,
    F_E: ValueNode,
    params: dict[str, ValueNode],
    cfg: RefinerConfig,
    variant: str = "full",
) -> RefinerOutput:
    """Refined points Q = Q' + offsets, with ablation variants selectable.

    variant: "full" (both units, residual head), "B" (global unit only),
    "C" (local unit only), "D" (both units, head regresses Q directly).
    """
    if variant not in ("full", "B", "C", "D"):
        raise ValueError(f"unknown refiner variant {variant!r}")
    if variant == "B":
        F_R = global_refine(Q_coarse, F_E, params, cfg)
    elif variant == "C":
        F_R = local_refine(Q_coarse, F_E, params, cfg)
    else:
        F_R = local_refine(Q_coarse, F_E, params, cfg) + global_refine(Q_coarse, F_E, params, cfg)

    if variant == "D":
        # Direct coordinate regression; delta is derived so that the
        # Q == Q' + delta identity stays exact (the Q' terms cancel in grad).
        delta = regress_offsets(F_R, params) - Q_coarse
    else:
        delta = regress_offsets(F_R, params)
    Q = Q_coarse + delta
    return RefinerOutput(Q=Q, delta=delta, F_R=F_R)


def param_shapes(cfg: RefinerConfig) -> dict[str, tuple[int, ...]]:
    c = cfg.C
    reduced = c // cfg.attn_reduction
    return {
        "ref.local.enc0.weight": (c + 5, c),
        "ref.local.enc0.bias": (c,),
        "ref.local.enc1.weight": (c, c),
        "ref.local.enc1.bias": (c,),
        "ref.local.post.weight": (c, c),
        "ref.local.post.bias": (c,),
        "ref.local.w0.weight": (3, c),
        "ref.local.w0.bias": (c,),
        "ref.local.w1.weight": (c, c),
        "ref.local.w1.bias": (c,),
        "ref.global.embed.weight": (c + 5, c),
        "ref.global.embed.bias": (c,),
        "ref.global.query.weight": (c, reduced),
        "ref.global.key.weight": (c, reduced),
        "ref.global.value.weight": (c, c),
        "ref.global.gamma": (1,),
        "ref.off.fc0.weight": (c, c // 2),
        "ref.off.fc0.bias": (c // 2,),
        "ref.off.fc1.weight": (c // 2, 3),
        "ref.off.fc1.bias": (3,),
    }
