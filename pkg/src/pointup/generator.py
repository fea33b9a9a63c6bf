"""Dense generator: sparse points in, coarse dense points plus expanded features out.

All forward functions accept a single patch (N x 3) or a stacked batch
(B x N x 3) and keep the rank they were given.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ValueNode, concat, gather, reduce_max, tile
from .cloud import knn_indices_batch


@dataclass
class GeneratorConfig:
    C: int = 64
    r: int = 4
    feat_blocks: int = 2
    feat_knn: int = 16

    def __post_init__(self):
        if self.C < 8:
            raise ValueError("C must be >= 8")
        if self.r < 2:
            raise ValueError("r must be >= 2")
        if self.feat_blocks < 1:
            raise ValueError("feat_blocks must be >= 1")


@dataclass
class GridCode:
    """Deterministic r x 2 lattice codes in [-1, 1]^2 tagged onto duplicates."""

    codes: np.ndarray


def make_grid(r: int) -> GridCode:
    """First r row-major entries of the ceil(sqrt(r))-per-axis lattice."""
    if r < 1:
        raise ValueError("r must be >= 1")
    s = int(np.ceil(np.sqrt(r)))
    axis = np.linspace(-1.0, 1.0, s) if s > 1 else np.zeros(1)
    xs, ys = np.meshgrid(axis, axis, indexing="ij")
    lattice = np.stack([xs.ravel(), ys.ravel()], axis=1)
    return GridCode(lattice[:r])


def _ensure_batched(node: ValueNode) -> tuple[ValueNode, bool]:
    if node.value.ndim == 2:
        return node.reshape((1,) + node.value.shape), True
    return node, False


def _linear(x: ValueNode, params: dict[str, ValueNode], name: str, act: str | None = "relu") -> ValueNode:
    out = x @ params[f"{name}.weight"] + params[f"{name}.bias"]
    if act == "relu":
        out = out.relu()
    return out


def _group(flat: ValueNode, idx: np.ndarray, batch: int, n: int) -> ValueNode:
    """Batched row lookup: flat (B*n, C) gathered with idx (B, n, K)."""
    offsets = (np.arange(batch) * n)[:, None, None]
    return gather(flat, idx + offsets, axis=0)


def _knn_per_item(points: np.ndarray, k: int) -> np.ndarray:
    return knn_indices_batch(points, k, include_self=True)


def extract_features(P: ValueNode, params: dict[str, ValueNode], cfg: GeneratorConfig) -> ValueNode:
    """Per-point C-channel features via dense blocks of grouped relative MLPs.

    Each block groups the current features over feat_knn neighbors (found on
    the input coordinates), encodes neighbor features next to relative
    offsets, and max-pools; block outputs concatenate into a bottleneck.
    """
    P, was_2d = _ensure_batched(P)
    b, n, _ = P.value.shape
    if n < cfg.feat_knn:
        raise ValueError(f"need at least feat_knn={cfg.feat_knn} points, got {n}")
    idx = _knn_per_item(P.value, cfg.feat_knn)

    p_flat = P.reshape((b * n, 3))
    grouped_xyz = _group(p_flat, idx, b, n)                      # (b, n, K, 3)
    centers = tile(P.reshape((b, n, 1, 3)), axis=2, factor=cfg.feat_knn)
    rel = grouped_xyz - centers

    feats = P
    block_outs = []
    for blk in range(cfg.feat_blocks):
        c_in = feats.value.shape[-1]
        grouped = _group(feats.reshape((b * n, c_in)), idx, b, n)
        enc = concat([grouped, rel], axis=3)
        h = _linear(enc, params, f"gen.feat.block{blk}.mlp")
        feats = reduce_max(h, axis=2)                            # (b, n, C)
        block_outs.append(feats)
    dense = block_outs[0] if len(block_outs) == 1 else concat(block_outs, axis=2)
    out = _linear(dense, params, "gen.feat.bottleneck")
    return out.reshape((n, cfg.C)) if was_2d else out


def expand_features(F_P: ValueNode, grid: GridCode) -> ValueNode:
    """Duplicate each feature row r times and tag copies with grid codes.

    Output row i*r + j is (features of point i, grid row j): point-major.
    """
    F_P, was_2d = _ensure_batched(F_P)
    b, n, c = F_P.value.shape
    r = grid.codes.shape[0]
    repeated = tile(F_P.reshape((b, n, 1, c)), axis=2, factor=r).reshape((b, n * r, c))
    grid_node = ad.constant(np.tile(grid.codes, (b, n, 1)).astype(F_P.value.dtype))
    out = concat([repeated, grid_node], axis=2)
    return out.reshape((n * r, c + 2)) if was_2d else out


def regress_coarse(F_E: ValueNode, params: dict[str, ValueNode]) -> ValueNode:
    """Shared per-row MLP down to 3-d coordinates, linear at the end."""
    h = _linear(F_E, params, "gen.reg.fc0")
    return _linear(h, params, "gen.reg.fc1", act=None)


def generator_forward(P: ValueNode, params: dict[str, ValueNode], cfg: GeneratorConfig) -> tuple[ValueNode, ValueNode]:
    """Sparse patch -> (coarse dense points, expanded feature map)."""
    F_P = extract_features(P, params, cfg)
    F_E = expand_features(F_P, make_grid(cfg.r))
    Q_coarse = regress_coarse(F_E, params)
    return Q_coarse, F_E


def param_shapes(cfg: GeneratorConfig) -> dict[str, tuple[int, ...]]:
    """Weight/bias shapes; none depend on the upsampling rate r."""
    shapes: dict[str, tuple[int, ...]] = {}
    c_in = 3
    for blk in range(cfg.feat_blocks):
        shapes[f"gen.feat.block{blk}.mlp.weight"] = (c_in + 3, cfg.C)
        shapes[f"gen.feat.block{blk}.mlp.bias"] = (cfg.C,)
        c_in = cfg.C
    shapes["gen.feat.bottleneck.weight"] = (cfg.feat_blocks * cfg.C, cfg.C)
    shapes["gen.feat.bottleneck.bias"] = (cfg.C,)
    shapes["gen.reg.fc0.weight"] = (cfg.C + 2, cfg.C // 2)
    shapes["gen.reg.fc0.bias"] = (cfg.C // 2,)
    shapes["gen.reg.fc1.weight"] = (cfg.C // 2, 3)
    shapes["gen.reg.fc1.bias"] = (3,)
    return shapes
