"""Loss, schedules, optimizer, augmentation, and the end-to-end training loop."""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, ValueNode, gather, reduce_mean, reduce_sum, save_checkpoint
from .generator import GeneratorConfig
from .model import full_forward, init_params, param_nodes
from .refiner import RefinerConfig
from .synth import PatchPair, random_rotation


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 400
    batch_size: int = 28
    lr0: float = 0.001
    lr_decay: float = 0.7
    lr_decay_every: int = 40
    lr_floor: float = 1e-6
    lambda0: float = 0.01
    lambda1: float = 1.0
    scale_range: tuple[float, float] = (0.8, 1.2)
    perturb_sigma: float = 0.005
    perturb_clip: float = 3.0
    augment: bool = True
    seed: int = 0
    N: int = 256
    r: int = 4
    C: int = 64
    K: int = 16
    feat_knn: int = 16
    feat_blocks: int = 2
    attn_reduction: int = 4
    variant: str = "full"
    dtype: str = "float32"
    checkpoint_interval: int = 100
    repulsion_weight: float = 0.0
    repulsion_h: float = 0.05

    def __post_init__(self):
        if self.lambda0 > self.lambda1:
            raise ValueError("lambda0 must be <= lambda1")
        if self.lr_floor > self.lr0:
            raise ValueError("lr_floor must be <= lr0")

    def gen_config(self) -> GeneratorConfig:
        return GeneratorConfig(C=self.C, r=self.r, feat_blocks=self.feat_blocks, feat_knn=self.feat_knn)

    def ref_config(self) -> RefinerConfig:
        return RefinerConfig(K=self.K, C=self.C, attn_reduction=self.attn_reduction)

    def np_dtype(self):
        return np.dtype(self.dtype).type

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["scale_range"] = list(self.scale_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "scale_range" in d:
            d["scale_range"] = tuple(d["scale_range"])
        return cls(**d)


@dataclass
class TrainLogEntry:
    epoch: int
    iteration: int
    loss_total: float
    loss_coarse: float
    loss_refined: float
    lam: float
    lr: float


# ---------------------------------------------------------------------------
# Chamfer loss
# ---------------------------------------------------------------------------

def _as_node(x) -> ValueNode:
    return x if isinstance(x, ValueNode) else ad.constant(np.asarray(x, dtype=np.float64))


def _batched_sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d2 = (a * a).sum(-1)[..., :, None] + (b * b).sum(-1)[..., None, :] - 2.0 * np.matmul(a, b.swapaxes(-1, -2))
    return np.maximum(d2, 0.0)


def chamfer_batch(a: ValueNode, b: ValueNode) -> ValueNode:
    """Per-pair Chamfer distances for stacks (B, M, 3) vs (B, M', 3) -> (B,).

    The nearest-neighbor matching is computed from current values and held
    fixed, so gradients flow through the matched pairs only.
    """
    bsz, m, _ = a.value.shape
    mp = b.value.shape[1]
    if m == 0 or mp == 0:
        raise ValueError("chamfer inputs must be nonempty")
    d2 = _batched_sq_dists(a.value, b.value)
    idx_ab = np.argmin(d2, axis=2)
    idx_ba = np.argmin(d2, axis=1)

    flat_b = b.reshape((bsz * mp, 3))
    matched_b = gather(flat_b, idx_ab + (np.arange(bsz) * mp)[:, None], axis=0)
    diff_ab = a - matched_b
    term_ab = reduce_mean(reduce_sum(diff_ab * diff_ab, axis=2), axis=1)

    flat_a = a.reshape((bsz * m, 3))
    matched_a = gather(flat_a, idx_ba + (np.arange(bsz) * m)[:, None], axis=0)
    diff_ba = b - matched_a
    term_ba = reduce_mean(reduce_sum(diff_ba * diff_ba, axis=2), axis=1)

    return (term_ab + term_ba) * 0.5


def chamfer(a, b) -> ValueNode:
    """Differentiable scalar Chamfer distance between two point sets."""
    an, bn = _as_node(a), _as_node(b)
    if an.value.ndim == 2:
        an = an.reshape((1,) + an.value.shape)
    if bn.value.ndim == 2:
        bn = bn.reshape((1,) + bn.value.shape)
    return chamfer_batch(an, bn).reshape(())


def total_loss(Q_coarse, Q, Q_hat, lam: float) -> ValueNode:
    """CD(Q', target) + lam * CD(Q, target) as a differentiable scalar."""
    qc, q, qh = _as_node(Q_coarse), _as_node(Q), _as_node(Q_hat)
    if qc.value.shape != q.value.shape or q.value.shape != qh.value.shape:
        raise ValueError(
            f"size mismatch: Q'={qc.value.shape}, Q={q.value.shape}, target={qh.value.shape}")
    return chamfer(qc, qh) + chamfer(q, qh) * lam


def repulsion_penalty(q: ValueNode, h: float, k: int = 4) -> ValueNode:
    """Optional uniformity hook: penalizes squared-distance shortfall below h."""
    bsz, m, _ = q.value.shape
    d2 = _batched_sq_dists(q.value, q.value)
    idx = np.argsort(d2, axis=2, kind="stable")[:, :, 1:k + 1]
    flat = q.reshape((bsz * m, 3))
    neigh = gather(flat, idx + (np.arange(bsz) * m)[:, None, None], axis=0)
    centers = ad.tile(q.reshape((bsz, m, 1, 3)), axis=2, factor=k)
    diff = neigh - centers
    sq = reduce_sum(diff * diff, axis=3)
    gap = ad.constant(np.full(sq.value.shape, h * h, dtype=q.value.dtype)) - sq
    return reduce_mean(reduce_mean(reduce_mean(gap.relu(), axis=2), axis=1), axis=0)


# ---------------------------------------------------------------------------
# Schedules and optimizer
# ---------------------------------------------------------------------------

def lambda_schedule(epoch: int, cfg: TrainConfig) -> float:
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    if cfg.epochs == 1:
        return cfg.lambda0
    return cfg.lambda0 + (cfg.lambda1 - cfg.lambda0) * epoch / (cfg.epochs - 1)


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return max(cfg.lr_floor, cfg.lr0 * cfg.lr_decay ** (epoch // cfg.lr_decay_every))


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(
    store: ParamStore,
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Bias-corrected Adam update, in place on the store."""
    state.t += 1
    t = state.t
    for name in store.sorted_names():
        p = store.entries[name]
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != param shape {p.shape} for {name!r}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m += (1 - beta1) * (g - m)
        v += (1 - beta2) * (g * g - v)
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        p -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype)


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

def augment(pair: PatchPair, rng: np.random.Generator, cfg: TrainConfig) -> PatchPair:
    """Shared random rotation + scale on input and target; jitter input only."""
    rot = random_rotation(rng)
    scale = rng.uniform(*cfg.scale_range)
    p = pair.P @ rot.T * scale
    target = pair.target @ rot.T * scale
    if cfg.perturb_sigma > 0:
        jitter = rng.normal(0.0, cfg.perturb_sigma, size=p.shape)
        lim = cfg.perturb_clip * cfg.perturb_sigma
        p = p + np.clip(jitter, -lim, lim)
    return PatchPair(P=p, target=target, transform=pair.transform, shape=pair.shape)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

def write_log_csv(log: list[TrainLogEntry], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "iteration", "loss_total", "loss_coarse", "loss_refined", "lambda", "lr"])
        for e in log:
            w.writerow([e.epoch, e.iteration, repr(e.loss_total), repr(e.loss_coarse),
                        repr(e.loss_refined), repr(e.lam), repr(e.lr)])


def train(dataset: list[PatchPair], cfg: TrainConfig, out_dir=None) -> tuple[ParamStore, list[TrainLogEntry]]:
    """Deterministic end-to-end training; returns final params and the log.

    When out_dir is given, writes checkpoint.bin, periodic epoch checkpoints,
    and train_log.csv there.
    """
    if not dataset:
        raise ValueError("training dataset is empty")
    for pair in dataset:
        if pair.P.shape != (cfg.N, 3) or pair.target.shape != (cfg.r * cfg.N, 3):
            raise ValueError(
                f"pair shapes {pair.P.shape}/{pair.target.shape} do not match N={cfg.N}, r={cfg.r}")

    dtype = cfg.np_dtype()
    gen_cfg, ref_cfg = cfg.gen_config(), cfg.ref_config()
    store = init_params(gen_cfg, ref_cfg, seed=cfg.seed, dtype=dtype, variant=cfg.variant)
    state = AdamState()
    rng = np.random.default_rng(cfg.seed)
    log: list[TrainLogEntry] = []
    iteration = 0
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    for epoch in range(cfg.epochs):
        lam = lambda_schedule(epoch, cfg)
        lr = lr_schedule(epoch, cfg)
        order = rng.permutation(len(dataset))
        for start in range(0, len(order), cfg.batch_size):
            batch = [dataset[i] for i in order[start:start + cfg.batch_size]]
            if cfg.augment:
                batch = [augment(pair, rng, cfg) for pair in batch]
            p_stack = np.stack([b.P for b in batch]).astype(dtype)
            t_stack = np.stack([b.target for b in batch]).astype(dtype)

            pnodes = param_nodes(store)
            q_coarse, q = full_forward(ad.constant(p_stack), pnodes, gen_cfg, ref_cfg, cfg.variant)
            target_node = ad.constant(t_stack)
            cd_coarse = chamfer_batch(q_coarse, target_node)
            if q is None:
                root = reduce_mean(cd_coarse, axis=0)
                loss_refined = 0.0
            else:
                cd_fine = chamfer_batch(q, target_node)
                root = reduce_mean(cd_coarse + cd_fine * lam, axis=0)
                if cfg.repulsion_weight > 0:
                    root = root + repulsion_penalty(q, cfg.repulsion_h) * cfg.repulsion_weight
                loss_refined = float(cd_fine.value.mean())
            loss_coarse = float(cd_coarse.value.mean())
            loss_total = loss_coarse + lam * loss_refined
            if not np.isfinite(loss_total):
                raise TrainingDivergedError(
                    f"non-finite loss {loss_total} at epoch {epoch}, iteration {iteration}")

            ad.backward(root)
            grads = {name: node.grad for name, node in pnodes.items() if node.grad is not None}
            adam_step(store, grads, state, lr)

            log.append(TrainLogEntry(epoch, iteration, loss_total, loss_coarse, loss_refined, lam, lr))
            iteration += 1

        if out is not None and cfg.checkpoint_interval > 0 and (epoch + 1) % cfg.checkpoint_interval == 0:
            save_checkpoint(store, out / f"checkpoint_epoch{epoch + 1:04d}.bin", cfg.to_dict())

    if out is not None:
        save_checkpoint(store, out / "checkpoint.bin", cfg.to_dict())
        write_log_csv(log, out / "train_log.csv")
    return store, log
