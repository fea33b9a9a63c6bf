"""Analytic-surface dataset generation: sampling, pairs, noise, persistence."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .cloud import PatchTransform, PointCloud, load_xyz, normalize_patch, save_xyz, fps

KINDS = ("sphere", "torus", "cylinder", "plane", "superellipsoid")

DEFAULT_PARAMS = {
    "sphere": {"radius": 1.0},
    "torus": {"major_radius": 0.7, "minor_radius": 0.3},
    "cylinder": {"radius": 0.5, "height": 1.6},
    "plane": {"half_x": 1.0, "half_y": 1.0},
    "superellipsoid": {"ax": 1.0, "ay": 0.8, "az": 0.6, "e1": 0.8, "e2": 1.2},
}


@dataclass
class ShapeSpec:
    kind: str
    params: dict[str, float]
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown surface kind {self.kind!r}")
        if any(v <= 0 for v in self.params.values()):
            raise ValueError(f"surface parameters must be positive: {self.params}")
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)

    def to_world(self, pts: np.ndarray) -> np.ndarray:
        return pts @ self.rotation.T + self.translation

    def to_local(self, pts: np.ndarray) -> np.ndarray:
        return (pts - self.translation) @ self.rotation

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "params": self.params,
            "rotation": self.rotation.ravel().tolist(),
            "translation": self.translation.tolist(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "ShapeSpec":
        return cls(
            kind=d["kind"],
            params=dict(d["params"]),
            rotation=np.asarray(d["rotation"]).reshape(3, 3),
            translation=np.asarray(d["translation"]),
        )


@dataclass
class PatchPair:
    """Normalized training sample: sparse input, dense target, provenance."""

    P: np.ndarray
    target: np.ndarray
    transform: PatchTransform
    shape: ShapeSpec | None = None


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform rotation via a normalized random quaternion."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def _sgn_pow(x: np.ndarray, e: float) -> np.ndarray:
    return np.sign(x) * np.abs(x) ** e


def _superellipsoid_point(spec_params: dict, eta: np.ndarray, omega: np.ndarray) -> np.ndarray:
    ax, ay, az = spec_params["ax"], spec_params["ay"], spec_params["az"]
    e1, e2 = spec_params["e1"], spec_params["e2"]
    ce = _sgn_pow(np.cos(eta), e1)
    return np.stack([
        ax * ce * _sgn_pow(np.cos(omega), e2),
        ay * ce * _sgn_pow(np.sin(omega), e2),
        az * _sgn_pow(np.sin(eta), e1),
    ], axis=-1)


def _superellipsoid_area_weight(spec_params: dict, eta: np.ndarray, omega: np.ndarray) -> np.ndarray:
    h = 1e-5
    de = (_superellipsoid_point(spec_params, eta + h, omega)
          - _superellipsoid_point(spec_params, eta - h, omega)) / (2 * h)
    do = (_superellipsoid_point(spec_params, eta, omega + h)
          - _superellipsoid_point(spec_params, eta, omega - h)) / (2 * h)
    return np.linalg.norm(np.cross(de, do), axis=-1)


def _raw_surface_samples(spec: ShapeSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    """n area-weighted random samples in the shape's local frame."""
    p = spec.params
    if spec.kind == "sphere":
        v = rng.normal(size=(n, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        return p["radius"] * v
    if spec.kind == "torus":
        R, r = p["major_radius"], p["minor_radius"]
        out = np.empty((0, 3))
        while len(out) < n:
            m = 2 * (n - len(out)) + 16
            phi = rng.uniform(0, 2 * np.pi, m)
            theta = rng.uniform(0, 2 * np.pi, m)
            accept = rng.uniform(0, 1, m) < (R + r * np.cos(theta)) / (R + r)
            phi, theta = phi[accept], theta[accept]
            pts = np.stack([
                (R + r * np.cos(theta)) * np.cos(phi),
                (R + r * np.cos(theta)) * np.sin(phi),
                r * np.sin(theta),
            ], axis=1)
            out = np.concatenate([out, pts])
        return out[:n]
    if spec.kind == "cylinder":
        phi = rng.uniform(0, 2 * np.pi, n)
        z = rng.uniform(-p["height"] / 2, p["height"] / 2, n)
        return np.stack([p["radius"] * np.cos(phi), p["radius"] * np.sin(phi), z], axis=1)
    if spec.kind == "plane":
        x = rng.uniform(-p["half_x"], p["half_x"], n)
        y = rng.uniform(-p["half_y"], p["half_y"], n)
        return np.stack([x, y, np.zeros(n)], axis=1)
    if spec.kind == "superellipsoid":
        ge, go = np.meshgrid(np.linspace(-np.pi / 2 + 1e-3, np.pi / 2 - 1e-3, 48),
                             np.linspace(-np.pi, np.pi, 96))
        w_max = _superellipsoid_area_weight(p, ge.ravel(), go.ravel()).max() * 1.1
        out = np.empty((0, 3))
        while len(out) < n:
            m = 3 * (n - len(out)) + 16
            eta = rng.uniform(-np.pi / 2, np.pi / 2, m)
            omega = rng.uniform(-np.pi, np.pi, m)
            w = _superellipsoid_area_weight(p, eta, omega)
            keep = rng.uniform(0, w_max, m) < w
            out = np.concatenate([out, _superellipsoid_point(p, eta[keep], omega[keep])])
        return out[:n]
    raise ValueError(f"unknown surface kind {spec.kind!r}")


def sample_surface(spec: ShapeSpec, n: int, seed: int = 0) -> PointCloud:
    """Approximately uniform n points on the surface: 4n oversample, then FPS."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    raw = _raw_surface_samples(spec, 4 * n, rng)
    keep = fps(raw, n, seed_index=0)
    return PointCloud(spec.to_world(raw[keep]))


def make_pair(spec: ShapeSpec, N: int, r: int, bias: float = 0.0, seed: int = 0) -> PatchPair:
    """Dense target from the surface; sparse input drawn from the target.

    bias=0 draws the input uniformly (an exact subset); bias>0 weights the
    draw by exp(-bias * normalized distance to a random anchor), mimicking
    scan non-uniformity.
    """
    if not 0.0 <= bias <= 1.0:
        raise ValueError(f"bias must lie in [0, 1], got {bias}")
    if N < 8:
        raise ValueError("N must be >= 8")
    rng = np.random.default_rng(seed)
    target_cloud = sample_surface(spec, r * N, seed=seed)
    normalized, transform = normalize_patch(target_cloud)
    q_hat = normalized.points
    if bias == 0.0:
        idx = rng.choice(len(q_hat), size=N, replace=False)
    else:
        anchor = q_hat[rng.integers(len(q_hat))]
        d = np.linalg.norm(q_hat - anchor, axis=1)
        probs = np.exp(-bias * d)
        probs /= probs.sum()
        idx = rng.choice(len(q_hat), size=N, replace=False, p=probs)
    return PatchPair(P=q_hat[np.sort(idx)], target=q_hat, transform=transform, shape=spec)


def add_noise(cloud, level: float, seed: int = 0) -> PointCloud:
    """Isotropic Gaussian jitter with sigma = level * unit patch radius."""
    if level < 0:
        raise ValueError("noise level must be >= 0")
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    if level == 0:
        return PointCloud(pts.copy())
    rng = np.random.default_rng(seed)
    return PointCloud(pts + rng.normal(0.0, level, size=pts.shape))


@dataclass
class DatasetConfig:
    kinds: tuple[str, ...] = ("sphere", "torus")
    n_pairs: int = 128
    N: int = 64
    r: int = 4
    bias: float = 0.5
    seed: int = 0
    param_scale_range: tuple[float, float] = (0.7, 1.0)
    random_pose: bool = True

    def __post_init__(self):
        self.kinds = tuple(self.kinds)
        for k in self.kinds:
            if k not in KINDS:
                raise ValueError(f"unknown surface kind {k!r}")
        lo, hi = self.param_scale_range
        if not (0 < lo <= hi):
            raise ValueError(f"bad param_scale_range {self.param_scale_range}")


def _spec_for(cfg: DatasetConfig, index: int, rng: np.random.Generator) -> ShapeSpec:
    kind = cfg.kinds[index % len(cfg.kinds)]
    scale = rng.uniform(*cfg.param_scale_range)
    params = {k: v * scale for k, v in DEFAULT_PARAMS[kind].items()}
    if kind == "superellipsoid":
        # Exponents are shape, not size: keep them inside a stable range.
        params["e1"] = float(np.clip(DEFAULT_PARAMS[kind]["e1"] * scale, 0.5, 1.6))
        params["e2"] = float(np.clip(DEFAULT_PARAMS[kind]["e2"] * scale, 0.5, 1.6))
    rotation = random_rotation(rng) if cfg.random_pose else np.eye(3)
    translation = rng.uniform(-0.5, 0.5, 3) if cfg.random_pose else np.zeros(3)
    return ShapeSpec(kind=kind, params=params, rotation=rotation, translation=translation)


def generate_pairs(cfg: DatasetConfig) -> list[PatchPair]:
    rng = np.random.default_rng(cfg.seed)
    pairs = []
    for i in range(cfg.n_pairs):
        spec = _spec_for(cfg, i, rng)
        pair_seed = int(rng.integers(0, 2**31 - 1))
        pairs.append(make_pair(spec, cfg.N, cfg.r, bias=cfg.bias, seed=pair_seed))
    return pairs


def build_dataset(cfg: DatasetConfig, out_dir) -> Path:
    """Write pair XYZ files plus a manifest; reload round-trips exactly."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    entries = []
    for i in range(cfg.n_pairs):
        spec = _spec_for(cfg, i, rng)
        pair_seed = int(rng.integers(0, 2**31 - 1))
        pair = make_pair(spec, cfg.N, cfg.r, bias=cfg.bias, seed=pair_seed)
        in_name = f"pair_{i:05d}_input.xyz"
        tgt_name = f"pair_{i:05d}_target.xyz"
        save_xyz(PointCloud(pair.P), out / in_name)
        save_xyz(PointCloud(pair.target), out / tgt_name)
        entries.append({
            "index": i,
            "input": in_name,
            "target": tgt_name,
            "seed": pair_seed,
            "shape": spec.to_json(),
            "transform": {
                "centroid": pair.transform.centroid.tolist(),
                "scale": pair.transform.scale,
            },
        })
    manifest = {
        "config": {
            "kinds": list(cfg.kinds),
            "n_pairs": cfg.n_pairs,
            "N": cfg.N,
            "r": cfg.r,
            "bias": cfg.bias,
            "seed": cfg.seed,
            "param_scale_range": list(cfg.param_scale_range),
            "random_pose": cfg.random_pose,
        },
        "entries": entries,
    }
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=1)
    return out


def load_dataset(path) -> tuple[list[PatchPair], dict]:
    root = Path(path)
    with open(root / "manifest.json") as f:
        manifest = json.load(f)
    pairs = []
    for entry in manifest["entries"]:
        p = load_xyz(root / entry["input"]).points
        target = load_xyz(root / entry["target"]).points
        transform = PatchTransform(
            np.asarray(entry["transform"]["centroid"]),
            entry["transform"]["scale"],
        )
        pairs.append(PatchPair(P=p, target=target, transform=transform,
                               shape=ShapeSpec.from_json(entry["shape"])))
    return pairs, manifest["config"]
