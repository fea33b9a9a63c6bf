"""Point-set containers, neighborhood search, sampling, and file I/O."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class PointCloudError(ValueError):
    pass


@dataclass
class PointCloud:
    """M x 3 coordinates plus optional named per-point scalar columns."""

    points: np.ndarray
    attrs: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3 or self.points.shape[0] < 1:
            raise PointCloudError(f"points must be M x 3 with M >= 1, got {self.points.shape}")
        if not np.isfinite(self.points).all():
            raise PointCloudError("points contain non-finite coordinates")
        for name, col in list(self.attrs.items()):
            col = np.asarray(col, dtype=np.float64)
            if col.shape != (len(self),):
                raise PointCloudError(f"attr {name!r} has shape {col.shape}, expected ({len(self)},)")
            self.attrs[name] = col

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass
class PatchTransform:
    """Affine map taking a normalized patch back to its original frame."""

    centroid: np.ndarray
    scale: float

    def __post_init__(self):
        self.centroid = np.asarray(self.centroid, dtype=np.float64).reshape(3)
        self.scale = float(self.scale)
        if self.scale <= 0:
            raise PointCloudError(f"scale must be positive, got {self.scale}")


@dataclass
class Patch:
    """A normalized local neighborhood and where it came from."""

    points: PointCloud
    transform: PatchTransform
    indices: np.ndarray


def as_points(cloud) -> np.ndarray:
    """Accept a PointCloud or raw (M, 3) array and return the array."""
    if isinstance(cloud, PointCloud):
        return cloud.points
    arr = np.asarray(cloud, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise PointCloudError(f"expected M x 3 points, got shape {arr.shape}")
    return arr


def pairwise_sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances, (len(a), len(b))."""
    d2 = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * (a @ b.T)
    return np.maximum(d2, 0.0)


def knn(points, queries, k: int, include_self: bool = False) -> np.ndarray:
    """Indices of the k nearest points per query, ascending by distance.

    Ties break toward the lower index. When `include_self` and the query set
    is the point set itself, index i is forced first in row i.
    """
    pts = as_points(points)
    qs = as_points(queries)
    if k > len(pts):
        raise PointCloudError(f"k={k} exceeds point count {len(pts)}")
    same = pts.shape == qs.shape and np.array_equal(pts, qs)
    d2 = pairwise_sq_dists(qs, pts)
    if same:
        diag = np.arange(len(pts))
        if include_self:
            d2[diag, diag] = -1.0
        else:
            if k > len(pts) - 1:
                raise PointCloudError(f"k={k} exceeds neighbor count {len(pts) - 1} with self excluded")
            d2[diag, diag] = np.inf
    order = np.argsort(d2, axis=1, kind="stable")
    return order[:, :k]


def knn_indices_batch(points: np.ndarray, k: int, include_self: bool = True) -> np.ndarray:
    """Self-KNN over a stacked batch (B, M, 3) -> (B, M, k) index array.

    Vectorized argpartition variant used inside model forward passes; agrees
    with knn() whenever pairwise distances are distinct (ties may order
    differently). include_self pins index i first in row i.
    """
    b, m, _ = points.shape
    if k > m:
        raise PointCloudError(f"k={k} exceeds point count {m}")
    sq = (points * points).sum(-1)
    d2 = sq[..., :, None] + sq[..., None, :] - 2.0 * np.matmul(points, points.swapaxes(-1, -2))
    diag = np.arange(m)
    d2[:, diag, diag] = -np.inf if include_self else np.inf
    if k < m:
        part = np.argpartition(d2, k - 1, axis=2)[:, :, :k]
    else:
        part = np.broadcast_to(np.arange(m), (b, m, m)).copy()
    part_d = np.take_along_axis(d2, part, axis=2)
    order = np.argsort(part_d, axis=2, kind="stable")
    return np.take_along_axis(part, order, axis=2)


def fps(points, m: int, seed_index: int = 0) -> np.ndarray:
    """Greedy farthest-point ordering of m indices starting from seed_index."""
    pts = as_points(points)
    n = len(pts)
    if not 1 <= m <= n:
        raise PointCloudError(f"m={m} out of range for {n} points")
    if not 0 <= seed_index < n:
        raise PointCloudError(f"seed_index={seed_index} out of range")
    chosen = np.empty(m, dtype=np.int64)
    chosen[0] = seed_index
    d2 = ((pts - pts[seed_index]) ** 2).sum(1)
    for i in range(1, m):
        nxt = int(np.argmax(d2))
        chosen[i] = nxt
        d2 = np.minimum(d2, ((pts - pts[nxt]) ** 2).sum(1))
    return chosen


def normalize_patch(patch) -> tuple[PointCloud, PatchTransform]:
    """Center on the centroid and scale the farthest point to unit norm."""
    src = patch if isinstance(patch, PointCloud) else PointCloud(as_points(patch))
    pts = src.points
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    scale = float(np.linalg.norm(centered, axis=1).max())
    if scale < 1e-12:
        scale = 1.0
    return (
        PointCloud(centered / scale, dict(src.attrs)),
        PatchTransform(centroid, scale),
    )


def denormalize(patch, t: PatchTransform) -> PointCloud:
    src = patch if isinstance(patch, PointCloud) else PointCloud(as_points(patch))
    return PointCloud(src.points * t.scale + t.centroid, dict(src.attrs))


def extract_patches(cloud, num_seeds: int, patch_size: int) -> list[Patch]:
    """FPS seeds, then each seed's patch_size nearest neighbors, normalized."""
    pts = as_points(cloud)
    if patch_size > len(pts):
        raise PointCloudError(f"patch_size={patch_size} exceeds cloud size {len(pts)}")
    if num_seeds < 1:
        raise PointCloudError("num_seeds must be >= 1")
    seeds = fps(pts, min(num_seeds, len(pts)), seed_index=0)
    idx = knn(pts, pts[seeds], patch_size)
    patches = []
    for row in idx:
        normalized, t = normalize_patch(pts[row])
        patches.append(Patch(normalized, t, row.copy()))
    return patches


def default_num_seeds(cloud_size: int, patch_size: int) -> int:
    return int(np.ceil(3 * cloud_size / patch_size))


def merge_patches(upsampled, target_count: int) -> PointCloud:
    """Denormalize, concatenate, and FPS-consolidate to target_count points."""
    pieces = [denormalize(cloud, t).points for cloud, t in upsampled]
    union = np.concatenate(pieces, axis=0)
    if len(union) < target_count:
        raise PointCloudError(f"only {len(union)} points available for target {target_count}")
    keep = fps(union, target_count, seed_index=0)
    return PointCloud(union[keep])


# ---------------------------------------------------------------------------
# XYZ / ascii PLY formats
# ---------------------------------------------------------------------------

class ParseError(ValueError):
    pass


def load_xyz(path) -> PointCloud:
    """One point per line: x y z [extra columns -> attrs attr0, attr1, ...]."""
    rows = []
    ncols = None
    with open(path, "r") as f:
        for lineno, line in enumerate(f, start=1):
            stripped = line.strip()
            if not stripped:
                continue
            tokens = stripped.split()
            if len(tokens) < 3:
                raise ParseError(f"{path}: line {lineno}: expected >= 3 columns, got {len(tokens)}")
            try:
                values = [float(t) for t in tokens]
            except ValueError:
                raise ParseError(f"{path}: line {lineno}: non-numeric value") from None
            if ncols is None:
                ncols = len(values)
            elif len(values) != ncols:
                raise ParseError(f"{path}: line {lineno}: inconsistent column count")
            rows.append(values)
    if not rows:
        raise ParseError(f"{path}: empty point file")
    data = np.asarray(rows, dtype=np.float64)
    attrs = {f"attr{i}": data[:, 3 + i] for i in range(data.shape[1] - 3)}
    return PointCloud(data[:, :3], attrs)


def save_xyz(cloud: PointCloud, path) -> None:
    pts = cloud.points
    cols = [pts] + [cloud.attrs[k][:, None] for k in cloud.attrs]
    data = np.hstack(cols)
    with open(path, "w") as f:
        for row in data:
            f.write(" ".join(f"{v:.17g}" for v in row) + "\n")


def save_ply(cloud: PointCloud, path) -> None:
    """Ascii PLY with float x, y, z and one property per attr column."""
    names = list(cloud.attrs)
    with open(path, "w") as f:
        f.write("ply\nformat ascii 1.0\n")
        f.write(f"element vertex {len(cloud)}\n")
        for prop in ("x", "y", "z"):
            f.write(f"property float {prop}\n")
        for name in names:
            f.write(f"property float {name}\n")
        f.write("end_header\n")
        cols = [cloud.points] + [cloud.attrs[n][:, None] for n in names]
        for row in np.hstack(cols):
            f.write(" ".join(f"{v:.9g}" for v in row) + "\n")


def load_ply(path) -> PointCloud:
    with open(path, "r") as f:
        lines = [ln.rstrip("\n") for ln in f]
    if not lines or lines[0].strip() != "ply":
        raise ParseError(f"{path}: not a PLY file")
    count = None
    props: list[str] = []
    body_at = None
    for i, line in enumerate(lines[1:], start=1):
        tokens = line.split()
        if not tokens:
            continue
        if tokens[0] == "element" and tokens[1] == "vertex":
            count = int(tokens[2])
        elif tokens[0] == "property" and count is not None:
            props.append(tokens[-1])
        elif tokens[0] == "end_header":
            body_at = i + 1
            break
    if count is None or body_at is None:
        raise ParseError(f"{path}: malformed PLY header")
    if props[:3] != ["x", "y", "z"]:
        raise ParseError(f"{path}: expected x, y, z leading properties, got {props[:3]}")
    body = [ln.split() for ln in lines[body_at:body_at + count]]
    if len(body) != count:
        raise ParseError(f"{path}: expected {count} vertex rows, found {len(body)}")
    data = np.asarray(body, dtype=np.float64)
    attrs = {name: data[:, 3 + j] for j, name in enumerate(props[3:])}
    return PointCloud(data[:, :3], attrs)
