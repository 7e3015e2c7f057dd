"""Point-cloud container, downsampling, neighbor graphs and corruption.

Clouds are row-stacked (N, 3) float64 arrays in meters, immutable after
construction. All randomized operations draw from an explicit seed, so every
result here is bit-reproducible.

File formats:
  * text -- one point per line, three space-separated decimals, '#' comments,
  * PCF1 -- magic b"PCF1", little-endian uint32 N, then 3N float32 row-major.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import geom

PCF_MAGIC = b"PCF1"

# corruption severity grid: level -> (jitter sigma in meters, per-op fraction)
NOISE_LEVELS = {
    0: (0.0, 0.0),
    1: (0.05, 0.05),
    2: (0.1, 0.10),
    3: (0.2, 0.20),
}


class TooFewPoints(ValueError):
    """Operation needs more points than the cloud provides."""


@dataclass(frozen=True)
class PointCloud:
    """Ordered set of N 3D points (N >= 1, all coordinates finite)."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
            raise ValueError(f"expected an (N, 3) array with N >= 1, got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        pts = pts.copy()
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]

    def transformed(self, t: geom.RigidTransform) -> "PointCloud":
        return PointCloud(t.apply(self.points))


@dataclass(frozen=True)
class KnnGraph:
    """Per-point neighbor table: row i holds the q nearest indices to point i,
    self excluded, sorted by ascending distance with ties broken by index."""

    neighbor_idx: np.ndarray
    q: int

    def __post_init__(self):
        idx = np.asarray(self.neighbor_idx, dtype=np.int64)
        if idx.ndim != 2 or idx.shape[1] != self.q:
            raise ValueError("neighbor table must be (N, q)")
        idx = idx.copy()
        idx.setflags(write=False)
        object.__setattr__(self, "neighbor_idx", idx)


@dataclass(frozen=True)
class NoiseSpec:
    """Corruption severity. ``sigma``/``frac`` are pinned to the level grid."""

    level: int
    sigma: float
    frac: float
    seed: int

    def __post_init__(self):
        if self.level not in NOISE_LEVELS:
            raise ValueError(f"noise level must be one of {sorted(NOISE_LEVELS)}")
        want = NOISE_LEVELS[self.level]
        if (self.sigma, self.frac) != want:
            raise ValueError(f"level {self.level} requires (sigma, frac) == {want}")

    @staticmethod
    def from_level(level: int, seed: int) -> "NoiseSpec":
        sigma, frac = NOISE_LEVELS[level]
        return NoiseSpec(level=level, sigma=sigma, frac=frac, seed=seed)


# core operations -------------------------------------------------------------


def decenter(x: PointCloud) -> tuple[PointCloud, np.ndarray]:
    """Subtract the per-axis arithmetic mean; returns (centered cloud, mean)."""
    mean = x.points.mean(axis=0)
    return PointCloud(x.points - mean), mean


def farthest_point_sample(x: PointCloud, target_n: int, seed: int) -> PointCloud:
    """Greedy farthest-point downsampling, seed fixes only the start index.

    Each subsequent pick maximizes the minimum distance to the selected set;
    distance ties resolve to the lowest index. Output keeps the original
    coordinates (a subset of the input rows).
    """
    n = len(x)
    if target_n < 1 or n < target_n:
        raise TooFewPoints(f"cannot sample {target_n} points from a cloud of {n}")
    rng = np.random.default_rng(seed)
    chosen = np.empty(target_n, dtype=np.int64)
    chosen[0] = int(rng.integers(n))
    dist = np.linalg.norm(x.points - x.points[chosen[0]], axis=1)
    for i in range(1, target_n):
        nxt = int(np.argmax(dist))  # argmax returns the first max: lowest-index tie-break
        chosen[i] = nxt
        dist = np.minimum(dist, np.linalg.norm(x.points - x.points[nxt], axis=1))
    return PointCloud(x.points[chosen])


def knn_graph(x: PointCloud, q: int) -> KnnGraph:
    """Exact q-nearest-neighbor table (O(N^2); clouds here stay <= 1024)."""
    n = len(x)
    if n <= q:
        raise TooFewPoints(f"need more than q={q} points, got {n}")
    diff = x.points[:, None, :] - x.points[None, :, :]
    d2 = np.einsum("ijk,ijk->ij", diff, diff)
    np.fill_diagonal(d2, np.inf)
    order = np.argsort(d2, axis=1, kind="stable")  # stable: equal distances sort by index
    return KnnGraph(order[:, :q], q)


def corrupt(x: PointCloud, spec: NoiseSpec) -> PointCloud:
    """Apply jitter, dropout, cropping and insertion in that fixed order.

    Each of the three count-based operations touches floor(frac * N) points of
    the original size N; level 0 returns the input unchanged.
    """
    if spec.level == 0:
        return x
    rng = np.random.default_rng(spec.seed)
    n = len(x)
    k = int(np.floor(spec.frac * n))
    if k < 1:
        raise TooFewPoints(f"frac {spec.frac} of {n} points rounds to zero")
    pts = x.points + rng.normal(0.0, spec.sigma, size=(n, 3))
    # dropout
    keep = np.setdiff1d(np.arange(len(pts)), rng.choice(len(pts), size=k, replace=False))
    pts = pts[keep]
    # crop: remove the k points nearest a randomly chosen anchor point
    anchor = pts[int(rng.integers(len(pts)))]
    nearest = np.argsort(np.linalg.norm(pts - anchor, axis=1), kind="stable")[:k]
    pts = np.delete(pts, nearest, axis=0)
    # insertion: uniform points inside the current bounding box
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    pts = np.concatenate([pts, rng.uniform(lo, hi, size=(k, 3))], axis=0)
    return PointCloud(pts)


def random_se3(seed: int, rot_mode: str = "so3", trans_scale: float = 1.0) -> geom.RigidTransform:
    """Random rigid transform.

    ``so3`` draws a uniform rotation (normalized Gaussian quaternion); ``so2``
    draws a uniform angle about z and keeps the z-translation at zero.
    Translations are uniform in [-trans_scale, trans_scale] per axis.
    """
    rng = np.random.default_rng(seed)
    if rot_mode == "so3":
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        if q[0] < 0.0:
            q = -q
        rot = geom.quat_to_rotation(geom.Quaternion(*q))
        trans = rng.uniform(-trans_scale, trans_scale, size=3)
    elif rot_mode == "so2":
        rot = geom.Rotation.about_z(rng.uniform(-np.pi, np.pi))
        trans = rng.uniform(-trans_scale, trans_scale, size=3)
        trans[2] = 0.0
    else:
        raise ValueError(f"rot_mode must be 'so3' or 'so2', got {rot_mode!r}")
    return geom.RigidTransform(rot, trans)


# persistence -----------------------------------------------------------------


def write_cloud_text(path, x: PointCloud) -> None:
    lines = [f"{p[0]!r} {p[1]!r} {p[2]!r}" for p in x.points]
    Path(path).write_text("\n".join(lines) + "\n")


def read_cloud_text(path) -> PointCloud:
    rows = []
    for line in Path(path).read_text().splitlines():
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        fields = body.split()
        if len(fields) != 3:
            raise ValueError(f"expected 3 fields per line, got {len(fields)}: {line!r}")
        rows.append([float(f) for f in fields])
    return PointCloud(np.array(rows))


def write_cloud_pcf(path, x: PointCloud) -> None:
    payload = x.points.astype("<f4").tobytes(order="C")
    with open(path, "wb") as f:
        f.write(PCF_MAGIC)
        f.write(struct.pack("<I", len(x)))
        f.write(payload)


def read_cloud_pcf(path) -> PointCloud:
    raw = Path(path).read_bytes()
    return cloud_from_pcf_bytes(raw)


def cloud_to_pcf_bytes(x: PointCloud) -> bytes:
    return PCF_MAGIC + struct.pack("<I", len(x)) + x.points.astype("<f4").tobytes(order="C")


def cloud_from_pcf_bytes(raw: bytes, offset: int = 0) -> PointCloud:
    cloud, _ = read_pcf_block(raw, offset)
    return cloud


def read_pcf_block(raw: bytes, offset: int = 0) -> tuple[PointCloud, int]:
    """Parse one PCF1 block at ``offset``; returns (cloud, next offset)."""
    if raw[offset:offset + 4] != PCF_MAGIC:
        raise ValueError("bad PCF1 magic")
    (n,) = struct.unpack_from("<I", raw, offset + 4)
    start = offset + 8
    end = start + 12 * n
    pts = np.frombuffer(raw[start:end], dtype="<f4").reshape(n, 3).astype(np.float64)
    return PointCloud(pts), end
