"""Synthetic two-view scenes with labeled putative correspondences.

Each pair has an identity first camera and a second camera at ``[R | t]``
(``X2 = R X1 + t``). Inliers are noisy projections of random 3D points;
outliers keep the first-view point and re-draw the second-view point
uniformly inside the image. Lowe ratios are drawn from ``Beta(2, 5)`` for
inliers and ``Beta(5, 2)`` for outliers.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .geometry import CameraIntrinsics, Pose, essential_from_pose, normalize_coordinates

MAGIC = b"EPF1"
FORMAT_VERSION = 1
IMAGE_SIZE = (640, 480)
INLIER_RATIO_BETA = (2.0, 5.0)
OUTLIER_RATIO_BETA = (5.0, 2.0)


class DatasetError(Exception):
    pass


class ChecksumError(DatasetError):
    pass


class VersionError(DatasetError):
    pass


@dataclass
class SceneConfig:
    num_correspondences: int = 500
    outlier_ratio: float = 0.5
    noise_std_px: float = 1.0
    rotation_range_deg: tuple = (5.0, 30.0)
    baseline_range: tuple = (0.5, 2.0)
    depth_range: tuple = (4.0, 12.0)
    intrinsics: CameraIntrinsics = field(default_factory=CameraIntrinsics)
    seed: int = 0

    def validate(self):
        if self.num_correspondences < 16:
            raise ValueError("num_correspondences must be >= 16")
        if not 0.0 <= self.outlier_ratio <= 0.95:
            raise ValueError(f"outlier_ratio must be in [0, 0.95], got {self.outlier_ratio}")
        if self.noise_std_px < 0:
            raise ValueError("noise_std_px must be nonnegative")
        lo, hi = self.baseline_range
        if not 0 < lo <= hi:
            raise ValueError("baseline_range must be positive and ordered")
        return self

    def to_dict(self):
        d = asdict(self)
        d["intrinsics"] = asdict(self.intrinsics)
        d["rotation_range_deg"] = list(self.rotation_range_deg)
        d["baseline_range"] = list(self.baseline_range)
        d["depth_range"] = list(self.depth_range)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["intrinsics"] = CameraIntrinsics(**d["intrinsics"])
        for key in ("rotation_range_deg", "baseline_range", "depth_range"):
            d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class ScenePair:
    correspondences: np.ndarray
    labels: np.ndarray
    lowe_ratios: np.ndarray
    gt_pose: Pose
    gt_E: np.ndarray
    intrinsics: CameraIntrinsics

    @property
    def n(self):
        return len(self.labels)

    def __eq__(self, other):
        if not isinstance(other, ScenePair):
            return NotImplemented
        return (np.array_equal(self.correspondences, other.correspondences)
                and np.array_equal(self.labels, other.labels)
                and np.array_equal(self.lowe_ratios, other.lowe_ratios)
                and np.array_equal(self.gt_pose.R, other.gt_pose.R)
                and np.array_equal(self.gt_pose.t, other.gt_pose.t)
                and np.array_equal(self.gt_E, other.gt_E)
                and self.intrinsics == other.intrinsics)


def rotation_from_axis_angle(axis, angle_rad):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    K = np.array([[0.0, -axis[2], axis[1]], [axis[2], 0.0, -axis[0]], [-axis[1], axis[0], 0.0]])
    return np.eye(3) + np.sin(angle_rad) * K + (1.0 - np.cos(angle_rad)) * (K @ K)


def _random_unit(rng):
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def sample_pose(rng, rotation_range_deg, baseline_range):
    angle = np.radians(rng.uniform(*rotation_range_deg))
    R = rotation_from_axis_angle(_random_unit(rng), angle)
    t = _random_unit(rng) * rng.uniform(*baseline_range)
    return Pose(R, t)


def _project(K, X):
    x = X @ K.T
    return x[:, :2] / x[:, 2:3]


def _visible_points(rng, config, pose, count, max_rounds=50):
    K = config.intrinsics.K
    Kinv = np.linalg.inv(K)
    w, h = IMAGE_SIZE
    found = []
    total = 0
    for _ in range(max_rounds):
        m = 4 * (count - total) + 16
        px = np.column_stack([rng.uniform(0, w, m), rng.uniform(0, h, m), np.ones(m)])
        depth = rng.uniform(*config.depth_range, m)
        X1 = (px @ Kinv.T) * depth[:, None]
        X2 = X1 @ pose.R.T + pose.t
        ok = X2[:, 2] > 0.1
        p2 = _project(K, X2[ok])
        inside = (p2[:, 0] >= 0) & (p2[:, 0] < w) & (p2[:, 1] >= 0) & (p2[:, 1] < h)
        X1 = X1[ok][inside]
        found.append(X1)
        total += len(X1)
        if total >= count:
            return np.concatenate(found)[:count]
    raise DatasetError(f"could not find {count} points visible in both views")


def generate_scene_pair(config, max_pose_retries=20):
    """Build one labeled pair; a pure function of ``config`` (seed included)."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    n = config.num_correspondences
    n_in = int(round((1.0 - config.outlier_ratio) * n))
    for _ in range(max_pose_retries):
        pose = sample_pose(rng, config.rotation_range_deg, config.baseline_range)
        try:
            X1 = _visible_points(rng, config, pose, n)
            break
        except DatasetError:
            continue
    else:
        raise DatasetError("visibility failure after bounded retries")
    K = config.intrinsics.K
    w, h = IMAGE_SIZE
    p1 = _project(K, X1)
    p2 = _project(K, X1 @ pose.R.T + pose.t)
    if config.noise_std_px > 0:
        p1 = p1 + rng.normal(scale=config.noise_std_px, size=p1.shape)
        p2 = p2 + rng.normal(scale=config.noise_std_px, size=p2.shape)
    labels = np.zeros(n, dtype=bool)
    labels[:n_in] = True
    p2[n_in:] = np.column_stack([rng.uniform(0, w, n - n_in), rng.uniform(0, h, n - n_in)])
    ratios = np.empty(n)
    ratios[:n_in] = rng.beta(*INLIER_RATIO_BETA, size=n_in)
    ratios[n_in:] = rng.beta(*OUTLIER_RATIO_BETA, size=n - n_in)
    ratios = np.clip(ratios, 1e-9, 1.0)
    order = rng.permutation(n)
    corrs = np.hstack([normalize_coordinates(p1, config.intrinsics),
                       normalize_coordinates(p2, config.intrinsics)])[order]
    return ScenePair(
        correspondences=np.ascontiguousarray(corrs),
        labels=labels[order],
        lowe_ratios=ratios[order],
        gt_pose=pose,
        gt_E=essential_from_pose(pose),
        intrinsics=config.intrinsics,
    )


def pair_seed(seed, index):
    """Independent 63-bit seed for pair ``index`` of a dataset."""
    ss = np.random.SeedSequence([int(seed), int(index)])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def generate_dataset(config, num_pairs, outlier_ratio_range=None):
    """``num_pairs`` pairs, each seeded by ``(config.seed, index)``.

    With ``outlier_ratio_range`` each pair draws its own outlier ratio.
    """
    pairs = []
    for i in range(num_pairs):
        s = pair_seed(config.seed, i)
        ratio = config.outlier_ratio
        if outlier_ratio_range is not None:
            ratio = float(np.random.default_rng(s ^ 0x5EED).uniform(*outlier_ratio_range))
        cfg = SceneConfig(**{**config.__dict__, "seed": s, "outlier_ratio": ratio})
        pairs.append(generate_scene_pair(cfg))
    return pairs


# --- binary container -----------------------------------------------------

def encode_pair(pair):
    n = pair.n
    parts = [
        MAGIC,
        struct.pack("<I", n),
        np.ascontiguousarray(pair.correspondences, dtype="<f8").tobytes(),
        np.ascontiguousarray(pair.labels, dtype=np.uint8).tobytes(),
        np.ascontiguousarray(pair.lowe_ratios, dtype="<f8").tobytes(),
        np.ascontiguousarray(pair.gt_E, dtype="<f8").reshape(9).tobytes(),
        np.concatenate([pair.gt_pose.R.reshape(9), pair.gt_pose.t]).astype("<f8").tobytes(),
        pair.intrinsics.as_array().astype("<f8").tobytes(),
    ]
    return b"".join(parts)


def decode_pair(blob):
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise DatasetError("bad record magic")
    (n,) = struct.unpack("<I", blob[4:8])
    expected = 8 + n * 32 + n + n * 8 + (9 + 12 + 4) * 8
    if len(blob) != expected:
        raise ChecksumError(f"record length {len(blob)} != expected {expected}")
    off = 8

    def take(count, dtype):
        nonlocal off
        size = count * np.dtype(dtype).itemsize
        arr = np.frombuffer(blob, dtype=dtype, count=count, offset=off).copy()
        off += size
        return arr

    corrs = take(n * 4, "<f8").reshape(n, 4).astype(np.float64)
    labels = take(n, np.uint8).astype(bool)
    ratios = take(n, "<f8").astype(np.float64)
    E = take(9, "<f8").reshape(3, 3).astype(np.float64)
    pose = take(12, "<f8").astype(np.float64)
    intr = take(4, "<f8").astype(np.float64)
    return ScenePair(corrs, labels, ratios, Pose(pose[:9].reshape(3, 3), pose[9:]), E,
                     CameraIntrinsics(*map(float, intr)))


def serialize_dataset(pairs, path, config=None, seed=None, extra=None):
    """Write ``manifest.json`` plus one ``.bin`` record per pair under ``path``."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    records = []
    for i, pair in enumerate(pairs):
        blob = encode_pair(pair)
        name = f"pair_{i:05d}.bin"
        (root / name).write_bytes(blob)
        records.append({"file": name, "n": pair.n, "n_inliers": int(pair.labels.sum()),
                        "sha256": hashlib.sha256(blob).hexdigest()})
    manifest = {
        "format": "EPF1",
        "version": FORMAT_VERSION,
        "config": config.to_dict() if config is not None else None,
        "seed": seed,
        "num_pairs": len(pairs),
        "num_correspondences": int(sum(p.n for p in pairs)),
        "records": records,
    }
    if extra:
        manifest.update(extra)
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return manifest


def read_manifest(path):
    root = Path(path)
    mpath = root / "manifest.json" if root.is_dir() else root
    manifest = json.loads(mpath.read_text())
    if manifest.get("format") != "EPF1" or manifest.get("version") != FORMAT_VERSION:
        raise VersionError(
            f"unsupported dataset version {manifest.get('format')}/{manifest.get('version')}")
    return manifest, mpath.parent


def read_dataset(path):
    """Inverse of :func:`serialize_dataset`; verifies every checksum."""
    manifest, root = read_manifest(path)
    pairs = []
    for rec in manifest["records"]:
        blob = (root / rec["file"]).read_bytes()
        if hashlib.sha256(blob).hexdigest() != rec["sha256"]:
            raise ChecksumError(f"checksum mismatch in {rec['file']}")
        pairs.append(decode_pair(blob))
    return pairs, manifest
