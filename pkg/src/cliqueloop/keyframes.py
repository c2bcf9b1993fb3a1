"""Posed keyframes with keypoints and local descriptors, plus the on-disk bundle.

Bundle layout (one directory per sequence)::

    manifest.json   {"sequence", "intrinsics": {fx, fy, cx, cy}, "width", "height", "count"}
    poses.csv       id,tx,ty,tz,qw,qx,qy,qz
    desc/<id>.bin   b"LGKP", u32 N_K, u32 N_KD, N_K*2 f32 coords, N_K*N_KD f32 descriptors

Quaternions are Hamilton, stored (w, x, y, z). A pose maps camera
coordinates into the world frame: ``X_world = R @ X_cam + t``.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from ._validation import check_matrix, check_positive
from .exceptions import (
    DimensionMismatchError,
    EmptyInputError,
    MagicMismatchError,
    MissingArtifactError,
    NonFiniteError,
)

KEYPOINT_MAGIC = b"LGKP"
POSE_HEADER = ["id", "tx", "ty", "tz", "qw", "qx", "qy", "qz"]


# --------------------------------------------------------------------------
# rotations

def quat_to_matrix(q):
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def matrix_to_quat(R):
    """Rotation matrix to a (w, x, y, z) unit quaternion with w >= 0."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.asarray(q)
    q /= np.linalg.norm(q)
    return -q if q[0] < 0 else q


def axis_angle_to_matrix(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * (K @ K)


# --------------------------------------------------------------------------
# domain types

@dataclass(frozen=True)
class Pose:
    """Camera-to-world rigid transform."""

    position: np.ndarray
    orientation: np.ndarray  # (w, x, y, z)

    def __post_init__(self):
        p = np.asarray(self.position, dtype=np.float64).reshape(3)
        q = np.asarray(self.orientation, dtype=np.float64).reshape(4)
        if not (np.all(np.isfinite(p)) and np.all(np.isfinite(q))):
            raise NonFiniteError("pose contains non-finite values")
        n = np.linalg.norm(q)
        if n == 0:
            raise ValueError("zero quaternion")
        object.__setattr__(self, "position", p)
        if abs(n - 1.0) > 1e-12:
            q = q / n
        object.__setattr__(self, "orientation", q)

    @classmethod
    def identity(cls):
        return cls(np.zeros(3), np.array([1.0, 0.0, 0.0, 0.0]))

    @classmethod
    def from_matrix(cls, R, t):
        return cls(np.asarray(t, dtype=np.float64), matrix_to_quat(R))

    @property
    def rotation(self):
        return quat_to_matrix(self.orientation)

    def as_matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.position
        return T

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return np.array_equal(self.position, other.position) and np.array_equal(
            self.orientation, other.orientation
        )

    __hash__ = None


def relative_pose(a: Pose, b: Pose) -> Pose:
    """Return ``T_a^-1 T_b``: pose of ``b`` expressed in the frame of ``a``."""
    Ra = a.rotation
    R = Ra.T @ b.rotation
    t = Ra.T @ (b.position - a.position)
    return Pose.from_matrix(R, t)


def rotation_angle_deg(R) -> float:
    c = (np.trace(R) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        check_positive(self.fx, "fx")
        check_positive(self.fy, "fy")

    @property
    def K(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def scaled(self, s):
        return CameraIntrinsics(self.fx * s, self.fy * s, self.cx * s, self.cy * s)


@dataclass
class Keyframe:
    """One sampled frame: pose, keypoint pixel coordinates and their descriptors.

    ``keypoints`` is an ``(N_K, 2)`` array of ``(u, v)`` pixels and
    ``descriptors`` the matching ``(N_K, N_KD)`` array. Images are never
    stored. ``vlad`` is filled in by :mod:`cliqueloop.vlad`.
    """

    id: int
    sequence: str
    pose: Pose
    keypoints: np.ndarray
    descriptors: np.ndarray
    vlad: Optional[object] = field(default=None, compare=False)

    def __post_init__(self):
        if self.id < 0:
            raise ValueError(f"keyframe id must be non-negative, got {self.id}")
        self.keypoints = check_matrix(self.keypoints, "keypoints", ncols=2, dtype=np.float32)
        ndim = self.descriptors.shape[1] if np.ndim(self.descriptors) == 2 else None
        self.descriptors = check_matrix(self.descriptors, "descriptors", ncols=ndim, dtype=np.float32)
        if self.keypoints.shape[0] != self.descriptors.shape[0]:
            raise DimensionMismatchError(
                f"keyframe {self.id}: {self.keypoints.shape[0]} keypoints but "
                f"{self.descriptors.shape[0]} descriptor rows"
            )

    @property
    def key(self):
        return (self.sequence, self.id)

    @property
    def descriptor_dim(self):
        return self.descriptors.shape[1]


def check_keypoints_in_image(keypoints, width, height):
    kp = np.asarray(keypoints)
    if kp.size and (
        np.any(kp[:, 0] < 0) or np.any(kp[:, 0] >= width) or np.any(kp[:, 1] < 0) or np.any(kp[:, 1] >= height)
    ):
        raise ValueError(f"keypoint outside image bounds [0, {width}) x [0, {height})")


@dataclass
class SequenceDataset:
    name: str
    intrinsics: CameraIntrinsics
    width: int
    height: int
    keyframes: list = field(default_factory=list)

    def __post_init__(self):
        self.validate()

    def validate(self):
        ids = [kf.id for kf in self.keyframes]
        if any(b <= a for a, b in zip(ids, ids[1:])):
            raise ValueError("keyframe ids must be strictly increasing")
        dims = {kf.descriptor_dim for kf in self.keyframes}
        if len(dims) > 1:
            raise DimensionMismatchError(f"mixed descriptor dimensionalities {sorted(dims)}")
        for kf in self.keyframes:
            check_keypoints_in_image(kf.keypoints, self.width, self.height)

    def __len__(self):
        return len(self.keyframes)

    def __iter__(self):
        return iter(self.keyframes)

    @property
    def descriptor_dim(self):
        return self.keyframes[0].descriptor_dim if self.keyframes else None

    def by_id(self):
        return {kf.id: kf for kf in self.keyframes}


# --------------------------------------------------------------------------
# keyframe sampling

def sample_keyframes(frames: Sequence, threshold_m: float = 0.5) -> list:
    """Indices of frames to keep as keyframes.

    ``frames`` holds :class:`Pose` objects, ``(pose, ref)`` tuples, or raw
    3-vectors. The first frame is always kept; afterwards a frame is kept
    once the path length travelled since the last kept frame reaches
    ``threshold_m``.
    """
    if len(frames) == 0:
        raise EmptyInputError("no frames to sample")
    check_positive(threshold_m, "threshold_m")

    def position(f):
        if isinstance(f, Pose):
            return f.position
        if isinstance(f, tuple) and f and isinstance(f[0], Pose):
            return f[0].position
        return np.asarray(f, dtype=np.float64)

    selected = [0]
    prev = position(frames[0])
    acc = 0.0
    for i in range(1, len(frames)):
        cur = position(frames[i])
        acc += float(np.linalg.norm(cur - prev))
        prev = cur
        if acc >= threshold_m:
            selected.append(i)
            acc = 0.0
    return selected


# --------------------------------------------------------------------------
# persistence

def write_keypoint_file(path, keypoints, descriptors):
    kp = np.ascontiguousarray(keypoints, dtype="<f4")
    desc = np.ascontiguousarray(descriptors, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(KEYPOINT_MAGIC)
        fh.write(struct.pack("<II", desc.shape[0], desc.shape[1]))
        fh.write(kp.tobytes())
        fh.write(desc.tobytes())


def read_keypoint_file(path):
    path = Path(path)
    if not path.is_file():
        raise MissingArtifactError(f"missing keypoint file {path}")
    raw = path.read_bytes()
    if raw[:4] != KEYPOINT_MAGIC:
        raise MagicMismatchError(f"{path}: expected magic {KEYPOINT_MAGIC!r}, got {raw[:4]!r}")
    if len(raw) < 12:
        raise DimensionMismatchError(f"{path}: truncated header")
    n, d = struct.unpack("<II", raw[4:12])
    expected = 12 + 4 * (n * 2 + n * d)
    if len(raw) != expected:
        raise DimensionMismatchError(
            f"{path}: header says N_K={n}, N_KD={d} ({expected} bytes) but file has {len(raw)} bytes"
        )
    payload = np.frombuffer(raw, dtype="<f4", offset=12)
    kp = payload[: 2 * n].reshape(n, 2).astype(np.float32)
    desc = payload[2 * n:].reshape(n, d).astype(np.float32)
    if not (np.all(np.isfinite(kp)) and np.all(np.isfinite(desc))):
        raise NonFiniteError(f"{path}: non-finite values in payload")
    return kp, desc


def save_dataset(dataset: SequenceDataset, path) -> Path:
    path = Path(path)
    (path / "desc").mkdir(parents=True, exist_ok=True)
    k = dataset.intrinsics
    manifest = {
        "sequence": dataset.name,
        "intrinsics": {"fx": k.fx, "fy": k.fy, "cx": k.cx, "cy": k.cy},
        "width": dataset.width,
        "height": dataset.height,
        "count": len(dataset),
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    with open(path / "poses.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(POSE_HEADER)
        for kf in dataset.keyframes:
            p, q = kf.pose.position, kf.pose.orientation
            w.writerow([kf.id] + [repr(float(v)) for v in p] + [repr(float(v)) for v in q])
    for kf in dataset.keyframes:
        write_keypoint_file(path / "desc" / f"{kf.id}.bin", kf.keypoints, kf.descriptors)
    return path


def load_dataset(path) -> SequenceDataset:
    """Load a keyframe bundle directory written by :func:`save_dataset`."""
    path = Path(path)
    manifest_path = path / "manifest.json"
    poses_path = path / "poses.csv"
    for p in (manifest_path, poses_path):
        if not p.is_file():
            raise MissingArtifactError(f"missing {p}")
    manifest = json.loads(manifest_path.read_text())
    intr = CameraIntrinsics(**{k: float(v) for k, v in manifest["intrinsics"].items()})

    rows = []
    with open(poses_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != POSE_HEADER:
            raise MagicMismatchError(f"{poses_path}: unexpected header {header}")
        for row in reader:
            if row:
                rows.append(row)
    if len(rows) != manifest["count"]:
        raise DimensionMismatchError(
            f"manifest count {manifest['count']} but {len(rows)} pose rows"
        )

    keyframes = []
    for row in rows:
        kf_id = int(row[0])
        vals = np.array([float(v) for v in row[1:]])
        if not np.all(np.isfinite(vals)):
            raise NonFiniteError(f"{poses_path}: non-finite pose for id {kf_id}")
        kp, desc = read_keypoint_file(path / "desc" / f"{kf_id}.bin")
        pose = Pose(vals[:3], vals[3:])
        keyframes.append(Keyframe(kf_id, manifest["sequence"], pose, kp, desc))
    return SequenceDataset(
        manifest["sequence"], intr, int(manifest["width"]), int(manifest["height"]), keyframes
    )
