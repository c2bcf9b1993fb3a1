"""Seeded synthetic worlds for desk-scale experiments.

A camera drives a figure-8 path one or more times through a corridor of 3-D
landmarks. Each landmark carries a latent unit descriptor; a keyframe sees
the landmarks inside its frustum and records their noisy projections and
noisy descriptors, plus a few distractor keypoints from a small pool of
generic appearance prototypes. Revisits therefore share both descriptors
and consistent two-view geometry. Aliased places copy their landmark
descriptors from another place while keeping their own 3-D layout, so they
look alike but fail epipolar verification.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .keyframes import CameraIntrinsics, Keyframe, Pose, SequenceDataset, axis_angle_to_matrix, sample_keyframes
from .geoverify import MatchSet

DEFAULT_INTRINSICS = CameraIntrinsics(500.0, 500.0, 320.0, 240.0)
IMAGE_SIZE = (640, 480)
CAMERA_HEIGHT = 1.5


@dataclass
class SyntheticWorldSpec:
    """Generator settings. ``loops`` may be fractional (a partial revisit).

    ``seed`` fixes the world (landmarks, aliasing, clutter); ``traverse``
    picks a drive through it with its own start point, jitter and sensor
    noise. Traverse 0 starts at the origin of the path.
    """

    n_keyframes: int = 500
    loops: float = 1.1
    descriptor_dim: int = 32
    landmarks_per_m: float = 10.0
    revisit_noise: float = 0.3
    pixel_noise: float = 0.5
    distractor_level: float = 0.25
    n_prototypes: int = 12
    appearance_seed: int = 0
    alias_fraction: float = 0.2
    alias_noise: float = 0.15
    degraded_rate: float = 0.0
    degraded_noise: float = 1.0
    place_length_m: float = 8.0
    lateral_jitter_m: float = 0.6
    heading_jitter_deg: float = 3.0
    max_keypoints: int = 2048
    max_depth_m: float = 25.0
    max_view_angle_deg: float = 60.0
    keyframe_spacing_m: float = 0.5
    seed: int = 0
    traverse: int = 0

    def __post_init__(self):
        if self.n_keyframes < 2:
            raise ValueError("n_keyframes must be >= 2")
        if self.loops <= 0:
            raise ValueError("loops must be positive")
        if not 0 <= self.alias_fraction < 1:
            raise ValueError("alias_fraction must be in [0, 1)")
        if self.descriptor_dim < 2:
            raise ValueError("descriptor_dim must be >= 2")

    def to_dict(self):
        return asdict(self)


def _unit(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def _lemniscate(t, a):
    s = np.sin(t)
    d = 1.0 + s * s
    return np.stack([a * np.cos(t) / d, a * s * np.cos(t) / d], axis=-1)


def _lap_arclength(a, n=20000):
    t = np.linspace(0.0, 2 * np.pi, n + 1)
    p = _lemniscate(t, a)
    return t, np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(p, axis=0), axis=1))])


def camera_rotation(heading):
    """Camera-to-world rotation: optical axis along ``heading`` in the ground
    plane, image x to the right, image y down (world z is up)."""
    f = np.array([np.cos(heading), np.sin(heading), 0.0])
    down = np.array([0.0, 0.0, -1.0])
    right = np.cross(down, f)
    return np.stack([right, down, f], axis=1)


class SyntheticWorld:
    """Landmarks plus a sampled trajectory; call :meth:`dataset` for keyframes."""

    def __init__(self, spec: SyntheticWorldSpec, name="synth"):
        self.spec = spec
        self.name = name
        self.rng = np.random.default_rng(spec.seed)
        total = spec.n_keyframes * spec.keyframe_spacing_m
        _, s_unit = _lap_arclength(1.0)
        self._set_lap(total / spec.loops, s_unit[-1])
        # jitter changes the driven length, so rescale once to hit ``loops``
        self._build_trajectory(traverse=0)
        ratio = (self.arclength[-1] - self.arclength[0]) / (total - spec.keyframe_spacing_m)
        self._set_lap(ratio * total / spec.loops, s_unit[-1])
        self._build_landmarks()
        self._build_trajectory(spec.traverse)

    def _set_lap(self, length, unit_length):
        self.lap_length = length
        self.a = length / unit_length
        self._t_grid, self._s_grid = _lap_arclength(self.a)

    # -- geometry ---------------------------------------------------------

    def _at_arclength(self, s):
        """Centre-line position and heading at lap arclength ``s`` (wraps)."""
        s = np.mod(s, self.lap_length)
        t = np.interp(s, self._s_grid, self._t_grid)
        p = _lemniscate(t, self.a)
        dt = 1e-4
        d = _lemniscate(t + dt, self.a) - _lemniscate(t - dt, self.a)
        return p, np.arctan2(d[..., 1], d[..., 0])

    def _build_landmarks(self):
        sp, rng = self.spec, self.rng
        n = int(round(self.lap_length * sp.landmarks_per_m))
        s = rng.uniform(0, self.lap_length, n)
        p, h = self._at_arclength(s)
        side = rng.choice([-1.0, 1.0], n)
        lateral = side * rng.uniform(3.0, 10.0, n)
        normal = np.stack([-np.sin(h), np.cos(h)], axis=1)
        xy = p + lateral[:, None] * normal
        z = rng.uniform(0.0, 6.0, n)
        self.landmarks = np.column_stack([xy, z])
        # features are view dependent: each faces oncoming traffic and the road
        tangent = np.stack([np.cos(h), np.sin(h)], axis=1)
        facing = -tangent - 0.6 * side[:, None] * normal
        self.facing = facing / np.linalg.norm(facing, axis=1, keepdims=True)

        n_places = max(1, int(np.ceil(self.lap_length / sp.place_length_m)))
        self.place_of = np.minimum((s / sp.place_length_m).astype(int), n_places - 1)
        self.n_places = n_places
        desc = _unit(rng.normal(size=(n, sp.descriptor_dim)))

        # aliased places take their descriptors from a distant source place
        n_alias = int(round(sp.alias_fraction * n_places))
        order = rng.permutation(n_places)
        aliased = np.sort(order[:n_alias])
        sources = order[n_alias:]
        self.alias_source = {}
        for b in aliased:
            far = [c for c in sources if min(abs(c - b), n_places - abs(c - b)) >= 3]
            if not far:
                continue
            src = int(rng.choice(far))
            self.alias_source[int(b)] = src
            dst_idx = np.flatnonzero(self.place_of == b)
            src_idx = np.flatnonzero(self.place_of == src)
            if src_idx.size == 0 or dst_idx.size == 0:
                continue
            pick = rng.choice(src_idx, dst_idx.size, replace=src_idx.size < dst_idx.size)
            noise = rng.normal(size=(dst_idx.size, sp.descriptor_dim)) * sp.alias_noise / np.sqrt(sp.descriptor_dim)
            desc[dst_idx] = _unit(desc[pick] + noise)
        self.landmark_desc = desc
        # generic content looks the same in every world
        self.prototypes = _unit(
            np.random.default_rng([sp.appearance_seed, 3]).normal(size=(sp.n_prototypes, sp.descriptor_dim)))
        # some places are cluttered with generic content, some are clean
        self.place_clutter = rng.uniform(0.0, 2.0, n_places)

    def _build_trajectory(self, traverse):
        sp = self.spec
        rng = np.random.default_rng([sp.seed, 2, traverse])
        start = rng.uniform(0.0, self.lap_length) if traverse else 0.0
        step = sp.keyframe_spacing_m / 5.0
        total = 1.3 * sp.n_keyframes * sp.keyframe_spacing_m + 10.0
        s = start + np.arange(0.0, total, step)
        p, h = self._at_arclength(s)
        # smooth per-lap lateral and heading perturbations
        lap = np.floor((s - start) / self.lap_length).astype(int)
        n_laps = lap.max() + 1
        phase = rng.uniform(0, 2 * np.pi, (n_laps, 2))
        amp = rng.uniform(0.3, 1.0, (n_laps, 2))
        w = 2 * np.pi * s / 37.0
        lat = sp.lateral_jitter_m * amp[lap, 0] * np.sin(w + phase[lap, 0])
        dh = np.radians(sp.heading_jitter_deg) * amp[lap, 1] * np.sin(0.7 * w + phase[lap, 1])
        normal = np.stack([-np.sin(h), np.cos(h)], axis=1)
        xy = p + lat[:, None] * normal
        poses = [
            Pose(np.array([x, y, CAMERA_HEIGHT]), _quat(camera_rotation(hd + d)))
            for (x, y), hd, d in zip(xy, h, dh)
        ]
        keep = sample_keyframes(poses, sp.keyframe_spacing_m)[: sp.n_keyframes]
        self.poses = [poses[i] for i in keep]
        self.arclength = s[keep]

    # -- observation --------------------------------------------------------

    def observe(self, pose: Pose, rng):
        """Keypoints ``(N, 2)`` and descriptors ``(N, D)`` seen from ``pose``."""
        sp = self.spec
        K = DEFAULT_INTRINSICS.K
        R = pose.rotation
        Xc = (self.landmarks - pose.position) @ R
        front = (Xc[:, 2] > 1.0) & (Xc[:, 2] < sp.max_depth_m)
        ray = pose.position[:2] - self.landmarks[:, :2]
        ray_n = np.linalg.norm(ray, axis=1)
        cos_view = np.einsum("ij,ij->i", ray, self.facing) / np.maximum(ray_n, 1e-9)
        front &= cos_view > np.cos(np.radians(sp.max_view_angle_deg))
        uvw = Xc @ K.T
        with np.errstate(divide="ignore", invalid="ignore"):
            uv = uvw[:, :2] / uvw[:, 2:3]
        W, H = IMAGE_SIZE
        inside = front & (uv[:, 0] >= 0) & (uv[:, 0] < W) & (uv[:, 1] >= 0) & (uv[:, 1] < H)
        idx = np.flatnonzero(inside)
        kp = uv[idx] + rng.normal(0.0, sp.pixel_noise, (idx.size, 2))
        # some frames are taken in poor conditions (glare, dusk) and look worse overall
        noise = sp.degraded_noise if sp.degraded_rate and rng.random() < sp.degraded_rate else sp.revisit_noise
        desc = self.landmark_desc[idx] + rng.normal(size=(idx.size, sp.descriptor_dim)) * (
            noise / np.sqrt(sp.descriptor_dim))

        if idx.size:
            clutter = self.place_clutter[np.bincount(self.place_of[idx]).argmax()]
        else:
            clutter = 1.0
        n_d = int(round(sp.distractor_level * clutter * max(idx.size, 10)))
        if n_d:
            proto = self.prototypes[rng.integers(0, sp.n_prototypes, n_d)]
            d_desc = proto + rng.normal(size=(n_d, sp.descriptor_dim)) * (sp.revisit_noise / np.sqrt(sp.descriptor_dim))
            d_kp = rng.uniform([0.0, 0.0], [W - 1e-3, H - 1e-3], (n_d, 2))
            kp = np.vstack([kp, d_kp])
            desc = np.vstack([desc, d_desc])
        kp = np.clip(kp, 0.0, [W - 1e-3, H - 1e-3])
        desc = _unit(desc) if len(desc) else desc.reshape(0, sp.descriptor_dim)
        if len(kp) > sp.max_keypoints:
            sel = np.sort(rng.choice(len(kp), sp.max_keypoints, replace=False))
            kp, desc = kp[sel], desc[sel]
        return kp, desc

    def dataset(self) -> SequenceDataset:
        rng = np.random.default_rng([self.spec.seed, 1, self.spec.traverse])
        frames = []
        for i, pose in enumerate(self.poses):
            kp, desc = self.observe(pose, rng)
            frames.append(Keyframe(i, self.name, pose, kp, desc))
        ds = SequenceDataset(self.name, DEFAULT_INTRINSICS, IMAGE_SIZE[0], IMAGE_SIZE[1], frames)
        ds.validate()
        return ds


def _quat(R):
    from .keyframes import matrix_to_quat

    return matrix_to_quat(R)


def generate(spec: SyntheticWorldSpec = None, name="synth") -> SequenceDataset:
    """Keyframe bundle for ``spec``; identical output for identical specs."""
    return SyntheticWorld(spec or SyntheticWorldSpec(), name).dataset()


def ground_truth_loops(dataset: SequenceDataset, dist_thresh=4.0, ang_thresh=30.0, exclusion_window=50):
    """Unordered keyframe-id pairs labelled as loops, ignoring temporal neighbours."""
    from .metrics import loop_label

    frames = list(dataset)
    pos = np.array([f.pose.position for f in frames])
    out = []
    for a in range(len(frames)):
        d = np.linalg.norm(pos[a + 1:] - pos[a], axis=1)
        for off in np.flatnonzero(d < dist_thresh):
            b = a + 1 + off
            if abs(frames[b].id - frames[a].id) <= exclusion_window:
                continue
            if loop_label(frames[a].pose, frames[b].pose, dist_thresh, ang_thresh)[0]:
                out.append((frames[a].id, frames[b].id))
    return out


# --------------------------------------------------------------------------
# planted two-view problems

def planted_two_view(seed, n_matches=200, outlier_ratio=0.3, sigma_px=0.5, rotation_deg=10.0,
                     translation=(1.0, 0.0, 0.2), intrinsics: CameraIntrinsics = DEFAULT_INTRINSICS,
                     depth_range=(3.0, 10.0)):
    """Random scene seen by two cameras with a known relative pose.

    Points satisfy ``X_j = R X_i + t``. Returns ``(frame_i, frame_j, R, t_unit,
    outlier_mask)``; the frames carry matching one-hot-like descriptors so
    that mutual matching reproduces the planted correspondences exactly.
    """
    rng = np.random.default_rng(seed)
    K = intrinsics.K
    W, H = IMAGE_SIZE
    R = axis_angle_to_matrix([0.0, 1.0, 0.0], np.radians(rotation_deg))
    t = np.asarray(translation, dtype=np.float64)
    ui, uj = [], []
    while len(ui) < n_matches:
        X = np.array([rng.uniform(-4, 4), rng.uniform(-3, 3), rng.uniform(*depth_range)])
        Xj = R @ X + t
        if Xj[2] <= 0:
            continue
        a = K @ X
        b = K @ Xj
        a, b = a[:2] / a[2], b[:2] / b[2]
        if 0 <= a[0] < W and 0 <= a[1] < H and 0 <= b[0] < W and 0 <= b[1] < H:
            ui.append(a)
            uj.append(b)
    pi = np.array(ui) + rng.normal(0, sigma_px, (n_matches, 2))
    pj = np.array(uj) + rng.normal(0, sigma_px, (n_matches, 2))
    n_out = int(round(outlier_ratio * n_matches))
    out = np.zeros(n_matches, dtype=bool)
    out[rng.choice(n_matches, n_out, replace=False)] = True
    pj[out] = rng.uniform([0, 0], [W, H], (n_out, 2))
    pi = np.clip(pi, 0, [W - 1e-3, H - 1e-3])
    pj = np.clip(pj, 0, [W - 1e-3, H - 1e-3])
    desc = _unit(rng.normal(size=(n_matches, 32)))
    fi = Keyframe(0, "planted", Pose.identity(), pi, desc)
    fj = Keyframe(1, "planted", Pose.identity(), pj, desc)
    return fi, fj, R, t / np.linalg.norm(t), out


def planted_matches(seed, **kw):
    fi, fj, R, t, out = planted_two_view(seed, **kw)
    return MatchSet.from_points(fi.keypoints.astype(np.float64), fj.keypoints.astype(np.float64)), R, t, out
