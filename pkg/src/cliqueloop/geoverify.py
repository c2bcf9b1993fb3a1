"""Two-view geometric verification of loop candidates.

Mutual nearest-neighbour matching, RANSAC over the normalised eight-point
algorithm with Sampson scoring, essential matrix recovery and cheirality-based
pose decomposition.

Two-view convention: the recovered ``(R, t)`` map points from camera ``i`` to
camera ``j``, ``X_j = R X_i + t``, and satisfy ``x_j^T F x_i = 0``. For
camera-to-world poses this equals ``relative_pose(pose_j, pose_i)``.
"""

from __future__ import annotations

import csv
import math
import zlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ._validation import check_fraction, check_positive
from .exceptions import AmbiguousPoseError, DimensionMismatchError, InsufficientMatchesError
from .keyframes import CameraIntrinsics, matrix_to_quat, relative_pose

VERIFIED_HEADER = [
    "seq_i", "id_i", "seq_j", "id_j", "score", "inlier_ratio",
    "qw", "qx", "qy", "qz", "tx", "ty", "tz", "pose_valid",
]


@dataclass
class RansacConfig:
    max_iterations: int = 2000
    inlier_threshold: float = 2.0  # Sampson distance, pixels
    confidence: float = 0.999
    min_matches: int = 8
    acceptance_ratio: float = 0.5
    seed: int = 0
    refine_pose: bool = True

    def __post_init__(self):
        check_positive(self.max_iterations, "max_iterations")
        check_positive(self.inlier_threshold, "inlier_threshold")
        check_fraction(self.confidence, "confidence", high_closed=False)
        if self.min_matches < 8:
            raise ValueError("min_matches must be at least 8")
        check_fraction(self.acceptance_ratio, "acceptance_ratio")


@dataclass
class MatchSet:
    idx_i: np.ndarray
    idx_j: np.ndarray
    pts_i: np.ndarray
    pts_j: np.ndarray

    def __len__(self):
        return self.idx_i.shape[0]

    @classmethod
    def from_points(cls, pts_i, pts_j):
        pts_i = np.asarray(pts_i, dtype=np.float64)
        pts_j = np.asarray(pts_j, dtype=np.float64)
        n = pts_i.shape[0]
        return cls(np.arange(n), np.arange(n), pts_i, pts_j)

    def subset(self, mask):
        return MatchSet(self.idx_i[mask], self.idx_j[mask], self.pts_i[mask], self.pts_j[mask])


@dataclass
class RansacResult:
    F: np.ndarray
    inliers: np.ndarray
    iterations: int
    degenerate_samples: int

    @property
    def inlier_ratio(self):
        return float(self.inliers.mean()) if self.inliers.size else 0.0


@dataclass
class RelativePoseUpToScale:
    rotation: np.ndarray
    translation: np.ndarray
    inlier_ratio: float = 1.0
    n_front: int = 0


@dataclass
class VerifiedLoop:
    key_i: tuple
    key_j: tuple
    F: Optional[np.ndarray]
    E: Optional[np.ndarray]
    rotation: Optional[np.ndarray]
    translation: Optional[np.ndarray]
    inlier_ratio: float
    score: float = float("nan")

    @property
    def pose_valid(self):
        return self.rotation is not None


@dataclass
class Verification:
    """Outcome of :func:`verify_pair`. ``loop`` is None when rejected."""

    accepted: bool
    reason: str
    loop: Optional[VerifiedLoop] = None
    n_matches: int = 0
    inlier_ratio: float = 0.0
    extra: dict = field(default_factory=dict)


# --------------------------------------------------------------------------
# matching

def _unit_rows(x):
    n = np.linalg.norm(x, axis=1, keepdims=True)
    return np.divide(x, n, out=np.zeros_like(x), where=n > 0)


def mutual_match(desc_i, desc_j, kp_i=None, kp_j=None, metric="cosine") -> MatchSet:
    """Mutual nearest neighbours between two descriptor sets.

    Cosine similarity for ``metric="cosine"`` and Euclidean distance
    otherwise; ties resolve to the lower index.
    """
    A = np.asarray(desc_i, dtype=np.float64)
    B = np.asarray(desc_j, dtype=np.float64)
    kp_i = np.zeros((A.shape[0], 2)) if kp_i is None else np.asarray(kp_i, dtype=np.float64)
    kp_j = np.zeros((B.shape[0], 2)) if kp_j is None else np.asarray(kp_j, dtype=np.float64)
    empty = np.zeros(0, dtype=np.int64)
    if A.shape[0] == 0 or B.shape[0] == 0:
        return MatchSet(empty, empty, np.zeros((0, 2)), np.zeros((0, 2)))
    if A.shape[1] != B.shape[1]:
        raise DimensionMismatchError(f"descriptor dims differ ({A.shape[1]} != {B.shape[1]})")
    if str(getattr(metric, "name", metric)).lower() == "cosine":
        score = _unit_rows(A) @ _unit_rows(B).T
    else:
        score = -(
            (A * A).sum(1)[:, None] - 2.0 * A @ B.T + (B * B).sum(1)[None, :]
        )
    nn_ij = np.argmax(score, axis=1)
    nn_ji = np.argmax(score, axis=0)
    a = np.flatnonzero(nn_ji[nn_ij] == np.arange(A.shape[0]))
    b = nn_ij[a]
    return MatchSet(a, b, kp_i[a], kp_j[b])


# --------------------------------------------------------------------------
# fundamental matrix

def _hartley(pts):
    c = pts.mean(axis=0)
    d = np.sqrt(((pts - c) ** 2).sum(axis=1)).mean()
    s = math.sqrt(2.0) / d if d > 0 else 1.0
    T = np.array([[s, 0.0, -s * c[0]], [0.0, s, -s * c[1]], [0.0, 0.0, 1.0]])
    return pts * s - s * c, T


def _design_rows(ni, nj):
    xi, yi = ni[..., 0], ni[..., 1]
    xj, yj = nj[..., 0], nj[..., 1]
    return np.stack([xj * xi, xj * yi, xj, yj * xi, yj * yi, yj, xi, yi, np.ones_like(xi)], axis=-1)


def _rank2(F):
    U, S, Vt = np.linalg.svd(F)
    S[..., 2] = 0.0
    return (U * S[..., None, :]) @ Vt


def eight_point(pts_i, pts_j, rank_tol=1e-10):
    """Normalised eight-point estimate of F with ``x_j^T F x_i = 0``.

    Returns None when the linear system has a null space of dimension > 1.
    """
    ni, Ti = _hartley(np.asarray(pts_i, dtype=np.float64))
    nj, Tj = _hartley(np.asarray(pts_j, dtype=np.float64))
    A = _design_rows(ni, nj)
    _, s, Vt = np.linalg.svd(A, full_matrices=True)
    if s.shape[0] < 8 or s[7] < rank_tol * s[0]:
        return None
    F = _rank2(Vt[-1].reshape(3, 3))
    F = Tj.T @ F @ Ti
    return F / np.linalg.norm(F)


def sampson_distance(F, pts_i, pts_j):
    """First-order geometric error per correspondence, in pixels.

    ``F`` may be a single matrix or a ``(B, 3, 3)`` stack; the result then
    has shape ``(B, n)``.
    """
    pts_i = np.asarray(pts_i, dtype=np.float64)
    pts_j = np.asarray(pts_j, dtype=np.float64)
    hi = np.column_stack([pts_i, np.ones(len(pts_i))])
    hj = np.column_stack([pts_j, np.ones(len(pts_j))])
    Fx = hi @ np.swapaxes(F, -1, -2)  # rows are F x_i
    Ftx = hj @ F  # rows are F^T x_j
    num = np.sum(hj * Fx, axis=-1) ** 2
    den = Fx[..., 0] ** 2 + Fx[..., 1] ** 2 + Ftx[..., 0] ** 2 + Ftx[..., 1] ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        d = np.where(den > 0, num / den, np.inf)
    return np.sqrt(d)


def adaptive_iterations(inlier_ratio, confidence, sample_size=8, cap=2000):
    if inlier_ratio <= 0:
        return cap
    if inlier_ratio >= 1:
        return 1
    denom = math.log(1.0 - inlier_ratio ** sample_size)
    if denom == 0:
        return cap
    return min(cap, int(math.ceil(math.log(1.0 - confidence) / denom)))


def estimate_fundamental_ransac(matches: MatchSet, config: RansacConfig = None, rng=None,
                                batch_size=32) -> RansacResult:
    """Robust F estimation by hypothesize-and-verify.

    Minimal samples of eight matches are solved with the normalised
    eight-point algorithm and scored by Sampson inlier count (ties by
    truncated error). Hypotheses are drawn in batches of ``batch_size``; the
    iteration budget shrinks adaptively with the best inlier ratio seen, and
    the best model is refit on its consensus set.
    """
    config = config or RansacConfig()
    n = len(matches)
    if n < config.min_matches:
        raise InsufficientMatchesError(f"need at least {config.min_matches} matches, got {n}")
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    pi, pj = matches.pts_i, matches.pts_j
    ni, Ti = _hartley(pi)
    nj, Tj = _hartley(pj)
    rows = _design_rows(ni, nj)
    thr = config.inlier_threshold

    best_F, best_mask, best_count, best_err = None, None, -1, np.inf
    needed = config.max_iterations
    it = degenerate = 0
    while it < needed:
        b = min(batch_size, needed - it)
        it += b
        samples = np.argpartition(rng.random((b, n)), 7, axis=1)[:, :8]
        _, s, Vt = np.linalg.svd(rows[samples], full_matrices=True)
        ok = s[:, 7] >= 1e-10 * s[:, 0]
        degenerate += int(b - ok.sum())
        if not ok.any():
            continue
        F = _rank2(Vt[ok, -1].reshape(-1, 3, 3))
        F = Tj.T @ F @ Ti
        F /= np.linalg.norm(F, axis=(1, 2), keepdims=True)
        d = sampson_distance(F, pi, pj)
        masks = d < thr
        counts = masks.sum(axis=1)
        errs = np.minimum(d, thr).sum(axis=1)
        k = np.lexsort((errs, -counts))[0]
        if counts[k] > best_count or (counts[k] == best_count and errs[k] < best_err):
            best_F, best_mask, best_count, best_err = F[k], masks[k], int(counts[k]), float(errs[k])
            needed = max(it, adaptive_iterations(best_count / n, config.confidence, 8, config.max_iterations))

    if best_F is None:
        raise InsufficientMatchesError(f"all {degenerate} samples were degenerate")

    # least-squares refit on the consensus set, repeated while it changes
    for _ in range(5):
        if best_count < 8:
            break
        F = eight_point(pi[best_mask], pj[best_mask])
        if F is None:
            break
        mask = sampson_distance(F, pi, pj) < thr
        if mask.sum() < best_count:
            break
        changed = not np.array_equal(mask, best_mask)
        best_F, best_mask, best_count = F, mask, int(mask.sum())
        if not changed:
            break
    return RansacResult(best_F, best_mask, it, degenerate)


# --------------------------------------------------------------------------
# essential matrix and pose

def essential_from_fundamental(F, intrinsics: CameraIntrinsics):
    """``E = K^T F K`` projected onto the essential manifold (s, s, 0)."""
    K = intrinsics.K if isinstance(intrinsics, CameraIntrinsics) else np.asarray(intrinsics)
    E = K.T @ np.asarray(F, dtype=np.float64) @ K
    U, S, Vt = np.linalg.svd(E)
    s = 0.5 * (S[0] + S[1])
    return U @ np.diag([s, s, 0.0]) @ Vt


def _normalized(pts, K):
    h = np.column_stack([pts, np.ones(len(pts))])
    return (np.linalg.inv(K) @ h.T).T


def triangulate(R, t, xi, xj):
    """Linear triangulation of normalised homogeneous points; returns depths in both views."""
    P1 = np.hstack([np.eye(3), np.zeros((3, 1))])
    P2 = np.hstack([R, t.reshape(3, 1)])
    n = xi.shape[0]
    A = np.empty((n, 4, 4))
    A[:, 0] = xi[:, 0:1] * P1[2] - P1[0]
    A[:, 1] = xi[:, 1:2] * P1[2] - P1[1]
    A[:, 2] = xj[:, 0:1] * P2[2] - P2[0]
    A[:, 3] = xj[:, 1:2] * P2[2] - P2[1]
    _, _, Vt = np.linalg.svd(A)
    X = Vt[:, -1, :]
    w = X[:, 3]
    with np.errstate(divide="ignore", invalid="ignore"):
        X3 = X[:, :3] / w[:, None]
    z1 = X3[:, 2]
    z2 = (X3 @ R.T + t)[:, 2]
    ok = np.isfinite(z1) & np.isfinite(z2) & (np.abs(w) > 1e-12)
    return np.where(ok, z1, -1.0), np.where(ok, z2, -1.0)


def decompose_essential(E, pts_i, pts_j, intrinsics: CameraIntrinsics) -> RelativePoseUpToScale:
    """Pick the cheirality-consistent (R, t) among the four SVD candidates."""
    K = intrinsics.K if isinstance(intrinsics, CameraIntrinsics) else np.asarray(intrinsics)
    pts_i = np.atleast_2d(np.asarray(pts_i, dtype=np.float64))
    pts_j = np.atleast_2d(np.asarray(pts_j, dtype=np.float64))
    if pts_i.shape[0] < 1:
        raise InsufficientMatchesError("need at least one inlier match")
    U, _, Vt = np.linalg.svd(E)
    if np.linalg.det(U) < 0:
        U = -U
    if np.linalg.det(Vt) < 0:
        Vt = -Vt
    W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    t = U[:, 2] / np.linalg.norm(U[:, 2])
    R1 = U @ W @ Vt
    R2 = U @ W.T @ Vt
    xi, xj = _normalized(pts_i, K), _normalized(pts_j, K)
    best, best_count = None, -1
    for R, tt in ((R1, t), (R1, -t), (R2, t), (R2, -t)):
        z1, z2 = triangulate(R, tt, xi, xj)
        count = int(np.sum((z1 > 0) & (z2 > 0)))
        if count > best_count:
            best, best_count = (R, tt), count
    if best_count * 2 <= pts_i.shape[0]:
        raise AmbiguousPoseError(
            f"best decomposition has only {best_count}/{pts_i.shape[0]} points in front of both cameras"
        )
    R, tt = best
    return RelativePoseUpToScale(R, tt, n_front=best_count)


def _skew(v):
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def _tangent_basis(t):
    a = np.eye(3)[np.argmin(np.abs(t))]
    b1 = np.cross(t, a)
    b1 /= np.linalg.norm(b1)
    return b1, np.cross(t, b1)


def refine_pose(pose: RelativePoseUpToScale, pts_i, pts_j, intrinsics) -> RelativePoseUpToScale:
    """Minimise the Sampson error of ``F = K^-T [t]x R K^-1`` over the five pose DOF.

    Rotation is updated on the manifold, the unit translation on its tangent
    plane. Falls back to the input pose if the solver does not reduce the cost.
    """
    from scipy.optimize import least_squares
    from scipy.spatial.transform import Rotation

    K = intrinsics.K if isinstance(intrinsics, CameraIntrinsics) else np.asarray(intrinsics)
    Kinv = np.linalg.inv(K)
    R0, t0 = pose.rotation, pose.translation / np.linalg.norm(pose.translation)
    b1, b2 = _tangent_basis(t0)

    def unpack(p):
        R = Rotation.from_rotvec(p[:3]).as_matrix() @ R0
        t = t0 + p[3] * b1 + p[4] * b2
        return R, t / np.linalg.norm(t)

    def residuals(p):
        R, t = unpack(p)
        F = Kinv.T @ _skew(t) @ R @ Kinv
        return sampson_distance(F / np.linalg.norm(F), pts_i, pts_j)

    r0 = residuals(np.zeros(5))
    if pts_i.shape[0] < 6:
        return pose
    sol = least_squares(residuals, np.zeros(5), method="lm", x_scale=1.0, max_nfev=200)
    if not np.all(np.isfinite(sol.x)) or sol.cost > 0.5 * float(r0 @ r0):
        return pose
    R, t = unpack(sol.x)
    U, _, Vt = np.linalg.svd(R)
    R = U @ Vt
    # keep the cheirality-consistent sign
    z1, z2 = triangulate(R, t, _normalized(pts_i, K), _normalized(pts_j, K))
    if np.sum((z1 > 0) & (z2 > 0)) < pose.n_front // 2:
        return pose
    return RelativePoseUpToScale(R, t, pose.inlier_ratio, int(np.sum((z1 > 0) & (z2 > 0))))


def calibrated_fundamental(R, t, intrinsics):
    K = intrinsics.K if isinstance(intrinsics, CameraIntrinsics) else np.asarray(intrinsics)
    Kinv = np.linalg.inv(K)
    F = Kinv.T @ _skew(t) @ R @ Kinv
    return F / np.linalg.norm(F)


def _refine_with_reselection(pose, matches, inliers, intrinsics, threshold, rounds=3):
    current = inliers
    for _ in range(rounds):
        pose = refine_pose(pose, current.pts_i, current.pts_j, intrinsics)
        F = calibrated_fundamental(pose.rotation, pose.translation, intrinsics)
        mask = sampson_distance(F, matches.pts_i, matches.pts_j) < threshold
        if mask.sum() < 8 or np.array_equal(mask, np.isin(matches.idx_i, current.idx_i)):
            break
        current = matches.subset(mask)
    return pose


def ground_truth_two_view(pose_i, pose_j):
    """Ground-truth ``(R, t)`` with ``X_j = R X_i + t`` from camera-to-world poses."""
    rel = relative_pose(pose_j, pose_i)
    return rel.rotation, rel.position


# --------------------------------------------------------------------------
# pair verification

def pair_seed(seed, key_i, key_j):
    """Per-pair RNG seed, independent of scheduling order."""
    def k(key):
        seq, kid = key if isinstance(key, tuple) else ("", key)
        return [zlib.crc32(str(seq).encode()), int(kid)]

    return np.random.SeedSequence([int(seed)] + k(key_i) + k(key_j))


def verify_pair(frame_i, frame_j, config: RansacConfig = None, intrinsics: CameraIntrinsics = None,
                metric="cosine", score=float("nan")) -> Verification:
    """Match two keyframes and accept the pair when enough matches fit one F.

    ``frame_i``/``frame_j`` are :class:`~cliqueloop.keyframes.Keyframe`
    objects (or anything with ``keypoints``, ``descriptors`` and ``key``).
    Near-zero parallax pairs are accepted with ``pose_valid`` false.
    """
    config = config or RansacConfig()
    key_i = getattr(frame_i, "key", None)
    key_j = getattr(frame_j, "key", None)
    m = mutual_match(frame_i.descriptors, frame_j.descriptors, frame_i.keypoints, frame_j.keypoints, metric)
    if len(m) < config.min_matches:
        return Verification(False, "insufficient matches", n_matches=len(m))

    # zero parallax: the eight-point system is rank deficient and F is undefined
    disp = np.linalg.norm(m.pts_j - m.pts_i, axis=1)
    still = float(np.mean(disp < config.inlier_threshold))
    if still >= config.acceptance_ratio and still >= 0.9:
        loop = VerifiedLoop(key_i, key_j, None, None, None, None, still, score)
        return Verification(True, "accepted (zero parallax, pose unavailable)", loop, len(m), still)

    rng = np.random.default_rng(pair_seed(config.seed, key_i if key_i else 0, key_j if key_j else 1))
    try:
        res = estimate_fundamental_ransac(m, config, rng)
    except InsufficientMatchesError:
        return Verification(False, "degenerate", n_matches=len(m))
    ratio = res.inlier_ratio
    if ratio < config.acceptance_ratio:
        return Verification(False, "low inlier ratio", n_matches=len(m), inlier_ratio=ratio)

    rotation = translation = E = None
    reason = "accepted"
    if intrinsics is not None:
        E = essential_from_fundamental(res.F, intrinsics)
        inl = m.subset(res.inliers)
        try:
            pose = decompose_essential(E, inl.pts_i, inl.pts_j, intrinsics)
            if config.refine_pose:
                pose = _refine_with_reselection(pose, m, inl, intrinsics, config.inlier_threshold)
            rotation, translation = pose.rotation, pose.translation
        except AmbiguousPoseError:
            reason = "accepted (ambiguous pose)"
    loop = VerifiedLoop(key_i, key_j, res.F, E, rotation, translation, ratio, score)
    return Verification(True, reason, loop, len(m), ratio,
                        {"iterations": res.iterations, "degenerate_samples": res.degenerate_samples})


def write_verified_csv(loops, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(VERIFIED_HEADER)
        for lp in loops:
            if lp.pose_valid:
                q = matrix_to_quat(lp.rotation)
                t = lp.translation
            else:
                q = [float("nan")] * 4
                t = [float("nan")] * 3
            w.writerow(
                [lp.key_i[0], lp.key_i[1], lp.key_j[0], lp.key_j[1], repr(float(lp.score)),
                 repr(float(lp.inlier_ratio))]
                + [repr(float(v)) for v in q]
                + [repr(float(v)) for v in t]
                + [int(lp.pose_valid)]
            )


def read_verified_csv(path):
    from .keyframes import quat_to_matrix

    loops = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            valid = bool(int(row["pose_valid"]))
            R = t = None
            if valid:
                R = quat_to_matrix([float(row[k]) for k in ("qw", "qx", "qy", "qz")])
                t = np.array([float(row[k]) for k in ("tx", "ty", "tz")])
            loops.append(
                VerifiedLoop(
                    (row["seq_i"], int(row["id_i"])), (row["seq_j"], int(row["id_j"])),
                    None, None, R, t, float(row["inlier_ratio"]), float(row["score"]),
                )
            )
    return loops
