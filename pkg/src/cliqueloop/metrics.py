"""Loop-closure detection metrics: AP, max recall at full precision, rotation
and up-to-scale translation errors, and per-sequence evaluation."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ._validation import check_same_length
from .exceptions import UndefinedMetricError
from .keyframes import relative_pose

DIST_THRESH_M = 4.0
ANGLE_THRESH_DEG = 30.0


def _ranked(scores, labels, ids=None):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    check_same_length(scores, labels, ("scores", "labels"))
    if not labels.any():
        raise UndefinedMetricError("no positive labels")
    ids = np.arange(len(scores)) if ids is None else np.asarray(ids)
    order = np.lexsort((ids, -scores))
    return scores[order], labels[order]


def _threshold_groups(s):
    """End index (exclusive) of each block of tied scores in a descending array."""
    if s.size == 0:
        return np.zeros(0, dtype=np.int64)
    change = np.flatnonzero(s[1:] != s[:-1]) + 1
    return np.append(change, s.size)


def pr_points(scores, labels, ids=None):
    """Precision/recall at every distinct score threshold, highest first.

    Returns ``(thresholds, precision, recall)``.
    """
    s, y = _ranked(scores, labels, ids)
    ends = _threshold_groups(s)
    tp = np.cumsum(y)[ends - 1]
    precision = tp / ends
    recall = tp / y.sum()
    return s[ends - 1], precision, recall


def average_precision(scores, labels, ids=None) -> float:
    """Step-interpolated AP: sum over thresholds of ``(R_t - R_{t-1}) * P_t``.

    Tied scores form a single threshold, so a constant scorer yields the
    positive prevalence.
    """
    _, p, r = pr_points(scores, labels, ids)
    dr = np.diff(np.concatenate([[0.0], r]))
    return float(np.sum(dr * p))


def max_recall_full_precision(scores, labels, ids=None) -> float:
    """Largest recall over thresholds whose prediction set has no false positive."""
    _, p, r = pr_points(scores, labels, ids)
    ok = p >= 1.0
    if not ok[0]:
        return 0.0
    # precision is 1 only on a prefix of thresholds
    last = np.argmin(ok) - 1 if not ok.all() else len(ok) - 1
    return float(r[last])


def rpe(R_gt, R_pred) -> float:
    """Geodesic angle between two rotations, in degrees."""
    R_gt = np.asarray(R_gt, dtype=np.float64)
    R_pred = np.asarray(R_pred, dtype=np.float64)
    c = (np.trace(R_gt.T @ R_pred) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


def ate_up_to_scale(t_gt, t_pred) -> float:
    t_gt = np.asarray(t_gt, dtype=np.float64)
    t_pred = np.asarray(t_pred, dtype=np.float64)
    ng, npred = np.linalg.norm(t_gt), np.linalg.norm(t_pred)
    if ng == 0 or npred == 0:
        raise UndefinedMetricError("zero-length translation")
    return float(np.linalg.norm(t_gt / ng - t_pred / npred))


def loop_label(pose_a, pose_b, dist_thresh=DIST_THRESH_M, ang_thresh=ANGLE_THRESH_DEG):
    """``(label, distance_m, angle_deg)`` for a keyframe pair."""
    rel = relative_pose(pose_a, pose_b)
    dist = float(np.linalg.norm(rel.position))
    ang = rpe(np.eye(3), rel.rotation)
    return int(dist < dist_thresh and ang < ang_thresh), dist, ang


# --------------------------------------------------------------------------
# sequence evaluation

@dataclass
class Prediction:
    """One scored keyframe pair, optionally with a verified relative pose.

    ``rotation``/``translation`` follow the two-view convention
    ``X_j = R X_i + t`` (see :mod:`cliqueloop.geoverify`).
    """

    key_i: tuple
    key_j: tuple
    score: float
    rotation: np.ndarray | None = None
    translation: np.ndarray | None = None


@dataclass
class PrCurve:
    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    n_positive: int
    n_total: int

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["threshold", "precision", "recall"])
            for t, p, r in zip(self.thresholds, self.precision, self.recall):
                w.writerow([repr(float(t)), repr(float(p)), repr(float(r))])

    @classmethod
    def from_csv(cls, path):
        rows = list(csv.DictReader(open(path, newline="")))
        if not rows:
            raise ValueError(f"{path}: empty PR curve")
        t = np.array([float(r["threshold"]) for r in rows])
        p = np.array([float(r["precision"]) for r in rows])
        rc = np.array([float(r["recall"]) for r in rows])
        return cls(t, p, rc, -1, -1)


@dataclass
class SequenceReport:
    sequence: str
    ap: float
    mr: float
    rpe_deg: float
    ate: float
    n_pairs: int
    n_positive: int
    n_pose_pairs: int
    notes: list = field(default_factory=list)


@dataclass
class EvalReport:
    sequences: list
    runtime: dict = field(default_factory=dict)

    @property
    def average(self):
        def mean(attr):
            vals = [getattr(s, attr) for s in self.sequences if not math.isnan(getattr(s, attr))]
            return float(np.mean(vals)) if vals else float("nan")

        return {
            "ap": mean("ap"),
            "mr": mean("mr"),
            "rpe_deg": mean("rpe_deg"),
            "ate": mean("ate"),
            "n_pairs": int(sum(s.n_pairs for s in self.sequences)),
            "n_positive": int(sum(s.n_positive for s in self.sequences)),
        }

    def to_dict(self):
        def clean(v):
            if isinstance(v, float) and math.isnan(v):
                return None
            return v

        seqs = {s.sequence: {k: clean(v) for k, v in asdict(s).items() if k != "sequence"} for s in self.sequences}
        return {
            "sequences": seqs,
            "average": {k: clean(v) for k, v in self.average.items()},
            "runtime": self.runtime,
        }

    def to_json(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def evaluate_sequence(predictions, poses, sequence="", dist_thresh=DIST_THRESH_M, ang_thresh=ANGLE_THRESH_DEG):
    """Score one sequence's predicted pairs against ground-truth poses.

    ``poses`` maps keyframe keys to :class:`~cliqueloop.keyframes.Pose`.
    Undefined metrics (no positives, no verified poses) come back as NaN with a
    note rather than raising.
    """
    from .geoverify import ground_truth_two_view  # local: avoids import cycle

    preds = sorted(predictions, key=lambda p: (p.key_i, p.key_j))
    scores = np.array([p.score for p in preds], dtype=np.float64)
    labels = np.array([loop_label(poses[p.key_i], poses[p.key_j], dist_thresh, ang_thresh)[0] for p in preds])
    notes = []
    ap = mr = float("nan")
    curve = PrCurve(np.zeros(0), np.zeros(0), np.zeros(0), int(labels.sum()), len(preds))
    if labels.sum() > 0:
        ap = average_precision(scores, labels)
        mr = max_recall_full_precision(scores, labels)
        t, p, r = pr_points(scores, labels)
        curve = PrCurve(t, p, r, int(labels.sum()), len(preds))
    else:
        notes.append("no ground-truth loops among predictions; AP/MR undefined")

    rot_err, trans_err = [], []
    for pred, y in zip(preds, labels):
        if y and pred.rotation is not None and pred.translation is not None:
            R_gt, t_gt = ground_truth_two_view(poses[pred.key_i], poses[pred.key_j])
            rot_err.append(rpe(R_gt, pred.rotation))
            try:
                trans_err.append(ate_up_to_scale(t_gt, pred.translation))
            except UndefinedMetricError:
                notes.append(f"zero baseline for pair {pred.key_i}-{pred.key_j}")
    report = SequenceReport(
        sequence=sequence,
        ap=ap,
        mr=mr,
        rpe_deg=float(np.mean(rot_err)) if rot_err else float("nan"),
        ate=float(np.mean(trans_err)) if trans_err else float("nan"),
        n_pairs=len(preds),
        n_positive=int(labels.sum()),
        n_pose_pairs=len(rot_err),
        notes=notes,
    )
    return report, curve
