"""Supervision, optimisation and inference helpers for the clique scorer."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass

import numpy as np

from ..exceptions import DimensionMismatchError, TrainingError, UndefinedMetricError
from ..metrics import ANGLE_THRESH_DEG, DIST_THRESH_M, average_precision, loop_label, max_recall_full_precision
from . import layers as L
from .model import ModelParams, backward, clique_descriptors, forward, model_forward

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-7


@dataclass
class EdgeLabel:
    pair: tuple
    label: int
    distance: float
    angle: float


def label_edges(clique, poses, dist_thresh=DIST_THRESH_M, ang_thresh=ANGLE_THRESH_DEG):
    """Ground-truth loop labels for every clique edge from keyframe poses."""
    out = []
    for a, b in clique.edge_keys():
        if a not in poses or b not in poses:
            missing = a if a not in poses else b
            raise KeyError(f"no ground-truth pose for keyframe {missing}")
        y, d, ang = loop_label(poses[a], poses[b], dist_thresh, ang_thresh)
        out.append(EdgeLabel((a, b), y, d, ang))
    return out


def label_array(edge_labels):
    return np.array([e.label for e in edge_labels], dtype=np.float64)


def bce_loss(scores, labels):
    """Mean binary cross-entropy with probabilities clamped to [1e-7, 1 - 1e-7]."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if s.shape != y.shape:
        raise DimensionMismatchError(f"scores {s.shape} and labels {y.shape} differ")
    s = np.clip(s, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return float(np.mean(-(y * np.log(s) + (1.0 - y) * np.log(1.0 - s))))


def loss_and_grad(batch, params: ModelParams, train_mode=False, rng=None, supervise="all", pos_weight=1.0):
    """Mean BCE over the supervised edges of ``batch`` and its parameter gradients.

    ``batch`` is a list of ``(clique, labels)``. The logit gradient is that of
    the unclamped loss, ``(s - y) / N``, so saturated wrong predictions still
    receive a signal.
    """
    items = []
    n_total = 0.0
    for clique, y in batch:
        y = np.asarray(y, dtype=np.float64)
        sel = clique.query_edge if supervise == "query" else np.ones(clique.n_edges, dtype=bool)
        w = np.where(y > 0, pos_weight, 1.0) * sel
        n_total += w.sum()
        items.append((clique, y, w))
    if n_total == 0:
        raise TrainingError("batch has no supervised edges")

    total_loss = 0.0
    grads = None
    for clique, y, w in items:
        logits, cache = forward(clique_descriptors(clique), clique.edges, params, train_mode, rng)
        s = L.sigmoid(np.asarray(logits, dtype=np.float64))
        sc = np.clip(s, PROB_CLAMP, 1.0 - PROB_CLAMP)
        total_loss += float(np.sum(w * -(y * np.log(sc) + (1.0 - y) * np.log(1.0 - sc))))
        dlogits = (w * (s - y) / n_total).astype(params.dtype)
        g = backward(cache, dlogits, params)
        if grads is None:
            grads = g
        else:
            for k in grads:
                grads[k] += g[k]
    return total_loss / n_total, grads


# --------------------------------------------------------------------------
# optimiser

class Adam:
    def __init__(self, params: ModelParams, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        self.t = 0

    def step(self, params: ModelParams, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for k, p in params.tensors.items():
            g = grads[k]
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


# --------------------------------------------------------------------------
# training loop

@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 2
    epochs: int = 10
    dropout: float = 0.2
    seed: int = 0
    early_stopping: str = "ap"  # "ap" or "mr"; the other metric breaks ties
    patience: int = 3
    supervise: str = "all"
    pos_weight: float = 1.0

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise ValueError("lr, batch_size and epochs must be positive")
        if self.early_stopping not in ("ap", "mr"):
            raise ValueError("early_stopping must be 'ap' or 'mr'")
        if self.supervise not in ("all", "query"):
            raise ValueError("supervise must be 'all' or 'query'")


@dataclass
class LogRow:
    epoch: int
    step: int
    loss: float
    val_ap: float
    val_mr: float


def write_training_log(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "step", "loss", "val_ap", "val_mr"])
        for r in rows:
            w.writerow([r.epoch, r.step, repr(r.loss), repr(r.val_ap), repr(r.val_mr)])


def evaluate_query_edges(cliques, labels, params):
    """AP and MR over the query edges of ``cliques``; NaN when undefined."""
    scores, ys = [], []
    for c, y in zip(cliques, labels):
        s = model_forward(c, params)
        scores.append(s[c.query_edge])
        ys.append(np.asarray(y)[c.query_edge])
    if not scores:
        return float("nan"), float("nan")
    s, y = np.concatenate(scores), np.concatenate(ys)
    try:
        return average_precision(s, y), max_recall_full_precision(s, y)
    except UndefinedMetricError:
        return float("nan"), float("nan")


def train(train_cliques, train_labels, params: ModelParams, config: TrainConfig = None,
          val_cliques=None, val_labels=None, callback=None):
    """Fit ``params`` in place with Adam on mean BCE; returns ``(best_params, log_rows)``.

    After each epoch the validation query-edge AP and MR are computed and the
    best epoch's parameters are kept; training stops early after
    ``config.patience`` epochs without improvement.
    """
    config = config or TrainConfig()
    if len(train_cliques) != len(train_labels):
        raise DimensionMismatchError("train cliques and labels differ in length")
    if not any(np.asarray(y).sum() > 0 for y in train_labels):
        raise TrainingError("training set contains no positive edge labels; nothing to learn")
    params.hyper.dropout = config.dropout
    rng = np.random.default_rng([config.seed, 7])
    opt = Adam(params, lr=config.lr)
    rows = []
    best, best_key, stale = params.copy(), None, 0
    step = 0
    n = len(train_cliques)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        losses = []
        for s in range(0, n, config.batch_size):
            idx = order[s:s + config.batch_size]
            batch = [(train_cliques[i], train_labels[i]) for i in idx]
            loss, grads = loss_and_grad(batch, params, True, rng, config.supervise, config.pos_weight)
            opt.step(params, grads)
            losses.append(loss)
            step += 1
        if val_cliques:
            ap, mr = evaluate_query_edges(val_cliques, val_labels, params)
        else:
            ap = mr = float("nan")
        rows.append(LogRow(epoch, step, float(np.mean(losses)), ap, mr))
        log.info("epoch %d loss %.4f val_ap %.4f val_mr %.4f", epoch, rows[-1].loss, ap, mr)
        if callback is not None:
            callback(rows[-1], params)
        if not val_cliques:
            best = params.copy()
            continue
        key = (ap, mr) if config.early_stopping == "ap" else (mr, ap)
        key = tuple(-1.0 if math.isnan(k) else k for k in key)
        if best_key is None or key > best_key:
            best, best_key, stale = params.copy(), key, 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    return best, rows


# --------------------------------------------------------------------------
# gradient check

def gradient_check(params: ModelParams, clique, labels, epsilon=1e-5, tensors=None, samples_per_tensor=6,
                   seed=0, report=False, floor=1e-6):
    """Max relative error between analytic and central-difference gradients.

    Runs in float64 without dropout. ``tensors`` restricts the check to the
    named parameter tensors (all by default); an empty list returns 0.
    ``floor`` bounds the denominator: some attention gradients are exactly
    zero and their finite differences are pure round-off.
    """
    p64 = params.astype(np.float64)
    batch = [(clique, labels)]
    _, grads = loss_and_grad(batch, p64)
    rng = np.random.default_rng(seed)
    names = list(p64.tensors) if tensors is None else list(tensors)
    worst = 0.0
    per_tensor = {}
    for name in names:
        arr = p64.tensors[name]
        flat = arr.reshape(-1)
        k = min(samples_per_tensor, flat.size)
        idxs = rng.choice(flat.size, k, replace=False)
        err_t = 0.0
        for i in idxs:
            old = flat[i]
            flat[i] = old + epsilon
            lp, _ = loss_and_grad(batch, p64)
            flat[i] = old - epsilon
            lm, _ = loss_and_grad(batch, p64)
            flat[i] = old
            g_fd = (lp - lm) / (2 * epsilon)
            g = grads[name].reshape(-1)[i]
            err = abs(g_fd - g) / max(abs(g_fd), abs(g), floor)
            err_t = max(err_t, err)
        per_tensor[name] = err_t
        worst = max(worst, err_t)
    return (worst, per_tensor) if report else worst


# --------------------------------------------------------------------------
# inference

def predict_query_edges(clique, params: ModelParams):
    """``[((query_key, node_key), score), ...]`` for the clique's query edges."""
    scores = model_forward(clique, params)
    keys = clique.edge_keys()
    return [(keys[e], float(scores[e])) for e in np.flatnonzero(clique.query_edge)]


def select_candidates(scored, mode="top_fraction", value=0.005):
    """Pick pairs for geometric verification.

    ``scored`` is ``[((key_a, key_b), score), ...]``. Unordered duplicates keep
    their highest score. ``top_fraction`` keeps ``ceil(value * count)`` best
    pairs; ``threshold`` keeps pairs scoring strictly above ``value``.
    Returned pairs are sorted by descending score, then by key.
    """
    if not scored:
        raise ValueError("no scored pairs")
    best = {}
    for (a, b), s in scored:
        k = (a, b) if a <= b else (b, a)
        if k not in best or s > best[k]:
            best[k] = float(s)
    items = sorted(best.items(), key=lambda kv: (-kv[1], kv[0]))
    if mode == "top_fraction":
        if not 0 < value <= 1:
            raise ValueError(f"top_fraction must be in (0, 1], got {value}")
        return items[: math.ceil(value * len(items) - 1e-9)]
    if mode == "threshold":
        if not 0 <= value <= 1:
            raise ValueError(f"threshold must be in [0, 1], got {value}")
        return [kv for kv in items if kv[1] > value]
    raise ValueError(f"unknown selection mode {mode!r}")
