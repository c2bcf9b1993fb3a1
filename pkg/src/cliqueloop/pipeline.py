"""Pipeline stages. Each reads upstream artifacts from a work directory and
writes its own outputs there, stamped with a hash of the config sections it
depends on so stale inputs can be detected.

Work directory layout::

    data/<seq>/            keyframe bundles (synth)
    vocab.lgvc             vocabulary (fit-vocab)
    vlad/<seq>.npy         per-keyframe VLAD rows (extract-vlad)
    index/<seq>.lgix       per-sequence search index (index)
    cliques/<seq>.csv      retrieved neighbours per query (retrieve)
    model.lgnn, train_log.csv                              (train)
    scores/<seq>.csv       query-edge scores (infer)
    verified/<seq>.csv     verification outcome per candidate (verify)
    loops/<seq>.csv        accepted loops with poses (verify)
    report.json, prcurve_<seq>.csv, sweep.csv              (eval)
    sweep/<variant>/       per-variant report and scores (run_sweep)
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import shutil
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .config import PipelineConfig, STAGE_DEPS, with_overrides
from .exceptions import MissingArtifactError
from .geoverify import read_verified_csv, verify_pair, write_verified_csv
from .gnn.io import load_model, save_model
from .gnn.model import ModelHyper, init_params
from .gnn.training import TrainConfig, label_array, label_edges, predict_query_edges, train, write_training_log
from .keyframes import load_dataset, save_dataset
from .metrics import (
    EvalReport,
    Prediction,
    average_precision,
    evaluate_sequence,
    loop_label,
)
from .retrieval import build_index, load_index, make_clique, query_topk, save_index
from .synth import generate
from .vlad import compute_vlad, fit_vocabulary, load_vocabulary, save_vocabulary

log = logging.getLogger(__name__)

STAMP_SUFFIX = ".stamp.json"


# --------------------------------------------------------------------------
# stamps

def file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def tree_digest(path):
    """Digest of a file, or of every file under a directory in sorted order."""
    path = Path(path)
    if path.is_file():
        return file_digest(path)
    h = hashlib.sha256()
    for p in sorted(q for q in path.rglob("*") if q.is_file() and not q.name.endswith(STAMP_SUFFIX)):
        h.update(str(p.relative_to(path)).encode())
        h.update(file_digest(p).encode())
    return h.hexdigest()


def write_stamp(artifact, stage, cfg: PipelineConfig):
    stamp = {"stage": stage, "config_hash": cfg.stage_hash(stage), "sections": list(STAGE_DEPS[stage])}
    Path(str(artifact) + STAMP_SUFFIX).write_text(json.dumps(stamp, sort_keys=True) + "\n")


def check_stamp(artifact, stage, cfg: PipelineConfig):
    """Raise if ``artifact`` is missing; warn and return False if it is stale."""
    artifact = Path(artifact)
    if not artifact.exists():
        raise MissingArtifactError(f"missing upstream artifact {artifact} (run the {stage!r} stage first)")
    sp = Path(str(artifact) + STAMP_SUFFIX)
    if not sp.is_file():
        return True
    stamp = json.loads(sp.read_text())
    if stamp.get("config_hash") != cfg.stage_hash(stage):
        log.warning("%s was produced under a different config (stage %s); results may be stale", artifact, stage)
        return False
    return True


# --------------------------------------------------------------------------
# helpers

@dataclass
class Workdir:
    root: Path

    def __post_init__(self):
        self.root = Path(self.root)

    def p(self, *parts):
        return self.root.joinpath(*parts)

    def ensure(self, *parts):
        d = self.p(*parts)
        d.mkdir(parents=True, exist_ok=True)
        return d


def sequence_paths(cfg: PipelineConfig, work: Workdir, split=None):
    """``{name: bundle dir}`` for the configured splits, in config order.

    With no ``[data]`` entries the synthetic sequences under ``data/`` are used.
    """
    splits = ("train", "val", "test") if split is None else (split,)
    out = {}
    for s in splits:
        entries = getattr(cfg.data, s)
        if not entries and not any(getattr(cfg.data, x) for x in ("train", "val", "test")):
            entries = [f"data/{n}" for n in _synth_split(cfg, s)]
            for e in entries:
                out[Path(e).name] = work.p(e)
            continue
        for e in entries:
            p = cfg.resolve(e)
            out[p.name] = p
    return out


def _synth_split(cfg, split):
    names = list(cfg.synth.sequences)
    if split == "train":
        return [n for n in names if n not in ("val", "test")]
    return [n for n in names if n == split]


def load_sequences(cfg, work, split=None):
    out = {}
    for name, path in sequence_paths(cfg, work, split).items():
        ds = load_dataset(path)
        out[ds.name] = ds
    return out


def _map(fn, items, workers):
    """Ordered map; results never depend on ``workers``."""
    if workers and workers > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(fn, items, chunksize=max(1, len(items) // (4 * workers))))
    return [fn(x) for x in items]


# --------------------------------------------------------------------------
# stages

def stage_synth(cfg: PipelineConfig, work: Workdir):
    written = []
    for name, traverse in cfg.synth.sequences.items():
        ds = generate(cfg.synth.spec(traverse), name)
        out = save_dataset(ds, work.ensure("data", name))
        write_stamp(out, "synth", cfg)
        written.append(out)
    return written


def stage_fit_vocab(cfg: PipelineConfig, work: Workdir):
    train_seqs = load_sequences(cfg, work, "train")
    if not train_seqs:
        raise MissingArtifactError("no training sequences configured")
    mats = [kf.descriptors for ds in train_seqs.values() for kf in ds]
    v = cfg.vocab
    vocab = fit_vocabulary(mats, v.n_clusters, v.metric, v.seed, v.max_keypoints, max_iter=v.max_iter)
    out = work.p("vocab.lgvc")
    work.ensure()
    save_vocabulary(vocab, out)
    write_stamp(out, "fit-vocab", cfg)
    return out


def _vocab(cfg, work):
    path = work.p("vocab.lgvc")
    check_stamp(path, "fit-vocab", cfg)
    return load_vocabulary(path)


def stage_extract_vlad(cfg: PipelineConfig, work: Workdir):
    vocab = _vocab(cfg, work)
    outs = []
    for name, ds in load_sequences(cfg, work).items():
        rows = np.stack([compute_vlad(kf.descriptors, vocab).values for kf in ds]).astype("<f4")
        ids = np.array([kf.id for kf in ds], dtype="<i8")
        out = work.ensure("vlad") / f"{name}.npy"
        with open(out, "wb") as fh:
            np.save(fh, rows)
            np.save(fh, ids)
        write_stamp(out, "extract-vlad", cfg)
        outs.append(out)
    return outs


def load_vlads(work, name):
    path = work.p("vlad", f"{name}.npy")
    if not path.is_file():
        raise MissingArtifactError(f"missing VLAD file {path} (run extract-vlad)")
    with open(path, "rb") as fh:
        rows = np.load(fh)
        ids = np.load(fh)
    return rows, ids


def stage_index(cfg: PipelineConfig, work: Workdir):
    outs = []
    for name, ds in load_sequences(cfg, work).items():
        check_stamp(work.p("vlad", f"{name}.npy"), "extract-vlad", cfg)
        rows, ids = load_vlads(work, name)
        vl = {(name, int(i)): r for i, r in zip(ids, rows)}
        index = build_index([ds], vl)
        out = work.ensure("index") / f"{name}.lgix"
        save_index(index, out)
        write_stamp(out, "index", cfg)
        outs.append(out)
    return outs


def stage_retrieve(cfg: PipelineConfig, work: Workdir):
    r = cfg.retrieval
    outs = []
    for name in sequence_paths(cfg, work):
        path = work.p("index", f"{name}.lgix")
        check_stamp(path, "index", cfg)
        index = load_index(path)
        out = work.ensure("cliques") / f"{name}.csv"
        with open(out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["query_id", "rank", "neighbor_id", "similarity"])
            for key in index.keys():
                for rank, (nk, sim) in enumerate(query_topk(index, key, r.k_pct, r.exclusion_window)):
                    w.writerow([key[1], rank, nk[1], repr(float(sim))])
        write_stamp(out, "retrieve", cfg)
        outs.append(out)
    return outs


def read_cliques(path):
    """``{query_id: [(neighbor_id, similarity), ...]}`` in rank order."""
    path = Path(path)
    if not path.is_file():
        raise MissingArtifactError(f"missing clique file {path} (run retrieve)")
    out = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.setdefault(int(row["query_id"]), []).append((int(row["neighbor_id"]), float(row["similarity"])))
    return out


def sequence_cliques(cfg, work, ds):
    """Cliques for every query of ``ds`` with descriptors attached."""
    path = work.p("cliques", f"{ds.name}.csv")
    check_stamp(path, "retrieve", cfg)
    table = read_cliques(path)
    desc = {kf.key: kf.descriptors for kf in ds}
    return [
        make_clique((ds.name, q), [((ds.name, n), s) for n, s in nbrs], desc)
        for q, nbrs in table.items()
    ]


def labelled_cliques(cfg, work, datasets):
    cliques, labels = [], []
    e = cfg.eval
    for ds in datasets.values():
        poses = {kf.key: kf.pose for kf in ds}
        for c in sequence_cliques(cfg, work, ds):
            cliques.append(c)
            labels.append(label_array(label_edges(c, poses, e.dist_thresh, e.ang_thresh)))
    return cliques, labels


def build_model(cfg, descriptor_dim, centroids=None):
    m = cfg.model
    hyper = ModelHyper(descriptor_dim, cfg.vocab.n_clusters, m.node_dim, m.n_layers, m.heads, m.dropout,
                       mlp_hidden=m.mlp_hidden, residual=m.residual)
    return init_params(hyper, cfg.train.seed, centroids=centroids if m.netvlad_from_vocab else None)


def stage_train(cfg: PipelineConfig, work: Workdir, callback=None):
    train_sets = load_sequences(cfg, work, "train")
    val_sets = load_sequences(cfg, work, "val")
    tc, tl = labelled_cliques(cfg, work, train_sets)
    vc, vl = labelled_cliques(cfg, work, val_sets)
    vocab = _vocab(cfg, work)
    dim = next(iter(train_sets.values())).descriptor_dim
    params = build_model(cfg, dim, vocab.centroids)
    t = cfg.train
    tcfg = TrainConfig(t.lr, t.batch_size, t.epochs, cfg.model.dropout, t.seed, t.early_stopping, t.patience,
                       t.supervise)
    best, rows = train(tc, tl, params, tcfg, vc or None, vl or None, callback)
    out = work.p("model.lgnn")
    save_model(best, out)
    write_training_log(rows, work.p("train_log.csv"))
    write_stamp(out, "train", cfg)
    return out, rows


def _score_clique(args):
    clique, params = args
    return predict_query_edges(clique, params)


def stage_infer(cfg: PipelineConfig, work: Workdir, workers=1, split="test"):
    path = work.p("model.lgnn")
    check_stamp(path, "train", cfg)
    params = load_model(path)
    outs = []
    for name, ds in load_sequences(cfg, work, split).items():
        cliques = sequence_cliques(cfg, work, ds)
        scored = _map(_score_clique, [(c, params) for c in cliques], workers)
        rows = sorted(((a[1], b[1], s) for res in scored for (a, b), s in res))
        out = work.ensure("scores") / f"{name}.csv"
        with open(out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id_i", "id_j", "score"])
            for a, b, s in rows:
                w.writerow([a, b, repr(float(s))])
        write_stamp(out, "infer", cfg)
        outs.append(out)
    return outs


def read_scores(path):
    path = Path(path)
    if not path.is_file():
        raise MissingArtifactError(f"missing score file {path} (run infer)")
    with open(path, newline="") as fh:
        return [((int(r["id_i"]), int(r["id_j"])), float(r["score"])) for r in csv.DictReader(fh)]


def unique_pairs(scored):
    """Deduplicate unordered pairs keeping the max score; ranked by score then pair."""
    best = {}
    for (a, b), s in scored:
        k = (min(a, b), max(a, b))
        if k not in best or s > best[k]:
            best[k] = s
    return sorted(best.items(), key=lambda kv: (-kv[1], kv[0]))


def _verify_job(args):
    fi, fj, rcfg, intr, score = args
    v = verify_pair(fi, fj, rcfg, intr, score=score)
    return v.accepted, v.reason, v.inlier_ratio, v.loop


def verify_candidates(ds, ranked, cfg, workers=1):
    """Run geometric verification on ``ranked`` ``[((id_i, id_j), score), ...]``."""
    frames = ds.by_id()
    rcfg = cfg.verify.ransac()
    jobs = [(frames[a], frames[b], rcfg, ds.intrinsics, s) for (a, b), s in ranked]
    return _map(_verify_job, jobs, workers)


def n_candidates(fraction, total):
    return max(1, math.ceil(fraction * total - 1e-9))


def stage_verify(cfg: PipelineConfig, work: Workdir, workers=1, split="test"):
    v = cfg.verify
    outs = []
    for name, ds in load_sequences(cfg, work, split).items():
        path = work.p("scores", f"{name}.csv")
        check_stamp(path, "infer", cfg)
        ranked = unique_pairs(read_scores(path))
        if v.selection == "threshold":
            chosen = [kv for kv in ranked if kv[1] > v.threshold]
            n_verify = len(chosen)
        else:
            n_verify = n_candidates(v.candidate_fraction, len(ranked))
        budget = max([n_verify] + [n_candidates(f, len(ranked)) for f in v.sweep_fractions])
        if v.exhaustive:
            budget = len(ranked)
        results = verify_candidates(ds, ranked[:budget], cfg, workers)
        out = work.ensure("verified") / f"{name}.csv"
        with open(out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["rank", "id_i", "id_j", "score", "accepted", "reason", "inlier_ratio"])
            for rank, (((a, b), s), (acc, reason, ratio, _)) in enumerate(zip(ranked, results)):
                w.writerow([rank, a, b, repr(float(s)), int(acc), reason, repr(float(ratio))])
        loops = [lp for (acc, _, _, lp), _ in zip(results[:n_verify], range(n_verify)) if acc]
        lp_path = work.ensure("loops") / f"{name}.csv"
        write_verified_csv(loops, lp_path)
        write_stamp(out, "verify", cfg)
        write_stamp(lp_path, "verify", cfg)
        outs.append(out)
    return outs


def read_verified(path):
    path = Path(path)
    if not path.is_file():
        raise MissingArtifactError(f"missing verification file {path} (run verify)")
    with open(path, newline="") as fh:
        return [
            (int(r["rank"]), (int(r["id_i"]), int(r["id_j"])), float(r["score"]), bool(int(r["accepted"])))
            for r in csv.DictReader(fh)
        ]


def detection_ap(ranked, accepted_ranks, n_verified, labels):
    """AP when only the top ``n_verified`` candidates are verified.

    Accepted pairs keep their model score; every other pair is undetected and
    shares the lowest score.
    """
    scores = np.full(len(ranked), -1.0)
    for r in accepted_ranks:
        if r < n_verified:
            scores[r] = ranked[r][1]
    return average_precision(scores, labels)


def efficiency_sweep(ranked, verified, labels, counts):
    """``[(count, ap), ...]`` for the loop detector plus geometric verification."""
    acc = [r for r, _, _, a in verified if a]
    limit = len(verified)
    return [(int(n), detection_ap(ranked, acc, min(n, limit), labels)) for n in counts]


def candidates_to_reach(ranked, verified, labels, target):
    """Fewest verified top candidates whose detection AP reaches ``target``, or None."""
    acc = [r for r, _, _, a in verified if a]
    for n in range(1, len(verified) + 1):
        if detection_ap(ranked, acc, n, labels) >= target:
            return n
    return None


def stage_eval(cfg: PipelineConfig, work: Workdir, split="test"):
    e, v = cfg.eval, cfg.verify
    reports, curves, sweep_rows = [], {}, []
    for name, ds in load_sequences(cfg, work, split).items():
        poses = {kf.id: kf.pose for kf in ds}
        spath = work.p("scores", f"{name}.csv")
        check_stamp(spath, "infer", cfg)
        ranked = unique_pairs(read_scores(spath))
        labels = np.array([loop_label(poses[a], poses[b], e.dist_thresh, e.ang_thresh)[0] for (a, b), _ in ranked])

        loops = {}
        lpath = work.p("loops", f"{name}.csv")
        # verification from another config would pair poses with the wrong scores
        if lpath.is_file() and check_stamp(lpath, "verify", cfg):
            for lp in read_verified_csv(lpath):
                loops[(lp.key_i[1], lp.key_j[1])] = lp
        preds = []
        for (a, b), s in ranked:
            lp = loops.get((a, b))
            preds.append(Prediction((name, a), (name, b), s,
                                    lp.rotation if lp is not None else None,
                                    lp.translation if lp is not None else None))
        kposes = {(name, k): p for k, p in poses.items()}
        rep, curve = evaluate_sequence(preds, kposes, name, e.dist_thresh, e.ang_thresh)
        reports.append(rep)
        curves[name] = curve
        curve.to_csv(work.p(f"prcurve_{name}.csv"))

        vpath = work.p("verified", f"{name}.csv")
        if vpath.is_file() and labels.sum() > 0 and check_stamp(vpath, "verify", cfg):
            verified = read_verified(vpath)
            counts = sorted({n_candidates(f, len(ranked)) for f in v.sweep_fractions} | {len(verified)})
            for n, ap in efficiency_sweep(ranked, verified, labels, counts):
                sweep_rows.append((name, n, len(ranked), ap))
    report = EvalReport(reports, {"n_sequences": len(reports)})
    report.to_json(work.p("report.json"))
    with open(work.p("sweep.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sequence", "candidates", "total_pairs", "ap"])
        for row in sweep_rows:
            w.writerow([row[0], row[1], row[2], repr(float(row[3]))])
    write_stamp(work.p("report.json"), "eval", cfg)
    return report, curves, sweep_rows


STAGES = {
    "synth": stage_synth,
    "fit-vocab": stage_fit_vocab,
    "extract-vlad": stage_extract_vlad,
    "index": stage_index,
    "retrieve": stage_retrieve,
    "train": stage_train,
    "infer": stage_infer,
    "verify": stage_verify,
    "eval": stage_eval,
}

STAGE_ORDER = list(STAGES)


# --------------------------------------------------------------------------
# incremental runs and config sweeps

def stage_artifacts(stage, cfg: PipelineConfig, work: Workdir):
    """Stamped outputs that show whether ``stage`` is current for ``cfg``."""
    if stage == "synth":
        return [work.p("data", n) for n in cfg.synth.sequences]
    if stage == "fit-vocab":
        return [work.p("vocab.lgvc")]
    if stage == "train":
        return [work.p("model.lgnn")]
    if stage == "eval":
        return [work.p("report.json")]
    split = "test" if stage in ("infer", "verify") else None
    names = list(sequence_paths(cfg, work, split))
    sub, ext = {"extract-vlad": ("vlad", "npy"), "index": ("index", "lgix"), "retrieve": ("cliques", "csv"),
                "infer": ("scores", "csv"), "verify": ("verified", "csv")}[stage]
    return [work.p(sub, f"{n}.{ext}") for n in names]


def is_current(stage, cfg: PipelineConfig, work: Workdir):
    want = cfg.stage_hash(stage)
    for path in stage_artifacts(stage, cfg, work):
        sp = Path(str(path) + STAMP_SUFFIX)
        if not path.exists() or not sp.is_file() or json.loads(sp.read_text()).get("config_hash") != want:
            return False
    return True


def run_stages(cfg: PipelineConfig, work: Workdir, stages=None, workers=1, reuse=False):
    """Run ``stages`` in pipeline order.

    With ``reuse``, leading stages whose stamps match ``cfg`` are skipped;
    once one stage runs, everything after it runs too.
    """
    stages = STAGE_ORDER if stages is None else [s for s in STAGE_ORDER if s in stages]
    ran = []
    dirty = not reuse
    for name in stages:
        if not dirty and is_current(name, cfg, work):
            log.info("%s is up to date", name)
            continue
        dirty = True
        t0 = time.perf_counter()
        fn = STAGES[name]
        fn(cfg, work, workers=workers) if name in ("infer", "verify") else fn(cfg, work)
        log.info("%s done in %.1f s", name, time.perf_counter() - t0)
        ran.append(name)
    return ran


@dataclass
class SweepRow:
    variant: str
    overrides: dict
    ap: float
    mr: float
    seconds: float
    stages_run: list


def run_sweep(base: PipelineConfig, variants, work: Workdir, stages=None, workers=1, report_path=None):
    """Run the pipeline once per variant and collect the averaged metrics.

    ``variants`` maps a name to dotted config overrides. All variants share
    ``work``; stages whose inputs did not change between variants are reused.
    Each variant's report and scores are copied to ``sweep/<name>/``.
    """
    rows = []
    for name, overrides in variants.items():
        cfg = with_overrides(base, overrides)
        t0 = time.perf_counter()
        ran = run_stages(cfg, work, stages, workers, reuse=True)
        seconds = time.perf_counter() - t0
        avg = json.loads(work.p("report.json").read_text())["average"]
        dest = work.ensure("sweep", name)
        shutil.copyfile(work.p("report.json"), dest / "report.json")
        for f in work.p("scores").glob("*.csv"):
            shutil.copyfile(f, dest / f.name)
        nan = float("nan")
        rows.append(SweepRow(name, dict(overrides), nan if avg["ap"] is None else avg["ap"],
                             nan if avg["mr"] is None else avg["mr"], seconds, ran))
    if report_path is not None:
        write_sweep_report(rows, report_path)
    return rows


def write_sweep_report(rows, path):
    def clean(v):
        return None if isinstance(v, float) and math.isnan(v) else v

    payload = [{k: clean(v) for k, v in asdict(r).items()} for r in rows]
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
