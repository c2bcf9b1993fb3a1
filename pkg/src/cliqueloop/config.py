"""Pipeline configuration: TOML file, per-section validation and hashing."""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib
import tomli_w

from ._validation import check_fraction, check_positive
from .exceptions import ConfigError
from .geoverify import RansacConfig
from .synth import SyntheticWorldSpec


@dataclass
class DataSection:
    """Bundle directories, relative to the config file or absolute."""

    train: list = field(default_factory=list)
    val: list = field(default_factory=list)
    test: list = field(default_factory=list)


@dataclass
class VocabSection:
    n_clusters: int = 64
    metric: str = "cosine"
    max_keypoints: int = 2048
    seed: int = 0
    max_iter: int = 100

    def validate(self):
        check_positive(self.n_clusters, "vocab.n_clusters")
        check_positive(self.max_keypoints, "vocab.max_keypoints")
        if self.metric not in ("cosine", "euclidean"):
            raise ConfigError(f"vocab.metric must be cosine or euclidean, got {self.metric!r}")


@dataclass
class RetrievalSection:
    k_pct: float = 1.0
    exclusion_window: int = 50

    def validate(self):
        if not 0 < self.k_pct <= 100:
            raise ConfigError(f"retrieval.k_pct must be in (0, 100], got {self.k_pct}")
        if self.exclusion_window < 0:
            raise ConfigError("retrieval.exclusion_window must be >= 0")


@dataclass
class ModelSection:
    n_layers: int = 6
    heads: int = 1
    dropout: float = 0.2
    node_dim: int = 256
    mlp_hidden: int = 256
    residual: bool = True
    netvlad_from_vocab: bool = True

    def validate(self):
        if self.n_layers < 0:
            raise ConfigError("model.n_layers must be >= 0")
        check_positive(self.heads, "model.heads")
        check_positive(self.node_dim, "model.node_dim")
        check_positive(self.mlp_hidden, "model.mlp_hidden")
        if not 0 <= self.dropout < 1:
            raise ConfigError("model.dropout must be in [0, 1)")


@dataclass
class TrainSection:
    lr: float = 1e-4
    batch_size: int = 2
    epochs: int = 10
    seed: int = 0
    early_stopping: str = "ap"
    patience: int = 3
    supervise: str = "all"

    def validate(self):
        check_positive(self.lr, "train.lr")
        check_positive(self.batch_size, "train.batch_size")
        check_positive(self.epochs, "train.epochs")
        if self.early_stopping not in ("ap", "mr"):
            raise ConfigError("train.early_stopping must be 'ap' or 'mr'")
        if self.supervise not in ("all", "query"):
            raise ConfigError("train.supervise must be 'all' or 'query'")


@dataclass
class VerifySection:
    max_iterations: int = 2000
    inlier_threshold: float = 2.0
    confidence: float = 0.999
    min_matches: int = 8
    acceptance_ratio: float = 0.5
    seed: int = 0
    selection: str = "top_fraction"
    candidate_fraction: float = 0.005
    threshold: float = 0.5
    sweep_fractions: list = field(default_factory=lambda: [0.01, 0.02, 0.03, 0.05, 0.1, 0.2])
    exhaustive: bool = True

    def validate(self):
        self.ransac()
        if self.selection not in ("top_fraction", "threshold"):
            raise ConfigError("verify.selection must be 'top_fraction' or 'threshold'")
        check_fraction(self.candidate_fraction, "verify.candidate_fraction")
        for f in self.sweep_fractions:
            check_fraction(f, "verify.sweep_fractions")

    def ransac(self):
        return RansacConfig(self.max_iterations, self.inlier_threshold, self.confidence, self.min_matches,
                            self.acceptance_ratio, self.seed)


@dataclass
class EvalSection:
    dist_thresh: float = 4.0
    ang_thresh: float = 30.0

    def validate(self):
        check_positive(self.dist_thresh, "eval.dist_thresh")
        check_positive(self.ang_thresh, "eval.ang_thresh")


@dataclass
class SynthSection:
    """World settings plus the traverses to write, keyed by sequence name."""

    world: dict = field(default_factory=dict)
    sequences: dict = field(default_factory=lambda: {"train1": 1, "train2": 2, "train3": 3, "train4": 4,
                                                     "val": 5, "test": 6})

    def spec(self, traverse):
        try:
            return SyntheticWorldSpec(**{**self.world, "traverse": int(traverse)})
        except TypeError as exc:
            raise ConfigError(f"synth.world: {exc}") from None

    def validate(self):
        self.spec(0)


SECTIONS = {
    "data": DataSection,
    "vocab": VocabSection,
    "retrieval": RetrievalSection,
    "model": ModelSection,
    "train": TrainSection,
    "verify": VerifySection,
    "eval": EvalSection,
    "synth": SynthSection,
}

# which sections each stage's outputs depend on, for staleness stamps;
# synthetic data feeds everything downstream
_UP = ("synth", "data", "vocab")
STAGE_DEPS = {
    "synth": ("synth",),
    "fit-vocab": _UP,
    "extract-vlad": _UP,
    "index": _UP,
    "retrieve": _UP + ("retrieval",),
    "train": _UP + ("retrieval", "model", "train", "eval"),
    "infer": _UP + ("retrieval", "model", "train", "eval"),
    "verify": _UP + ("retrieval", "model", "train", "eval", "verify"),
    "eval": _UP + ("retrieval", "model", "train", "eval", "verify"),
}


@dataclass
class PipelineConfig:
    data: DataSection = field(default_factory=DataSection)
    vocab: VocabSection = field(default_factory=VocabSection)
    retrieval: RetrievalSection = field(default_factory=RetrievalSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    verify: VerifySection = field(default_factory=VerifySection)
    eval: EvalSection = field(default_factory=EvalSection)
    synth: SynthSection = field(default_factory=SynthSection)
    base_dir: Path = field(default_factory=Path.cwd, compare=False)

    def validate(self):
        for name in SECTIONS:
            sec = getattr(self, name)
            if hasattr(sec, "validate"):
                sec.validate()
        return self

    def to_dict(self):
        return {name: asdict(getattr(self, name)) for name in SECTIONS}

    def to_toml(self, path=None):
        text = tomli_w.dumps(self.to_dict())
        if path is not None:
            Path(path).write_text(text)
        return text

    def section_hash(self, names):
        blob = json.dumps({n: asdict(getattr(self, n)) for n in names}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def stage_hash(self, stage):
        return self.section_hash(STAGE_DEPS[stage])

    def resolve(self, p):
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    def with_seed(self, seed):
        """Apply a global seed to every seeded section."""
        for name in ("vocab", "train", "verify"):
            getattr(self, name).seed = int(seed)
        return self


def with_overrides(cfg: PipelineConfig, overrides):
    """Copy of ``cfg`` with dotted ``{"section.key": value}`` overrides applied."""
    d = cfg.to_dict()
    for dotted, value in overrides.items():
        section, _, key = dotted.partition(".")
        if section not in d or not key:
            raise ConfigError(f"override {dotted!r} must look like section.key")
        d[section][key] = value
    return from_dict(d, cfg.base_dir)


def from_dict(d, base_dir=None):
    cfg = PipelineConfig(base_dir=Path(base_dir) if base_dir else Path.cwd())
    for name, values in d.items():
        if name not in SECTIONS:
            raise ConfigError(f"unknown config section [{name}]")
        cls = SECTIONS[name]
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown keys in [{name}]: {sorted(unknown)}")
        try:
            setattr(cfg, name, cls(**values))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{name}]: {exc}") from None
    try:
        return cfg.validate()
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path=None):
    """Read a TOML config; ``None`` gives the defaults."""
    if path is None:
        return PipelineConfig().validate()
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    try:
        d = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return from_dict(d, path.parent)
