"""Dense global-descriptor search and maximum-similarity clique construction."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator

from .exceptions import (
    DimensionMismatchError,
    EmptyInputError,
    MagicMismatchError,
    MissingArtifactError,
    UnknownKeyframeError,
)

INDEX_MAGIC = b"LGIX"
DEFAULT_K_PCT = 1.0
DEFAULT_EXCLUSION_WINDOW = 50


@dataclass
class DescriptorIndex:
    """Row-aligned matrix of global descriptors.

    Rows are keyed by ``(sequence name, keyframe id)``. ``sequences`` lists
    the sequence names; ``seq_ordinals[i]`` indexes into it.
    """

    matrix: np.ndarray
    ids: np.ndarray
    seq_ordinals: np.ndarray
    sequences: list = field(default_factory=list)

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float32)
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.seq_ordinals = np.asarray(self.seq_ordinals, dtype=np.int64)
        if not (self.matrix.shape[0] == self.ids.shape[0] == self.seq_ordinals.shape[0]):
            raise DimensionMismatchError("index rows, ids and sequence ordinals differ in length")
        self._rows = {
            (self.sequences[s], int(i)): r for r, (s, i) in enumerate(zip(self.seq_ordinals, self.ids))
        }
        m = self.matrix.astype(np.float64)
        self._norms = np.linalg.norm(m, axis=1)
        self._unit = np.divide(m, self._norms[:, None], out=np.zeros_like(m), where=self._norms[:, None] > 0)

    def __len__(self):
        return self.matrix.shape[0]

    @property
    def dim(self):
        return self.matrix.shape[1]

    def keys(self):
        return [(self.sequences[s], int(i)) for s, i in zip(self.seq_ordinals, self.ids)]

    def row_of(self, key):
        key = self._normalize_key(key)
        try:
            return self._rows[key]
        except KeyError:
            raise UnknownKeyframeError(f"keyframe {key} not in index") from None

    def _normalize_key(self, key):
        if isinstance(key, (int, np.integer)):
            if len(self.sequences) != 1:
                raise UnknownKeyframeError("bare integer ids are ambiguous in a multi-sequence index")
            return (self.sequences[0], int(key))
        return (key[0], int(key[1]))

    def similarities(self, row):
        """Cosine similarity of every row against ``row``; zero rows score -1."""
        q = self._unit[row]
        sims = self._unit @ q
        if self._norms[row] == 0:
            sims[:] = -1.0
        sims[self._norms == 0] = -1.0
        return sims

    def __eq__(self, other):
        return (
            isinstance(other, DescriptorIndex)
            and self.sequences == other.sequences
            and np.array_equal(self.matrix, other.matrix)
            and np.array_equal(self.ids, other.ids)
            and np.array_equal(self.seq_ordinals, other.seq_ordinals)
        )


def build_index(datasets, vlads=None) -> DescriptorIndex:
    """Index the VLAD descriptors of one or more sequences.

    ``datasets`` is a :class:`~cliqueloop.keyframes.SequenceDataset` or a list
    of them. Descriptors are read from ``keyframe.vlad`` unless ``vlads`` maps
    ``(sequence, id)`` to a descriptor.
    """
    if not isinstance(datasets, (list, tuple)):
        datasets = [datasets]
    sequences, rows, ids, ords = [], [], [], []
    for ds in datasets:
        if ds.name in sequences:
            raise ValueError(f"duplicate sequence name {ds.name!r}")
        sequences.append(ds.name)
        for kf in ds.keyframes:
            v = vlads[kf.key] if vlads is not None else kf.vlad
            if v is None:
                raise ValueError(f"keyframe {kf.key} has no VLAD descriptor")
            rows.append(np.asarray(getattr(v, "values", v), dtype=np.float32))
            ids.append(kf.id)
            ords.append(len(sequences) - 1)
    dims = {r.shape[0] for r in rows}
    if len(dims) > 1:
        raise DimensionMismatchError(f"mixed VLAD dimensionalities {sorted(dims)}")
    matrix = np.vstack(rows) if rows else np.empty((0, 0), dtype=np.float32)
    return DescriptorIndex(matrix, ids, ords, sequences)


def neighbor_count(k_pct, size):
    """Number of neighbours for ``k_pct`` percent of ``size`` rows (floor, at least 1)."""
    if not 0 < k_pct <= 100:
        raise ValueError(f"k_pct must be in (0, 100], got {k_pct}")
    return max(1, math.floor(k_pct / 100.0 * size + 1e-9))


def query_topk(index: DescriptorIndex, query, k_pct=DEFAULT_K_PCT, exclusion_window=DEFAULT_EXCLUSION_WINDOW):
    """Most similar keyframes to ``query``.

    Returns ``[(key, similarity), ...]`` sorted by descending similarity, ties
    by ascending keyframe id then sequence ordinal. The query itself and
    same-sequence keyframes within ``exclusion_window`` ids are skipped.
    """
    if len(index) == 0:
        raise EmptyInputError("cannot query an empty index")
    row = index.row_of(query)
    k = neighbor_count(k_pct, len(index))
    sims = index.similarities(row)
    same_seq = index.seq_ordinals == index.seq_ordinals[row]
    excluded = same_seq & (np.abs(index.ids - index.ids[row]) <= exclusion_window)
    excluded[row] = True
    cand = np.flatnonzero(~excluded)
    order = np.lexsort((index.seq_ordinals[cand], index.ids[cand], -sims[cand]))
    top = cand[order[:k]]
    return [((index.sequences[index.seq_ordinals[r]], int(index.ids[r])), float(sims[r])) for r in top]


@dataclass
class CliqueGraph:
    """Query keyframe plus its retrieved neighbours, fully connected.

    Node 0 is always the query. ``edges`` holds ``(i, j)`` node-index pairs
    with ``i < j`` in lexicographic order, so the ``n - 1`` query edges come
    first.
    """

    query: tuple
    nodes: list
    edges: np.ndarray
    query_edge: np.ndarray
    similarities: np.ndarray
    descriptors: Optional[list] = None

    @property
    def n_nodes(self):
        return len(self.nodes)

    @property
    def n_edges(self):
        return self.edges.shape[0]

    def edge_keys(self):
        return [(self.nodes[i], self.nodes[j]) for i, j in self.edges]

    def permuted(self, perm):
        """Same clique with nodes stored in order ``perm`` (``perm[0]`` must be 0)."""
        perm = list(perm)
        if perm[0] != 0 or sorted(perm) != list(range(self.n_nodes)):
            raise ValueError("perm must be a permutation fixing the query node")
        inv = np.argsort(perm)
        nodes = [self.nodes[p] for p in perm]
        edges = np.sort(inv[self.edges], axis=1)
        descriptors = [self.descriptors[p] for p in perm] if self.descriptors is not None else None
        sims = self.similarities[perm]
        return CliqueGraph(self.query, nodes, edges, self.query_edge.copy(), sims, descriptors)


def complete_edges(n):
    iu, ju = np.triu_indices(n, k=1)
    return np.stack([iu, ju], axis=1).astype(np.int64)


def make_clique(query, neighbors, descriptors=None) -> CliqueGraph:
    """Assemble a clique from a query key and ``[(key, similarity), ...]``."""
    seen = {query}
    nodes, sims = [query], [1.0]
    for key, s in neighbors:
        if key not in seen:
            seen.add(key)
            nodes.append(key)
            sims.append(s)
    edges = complete_edges(len(nodes))
    qflag = edges[:, 0] == 0
    descs = None
    if descriptors is not None:
        descs = [np.asarray(descriptors[k]) for k in nodes]
    return CliqueGraph(query, nodes, edges, qflag, np.asarray(sims), descs)


def build_clique(index, query, k_pct=DEFAULT_K_PCT, exclusion_window=DEFAULT_EXCLUSION_WINDOW,
                 descriptors=None) -> CliqueGraph:
    """Clique over ``query`` and its top-k retrieved keyframes.

    ``descriptors`` optionally maps ``(sequence, id)`` to the keyframe's local
    descriptor matrix; the matrices are attached to the nodes.
    """
    key = index._normalize_key(query)
    return make_clique(key, query_topk(index, key, k_pct, exclusion_window), descriptors)


# --------------------------------------------------------------------------
# persistence

def save_index(index: DescriptorIndex, path, sequences_path=None):
    """Write the binary index. Sequence names go to a sidecar ``.names`` file."""
    path = Path(path)
    m = np.ascontiguousarray(index.matrix, dtype="<f4")
    table = np.empty((len(index), 2), dtype="<u4")
    table[:, 0] = index.seq_ordinals
    table[:, 1] = index.ids
    with open(path, "wb") as fh:
        fh.write(INDEX_MAGIC)
        fh.write(struct.pack("<II", m.shape[0], m.shape[1] if m.ndim == 2 else 0))
        fh.write(table.tobytes())
        fh.write(m.tobytes())
    names = Path(sequences_path) if sequences_path else path.with_suffix(path.suffix + ".names")
    names.write_text("".join(s + "\n" for s in index.sequences))


def load_index(path, sequences_path=None) -> DescriptorIndex:
    path = Path(path)
    if not path.is_file():
        raise MissingArtifactError(f"missing index file {path}")
    raw = path.read_bytes()
    if raw[:4] != INDEX_MAGIC:
        raise MagicMismatchError(f"{path}: expected magic {INDEX_MAGIC!r}")
    rows, dim = struct.unpack("<II", raw[4:12])
    expected = 12 + rows * 8 + rows * dim * 4
    if len(raw) != expected:
        raise DimensionMismatchError(f"{path}: header {rows}x{dim} does not match payload size")
    table = np.frombuffer(raw, dtype="<u4", count=rows * 2, offset=12).reshape(rows, 2)
    m = np.frombuffer(raw, dtype="<f4", offset=12 + rows * 8).reshape(rows, dim)
    names = Path(sequences_path) if sequences_path else path.with_suffix(path.suffix + ".names")
    if names.is_file():
        sequences = names.read_text().splitlines()
    else:
        sequences = [f"seq{i}" for i in range(int(table[:, 0].max()) + 1 if rows else 0)]
    return DescriptorIndex(m.copy(), table[:, 1].astype(np.int64), table[:, 0].astype(np.int64), sequences)


class CliqueRetriever(BaseEstimator):
    """Estimator wrapper: ``fit`` indexes descriptors, ``kneighbors`` / ``cliques`` query them.

    ``X`` is an ``(n, d)`` array of global descriptors and ``keys`` the
    matching ``(sequence, id)`` list.
    """

    def __init__(self, k_pct=DEFAULT_K_PCT, exclusion_window=DEFAULT_EXCLUSION_WINDOW):
        self.k_pct = k_pct
        self.exclusion_window = exclusion_window

    def fit(self, X, keys):
        X = np.asarray(X)
        names = []
        for s, _ in keys:
            if s not in names:
                names.append(s)
        ords = [names.index(s) for s, _ in keys]
        self.index_ = DescriptorIndex(X, [i for _, i in keys], ords, names)
        return self

    def kneighbors(self, queries):
        return [query_topk(self.index_, q, self.k_pct, self.exclusion_window) for q in queries]

    def cliques(self, queries, descriptors=None):
        return [build_clique(self.index_, q, self.k_pct, self.exclusion_window, descriptors) for q in queries]
