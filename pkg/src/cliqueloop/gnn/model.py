"""Clique edge scorer: NetVLAD node encoder, projection, GAT stack, edge MLP."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import layers as L

NODE_DIM = 256
MLP_HIDDEN = 256
GAT_INIT_GAIN = 0.1


@dataclass
class ModelHyper:
    descriptor_dim: int
    n_clusters: int = 64
    node_dim: int = NODE_DIM
    n_layers: int = 6
    heads: int = 1
    dropout: float = 0.2
    leaky_slope: float = 0.2
    mlp_hidden: int = MLP_HIDDEN
    residual: bool = True

    def __post_init__(self):
        if self.n_layers < 0:
            raise ValueError("n_layers must be >= 0")
        if self.n_clusters < 1 or self.heads < 1:
            raise ValueError("n_clusters and heads must be >= 1")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")


@dataclass
class NetVladParams:
    weight: np.ndarray
    bias: np.ndarray
    centers: np.ndarray


@dataclass
class GatLayerParams:
    weight: np.ndarray
    att_src: np.ndarray
    att_dst: np.ndarray
    leaky_slope: float = 0.2

    @property
    def attention(self):
        """The stacked attention vector ``[att_src | att_dst]`` per head."""
        return np.concatenate([self.att_src, self.att_dst], axis=-1)


@dataclass
class ModelParams:
    hyper: ModelHyper
    tensors: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return self.tensors[name]

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    @property
    def netvlad(self):
        t = self.tensors
        return NetVladParams(t["netvlad.weight"], t["netvlad.bias"], t["netvlad.centers"])

    @property
    def gat_layers(self):
        return [
            GatLayerParams(
                self.tensors[f"gat.{i}.weight"], self.tensors[f"gat.{i}.att_src"],
                self.tensors[f"gat.{i}.att_dst"], self.hyper.leaky_slope,
            )
            for i in range(self.hyper.n_layers)
        ]

    def astype(self, dtype):
        return ModelParams(self.hyper, {k: v.astype(dtype) for k, v in self.tensors.items()})

    def copy(self):
        return ModelParams(ModelHyper(**asdict(self.hyper)), {k: v.copy() for k, v in self.tensors.items()})

    def n_parameters(self):
        return int(sum(v.size for v in self.tensors.values()))

    def checksum(self):
        import hashlib

        h = hashlib.sha256()
        for k in sorted(self.tensors):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.tensors[k]).tobytes())
        return h.hexdigest()


def _glorot(rng, shape, fan_in, fan_out, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def init_params(hyper: ModelHyper, seed=0, dtype=np.float32, centroids=None, assignment_scale=None,
                gat_gain=GAT_INIT_GAIN):
    """Glorot-uniform initialisation under ``seed``.

    If ``centroids`` (``(n_clusters, descriptor_dim)``) are given, the NetVLAD
    centres start there and the assignment logits are set so that the soft
    assignment approximates nearest-centroid assignment with sharpness
    ``assignment_scale``.

    GAT weights use a reduced gain so that with skip connections the stack
    starts close to the identity.
    """
    rng = np.random.default_rng(seed)
    C, D, H = hyper.n_clusters, hyper.descriptor_dim, hyper.node_dim
    t = {}
    if centroids is not None:
        c = np.asarray(centroids, dtype=np.float64)
        if c.shape != (C, D):
            raise ValueError(f"centroids shape {c.shape} != ({C}, {D})")
        s = assignment_scale or 10.0
        t["netvlad.weight"] = (2.0 * s * c).astype(dtype)
        t["netvlad.bias"] = (-s * np.sum(c * c, axis=1)).astype(dtype)
        t["netvlad.centers"] = c.astype(dtype)
    else:
        t["netvlad.weight"] = _glorot(rng, (C, D), D, C, dtype)
        t["netvlad.bias"] = np.zeros(C, dtype=dtype)
        t["netvlad.centers"] = _glorot(rng, (C, D), D, C, dtype)
    t["proj.weight"] = _glorot(rng, (H, C * D), C * D, H, dtype)
    t["proj.bias"] = np.zeros(H, dtype=dtype)
    for i in range(hyper.n_layers):
        t[f"gat.{i}.weight"] = (gat_gain * _glorot(rng, (hyper.heads, H, H), H, H, np.float64)).astype(dtype)
        t[f"gat.{i}.att_src"] = _glorot(rng, (hyper.heads, H), 2 * H, 1, dtype)
        t[f"gat.{i}.att_dst"] = _glorot(rng, (hyper.heads, H), 2 * H, 1, dtype)
    t["edge.w1"] = _glorot(rng, (hyper.mlp_hidden, 2 * H), 2 * H, hyper.mlp_hidden, dtype)
    t["edge.b1"] = np.zeros(hyper.mlp_hidden, dtype=dtype)
    t["edge.w2"] = _glorot(rng, (hyper.mlp_hidden,), hyper.mlp_hidden, 1, dtype)
    t["edge.b2"] = np.zeros(1, dtype=dtype)
    return ModelParams(hyper, t)


# --------------------------------------------------------------------------
# forward / backward over one clique

def encode_nodes(descriptors, params: ModelParams):
    """NetVLAD features for every node, stacked ``(n, C*D)``."""
    t = params.tensors
    feats, caches = [], []
    for F in descriptors:
        F = np.asarray(F, dtype=params.dtype)
        g, c = L.netvlad_forward(F, t["netvlad.weight"], t["netvlad.bias"], t["netvlad.centers"])
        feats.append(g)
        caches.append(c)
    return np.stack(feats), caches


def forward(descriptors, edges, params: ModelParams, train_mode=False, rng=None):
    """Edge logits for a clique given per-node descriptor matrices.

    Returns ``(logits, cache)``. Dropout is active only when ``train_mode``
    and an ``rng`` is supplied.
    """
    hp = params.hyper
    t = params.tensors
    n = len(descriptors)
    G, nv_caches = encode_nodes(descriptors, params)
    X, _ = L.linear_forward(G, t["proj.weight"], t["proj.bias"])
    p = hp.dropout if train_mode else 0.0
    drng = rng if train_mode else None
    mask = L.adjacency(n, edges)
    gat_caches, drop_masks = [], []
    for i in range(hp.n_layers):
        Xd, keep = L.dropout_forward(X, p, drng)
        drop_masks.append(keep)
        Y, c = L.gat_forward(Xd, mask, t[f"gat.{i}.weight"], t[f"gat.{i}.att_src"], t[f"gat.{i}.att_dst"],
                             hp.leaky_slope)
        gat_caches.append(c)
        # on a complete graph the plain update is nearly identical for every
        # node; the skip keeps node identity alongside the clique context
        X = X + Y if hp.residual else Y
    X, keep = L.dropout_forward(X, p, drng)
    drop_masks.append(keep)
    logits, mlp_cache = L.edge_mlp_forward(X, edges, t["edge.w1"], t["edge.b1"], t["edge.w2"], t["edge.b2"])
    return logits, (G, nv_caches, gat_caches, drop_masks, mlp_cache)


def backward(cache, dlogits, params: ModelParams):
    """Parameter gradients for ``sum(dlogits * logits)``."""
    G, nv_caches, gat_caches, drop_masks, mlp_cache = cache
    t = params.tensors
    grads = {}
    dX, g = L.edge_mlp_backward(mlp_cache, dlogits)
    grads.update({f"edge.{k}": v for k, v in g.items()})
    dX = L.dropout_backward(drop_masks[-1], dX)
    for i in reversed(range(len(gat_caches))):
        dXd, g = L.gat_backward(gat_caches[i], dX)
        grads.update({f"gat.{i}.{k}": v for k, v in g.items()})
        dXd = L.dropout_backward(drop_masks[i], dXd)
        dX = dX + dXd if params.hyper.residual else dXd
    dG, g = L.linear_backward(G, dX, t["proj.weight"])
    grads["proj.weight"], grads["proj.bias"] = g["weight"], g["bias"]
    nv = {k: np.zeros_like(t[f"netvlad.{k}"]) for k in ("weight", "bias", "centers")}
    for c, dg in zip(nv_caches, dG):
        for k, v in L.netvlad_backward(c, dg).items():
            nv[k] += v
    grads.update({f"netvlad.{k}": v for k, v in nv.items()})
    return grads


def clique_descriptors(clique):
    if clique.descriptors is None:
        raise ValueError("clique has no descriptor matrices attached")
    return clique.descriptors


def model_forward(clique, params: ModelParams, train_mode=False, rng=None):
    """Per-edge loop probabilities in (0, 1), aligned with ``clique.edges``."""
    logits, _ = forward(clique_descriptors(clique), clique.edges, params, train_mode, rng)
    return L.sigmoid(np.asarray(logits, dtype=np.float64))
