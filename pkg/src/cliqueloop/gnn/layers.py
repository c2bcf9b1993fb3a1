"""Forward and hand-derived backward passes for the clique scorer's layers.

Every ``*_forward`` returns ``(output, cache)``; the matching ``*_backward``
takes the cache and the upstream gradient and returns the input gradient
plus a dict of parameter gradients.
"""

from __future__ import annotations

import numpy as np

NORM_EPS = 1e-12


def _l2n_forward(v, axis=-1):
    n = np.linalg.norm(v, axis=axis, keepdims=True)
    n = np.maximum(n, NORM_EPS)
    return v / n, (v / n, n)


def _l2n_backward(cache, dy, axis=-1):
    y, n = cache
    live = n > NORM_EPS
    proj = dy - y * np.sum(y * dy, axis=axis, keepdims=True)
    return np.where(live, proj, dy) / n


def softmax(z, axis=-1, mask=None):
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    zmax = np.max(z, axis=axis, keepdims=True)
    e = np.exp(z - zmax)
    if mask is not None:
        e = np.where(mask, e, 0.0)
    return e / np.sum(e, axis=axis, keepdims=True)


def elu(x):
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0)))


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# --------------------------------------------------------------------------
# NetVLAD

def netvlad_forward(F, weight, bias, centers):
    """Soft-assignment VLAD of one keyframe's descriptors.

    ``F`` is ``(N_K, D)``; ``weight``/``centers`` are ``(C, D)``, ``bias``
    ``(C,)``. Returns a length ``C*D`` vector, intra-normalised per cluster
    and then globally L2-normalised. An empty ``F`` gives a zero vector and
    ``cache=None``.
    """
    C, D = centers.shape
    if F.shape[0] == 0:
        return np.zeros(C * D, dtype=centers.dtype), None
    A = softmax(F @ weight.T + bias, axis=1)  # (N_K, C)
    mass = A.sum(axis=0)
    V = A.T @ F - mass[:, None] * centers
    U, c_intra = _l2n_forward(V, axis=1)
    g, c_glob = _l2n_forward(U.ravel(), axis=0)
    return g, (F, A, mass, centers, c_intra, c_glob)


def netvlad_soft_assignment(F, weight, bias):
    return softmax(F @ weight.T + bias, axis=1)


def netvlad_backward(cache, dg):
    if cache is None:
        return {}
    F, A, mass, centers, c_intra, c_glob = cache
    C, D = centers.shape
    dU = _l2n_backward(c_glob, dg, axis=0).reshape(C, D)
    dV = _l2n_backward(c_intra, dU, axis=1)
    d_centers = -mass[:, None] * dV
    dA = F @ dV.T - np.sum(dV * centers, axis=1)[None, :]
    dZ = A * (dA - np.sum(dA * A, axis=1, keepdims=True))
    return {"weight": dZ.T @ F, "bias": dZ.sum(axis=0), "centers": d_centers}


# --------------------------------------------------------------------------
# linear

def linear_forward(X, weight, bias):
    return X @ weight.T + bias, X


def linear_backward(X, dY, weight):
    return dY @ weight, {"weight": dY.T @ X, "bias": dY.sum(axis=0)}


# --------------------------------------------------------------------------
# graph attention

def adjacency(n, edges, self_loops=True):
    """Dense boolean neighbourhood mask from an undirected edge list."""
    mask = np.zeros((n, n), dtype=bool)
    if len(edges):
        e = np.asarray(edges)
        mask[e[:, 0], e[:, 1]] = True
        mask[e[:, 1], e[:, 0]] = True
    if self_loops:
        mask[np.arange(n), np.arange(n)] = True
    return mask


def gat_forward(X, mask, weight, att_src, att_dst, slope=0.2):
    """One graph-attention layer.

    ``weight`` is ``(heads, d_out, d_in)`` and the attention halves are
    ``(heads, d_out)``. For receiving node ``m`` the logit towards neighbour
    ``n`` is ``LeakyReLU(att_src . W x_m + att_dst . W x_n)``; head outputs
    are averaged before the ELU.
    """
    H = X @ weight.transpose(0, 2, 1)  # (heads, n, d_out)
    s_src = (H @ att_src[:, :, None])[..., 0]
    s_dst = (H @ att_dst[:, :, None])[..., 0]
    E = s_src[:, :, None] + s_dst[:, None, :]
    Lk = np.where(E > 0, E, slope * E)
    alpha = softmax(Lk, axis=-1, mask=mask[None])
    O = (alpha @ H).sum(axis=0) / weight.shape[0]
    out = elu(O)
    return out, (X, H, E, alpha, O, out, weight, att_src, att_dst, slope)


def gat_backward(cache, dout):
    X, H, E, alpha, O, out, weight, att_src, att_dst, slope = cache
    heads = weight.shape[0]
    dO = dout * np.where(O > 0, 1.0, out + 1.0)
    dOh = np.broadcast_to(dO / heads, (heads,) + dO.shape)
    dalpha = dOh @ H.transpose(0, 2, 1)
    dH = alpha.transpose(0, 2, 1) @ dOh
    dLk = alpha * (dalpha - np.sum(dalpha * alpha, axis=-1, keepdims=True))
    dE = dLk * np.where(E > 0, 1.0, slope)
    ds_src = dE.sum(axis=2)
    ds_dst = dE.sum(axis=1)
    dH = dH + ds_src[:, :, None] * att_src[:, None, :] + ds_dst[:, :, None] * att_dst[:, None, :]
    grads = {
        "att_src": (ds_src[:, None, :] @ H)[:, 0],
        "att_dst": (ds_dst[:, None, :] @ H)[:, 0],
        "weight": dH.transpose(0, 2, 1) @ X,
    }
    dX = (dH @ weight).sum(axis=0)
    return dX, grads


# --------------------------------------------------------------------------
# edge scoring MLP

def edge_mlp_forward(X, edges, w1, b1, w2, b2):
    """Symmetrised edge logits: mean of the MLP over both concatenation orders."""
    e = np.asarray(edges)
    n_e = e.shape[0]
    Z = np.concatenate(
        [np.concatenate([X[e[:, 0]], X[e[:, 1]]], axis=1),
         np.concatenate([X[e[:, 1]], X[e[:, 0]]], axis=1)],
        axis=0,
    )
    pre = Z @ w1.T + b1
    h = np.maximum(pre, 0.0)
    o = h @ w2 + b2[0]
    logits = 0.5 * (o[:n_e] + o[n_e:])
    return logits, (X.shape, e, Z, pre, h, w1, w2)


def edge_mlp_backward(cache, dlogits):
    xshape, e, Z, pre, h, w1, w2 = cache
    n_e = e.shape[0]
    width = xshape[1]
    do = 0.5 * np.concatenate([dlogits, dlogits])
    grads = {"w2": h.T @ do, "b2": np.array([do.sum()], dtype=do.dtype)}
    dpre = (do[:, None] * w2[None, :]) * (pre > 0)
    grads["w1"] = dpre.T @ Z
    grads["b1"] = dpre.sum(axis=0)
    dZ = dpre @ w1
    dX = np.zeros(xshape, dtype=dZ.dtype)
    np.add.at(dX, e[:, 0], dZ[:n_e, :width] + dZ[n_e:, width:])
    np.add.at(dX, e[:, 1], dZ[:n_e, width:] + dZ[n_e:, :width])
    return dX, grads


# --------------------------------------------------------------------------
# dropout

def dropout_forward(X, p, rng):
    if p <= 0 or rng is None:
        return X, None
    keep = (rng.random(X.shape) >= p).astype(X.dtype) / (1.0 - p)
    return X * keep, keep


def dropout_backward(keep, dY):
    return dY if keep is None else dY * keep
