import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from cliqueloop.exceptions import DimensionMismatchError, MagicMismatchError, MissingArtifactError, TrainingError
from cliqueloop.gnn import CliqueEdgeClassifier, load_model, save_model
from cliqueloop.gnn import layers as L
from cliqueloop.gnn.model import ModelHyper, init_params, model_forward
from cliqueloop.gnn.training import (
    Adam,
    TrainConfig,
    bce_loss,
    evaluate_query_edges,
    gradient_check,
    label_array,
    label_edges,
    loss_and_grad,
    select_candidates,
    train,
    write_training_log,
)
from cliqueloop.keyframes import Pose
from cliqueloop.retrieval import make_clique


def numeric_grad(f, x, eps=1e-6):
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        a = f()
        flat[i] = old - eps
        b = f()
        flat[i] = old
        gf[i] = (a - b) / (2 * eps)
    return g


def rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8))


# --------------------------------------------------------------------------
# layers against naive references


def naive_gat(X, mask, W, a_src, a_dst, slope):
    heads = W.shape[0]
    out = np.zeros((X.shape[0], W.shape[1]))
    for h in range(heads):
        H = X @ W[h].T
        for m in range(X.shape[0]):
            nbrs = [n for n in range(X.shape[0]) if mask[m, n]]
            e = []
            for n in nbrs:
                z = a_src[h] @ H[m] + a_dst[h] @ H[n]
                e.append(z if z > 0 else slope * z)
            e = np.exp(np.array(e) - max(e))
            alpha = e / e.sum()
            out[m] += sum(a * H[n] for a, n in zip(alpha, nbrs)) / heads
    return np.where(out > 0, out, np.exp(out) - 1)


def test_gat_forward_matches_naive(rng):
    X = rng.normal(size=(5, 4))
    W = rng.normal(size=(2, 3, 4))
    a_s, a_d = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
    mask = L.adjacency(5, [(0, 1), (0, 2), (1, 3), (2, 4)])
    out, _ = L.gat_forward(X, mask, W, a_s, a_d, 0.2)
    np.testing.assert_allclose(out, naive_gat(X, mask, W, a_s, a_d, 0.2), atol=1e-12)


def test_adjacency_is_symmetric_with_self_loops():
    m = L.adjacency(4, [(0, 3), (1, 2)])
    np.testing.assert_array_equal(m, m.T)
    assert m.diagonal().all() and m.sum() == 8
    assert not L.adjacency(3, [], self_loops=False).any()


def test_netvlad_soft_assignment_rows_sum_to_one(rng):
    A = L.netvlad_soft_assignment(rng.normal(size=(7, 3)), rng.normal(size=(4, 3)), rng.normal(size=4))
    np.testing.assert_allclose(A.sum(axis=1), 1.0)


def test_netvlad_empty_input():
    g, cache = L.netvlad_forward(np.zeros((0, 3)), np.ones((2, 3)), np.zeros(2), np.ones((2, 3)))
    assert cache is None and g.shape == (6,) and not g.any()
    assert L.netvlad_backward(None, g) == {}


def test_layer_gradients(rng):
    # scalar objective sum(U * out) with a fixed random U for each layer
    F = rng.normal(size=(6, 3))
    w, b, c = rng.normal(size=(4, 3)), rng.normal(size=4), rng.normal(size=(4, 3))
    U = rng.normal(size=12)
    _, cache = L.netvlad_forward(F, w, b, c)
    g = L.netvlad_backward(cache, U)
    for name, arr in (("weight", w), ("bias", b), ("centers", c)):
        num = numeric_grad(lambda: float(U @ L.netvlad_forward(F, w, b, c)[0]), arr)
        assert rel_err(g[name], num) < 1e-5, name

    X = rng.normal(size=(5, 4))
    W = rng.normal(size=(2, 3, 4))
    a_s, a_d = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
    mask = L.adjacency(5, [(i, j) for i in range(5) for j in range(i + 1, 5)])
    V = rng.normal(size=(5, 3))
    _, cache = L.gat_forward(X, mask, W, a_s, a_d)
    dX, g = L.gat_backward(cache, V)

    def f():
        return float(np.sum(V * L.gat_forward(X, mask, W, a_s, a_d)[0]))

    for name, arr in (("weight", W), ("att_src", a_s), ("att_dst", a_d)):
        assert rel_err(g[name], numeric_grad(f, arr)) < 1e-5, name
    assert rel_err(dX, numeric_grad(f, X)) < 1e-5

    edges = np.array([(0, 1), (0, 2), (1, 2), (3, 4)])
    w1, b1, w2, b2 = rng.normal(size=(6, 8)), rng.normal(size=6), rng.normal(size=6), rng.normal(size=1)
    u = rng.normal(size=4)
    _, cache = L.edge_mlp_forward(X, edges, w1, b1, w2, b2)
    dX, g = L.edge_mlp_backward(cache, u)

    def h():
        return float(u @ L.edge_mlp_forward(X, edges, w1, b1, w2, b2)[0])

    for name, arr in (("w1", w1), ("b1", b1), ("w2", w2), ("b2", b2)):
        assert rel_err(g[name], numeric_grad(h, arr)) < 1e-5, name
    assert rel_err(dX, numeric_grad(h, X)) < 1e-5


def test_edge_mlp_is_symmetric(rng):
    X = rng.normal(size=(3, 4))
    args = rng.normal(size=(5, 8)), rng.normal(size=5), rng.normal(size=5), rng.normal(size=1)
    a, _ = L.edge_mlp_forward(X, np.array([[0, 1], [1, 2]]), *args)
    b, _ = L.edge_mlp_forward(X, np.array([[1, 0], [2, 1]]), *args)
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_dropout_scaling(rng):
    X = np.ones((2000, 10))
    Y, keep = L.dropout_forward(X, 0.2, rng)
    assert abs(Y.mean() - 1.0) < 0.02
    assert set(np.unique(Y)) <= {0.0, 1.25}
    np.testing.assert_array_equal(L.dropout_backward(keep, X), Y)
    Z, k = L.dropout_forward(X, 0.2, None)
    assert Z is X and k is None


def test_sigmoid_stable():
    s = L.sigmoid(np.array([-800.0, 0.0, 800.0]))
    np.testing.assert_allclose(s, [0.0, 0.5, 1.0])


# --------------------------------------------------------------------------
# full model


def small_problem(seed, n_nodes=5, dim=8, residual=True):
    rng = np.random.default_rng(seed)
    hp = ModelHyper(descriptor_dim=dim, n_clusters=4, node_dim=16, n_layers=2, heads=2, mlp_hidden=16,
                    residual=residual)
    p = init_params(hp, seed=seed, dtype=np.float64, gat_gain=1.0)
    for k in p.tensors:
        if k.endswith(("bias", "b1", "b2")):
            p.tensors[k] = rng.normal(0, 0.1, p.tensors[k].shape)
    keys = [("s", i) for i in range(n_nodes)]
    desc = {k: rng.normal(size=(int(rng.integers(5, 15)), dim)) for k in keys}
    c = make_clique(keys[0], [(k, 0.5) for k in keys[1:]], desc)
    y = rng.integers(0, 2, c.n_edges).astype(float)
    return p, c, y


@pytest.mark.parametrize("seed", [2, 3, 7])
def test_model_gradient_check(seed):
    p, c, y = small_problem(seed)
    worst, per = gradient_check(p, c, y, samples_per_tensor=8, report=True)
    assert set(per) == set(p.tensors)
    assert worst < 1e-4, max(per, key=per.get)


def test_model_gradient_check_without_skip():
    # without the skip, attention gradients on a complete graph are ~1e-9, so use a larger step
    p, c, y = small_problem(2, residual=False)
    assert gradient_check(p, c, y, epsilon=1e-4, samples_per_tensor=4) < 1e-3


def test_gradient_check_subset_and_empty():
    p, c, y = small_problem(3)
    assert gradient_check(p, c, y, tensors=[]) == 0.0
    assert gradient_check(p, c, y, tensors=["edge.w2"]) < 1e-6


def test_scores_are_probabilities_and_permutation_equivariant():
    p, c, _ = small_problem(4, n_nodes=6)
    s = model_forward(c, p)
    assert s.shape == (c.n_edges,) and np.all((s > 0) & (s < 1))
    perm = [0, 3, 1, 5, 2, 4]
    cp = c.permuted(perm)
    sp = model_forward(cp, p)
    a = {frozenset(k): v for k, v in zip(c.edge_keys(), s)}
    b = {frozenset(k): v for k, v in zip(cp.edge_keys(), sp)}
    for k in a:
        assert a[k] == pytest.approx(b[k], abs=1e-12)


def test_zero_layers_is_pairwise():
    # with L=0 an edge score depends on its two endpoints only
    p, c, _ = small_problem(5)
    p.hyper.n_layers = 0
    s = model_forward(c, p)
    sub = make_clique(c.nodes[0], [(c.nodes[1], 0.5)], dict(zip(c.nodes, c.descriptors)))
    assert model_forward(sub, p)[0] == pytest.approx(s[0], abs=1e-12)


def test_init_from_centroids_sets_hard_assignment(rng):
    C = rng.normal(size=(4, 8))
    hp = ModelHyper(descriptor_dim=8, n_clusters=4, node_dim=16, n_layers=1)
    p = init_params(hp, centroids=C, assignment_scale=5.0, dtype=np.float64)
    np.testing.assert_allclose(p["netvlad.centers"], C)
    np.testing.assert_allclose(p["netvlad.weight"], 10.0 * C)
    with pytest.raises(ValueError):
        init_params(hp, centroids=C[:3])


def test_hyper_validation():
    with pytest.raises(ValueError):
        ModelHyper(4, n_layers=-1)
    with pytest.raises(ValueError):
        ModelHyper(4, dropout=1.0)


def test_params_checksum_and_copy():
    p, _, _ = small_problem(1)
    q = p.copy()
    assert q.checksum() == p.checksum()
    q.tensors["edge.b2"] += 1
    assert q.checksum() != p.checksum()
    assert p.n_parameters() == sum(v.size for v in p.tensors.values())
    assert len(p.gat_layers) == 2 and p.gat_layers[0].attention.shape == (2, 32)


# --------------------------------------------------------------------------
# loss, optimiser, training


def test_bce_against_formula():
    s, y = np.array([0.9, 0.2, 1.0]), np.array([1.0, 0.0, 0.0])
    ref = -(np.log(0.9) + np.log(0.8) + np.log(1e-7)) / 3
    assert bce_loss(s, y) == pytest.approx(ref, rel=1e-6)
    with pytest.raises(DimensionMismatchError):
        bce_loss([0.5], [1.0, 0.0])


def test_loss_gradient_unclamped_at_saturation():
    p, c, y = small_problem(6)
    p.tensors["edge.b2"][:] = 50.0  # every probability saturates at 1
    _, g = loss_and_grad([(c, np.zeros_like(y))], p)
    # gradient of the unclamped loss is (s - y) / N = 1 / N per edge
    assert g["edge.b2"][0] == pytest.approx(1.0, rel=1e-9)


def test_adam_first_step():
    p, c, y = small_problem(7)
    _, g = loss_and_grad([(c, y)], p)
    before = p.tensors["edge.w2"].copy()
    Adam(p, lr=1e-3).step(p, g)
    # [DERIVED] bias correction cancels on the first step: lr * g / (|g| + eps)
    gw = g["edge.w2"]
    np.testing.assert_allclose(before - p.tensors["edge.w2"], 1e-3 * gw / (np.abs(gw) + 1e-8), atol=1e-12)


def toy_cliques(n=8, seed=0):
    """Cliques whose loop edges are pairs sharing a descriptor pattern."""
    rng = np.random.default_rng(seed)
    protos = rng.normal(size=(4, 6))
    poses, desc = {}, {}
    for i in range(n * 4):
        place = i % 4
        key = ("s", i)
        poses[key] = Pose([10.0 * place, 0.0, 0.0], [1, 0, 0, 0])
        desc[key] = protos[place] + 0.1 * rng.normal(size=(10, 6))
    cliques, labels = [], []
    for q in range(n):
        key = ("s", q)
        nbrs = [(("s", j), 0.5) for j in range(n, n + 4)]
        c = make_clique(key, nbrs, desc)
        cliques.append(c)
        labels.append(label_array(label_edges(c, poses)))
    return cliques, labels, poses


def test_label_edges():
    cliques, labels, poses = toy_cliques()
    c, y = cliques[0], labels[0]
    for (a, b), lab in zip(c.edge_keys(), y):
        assert lab == (a[1] % 4 == b[1] % 4)
    with pytest.raises(KeyError):
        label_edges(c, {})


def test_training_reduces_loss_and_is_deterministic():
    cliques, labels, _ = toy_cliques()
    hp = ModelHyper(descriptor_dim=6, n_clusters=4, node_dim=8, n_layers=1, mlp_hidden=8)
    cfg = TrainConfig(lr=1e-2, epochs=4, patience=10)
    a, rows = train(cliques, labels, init_params(hp, seed=1), cfg, cliques, labels)
    b, _ = train(cliques, labels, init_params(hp, seed=1), cfg, cliques, labels)
    assert a.checksum() == b.checksum()
    assert rows[-1].loss < rows[0].loss
    ap, mr = evaluate_query_edges(cliques, labels, a)
    assert 0 <= ap <= 1 and 0 <= mr <= 1


def test_training_requires_positives():
    cliques, labels, _ = toy_cliques()
    hp = ModelHyper(descriptor_dim=6, n_clusters=4, node_dim=8, n_layers=1, mlp_hidden=8)
    with pytest.raises(TrainingError):
        train(cliques, [np.zeros_like(y) for y in labels], init_params(hp))
    with pytest.raises(DimensionMismatchError):
        train(cliques, labels[:-1], init_params(hp))


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(early_stopping="loss")
    with pytest.raises(ValueError):
        TrainConfig(lr=0)


def test_training_log(tmp_path):
    from cliqueloop.gnn.training import LogRow

    write_training_log([LogRow(1, 10, 0.5, 0.9, 0.4)], tmp_path / "log.csv")
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines == ["epoch,step,loss,val_ap,val_mr", "1,10,0.5,0.9,0.4"]


def test_select_candidates():
    a, b, c = ("s", 1), ("s", 2), ("s", 3)
    scored = [((a, b), 0.9), ((b, a), 0.95), ((a, c), 0.2), ((b, c), 0.5)]
    assert select_candidates(scored, "top_fraction", 0.5) == [((a, b), 0.95), ((b, c), 0.5)]
    assert select_candidates(scored, "threshold", 0.5) == [((a, b), 0.95)]
    with pytest.raises(ValueError):
        select_candidates(scored, "top_fraction", 0.0)
    with pytest.raises(ValueError):
        select_candidates([], "threshold", 0.5)
    with pytest.raises(ValueError):
        select_candidates(scored, "random", 0.5)


# --------------------------------------------------------------------------
# persistence and estimator


def test_model_roundtrip(tmp_path):
    p, c, _ = small_problem(8)
    p32 = p.astype(np.float32)
    save_model(p32, tmp_path / "m.lgnn", extra={"note": "x"})
    q, extra = load_model(tmp_path / "m.lgnn", with_extra=True)
    assert q.checksum() == p32.checksum() and extra == {"note": "x"}
    assert q.hyper == p.hyper
    np.testing.assert_allclose(model_forward(c, q), model_forward(c, p32))


def test_model_file_errors(tmp_path):
    p, _, _ = small_problem(8)
    path = save_model(p, tmp_path / "m.lgnn")
    raw = path.read_bytes()
    with pytest.raises(MissingArtifactError):
        load_model(tmp_path / "none.lgnn")
    (tmp_path / "a").write_bytes(b"ABCD" + raw[4:])
    with pytest.raises(MagicMismatchError):
        load_model(tmp_path / "a")
    (tmp_path / "b").write_bytes(raw[:-3])
    with pytest.raises(ValueError):
        load_model(tmp_path / "b")
    (tmp_path / "c").write_bytes(raw + b"\0")
    with pytest.raises(ValueError):
        load_model(tmp_path / "c")
    (tmp_path / "d").write_bytes(raw[:4] + b"\x09" + raw[5:])
    with pytest.raises(ValueError):
        load_model(tmp_path / "d")


def test_estimator_api():
    cliques, labels, _ = toy_cliques()
    clf = CliqueEdgeClassifier(n_layers=1, n_clusters=4, node_dim=8, mlp_hidden=8, epochs=2, lr=1e-2)
    assert clone(clf).get_params() == clf.get_params()
    with pytest.raises(NotFittedError):
        clf.predict_proba(cliques)
    clf.fit(cliques, labels, cliques, labels)
    probs = clf.predict_proba(cliques)
    assert len(probs) == len(cliques) and probs[0].shape == (cliques[0].n_edges,)
    preds = clf.predict(cliques)
    assert set(np.unique(np.concatenate(preds))) <= {0, 1}
    q = clf.score_query_edges(cliques[:1])[0]
    assert len(q) == cliques[0].n_nodes - 1
    assert len(clf.log_) >= 1
    with pytest.raises(DimensionMismatchError):
        clf.fit(cliques, labels[:2])
