import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.base import clone

from cliqueloop.exceptions import DimensionMismatchError, MagicMismatchError, MissingArtifactError, NonFiniteError
from cliqueloop.gnn.layers import netvlad_forward
from cliqueloop.vlad import (
    Metric,
    VladEncoder,
    Vocabulary,
    assign,
    compute_vlad,
    fit_vocabulary,
    kmeans,
    load_vocabulary,
    save_vocabulary,
    vlad_similarity,
)


def unit(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def naive_vlad(F, C, cosine=True):
    """Loop-by-loop reference: hard assign, sum residuals, intra then global L2."""
    blocks = np.zeros_like(C)
    for f in F:
        if cosine:
            k = max(range(len(C)), key=lambda j: (f @ C[j] / np.linalg.norm(C[j]), -j))
        else:
            k = min(range(len(C)), key=lambda j: (np.sum((f - C[j]) ** 2), j))
        blocks[k] += f - C[k]
    for k in range(len(C)):
        n = np.linalg.norm(blocks[k])
        if n > 0:
            blocks[k] /= n
    v = blocks.ravel()
    return v / np.linalg.norm(v)


def test_hand_computed_2d_example():
    C = np.array([[1.0, 0.0], [0.0, 1.0]])
    F = np.array([[0.8, 0.6], [0.6, 0.8], [0.6, -0.8]])
    v = compute_vlad(F, Vocabulary(C)).values
    # [DERIVED] residual sums (-0.6, -0.2) and (0.6, -0.2), equal norms
    expected = np.array([-3.0, -1.0, 3.0, -1.0]) / np.sqrt(20.0)
    np.testing.assert_allclose(v, expected, atol=1e-12)


@pytest.mark.parametrize("metric", ["cosine", "euclidean"])
def test_matches_naive_reference(rng, metric):
    C = unit(rng.normal(size=(6, 5)))
    F = unit(rng.normal(size=(40, 5))) * rng.uniform(0.5, 2.0, (40, 1))
    v = compute_vlad(F, Vocabulary(C, metric)).values
    np.testing.assert_allclose(v, naive_vlad(F, C, metric == "cosine"), atol=1e-12)


@given(st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    vocab = Vocabulary(unit(rng.normal(size=(8, 4))))
    F = rng.normal(size=(30, 4))
    a = compute_vlad(F, vocab).values
    b = compute_vlad(F[rng.permutation(30)], vocab).values
    np.testing.assert_array_equal(a, b)
    assert np.linalg.norm(a) == pytest.approx(1.0, abs=1e-12)


def test_netvlad_hard_assignment_limit(rng):
    C = unit(rng.normal(size=(8, 6)))
    F = unit(rng.normal(size=(50, 6)))
    s = 1e4
    g, _ = netvlad_forward(F, 2 * s * C, -s * np.sum(C * C, axis=1), C)
    np.testing.assert_allclose(g, compute_vlad(F, Vocabulary(C)).values, atol=1e-5)


def test_empty_and_invalid_input():
    vocab = Vocabulary(np.eye(3))
    d = compute_vlad(np.zeros((0, 3)), vocab)
    assert d.empty and np.all(d.values == 0) and len(d) == 9
    with pytest.raises(DimensionMismatchError):
        compute_vlad(np.zeros((2, 4)), vocab)
    with pytest.raises(NonFiniteError):
        compute_vlad(np.array([[np.nan, 0, 0]]), vocab)
    # a descriptor equal to its centroid leaves a zero residual everywhere
    z = compute_vlad(np.array([[1.0, 0.0, 0.0]]), vocab)
    assert z.empty


def test_assign_ties_go_to_lowest_index():
    vocab = Vocabulary(np.array([[1.0, 0.0], [0.0, 1.0]]))
    assert assign(np.array([1.0, 1.0]), vocab) == 0
    ev = Vocabulary(np.array([[1.0, 0.0], [0.0, 1.0]]), Metric.EUCLIDEAN)
    assert assign(np.array([0.5, 0.5]), ev) == 0
    with pytest.raises(DimensionMismatchError):
        assign(np.zeros(3), vocab)


def test_similarity():
    vocab = Vocabulary(np.eye(3))
    a = compute_vlad(np.array([[0.5, 0.5, 0.0]]), vocab)
    assert vlad_similarity(a, a) == pytest.approx(1.0)
    empty = compute_vlad(np.zeros((0, 3)), vocab)
    assert vlad_similarity(a, empty) == -1.0


def lloyd_reference(x, centers, iters):
    for _ in range(iters):
        d = ((x[:, None, :] - centers[None]) ** 2).sum(-1)
        lab = d.argmin(1)
        centers = np.array([x[lab == k].mean(0) if np.any(lab == k) else centers[k] for k in range(len(centers))])
    return centers


def test_kmeans_matches_plain_lloyd(rng):
    # well separated blobs: no empty clusters and no ties
    means = rng.normal(size=(4, 3)) * 10
    x = np.vstack([m + rng.normal(size=(50, 3)) for m in means])
    centers, hist = kmeans(x, 4, seed=3, max_iter=50, return_history=True)
    from cliqueloop.vlad import _kmeanspp

    init = _kmeanspp(x, 4, np.random.default_rng(3))
    ref = lloyd_reference(x, init, 50)
    np.testing.assert_allclose(np.sort(centers, axis=0), np.sort(ref, axis=0), atol=1e-8)
    assert all(b <= a + 1e-9 for a, b in zip(hist, hist[1:]))


def test_spherical_kmeans_unit_centroids(rng):
    x = unit(rng.normal(size=(300, 5)))
    c = kmeans(x, 7, seed=0, spherical=True)
    np.testing.assert_allclose(np.linalg.norm(c, axis=1), 1.0, atol=1e-12)


def test_fit_vocabulary_is_seeded(rng):
    mats = [rng.normal(size=(40, 4)) for _ in range(5)]
    a = fit_vocabulary(mats, 6, seed=1)
    b = fit_vocabulary(mats, 6, seed=1)
    np.testing.assert_array_equal(a.centroids, b.centroids)
    assert a.n_clusters == 6 and a.dim == 4
    with pytest.raises(ValueError):
        fit_vocabulary([rng.normal(size=(3, 4))], 6)


def test_max_per_image_subsampling(rng):
    mats = [rng.normal(size=(100, 3)) for _ in range(2)]
    v = fit_vocabulary(mats, 4, max_per_image=10, max_iter=1)
    assert v.n_clusters == 4


def test_vocabulary_roundtrip(tmp_path, rng):
    v = Vocabulary(rng.normal(size=(5, 3)), "euclidean", seed=9)
    save_vocabulary(v, tmp_path / "v.lgvc")
    w = load_vocabulary(tmp_path / "v.lgvc")
    np.testing.assert_array_equal(w.centroids, v.centroids.astype(np.float32))
    assert w.metric is Metric.EUCLIDEAN and w.seed == 9
    with pytest.raises(MissingArtifactError):
        load_vocabulary(tmp_path / "none")
    (tmp_path / "bad").write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(MagicMismatchError):
        load_vocabulary(tmp_path / "bad")
    raw = (tmp_path / "v.lgvc").read_bytes()
    (tmp_path / "short").write_bytes(raw[:-4])
    with pytest.raises(DimensionMismatchError):
        load_vocabulary(tmp_path / "short")


def test_encoder_estimator_api(rng):
    X = [rng.normal(size=(30, 4)) for _ in range(6)]
    enc = VladEncoder(n_clusters=5, random_state=2)
    assert enc.get_params()["n_clusters"] == 5
    out = enc.fit(X).transform(X)
    assert out.shape == (6, 20)
    np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0)
    twin = clone(enc).fit(X)
    np.testing.assert_array_equal(twin.transform(X), out)
    from sklearn.exceptions import NotFittedError

    with pytest.raises(NotFittedError):
        VladEncoder().transform(X)
