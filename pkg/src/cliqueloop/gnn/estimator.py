"""Estimator wrapper around the clique edge scorer."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from ..exceptions import DimensionMismatchError, EmptyInputError
from .model import ModelHyper, init_params, model_forward
from .training import TrainConfig, predict_query_edges, train


class CliqueEdgeClassifier(ClassifierMixin, BaseEstimator):
    """Fit on labelled cliques; predict loop probabilities for their edges.

    ``X`` is a list of :class:`~cliqueloop.retrieval.CliqueGraph` with
    descriptor matrices attached and ``y`` the matching per-edge label
    arrays. ``n_layers=0`` gives the pairwise baseline.

    Examples
    --------
    >>> clf = CliqueEdgeClassifier(n_layers=2, epochs=1)      # doctest: +SKIP
    >>> clf.fit(cliques, labels).predict_proba(cliques)[0]    # doctest: +SKIP
    """

    def __init__(self, n_layers=6, heads=1, n_clusters=64, node_dim=256, mlp_hidden=256, dropout=0.2,
                 residual=True, lr=1e-4, batch_size=2, epochs=10, early_stopping="ap", patience=3,
                 supervise="all", centroids=None, random_state=0):
        self.n_layers = n_layers
        self.heads = heads
        self.n_clusters = n_clusters
        self.node_dim = node_dim
        self.mlp_hidden = mlp_hidden
        self.dropout = dropout
        self.residual = residual
        self.lr = lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.early_stopping = early_stopping
        self.patience = patience
        self.supervise = supervise
        self.centroids = centroids
        self.random_state = random_state

    def _check_X(self, X):
        if len(X) == 0:
            raise EmptyInputError("no cliques given")
        for c in X:
            if c.descriptors is None:
                raise ValueError("every clique needs descriptor matrices")
        return X

    def fit(self, X, y, X_val=None, y_val=None):
        X = self._check_X(X)
        if len(X) != len(y):
            raise DimensionMismatchError(f"{len(X)} cliques but {len(y)} label arrays")
        dim = np.asarray(X[0].descriptors[0]).shape[1]
        hyper = ModelHyper(dim, self.n_clusters, self.node_dim, self.n_layers, self.heads, self.dropout,
                           mlp_hidden=self.mlp_hidden, residual=self.residual)
        params = init_params(hyper, self.random_state, centroids=self.centroids)
        cfg = TrainConfig(self.lr, self.batch_size, self.epochs, self.dropout, self.random_state,
                          self.early_stopping, self.patience, self.supervise)
        self.params_, self.log_ = train(X, y, params, cfg, X_val, y_val)
        self.classes_ = np.array([0, 1])
        return self

    def predict_proba(self, X):
        """Per-clique arrays of loop probabilities aligned with ``clique.edges``."""
        check_is_fitted(self, "params_")
        return [model_forward(c, self.params_) for c in self._check_X(X)]

    def predict(self, X, threshold=0.5):
        return [(p > threshold).astype(int) for p in self.predict_proba(X)]

    def score_query_edges(self, X):
        check_is_fitted(self, "params_")
        return [predict_query_edges(c, self.params_) for c in self._check_X(X)]
