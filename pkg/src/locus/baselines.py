"""Comparison systems: trainable per-model embeddings and nonparametric routers.

The learned-embedding baseline trains one free vector per model jointly
with a predictor of the form MLP(e_m * W phi(x)) (elementwise product
after a query down-projection). Regeneration retrains only the
embedding table against a frozen predictor, which quantifies how
non-identifiable backprop-learned embeddings are. The kNN router
averages a model's correctness over the nearest training queries; the
K-means router averages it within the nearest centroid's cluster.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import EvalCorpus, ValidationError
from .nn import tensor as T
from .nn.layers import ACTIVATIONS
from .nn.params import ParamStore, adam_step, glorot
from .predictor import PROB_CLAMP, PredictionMatrix
from .training import DivergenceGuard


@dataclass
class LearnedEmbeddingConfig:
    embed_dim: int = 32
    hidden: int = 64
    n_hidden_layers: int = 1    # >1 gives the deeper "plus" variant
    activation: str = "relu"
    steps: int = 1000
    models_per_batch: int = 8
    queries_per_model: int = 64
    lr: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.embed_dim < 1 or self.hidden < 1 or self.n_hidden_layers < 1:
            raise ValidationError("dimensions must be >= 1")


@dataclass
class LearnedEmbeddingModel:
    model_ids: list[str]
    emb_store: ParamStore
    pred_store: ParamStore
    config: LearnedEmbeddingConfig
    final_loss: float = float("nan")

    def embedding(self, model_id):
        return self.emb_store[f"e.{model_id}"].data[0]

    def embedding_matrix(self):
        return np.stack([self.embedding(m) for m in self.model_ids])


def _init_predictor_store(cfg: LearnedEmbeddingConfig, dphi, rng):
    store = ParamStore()
    store.add("w_query", glorot(rng, dphi, cfg.embed_dim))
    width_in = cfg.embed_dim
    for i in range(cfg.n_hidden_layers):
        store.add(f"mlp.w{i}", glorot(rng, width_in, cfg.hidden))
        store.add(f"mlp.b{i}", np.zeros(cfg.hidden))
        width_in = cfg.hidden
    store.add("mlp.w_out", glorot(rng, width_in, 1))
    store.add("mlp.b_out", np.zeros(1))
    # per-dim encoding standardization, frozen at fit time (zero grads)
    store.add("norm.mean", np.zeros(dphi))
    store.add("norm.std", np.ones(dphi))
    return store


def _init_embedding_store(cfg: LearnedEmbeddingConfig, model_ids, rng):
    store = ParamStore()
    for m in model_ids:
        store.add(f"e.{m}", rng.normal(size=(1, cfg.embed_dim)) / math.sqrt(cfg.embed_dim))
    return store


def _forward(emb_store, pred_store, cfg, model_id, phis):
    act = ACTIVATIONS[cfg.activation]
    e = emb_store[f"e.{model_id}"]
    phis = (np.asarray(phis, dtype=np.float64) - pred_store["norm.mean"].data) \
        / pred_store["norm.std"].data
    x = T.matmul(T.constant(phis.astype(np.float32)), pred_store["w_query"])
    h = T.mul(T.repeat_row(e, phis.shape[0]), x)
    for i in range(cfg.n_hidden_layers):
        h = act(T.add(T.matmul(h, pred_store[f"mlp.w{i}"]), pred_store[f"mlp.b{i}"]))
    logits = T.add(T.matmul(h, pred_store["mlp.w_out"]), pred_store["mlp.b_out"])
    return T.sigmoid(logits)


def _fit(emb_store, pred_store, cfg, corpus, rng, update_predictor):
    from .data import sample_eval_subset
    ids = sorted(emb_store_model_ids(emb_store))
    guard = DivergenceGuard()
    value = float("nan")
    for step in range(cfg.steps):
        k = min(cfg.models_per_batch, len(ids))
        chosen = rng.choice(len(ids), size=k, replace=False)
        losses = []
        for i in chosen:
            model_id = ids[i]
            records = corpus.models[model_id]
            n = min(cfg.queries_per_model, len(records))
            batch = sample_eval_subset(records, n, int(rng.integers(1 << 31)))
            phis = corpus.table.rows([r.query_id for r in batch])
            targets = np.array([[r.score] for r in batch])
            p = _forward(emb_store, pred_store, cfg, model_id, phis)
            losses.append(T.mean(T.bce_elementwise(p, targets.astype(p.data.dtype))))
        loss = T.mean_of_scalars(losses)
        value = loss.item()
        guard.update(value, step)
        emb_store.zero_grad()
        pred_store.zero_grad()
        loss.backward()
        adam_step(emb_store, emb_store.grads(), lr=cfg.lr)
        if update_predictor:
            adam_step(pred_store, pred_store.grads(), lr=cfg.lr)
    return value


def emb_store_model_ids(store: ParamStore):
    return [name[2:] for name in store.names() if name.startswith("e.")]


def train_learned_embeddings(train_corpus: EvalCorpus,
                             cfg: LearnedEmbeddingConfig) -> LearnedEmbeddingModel:
    """Joint BCE minimization over the embedding table and the predictor."""
    rng = np.random.default_rng(cfg.seed)
    model_ids = train_corpus.model_ids
    pred_store = _init_predictor_store(cfg, train_corpus.table.dim, rng)
    train_X = train_corpus.table.rows(sorted(train_corpus.query_ids()))
    pred_store["norm.mean"].data = train_X.mean(axis=0).astype(np.float32)
    pred_store["norm.std"].data = np.maximum(
        train_X.std(axis=0), 1e-6).astype(np.float32)
    emb_store = _init_embedding_store(cfg, model_ids, rng)
    final = _fit(emb_store, pred_store, cfg, train_corpus, rng, update_predictor=True)
    return LearnedEmbeddingModel(model_ids=model_ids, emb_store=emb_store,
                                 pred_store=pred_store, config=cfg, final_loss=final)


def learned_predict_matrix(model: LearnedEmbeddingModel, table, query_ids,
                           emb_store=None) -> PredictionMatrix:
    store = emb_store if emb_store is not None else model.emb_store
    phis = table.rows(query_ids)
    rows = []
    with T.no_grad():
        for m in model.model_ids:
            p = _forward(store, model.pred_store, model.config, m, phis)
            rows.append(p.data[:, 0])
    probs = np.clip(np.stack(rows), PROB_CLAMP, 1.0 - PROB_CLAMP)
    return PredictionMatrix(model_ids=list(model.model_ids), query_ids=list(query_ids),
                            probabilities=probs, checkpoint_digest="embedllm")


def dataset_loss(model: LearnedEmbeddingModel, corpus: EvalCorpus, emb_store=None):
    """Mean-of-means BCE over every evaluation in the corpus (no sampling)."""
    store = emb_store if emb_store is not None else model.emb_store
    per_model = []
    with T.no_grad():
        for m in model.model_ids:
            records = corpus.models[m]
            phis = corpus.table.rows([r.query_id for r in records])
            targets = np.array([[r.score] for r in records])
            p = _forward(store, model.pred_store, model.config, m, phis)
            per_model.append(T.mean(T.bce_elementwise(
                p, targets.astype(p.data.dtype))).item())
    return float(np.mean(per_model))


def embedding_comparison_report(model: LearnedEmbeddingModel, new_emb: ParamStore,
                                train_corpus: EvalCorpus, test_query_ids=None):
    """Cosine distance per model plus prediction disagreement on a common
    test slice; symmetric in the two embedding tables."""
    cosines = {}
    for m in model.model_ids:
        a = model.embedding(m).astype(np.float64)
        b = new_emb[f"e.{m}"].data[0].astype(np.float64)
        if np.array_equal(a, b):
            cosines[m] = 0.0
            continue
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        cosines[m] = max(0.0, float(1.0 - a @ b / (na * nb))) \
            if na > 0 and nb > 0 else 1.0
    report = {
        "per_model_cosine_distance": cosines,
        "mean_cosine_distance": float(np.mean(list(cosines.values()))),
        "original_data_loss": dataset_loss(model, train_corpus),
        "regenerated_data_loss": dataset_loss(model, train_corpus, emb_store=new_emb),
    }
    if test_query_ids is not None:
        pm_old = learned_predict_matrix(model, train_corpus.table, test_query_ids)
        pm_new = learned_predict_matrix(model, train_corpus.table, test_query_ids,
                                        emb_store=new_emb)
        old_bits = pm_old.probabilities >= 0.5
        new_bits = pm_new.probabilities >= 0.5
        report["disagreement_rate"] = float((old_bits != new_bits).mean())
    return report


def regenerate_embeddings(model: LearnedEmbeddingModel, train_corpus: EvalCorpus,
                          new_seed, test_query_ids=None, fit_config=None):
    """Retrain only the embedding table against the frozen predictor.

    Returns the regenerated store and a report with per-model cosine
    distance between original and regenerated embeddings plus the
    prediction disagreement rate on a common test slice.
    """
    cfg = model.config
    rng = np.random.default_rng(new_seed)
    new_emb = _init_embedding_store(cfg, model.model_ids, rng)
    _fit(new_emb, model.pred_store, fit_config or cfg, train_corpus, rng,
         update_predictor=False)
    report = embedding_comparison_report(model, new_emb, train_corpus,
                                         test_query_ids)
    return new_emb, report


# --- nonparametric routers ------------------------------------------------------

@dataclass
class KnnRouter:
    """Average model correctness over the k nearest training queries."""

    k: int
    model_ids: list[str] = field(default_factory=list)
    train_qids: list[str] = field(default_factory=list)
    train_matrix: np.ndarray | None = None
    labels: np.ndarray | None = None      # M x N with NaN for missing
    global_means: np.ndarray | None = None

    @classmethod
    def fit(cls, corpus: EvalCorpus, k):
        if k < 1:
            raise ValidationError("k must be >= 1")
        qids = sorted(corpus.query_ids())
        if k > len(qids):
            raise ValidationError(f"k={k} exceeds {len(qids)} training queries")
        ids = corpus.model_ids
        labels = np.full((len(ids), len(qids)), np.nan)
        col = {q: j for j, q in enumerate(qids)}
        for i, m in enumerate(ids):
            for rec in corpus.models[m]:
                labels[i, col[rec.query_id]] = rec.score
        return cls(k=k, model_ids=ids, train_qids=qids,
                   train_matrix=corpus.table.rows(qids).astype(np.float64),
                   labels=labels,
                   global_means=np.nanmean(labels, axis=1))

    def predict(self, phi):
        """Per-model probability vector for one query encoding."""
        d = np.linalg.norm(self.train_matrix - np.asarray(phi, dtype=np.float64), axis=1)
        order = np.lexsort((self.train_qids, d))[:self.k]
        picked = self.labels[:, order]
        counts = (~np.isnan(picked)).sum(axis=1)
        sums = np.nansum(picked, axis=1)
        p = np.where(counts > 0, sums / np.maximum(counts, 1), self.global_means)
        return np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)

    def predict_matrix(self, table, query_ids) -> PredictionMatrix:
        probs = np.stack([self.predict(table.encoding(q)) for q in query_ids], axis=1)
        return PredictionMatrix(model_ids=list(self.model_ids),
                                query_ids=list(query_ids),
                                probabilities=probs, checkpoint_digest=f"knn-{self.k}")


def knn_route_predict(train_corpus: EvalCorpus, phi_test, k):
    """Per-model correctness probabilities for one test encoding.

    Convenience form of KnnRouter for single queries; returns
    {model_id: probability}.
    """
    router = KnnRouter.fit(train_corpus, k)
    p = router.predict(phi_test)
    return dict(zip(router.model_ids, p.tolist()))


@dataclass
class KMeansRouter:
    """Cluster query encodings; predict per-model mean correctness of the
    nearest centroid's cluster."""

    centroids: np.ndarray
    cluster_probs: np.ndarray       # n_clusters x M
    model_ids: list[str]
    sse_trajectory: list[float]

    @classmethod
    def fit(cls, corpus: EvalCorpus, n_clusters, seed, max_iters=300, tol=1e-6):
        qids = sorted(corpus.query_ids())
        X = corpus.table.rows(qids).astype(np.float64)
        distinct = np.unique(X, axis=0)
        if n_clusters > distinct.shape[0]:
            raise ValidationError(
                f"n_clusters={n_clusters} exceeds {distinct.shape[0]} distinct queries")
        rng = np.random.default_rng(seed)
        centroids = _kmeanspp(X, n_clusters, rng)
        sse_prev = None
        trajectory = []
        for _ in range(max_iters):
            d2 = ((X[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
            assign = np.argmin(d2, axis=1)
            sse = float(d2[np.arange(len(X)), assign].sum())
            trajectory.append(sse)
            for c in range(n_clusters):
                members = X[assign == c]
                if len(members) == 0:
                    # repair: re-seed from the point farthest from its centroid
                    far = int(np.argmax(d2[np.arange(len(X)), assign]))
                    centroids[c] = X[far]
                else:
                    centroids[c] = members.mean(axis=0)
            if sse_prev is not None and abs(sse_prev - sse) <= tol * max(sse_prev, 1e-12):
                break
            sse_prev = sse

        d2 = ((X[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        assign = np.argmin(d2, axis=1)
        ids = corpus.model_ids
        labels = np.full((len(ids), len(qids)), np.nan)
        col = {q: j for j, q in enumerate(qids)}
        for i, m in enumerate(ids):
            for rec in corpus.models[m]:
                labels[i, col[rec.query_id]] = rec.score
        global_means = np.nanmean(labels, axis=1)
        cluster_probs = np.zeros((n_clusters, len(ids)))
        for c in range(n_clusters):
            cols = assign == c
            if cols.any():
                with np.errstate(invalid="ignore"):
                    means = np.nanmean(labels[:, cols], axis=1)
                cluster_probs[c] = np.where(np.isnan(means), global_means, means)
            else:
                cluster_probs[c] = global_means
        return cls(centroids=centroids, cluster_probs=cluster_probs,
                   model_ids=ids, sse_trajectory=trajectory)

    def predict(self, phi):
        d2 = ((self.centroids - np.asarray(phi, dtype=np.float64)) ** 2).sum(axis=1)
        return np.clip(self.cluster_probs[int(np.argmin(d2))],
                       PROB_CLAMP, 1.0 - PROB_CLAMP)

    def predict_matrix(self, table, query_ids) -> PredictionMatrix:
        probs = np.stack([self.predict(table.encoding(q)) for q in query_ids], axis=1)
        return PredictionMatrix(model_ids=list(self.model_ids),
                                query_ids=list(query_ids),
                                probabilities=probs,
                                checkpoint_digest=f"kmeans-{len(self.centroids)}")


def _kmeanspp(X, k, rng):
    centroids = [X[int(rng.integers(len(X)))]]
    for _ in range(1, k):
        d2 = np.min(
            ((X[:, None, :] - np.stack(centroids)[None, :, :]) ** 2).sum(axis=2),
            axis=1)
        total = d2.sum()
        if total == 0:
            centroids.append(X[int(rng.integers(len(X)))])
            continue
        probs = d2 / total
        centroids.append(X[int(rng.choice(len(X), p=probs))])
    return np.stack(centroids)
