"""Correctness prediction and routing on top of model embeddings.

The predictor is a two-layer MLP over the concatenation of a model
embedding and a query encoding, producing a scalar logit; sigmoid gives
the probability that the model answers the query correctly. Routing
picks the candidate with the highest probability, breaking exact ties
by lexicographically smallest model id.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import ValidationError
from .nn import layers
from .nn import tensor as T
from .nn.params import ParamStore, glorot

PROB_CLAMP = 1e-7
DEFAULT_HIDDEN = 64


@dataclass
class PredictorParams:
    w1: T.Tensor        # (d + dphi) x hidden
    b1: T.Tensor
    w2: T.Tensor        # hidden x 1
    b2: T.Tensor
    activation: str = "gelu"
    norm_mean: T.Tensor | None = None    # shared with the encoder; not trained
    norm_std: T.Tensor | None = None

    @property
    def input_dim(self):
        return self.w1.data.shape[0]

    @property
    def hidden(self):
        return self.w1.data.shape[1]

    def condition_phi(self, phis):
        if self.norm_mean is None:
            return phis
        return (phis - self.norm_mean.data) / self.norm_std.data


def init_predictor(store: ParamStore, d, dphi, rng, hidden=DEFAULT_HIDDEN,
                   activation="gelu", norm_mean=None, norm_std=None) -> PredictorParams:
    return PredictorParams(
        w1=store.add("pred.w1", glorot(rng, d + dphi, hidden)),
        b1=store.add("pred.b1", np.zeros(hidden)),
        w2=store.add("pred.w2", glorot(rng, hidden, 1)),
        b2=store.add("pred.b2", np.zeros(1)),
        activation=activation,
        norm_mean=norm_mean,
        norm_std=norm_std,
    )


def predictor_forward(z_tensor, phi_rows, params: PredictorParams):
    """Graph-building forward: 1 x d embedding tensor against n query rows."""
    n = phi_rows.shape[0]
    z_rep = T.repeat_row(z_tensor, n)
    conditioned = params.condition_phi(np.asarray(phi_rows, dtype=np.float64))
    inputs = T.concat_cols(z_rep, T.constant(conditioned.astype(z_tensor.data.dtype)))
    logits = layers.mlp_2layer(inputs, params.w1, params.b1, params.w2, params.b2,
                               params.activation)
    return T.sigmoid(logits)


def predict_probability(z, phi, params: PredictorParams):
    """P(correct) for one embedding/query pair, clamped inside (0,1)."""
    z = np.asarray(z, dtype=np.float32)
    phi = np.asarray(phi, dtype=np.float32)
    if z.ndim != 1 or phi.ndim != 1 or z.size + phi.size != params.input_dim:
        raise ValidationError(
            f"predictor expects |z|+|phi| = {params.input_dim}, "
            f"got {z.size}+{phi.size}")
    with T.no_grad():
        p = predictor_forward(T.constant(z[None, :]), phi[None, :], params)
    return float(np.clip(p.data[0, 0], PROB_CLAMP, 1.0 - PROB_CLAMP))


@dataclass
class PredictionMatrix:
    model_ids: list[str]
    query_ids: list[str]
    probabilities: np.ndarray   # |M| x |Q|, entries in (0,1)
    checkpoint_digest: str = ""
    row_index: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.probabilities = np.asarray(self.probabilities, dtype=np.float64)
        if self.probabilities.shape != (len(self.model_ids), len(self.query_ids)):
            raise ValidationError("prediction matrix shape mismatch")
        if not ((self.probabilities > 0) & (self.probabilities < 1)).all():
            raise ValidationError("prediction probabilities must lie strictly in (0,1)")
        self.row_index = {m: i for i, m in enumerate(self.model_ids)}

    def column(self, j):
        return self.probabilities[:, j]


def predict_matrix(embeddings, table, params: PredictorParams,
                   query_ids=None) -> PredictionMatrix:
    """All-pairs probabilities for a pool of embeddings over a query set."""
    if not embeddings:
        raise ValidationError("empty embedding pool")
    digests = {e.checkpoint_digest for e in embeddings}
    if len(digests) > 1:
        raise ValidationError(f"mixed-checkpoint embeddings: {sorted(digests)}")
    qids = list(query_ids) if query_ids is not None else list(table.query_ids)
    phis = table.rows(qids)
    rows = []
    with T.no_grad():
        for emb in embeddings:
            p = predictor_forward(T.constant(emb.z[None, :]), phis, params)
            rows.append(p.data[:, 0])
    probs = np.clip(np.stack(rows), PROB_CLAMP, 1.0 - PROB_CLAMP)
    return PredictionMatrix(
        model_ids=[e.model_id for e in embeddings],
        query_ids=qids,
        probabilities=probs,
        checkpoint_digest=digests.pop(),
    )


def route(phi, embeddings, params: PredictorParams):
    """Model id with the highest predicted correctness for this query."""
    if not embeddings:
        raise ValidationError("empty candidate set")
    best_id, best_p = None, -1.0
    for emb in sorted(embeddings, key=lambda e: e.model_id):
        p = predict_probability(emb.z, phi, params)
        if p > best_p:
            best_id, best_p = emb.model_id, p
    return best_id


def route_matrix(pm: PredictionMatrix, restrict_to=None):
    """Routed model id per query column, with the lexicographic tie rule."""
    ids = pm.model_ids
    rows = range(len(ids)) if restrict_to is None else \
        [pm.row_index[m] for m in restrict_to]
    rows = sorted(rows, key=lambda i: ids[i])
    sub = pm.probabilities[rows]
    best = np.argmax(sub, axis=0)
    return [ids[rows[i]] for i in best]


@dataclass
class Metrics:
    routing_accuracy: float
    correctness_accuracy: float
    per_dataset: dict[str, dict[str, float]]
    n_queries: int
    n_models: int
    n_scored_cells: int
    n_missing_cells: int

    def to_dict(self, checkpoint_digest=""):
        return {
            "overall": {
                "routing": self.routing_accuracy,
                "correctness": self.correctness_accuracy,
            },
            "per_dataset": self.per_dataset,
            "n_queries": self.n_queries,
            "n_models": self.n_models,
            "n_scored_cells": self.n_scored_cells,
            "n_missing_cells": self.n_missing_cells,
            "checkpoint_digest": checkpoint_digest,
        }


def correctness_metrics(pm: PredictionMatrix, truth, threshold=0.5,
                        restrict_to=None) -> Metrics:
    """Correctness-prediction and routing accuracy against a truth corpus.

    Cells without a truth label are skipped and counted, never imputed.
    Both metrics are reported overall and per dataset tag.
    """
    table = truth.table
    labels = {m: truth.label_map(m) for m in pm.model_ids if m in truth.models}
    routed = route_matrix(pm, restrict_to=restrict_to)

    hits = misses = 0
    missing = 0
    route_correct = []
    per_tag: dict[str, dict[str, list]] = {}
    for j, qid in enumerate(pm.query_ids):
        tag = table.tag(qid)
        bucket = per_tag.setdefault(tag, {"corr": [], "route": []})
        for i, m in enumerate(pm.model_ids):
            y = labels.get(m, {}).get(qid)
            if y is None:
                missing += 1
                continue
            predicted = pm.probabilities[i, j] >= threshold
            actual = y >= 0.5
            ok = predicted == actual
            hits += ok
            misses += not ok
            bucket["corr"].append(ok)
        y_routed = labels.get(routed[j], {}).get(qid)
        if y_routed is not None:
            score = float(y_routed >= 0.5)
            route_correct.append(score)
            bucket["route"].append(score)

    scored = int(hits + misses)
    if scored == 0:
        raise ValidationError("truth corpus covers no scored cells")
    per_dataset = {
        tag: {
            "routing": float(np.mean(v["route"])) if v["route"] else float("nan"),
            "correctness": float(np.mean(v["corr"])) if v["corr"] else float("nan"),
        }
        for tag, v in sorted(per_tag.items())
    }
    return Metrics(
        routing_accuracy=float(np.mean(route_correct)),
        correctness_accuracy=float(hits / scored),
        per_dataset=per_dataset,
        n_queries=len(pm.query_ids),
        n_models=len(pm.model_ids),
        n_scored_cells=scored,
        n_missing_cells=int(missing),
    )
