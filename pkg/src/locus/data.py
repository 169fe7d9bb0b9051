"""Evaluation-data ingestion, splitting, sampling, and synthesis.

Query encodings travel as a three-file bundle: meta.json sidecar
{n, dim, dtype:"f32", order:"row"}, a plain-text ids file (one id per
line), and a little-endian float32 row-major matrix file. Evaluations
are a CSV with header model_id,query_id,score. Everything here is pure
after construction and deterministic given its seed.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class ValidationError(ValueError):
    """Bad input data or arguments; maps to CLI exit code 1."""


def round_half_up(x):
    return int(math.floor(x + 0.5))


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class EncodingTable:
    """Aligned query ids, per-query task tags, and the encoding matrix."""

    query_ids: list[str]
    dataset_tags: list[str]
    matrix: np.ndarray
    index: dict[str, int] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.matrix.ndim != 2 or self.matrix.shape[1] < 1:
            raise ValidationError("encoding matrix must be n x d with d > 0")
        if len(self.query_ids) != self.matrix.shape[0]:
            raise ValidationError(
                f"id/matrix count mismatch: {len(self.query_ids)} ids vs "
                f"{self.matrix.shape[0]} rows")
        if len(self.dataset_tags) != len(self.query_ids):
            raise ValidationError("dataset tag count mismatch")
        if not self.index:
            self.index = {}
            for i, qid in enumerate(self.query_ids):
                if qid in self.index:
                    raise ValidationError(f"duplicate query id at line {i}: {qid!r}")
                self.index[qid] = i

    @property
    def dim(self):
        return self.matrix.shape[1]

    def __len__(self):
        return len(self.query_ids)

    def encoding(self, query_id):
        return self.matrix[self.index[query_id]]

    def tag(self, query_id):
        return self.dataset_tags[self.index[query_id]]

    def rows(self, query_ids):
        idx = [self.index[q] for q in query_ids]
        return self.matrix[idx]


@dataclass(frozen=True)
class EvaluationRecord:
    query_id: str
    score: float


@dataclass
class EvalCorpus:
    """Per-model evaluation sets, optional parameter costs, shared table."""

    models: dict[str, list[EvaluationRecord]]
    table: EncodingTable
    costs: dict[str, float] | None = None

    def __post_init__(self):
        for model_id, records in self.models.items():
            if not records:
                raise ValidationError(f"model {model_id!r} has no evaluations")
            seen = set()
            for rec in records:
                if rec.query_id not in self.table.index:
                    raise ValidationError(
                        f"unknown query id {rec.query_id!r} for model {model_id!r}")
                if not 0.0 <= rec.score <= 1.0:
                    raise ValidationError(
                        f"score {rec.score} outside [0,1] for "
                        f"({model_id!r}, {rec.query_id!r})")
                if rec.query_id in seen:
                    raise ValidationError(
                        f"duplicate evaluation ({model_id!r}, {rec.query_id!r})")
                seen.add(rec.query_id)
        if self.costs is not None:
            for model_id, cost in self.costs.items():
                if cost <= 0:
                    raise ValidationError(f"cost for {model_id!r} must be > 0")

    @property
    def model_ids(self):
        return sorted(self.models)

    def n_evaluations(self, model_id):
        return len(self.models[model_id])

    def query_ids(self):
        out = set()
        for records in self.models.values():
            out.update(r.query_id for r in records)
        return out

    def label_map(self, model_id):
        return {r.query_id: r.score for r in self.models[model_id]}

    def restrict_queries(self, keep_ids):
        """Sub-corpus with only the given query ids; models left empty are dropped."""
        keep = set(keep_ids)
        models = {}
        for model_id, records in self.models.items():
            subset = [r for r in records if r.query_id in keep]
            if subset:
                models[model_id] = subset
        if not models:
            raise ValidationError("restriction leaves no evaluations")
        return EvalCorpus(models=models, table=self.table, costs=self.costs)


def evalset_digest(records):
    h = hashlib.sha256()
    for rec in sorted(records, key=lambda r: r.query_id):
        h.update(rec.query_id.encode())
        h.update(b"\x00")
        h.update(repr(float(rec.score)).encode())
        h.update(b"\n")
    return h.hexdigest()


# --- binary encoding-table bundle ---------------------------------------

def load_encodings(meta_path, ids_path, matrix_path) -> EncodingTable:
    meta_path, ids_path, matrix_path = Path(meta_path), Path(ids_path), Path(matrix_path)
    for p in (meta_path, ids_path, matrix_path):
        if not p.exists():
            raise ValidationError(f"missing file: {p}")
    with open(meta_path) as f:
        meta = json.load(f)
    n = int(meta["n"])
    dim = int(meta["dim"])
    dtype = meta.get("dtype", "f32")
    order = meta.get("order", "row")
    if dtype != "f32" or order != "row":
        raise ValidationError(f"unsupported matrix layout dtype={dtype} order={order}")
    if dim < 1:
        raise ValidationError("dim must be >= 1")

    ids = ids_path.read_text().splitlines()
    if len(ids) != n:
        raise ValidationError(f"id/matrix count mismatch: meta n={n}, {len(ids)} ids")

    expected = n * dim * 4
    actual = matrix_path.stat().st_size
    if actual != expected:
        raise ValidationError(
            f"matrix size mismatch: expected {expected} bytes for {n}x{dim} f32, "
            f"found {actual}")
    raw = np.fromfile(matrix_path, dtype="<f4").reshape(n, dim)

    bad = np.flatnonzero(~np.isfinite(raw).all(axis=1))
    if bad.size:
        raise ValidationError(f"non-finite encoding at row {int(bad[0])} ({ids[bad[0]]!r})")
    zero = np.flatnonzero(np.linalg.norm(raw, axis=1) == 0.0)
    if zero.size:
        raise ValidationError(f"zero-norm encoding at row {int(zero[0])} ({ids[zero[0]]!r})")

    tags = meta.get("tags")
    if tags is None:
        tags = ["default"] * n
    elif len(tags) != n:
        raise ValidationError("meta tags length mismatch")
    return EncodingTable(query_ids=ids, dataset_tags=list(tags), matrix=raw.astype(np.float32))


def save_encodings(table: EncodingTable, out_dir, extra_meta=None):
    """Write the meta.json + ids.txt + matrix.f32 bundle; returns the paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    meta = {
        "n": len(table),
        "dim": table.dim,
        "dtype": "f32",
        "order": "row",
        "tags": list(table.dataset_tags),
    }
    if extra_meta:
        meta.update(extra_meta)
    meta_path = out_dir / "meta.json"
    ids_path = out_dir / "ids.txt"
    matrix_path = out_dir / "matrix.f32"
    with open(meta_path, "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
        f.write("\n")
    ids_path.write_text("".join(q + "\n" for q in table.query_ids))
    table.matrix.astype("<f4").tofile(matrix_path)
    return meta_path, ids_path, matrix_path


def load_evaluations(csv_path, table: EncodingTable, costs=None) -> EvalCorpus:
    csv_path = Path(csv_path)
    if not csv_path.exists():
        raise ValidationError(f"missing file: {csv_path}")
    models: dict[str, list[EvaluationRecord]] = {}
    with open(csv_path, newline="") as f:
        reader = csv.DictReader(f)
        required = {"model_id", "query_id", "score"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise ValidationError(
                f"evaluation CSV must have columns model_id,query_id,score, "
                f"found {reader.fieldnames}")
        for lineno, row in enumerate(reader, start=2):
            try:
                score = float(row["score"])
            except ValueError:
                raise ValidationError(f"line {lineno}: score {row['score']!r} not numeric")
            models.setdefault(row["model_id"], []).append(
                EvaluationRecord(query_id=row["query_id"], score=score))
    if not models:
        raise ValidationError("evaluation CSV contains no rows")
    return EvalCorpus(models=models, table=table, costs=costs)


def save_evaluations(corpus: EvalCorpus, csv_path):
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["model_id", "query_id", "score"])
        for model_id in corpus.model_ids:
            for rec in corpus.models[model_id]:
                writer.writerow([model_id, rec.query_id, format(rec.score, "g")])


def load_costs(csv_path) -> dict[str, float]:
    csv_path = Path(csv_path)
    if not csv_path.exists():
        raise ValidationError(f"missing file: {csv_path}")
    costs = {}
    with open(csv_path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or not {"model_id", "params"}.issubset(reader.fieldnames):
            raise ValidationError("costs CSV must have columns model_id,params")
        for row in reader:
            costs[row["model_id"]] = float(row["params"])
    return costs


# --- splitting and sampling ----------------------------------------------

def split_corpus(corpus: EvalCorpus, test_fraction, seed):
    """Split by query id so a query is entirely train or test for all models."""
    if not 0.0 < test_fraction < 1.0:
        raise ValidationError(f"test_fraction {test_fraction} outside (0,1)")
    qids = sorted(corpus.query_ids())
    n_test = round_half_up(test_fraction * len(qids))
    n_test = max(1, min(len(qids) - 1, n_test))
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(qids))
    test_ids = {qids[i] for i in perm[:n_test]}
    train_ids = set(qids) - test_ids
    assert not (train_ids & test_ids)
    return corpus.restrict_queries(train_ids), corpus.restrict_queries(test_ids)


def sample_eval_subset(records, size, seed):
    """Uniform subset without replacement, deterministic given seed."""
    if not 1 <= size <= len(records):
        raise ValidationError(f"subset size {size} outside [1, {len(records)}]")
    if size == len(records):
        return list(records)
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(records), size=size, replace=False)
    return [records[i] for i in idx]


def resample_with_overlap(reference, pool, alpha, seed):
    """Same-size resample sharing exactly round(alpha*|reference|) records.

    Fresh records come from `pool`, which must be disjoint from the
    reference by query id and large enough to supply the remainder.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValidationError(f"alpha {alpha} outside [0,1]")
    ref_ids = {r.query_id for r in reference}
    if any(p.query_id in ref_ids for p in pool):
        raise ValidationError("pool overlaps the reference set")
    n = len(reference)
    n_keep = round_half_up(alpha * n)
    n_fresh = n - n_keep
    if n_fresh > len(pool):
        raise ValidationError(
            f"insufficient pool: need {n_fresh} fresh records, have {len(pool)}")
    if n_keep == n:
        return list(reference)
    rng = np.random.default_rng(seed)
    kept_idx = rng.choice(n, size=n_keep, replace=False)
    fresh_idx = rng.choice(len(pool), size=n_fresh, replace=False)
    return [reference[i] for i in kept_idx] + [pool[i] for i in fresh_idx]


# --- synthetic corpus with a planted oracle --------------------------------

@dataclass
class SyntheticSpec:
    n_models: int = 20
    n_queries: int = 2000
    dphi: int = 32
    latent_dim: int = 8
    task_count: int = 5
    label_noise: float = 0.1
    seed: int = 7
    task_separation: float = 4.0
    family_scale: float = 4.0
    family_spread: float = 0.25

    def __post_init__(self):
        for name in ("n_models", "n_queries", "dphi", "latent_dim", "task_count"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")
        if not 0.0 <= self.label_noise < 0.5:
            raise ValidationError("label_noise must lie in [0, 0.5)")
        if self.latent_dim < self.task_count:
            raise ValidationError("latent_dim must be >= task_count (one family axis per task)")


@dataclass
class OracleParams:
    """The planted generative model; enough to run the Bayes-optimal router."""

    projection: np.ndarray      # latent_dim x dphi
    weights: np.ndarray         # n_models x latent_dim
    biases: np.ndarray          # n_models
    label_noise: float
    model_ids: list[str]
    family: list[int]

    def probabilities(self, encodings):
        """P(correct) per model for each encoding row; shape n x n_models."""
        latents = encodings @ self.projection.T
        logits = latents @ self.weights.T + self.biases[None, :]
        p = 1.0 / (1.0 + np.exp(-logits))
        return np.clip(p, self.label_noise, 1.0 - self.label_noise)

    def route(self, encodings):
        """Bayes router: per query, the model id with highest true probability."""
        p = self.probabilities(encodings)
        order = np.argsort(self.model_ids)  # lexicographic tie-break
        sorted_ids = [self.model_ids[i] for i in order]
        best = np.argmax(p[:, order], axis=1)
        return [sorted_ids[i] for i in best]


def generate_synthetic_corpus(spec: SyntheticSpec):
    """Planted-model corpus: clustered queries, family-structured models.

    Queries are drawn from task_count Gaussian clusters in R^dphi. Every
    model has a hidden latent vector near one of task_count orthonormal
    family axes; labels are Bernoulli(clip(sigmoid(w . Px + b), noise,
    1-noise)). Returns (EncodingTable, EvalCorpus, OracleParams).
    """
    rng = np.random.default_rng(spec.seed)
    centers = rng.normal(size=(spec.task_count, spec.dphi)) * spec.task_separation
    tasks = rng.integers(0, spec.task_count, size=spec.n_queries)
    encodings = centers[tasks] + rng.normal(size=(spec.n_queries, spec.dphi))
    encodings = encodings.astype(np.float32)

    projection = rng.normal(size=(spec.latent_dim, spec.dphi)) / math.sqrt(spec.dphi)

    # family axes solved so family f scores logit +scale on its own task
    # cluster center and -scale on every other: each family specializes
    # regardless of the seed's cluster geometry
    latent_centers = centers @ projection.T
    targets = spec.family_scale * (2.0 * np.eye(spec.task_count) - 1.0)
    axes, *_ = np.linalg.lstsq(latent_centers, targets, rcond=None)
    axes = axes.T  # task_count x latent_dim
    family = [m % spec.task_count for m in range(spec.n_models)]
    weights = np.stack([
        axes[family[m]] + spec.family_spread * rng.normal(size=spec.latent_dim)
        for m in range(spec.n_models)
    ])
    biases = rng.normal(size=spec.n_models) * 0.25

    width = max(2, len(str(spec.n_models - 1)))
    model_ids = [f"m{m:0{width}d}" for m in range(spec.n_models)]
    qwidth = max(5, len(str(spec.n_queries - 1)))
    query_ids = [f"q{i:0{qwidth}d}" for i in range(spec.n_queries)]
    table = EncodingTable(
        query_ids=query_ids,
        dataset_tags=[f"task{t}" for t in tasks],
        matrix=encodings,
    )

    oracle = OracleParams(
        projection=projection, weights=weights, biases=biases,
        label_noise=spec.label_noise, model_ids=model_ids, family=family,
    )
    probs = oracle.probabilities(encodings.astype(np.float64))
    draws = rng.random(size=probs.shape)
    labels = (draws < probs).astype(np.float64)

    models = {
        model_ids[m]: [
            EvaluationRecord(query_id=query_ids[i], score=float(labels[i, m]))
            for i in range(spec.n_queries)
        ]
        for m in range(spec.n_models)
    }
    corpus = EvalCorpus(models=models, table=table)
    return table, corpus, oracle
