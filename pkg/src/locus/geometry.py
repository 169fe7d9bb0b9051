"""Embedding-space analytics.

Everything here consumes embeddings and evaluation labels and is pure:
pairwise distances, the RBF similarity kernel, distance-vs-disagreement
correlations, agglomerative clustering, nearest-neighbor proxy curves,
fallback routing, evaluation-set robustness, fingerprinting, and
profile-synthesized (hypothetical) embeddings. All accumulation is done
in double precision regardless of the embedding dtype.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import EvalCorpus, ValidationError, resample_with_overlap, sample_eval_subset
from .encoder import encode_model
from .predictor import PredictionMatrix, correctness_metrics, predict_matrix, route_matrix


# --- distances and kernels --------------------------------------------------

@dataclass
class DistanceMatrix:
    model_ids: list[str]
    values: np.ndarray
    metric: str

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        n = len(self.model_ids)
        if self.values.shape != (n, n):
            raise ValidationError("distance matrix shape mismatch")
        if not np.allclose(self.values, self.values.T, atol=1e-12):
            raise ValidationError("distance matrix not symmetric")
        if np.any(np.diag(self.values) != 0.0):
            raise ValidationError("distance matrix diagonal must be zero")
        if np.any(self.values < 0):
            raise ValidationError("distances must be non-negative")

    def upper_triangle(self):
        iu = np.triu_indices(len(self.model_ids), k=1)
        return self.values[iu]


def pairwise_distances(embeddings, metric="cosine") -> DistanceMatrix:
    if len(embeddings) < 2:
        raise ValidationError("need at least 2 embeddings")
    Z = np.stack([np.asarray(e.z, dtype=np.float64) for e in embeddings])
    ids = [e.model_id for e in embeddings]
    if metric == "cosine":
        norms = np.linalg.norm(Z, axis=1)
        if np.any(norms == 0):
            bad = ids[int(np.flatnonzero(norms == 0)[0])]
            raise ValidationError(f"zero-norm embedding under cosine: {bad!r}")
        N = Z / norms[:, None]
        D = 1.0 - np.clip(N @ N.T, -1.0, 1.0)
        D = np.clip(D, 0.0, 2.0)
    elif metric == "euclidean":
        diff = Z[:, None, :] - Z[None, :, :]
        D = np.sqrt((diff**2).sum(axis=2))
    else:
        raise ValidationError(f"unknown metric {metric!r}")
    D = (D + D.T) / 2.0
    np.fill_diagonal(D, 0.0)
    return DistanceMatrix(model_ids=ids, values=D, metric=metric)


@dataclass
class KernelMatrix:
    model_ids: list[str]
    values: np.ndarray
    sigma: float

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.sigma <= 0:
            raise ValidationError("kernel bandwidth must be > 0")
        if np.any(np.diag(self.values) != 1.0):
            raise ValidationError("kernel diagonal must be exactly 1")
        if np.any(self.values < 0) or np.any(self.values > 1):
            raise ValidationError("kernel entries must lie in [0,1]")


def rbf_kernel(dist: DistanceMatrix, sigma=None) -> KernelMatrix:
    """K_ij = exp(-D_ij^2 / sigma^2); default sigma is the median
    off-diagonal distance (mean of the central pair for even lengths)."""
    if sigma is None:
        upper = dist.upper_triangle()
        sigma = float(np.median(upper))
        if sigma == 0.0:
            raise ValidationError("all pairwise distances zero; bandwidth undefined")
    if sigma <= 0:
        raise ValidationError("sigma must be > 0")
    K = np.exp(-(dist.values**2) / (sigma**2))
    np.fill_diagonal(K, 1.0)
    return KernelMatrix(model_ids=list(dist.model_ids), values=K, sigma=float(sigma))


# --- behavioral disagreement -------------------------------------------------

@dataclass
class DisagreementMatrix:
    model_ids: list[str]
    values: np.ndarray
    n_common: int

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if np.any(np.diag(self.values) != 0.0):
            raise ValidationError("disagreement diagonal must be zero")
        if not np.allclose(self.values, self.values.T):
            raise ValidationError("disagreement matrix not symmetric")

    def upper_triangle(self):
        iu = np.triu_indices(len(self.model_ids), k=1)
        return self.values[iu]


def disagreement(corpus: EvalCorpus, model_ids=None) -> DisagreementMatrix:
    """Normalized Hamming distance between binarized correctness labels
    over the query set common to all compared models."""
    ids = sorted(model_ids) if model_ids is not None else corpus.model_ids
    label_maps = [corpus.label_map(m) for m in ids]
    common = set(label_maps[0])
    for lm in label_maps[1:]:
        common &= set(lm)
    if not common:
        raise ValidationError("no common query set across compared models")
    qs = sorted(common)
    bits = np.array([[lm[q] >= 0.5 for q in qs] for lm in label_maps], dtype=bool)
    n = len(ids)
    H = np.zeros((n, n))
    for i in range(n):
        H[i] = (bits[i][None, :] != bits).mean(axis=1)
    np.fill_diagonal(H, 0.0)
    return DisagreementMatrix(model_ids=ids, values=H, n_common=len(qs))


# --- correlation statistics ---------------------------------------------------

def _rank_average(v):
    order = np.argsort(v, kind="stable")
    ranks = np.empty(len(v), dtype=np.float64)
    sv = v[order]
    i = 0
    while i < len(v):
        j = i
        while j + 1 < len(v) and sv[j + 1] == sv[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _pearson(x, y):
    xc = x - x.mean()
    yc = y - y.mean()
    den = np.sqrt((xc**2).sum() * (yc**2).sum())
    if den == 0.0:
        return None
    return float((xc * yc).sum() / den)


def _kendall_tau_b(x, y, block=1024):
    n = len(x)
    concordant_minus_discordant = 0
    tie_x = tie_y = 0
    for start in range(0, n, block):
        xs = x[start:start + block]
        ys = y[start:start + block]
        dx = np.sign(xs[:, None] - x[None, start:])
        dy = np.sign(ys[:, None] - y[None, start:])
        iu = np.triu_indices_from(dx, k=1)
        concordant_minus_discordant += int((dx[iu] * dy[iu]).sum())
        tie_x += int((dx[iu] == 0).sum())
        tie_y += int((dy[iu] == 0).sum())
        if start + block < n:
            dx = np.sign(xs[:, None] - x[None, start + block:])
            dy = np.sign(ys[:, None] - y[None, start + block:])
            concordant_minus_discordant += int((dx * dy).sum())
            tie_x += int((dx == 0).sum())
            tie_y += int((dy == 0).sum())
    n0 = n * (n - 1) // 2
    den = np.sqrt(float(n0 - tie_x) * float(n0 - tie_y))
    if den == 0.0:
        return None
    return float(concordant_minus_discordant / den)


def correlations(x, y):
    """Pearson, Spearman (average ranks), and Kendall tau-b.

    Degenerate (constant) inputs yield explicit None entries, never NaN.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 3:
        raise ValidationError("correlations need two equal-length vectors, n >= 3")
    spearman = None
    pearson = _pearson(x, y)
    if pearson is not None:
        spearman = _pearson(_rank_average(x), _rank_average(y))
    return {
        "pearson": pearson,
        "spearman": spearman,
        "kendall": _kendall_tau_b(x, y),
    }


def distance_disagreement_correlation(dist: DistanceMatrix, dis: DisagreementMatrix):
    if dist.model_ids != dis.model_ids:
        raise ValidationError("distance/disagreement model id mismatch")
    return correlations(dist.upper_triangle(), dis.upper_triangle())


# --- hierarchical clustering ---------------------------------------------------

def hierarchical_cluster(dist: DistanceMatrix, linkage="average"):
    """Agglomerative merges; returns [(a, b, height, size)] with cluster
    indices numbered like the input for leaves and n+step for merges."""
    n = len(dist.model_ids)
    if n < 2:
        raise ValidationError("need at least 2 models to cluster")
    if linkage not in ("average", "single", "complete"):
        raise ValidationError(f"unknown linkage {linkage!r}")
    D = dist.values.copy()
    active = {i: (i, 1) for i in range(n)}  # slot -> (cluster id, size)
    merges = []
    for step in range(n - 1):
        slots = sorted(active)
        best = None
        for ai in range(len(slots)):
            for bi in range(ai + 1, len(slots)):
                i, j = slots[ai], slots[bi]
                d = D[i, j]
                if best is None or d < best[0]:
                    best = (d, i, j)
        d, i, j = best
        id_i, size_i = active[i]
        id_j, size_j = active[j]
        a, b = sorted((id_i, id_j))
        merges.append((a, b, float(d), size_i + size_j))
        # slot i becomes the merged cluster; update its distances
        for k in list(active):
            if k in (i, j):
                continue
            if linkage == "average":
                newd = (size_i * D[i, k] + size_j * D[j, k]) / (size_i + size_j)
            elif linkage == "single":
                newd = min(D[i, k], D[j, k])
            else:
                newd = max(D[i, k], D[j, k])
            D[i, k] = D[k, i] = newd
        active[i] = (n + step, size_i + size_j)
        del active[j]
    return merges


def dendrogram_newick(merges, labels):
    """Ultrametric Newick text: leaves at height 0, nodes at height/2."""
    n = len(labels)
    nodes = {i: (labels[i], 0.0) for i in range(n)}
    for step, (a, b, height, _size) in enumerate(merges):
        (ta, ha), (tb, hb) = nodes.pop(a), nodes.pop(b)
        h = height / 2.0
        nodes[n + step] = (f"({ta}:{h - ha:.6g},{tb}:{h - hb:.6g})", h)
    (text, _h), = nodes.values()
    return text + ";"


# --- nearest-neighbor proxies and fallback -------------------------------------

def _neighbor_order(dist: DistanceMatrix, i):
    """Other models sorted by ascending distance, ties by model id."""
    ids = dist.model_ids
    others = [j for j in range(len(ids)) if j != i]
    return sorted(others, key=lambda j: (dist.values[i, j], ids[j]))


def knn_proxy_curve(dist: DistanceMatrix, dis: DisagreementMatrix, k_max):
    """agreement(k) = mean over models of 1 - H[m, k-th neighbor]."""
    if dist.model_ids != dis.model_ids:
        raise ValidationError("distance/disagreement model id mismatch")
    n = len(dist.model_ids)
    if not 1 <= k_max < n:
        raise ValidationError(f"k_max {k_max} outside [1, {n - 1}]")
    orders = [_neighbor_order(dist, i) for i in range(n)]
    return {
        k: float(np.mean([1.0 - dis.values[i, orders[i][k - 1]] for i in range(n)]))
        for k in range(1, k_max + 1)
    }


def fallback_eval(pm: PredictionMatrix, embeddings, test_corpus: EvalCorpus, k,
                  metric="cosine"):
    """Routing accuracy when the routed model is replaced by its k-th
    nearest embedding neighbor; k=0 means no substitution."""
    if k < 0:
        raise ValidationError("k must be >= 0")
    if k >= 1 and len(embeddings) < k + 1:
        raise ValidationError(f"pool of {len(embeddings)} smaller than k+1={k + 1}")
    routed = route_matrix(pm)
    if k >= 1:
        dist = pairwise_distances(embeddings, metric=metric)
        idx = {m: i for i, m in enumerate(dist.model_ids)}
        substitute = {
            m: dist.model_ids[_neighbor_order(dist, idx[m])[k - 1]]
            for m in pm.model_ids
        }
        routed = [substitute[m] for m in routed]
    labels = {m: test_corpus.label_map(m) for m in pm.model_ids}
    scores = [
        float(labels[m][qid] >= 0.5)
        for m, qid in zip(routed, pm.query_ids)
        if qid in labels[m]
    ]
    if not scores:
        raise ValidationError("no scored queries for fallback evaluation")
    return float(np.mean(scores))


# --- robustness to evaluation-set perturbations --------------------------------

@dataclass
class RobustnessSpec:
    n_ref: int = 4096
    alpha_grid: tuple = (0.0, 0.25, 0.5, 0.75, 1.0)
    subsample_grid: tuple = (64, 256, 1024)
    trials: int = 3
    seed: int = 0

    def __post_init__(self):
        if any(not 0.0 <= a <= 1.0 for a in self.alpha_grid):
            raise ValidationError("alpha grid must lie in [0,1]")
        if any(not 1 <= s <= self.n_ref for s in self.subsample_grid):
            raise ValidationError("subsample grid must lie in [1, n_ref]")
        if self.trials < 1:
            raise ValidationError("trials must be >= 1")


def robustness_suite(checkpoint, corpus: EvalCorpus, test_corpus: EvalCorpus,
                     spec: RobustnessSpec):
    """Recompute embeddings under overlap resampling and subsampling.

    Reference embeddings come from a fixed n_ref-evaluation set per
    model; each perturbed pool is re-embedded and scored, and per-model
    drift is reported next to the distances between reference
    embeddings so drift can be compared with inter-model separation.
    """
    ids = corpus.model_ids
    smallest = min(len(corpus.models[m]) for m in ids)
    if spec.n_ref > smallest:
        raise ValidationError(
            f"n_ref {spec.n_ref} exceeds smallest evaluation set {smallest}")
    references, pools = {}, {}
    for i, m in enumerate(ids):
        records = corpus.models[m]
        ref = sample_eval_subset(records, spec.n_ref, spec.seed + i)
        ref_ids = {r.query_id for r in ref}
        references[m] = ref
        pools[m] = [r for r in records if r.query_id not in ref_ids]

    def embed_sets(sets):
        return [
            encode_model(sets[m], checkpoint.encoder, model_id=m,
                         table=corpus.table, checkpoint_digest=checkpoint.digest)
            for m in ids
        ]

    ref_embeddings = embed_sets(references)
    ref_z = {e.model_id: e.z.astype(np.float64) for e in ref_embeddings}
    ref_dist = pairwise_distances(ref_embeddings, metric="euclidean")
    test_qids = sorted(test_corpus.query_ids())

    def score(embeddings):
        pm = predict_matrix(embeddings, corpus.table, checkpoint.predictor,
                            query_ids=test_qids)
        m = correctness_metrics(pm, test_corpus)
        return m.routing_accuracy, m.correctness_accuracy

    ref_routing, ref_correctness = score(ref_embeddings)

    def drift_row(embeddings):
        return {e.model_id: float(np.linalg.norm(
            e.z.astype(np.float64) - ref_z[e.model_id])) for e in embeddings}

    overlap_rows = []
    trial_seed = spec.seed + 1000
    for alpha in spec.alpha_grid:
        for trial in range(spec.trials):
            sets = {}
            for i, m in enumerate(ids):
                trial_seed += 1
                sets[m] = resample_with_overlap(
                    references[m], pools[m], alpha, trial_seed)
            embeddings = embed_sets(sets)
            routing, correctness = score(embeddings)
            drifts = drift_row(embeddings)
            overlap_rows.append({
                "alpha": alpha, "trial": trial,
                "routing": routing, "correctness": correctness,
                "mean_drift": float(np.mean(list(drifts.values()))),
                "max_drift": float(np.max(list(drifts.values()))),
                "per_model_drift": drifts,
            })

    subsample_rows = []
    for size in spec.subsample_grid:
        for trial in range(spec.trials):
            sets = {}
            for i, m in enumerate(ids):
                trial_seed += 1
                sets[m] = sample_eval_subset(references[m], size, trial_seed)
            embeddings = embed_sets(sets)
            routing, correctness = score(embeddings)
            drifts = drift_row(embeddings)
            subsample_rows.append({
                "size": size, "trial": trial,
                "routing": routing, "correctness": correctness,
                "mean_drift": float(np.mean(list(drifts.values()))),
                "max_drift": float(np.max(list(drifts.values()))),
                "per_model_drift": drifts,
            })

    return {
        "n_ref": spec.n_ref,
        "trials": spec.trials,
        "model_ids": ids,
        "reference": {
            "routing": ref_routing,
            "correctness": ref_correctness,
            "distances": ref_dist.values.tolist(),
        },
        "overlap": overlap_rows,
        "subsample": subsample_rows,
    }


# --- fingerprinting -------------------------------------------------------------

def fingerprint_check(z_candidate, references, margin=0.8, metric="euclidean"):
    """Relative-margin nearest-reference match.

    Flags a match when the nearest reference is closer than
    margin x (distance to the second-nearest reference).
    """
    if len(references) < 2:
        raise ValidationError("need at least 2 reference embeddings")
    z = np.asarray(z_candidate, dtype=np.float64)
    dists = {
        ref.model_id: _embedding_distance(z, ref.z.astype(np.float64), metric)
        for ref in references
    }
    ranked = sorted(dists.items(), key=lambda kv: (kv[1], kv[0]))
    (best_id, d1), (_, d2) = ranked[0], ranked[1]
    matched = best_id if d1 < margin * d2 else None
    return {"matched_id": matched, "distances": dists}


# --- hypothetical embeddings from task profiles ----------------------------------

@dataclass
class TaskProfile:
    model_id: str
    accuracy: dict[str, float]


def task_profiles(corpus: EvalCorpus) -> dict[str, TaskProfile]:
    """Per-model task-wise mean correctness over the corpus's tags."""
    out = {}
    for m in corpus.model_ids:
        sums: dict[str, list] = {}
        for rec in corpus.models[m]:
            sums.setdefault(corpus.table.tag(rec.query_id), []).append(rec.score)
        out[m] = TaskProfile(
            model_id=m,
            accuracy={t: float(np.mean(v)) for t, v in sorted(sums.items())},
        )
    return out


def hypothetical_embed(profile: TaskProfile, pool, checkpoint, n_queries, rng):
    """Encode a synthetic evaluation set matching a task accuracy profile.

    Queries are sampled from the pool stratified by task (largest-
    remainder proportional allocation over the profile's tasks); labels
    are Bernoulli draws at the profile's per-task accuracy.
    """
    tags = np.asarray(pool.dataset_tags)
    task_rows = {}
    for task in profile.accuracy:
        rows = np.flatnonzero(tags == task)
        if rows.size == 0:
            raise ValidationError(f"task {task!r} absent from the query pool")
        task_rows[task] = rows
    tasks = sorted(task_rows)
    weights = np.array([len(task_rows[t]) for t in tasks], dtype=np.float64)
    shares = weights / weights.sum() * n_queries
    counts = np.floor(shares).astype(int)
    remainder = n_queries - counts.sum()
    for i in np.argsort(-(shares - counts))[:remainder]:
        counts[i] += 1

    phis, labels = [], []
    for task, count in zip(tasks, counts):
        if count == 0:
            continue
        rows = task_rows[task]
        if count <= rows.size:
            chosen = rng.choice(rows, size=count, replace=False)
        else:
            chosen = np.concatenate([rows, rng.choice(rows, size=count - rows.size)])
        phis.append(pool.matrix[chosen])
        labels.append((rng.random(count) < profile.accuracy[task]).astype(np.float64))
    inputs = np.concatenate(
        [np.concatenate(phis), np.concatenate(labels)[:, None].astype(np.float32)],
        axis=1)
    emb = encode_model(inputs, checkpoint.encoder, model_id=profile.model_id,
                       checkpoint_digest=checkpoint.digest)
    return emb


def recall_at_k(hypotheticals, references, ks, metric="euclidean"):
    """Fraction of models whose own reference is among the k nearest
    references of the model's hypothetical embedding."""
    ref_ids = [r.model_id for r in references]
    hits = {k: 0 for k in ks}
    for h in hypotheticals:
        z = h.z.astype(np.float64)
        d = [_embedding_distance(z, r.z.astype(np.float64), metric) for r in references]
        order = [ref_ids[i] for i in np.lexsort((ref_ids, d))]
        for k in ks:
            if h.model_id in order[:k]:
                hits[k] += 1
    return {k: hits[k] / len(hypotheticals) for k in ks}


def _embedding_distance(a, b, metric):
    if metric == "euclidean":
        return float(np.linalg.norm(a - b))
    if metric == "cosine":
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        if na == 0 or nb == 0:
            raise ValidationError("zero-norm vector under cosine")
        return float(1.0 - np.clip(a @ b / (na * nb), -1.0, 1.0))
    raise ValidationError(f"unknown metric {metric!r}")
