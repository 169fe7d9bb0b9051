"""Set encoder mapping an evaluation set to a fixed-width model embedding.

Each (query encoding, score) pair becomes a d-dimensional token through
a learned affine tokenizer. L latent-bottleneck blocks then alternate a
compression step (r learned latents attend over the n tokens) with a
broadcast step (tokens attend over the latent summaries), keeping the
attention cost linear in n. A single learned query row finally attends
over the output tokens to produce the embedding, so the result is
invariant to the order of the input evaluations.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass

import numpy as np

from .data import ValidationError, evalset_digest, sample_eval_subset
from .nn import layers
from .nn import tensor as T
from .nn.params import ParamStore, glorot, init_tblock

EVALSET_CAP = 8192


@dataclass
class EncoderConfig:
    dphi: int
    d: int = 128
    L: int = 2
    r: int = 64
    h: int = 4
    d_ff: int | None = None
    activation: str = "gelu"
    # input conditioning: scores are centered and amplified so one score
    # channel carries weight comparable to the dphi encoding channels
    y_offset: float = 0.5
    y_gain: float | None = None

    def __post_init__(self):
        if self.d_ff is None:
            self.d_ff = 2 * self.d
        if self.y_gain is None:
            self.y_gain = float(np.sqrt(self.dphi))
        if self.d % self.h != 0:
            raise ValidationError(f"d={self.d} not divisible by h={self.h}")
        if self.r < 1 or self.L < 1 or self.dphi < 1:
            raise ValidationError("r, L, dphi must all be >= 1")
        if self.activation not in layers.ACTIVATIONS:
            raise ValidationError(f"unknown activation {self.activation!r}")

    def to_dict(self):
        return {
            "dphi": self.dphi, "d": self.d, "L": self.L, "r": self.r,
            "h": self.h, "d_ff": self.d_ff, "activation": self.activation,
            "y_offset": self.y_offset, "y_gain": self.y_gain,
        }

    @classmethod
    def from_dict(cls, blob):
        return cls(dphi=blob["dphi"], d=blob["d"], L=blob["L"], r=blob["r"],
                   h=blob["h"], d_ff=blob["d_ff"], activation=blob["activation"],
                   y_offset=blob.get("y_offset", 0.5), y_gain=blob.get("y_gain"))


@dataclass
class BottleneckParams:
    latents: T.Tensor                    # r x d, learned
    compress: layers.TBlockParams
    broadcast: layers.TBlockParams


@dataclass
class EncoderParams:
    tok_w: T.Tensor                      # (dphi+1) x d
    tok_b: T.Tensor                      # d
    blocks: list[BottleneckParams]
    agg_query: T.Tensor                  # 1 x d, learned
    agg: layers.TBlockParams
    config: EncoderConfig
    norm_mean: T.Tensor | None = None    # fixed per-dim encoding stats; not trained
    norm_std: T.Tensor | None = None

    def condition_phi(self, phis):
        """Standardize query encodings with the stats frozen at train time."""
        if self.norm_mean is None:
            return phis
        return (phis - self.norm_mean.data) / self.norm_std.data

    def condition_inputs(self, inputs):
        """Raw [phi | y] rows -> standardized phi plus the scaled score channel."""
        phis = self.condition_phi(inputs[:, :-1])
        ys = (inputs[:, -1:] - self.config.y_offset) * self.config.y_gain
        return np.concatenate([phis, ys], axis=1)


def init_encoder(store: ParamStore, cfg: EncoderConfig, rng) -> EncoderParams:
    """Register freshly initialized encoder weights in the store."""
    blocks = []
    for l in range(cfg.L):
        blocks.append(BottleneckParams(
            latents=store.add(f"enc.blk{l}.latents",
                              rng.normal(size=(cfg.r, cfg.d)) / np.sqrt(cfg.d)),
            compress=init_tblock(store, f"enc.blk{l}.comp", cfg.d, cfg.h, cfg.d_ff,
                                 rng, cfg.activation),
            broadcast=init_tblock(store, f"enc.blk{l}.bcast", cfg.d, cfg.h, cfg.d_ff,
                                  rng, cfg.activation),
        ))
    return EncoderParams(
        tok_w=store.add("enc.tok.w", glorot(rng, cfg.dphi + 1, cfg.d)),
        tok_b=store.add("enc.tok.b", np.zeros(cfg.d)),
        blocks=blocks,
        agg_query=store.add("enc.agg.query", rng.normal(size=(1, cfg.d)) / np.sqrt(cfg.d)),
        agg=init_tblock(store, "enc.agg", cfg.d, cfg.h, cfg.d_ff, rng, cfg.activation),
        config=cfg,
        # identity until fit_input_conditioning; zero gradients keep Adam inert
        norm_mean=store.add("norm.mean", np.zeros(cfg.dphi)),
        norm_std=store.add("norm.std", np.ones(cfg.dphi)),
    )


def fit_input_conditioning(params: EncoderParams, matrix):
    """Freeze per-dimension standardization stats from training encodings."""
    mean = matrix.astype(np.float64).mean(axis=0)
    std = matrix.astype(np.float64).std(axis=0)
    std = np.maximum(std, 1e-6)
    params.norm_mean.data = mean.astype(params.norm_mean.data.dtype)
    params.norm_std.data = std.astype(params.norm_std.data.dtype)


@dataclass
class ModelEmbedding:
    model_id: str
    z: np.ndarray
    checkpoint_digest: str
    evalset_digest: str
    n_used: int

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=np.float32)
        if self.z.ndim != 1:
            raise ValidationError("embedding must be a flat vector")
        if not np.all(np.isfinite(self.z)):
            raise ValidationError(f"non-finite embedding for {self.model_id!r}")


def eval_matrix(records, table):
    """Stack [phi(x) | y] rows for a list of evaluation records."""
    phis = table.rows([r.query_id for r in records])
    ys = np.array([[r.score] for r in records], dtype=phis.dtype)
    return np.concatenate([phis, ys], axis=1)


def tokenize(inputs, params: EncoderParams):
    """Affine (dphi+1) -> d map plus activation; one token row per evaluation.

    Inputs are raw [phi | y] rows; conditioning (standardized phi, scaled
    score channel) happens here so every consumer sees the same map.
    """
    if inputs.shape[0] < 1:
        raise ValidationError("cannot tokenize an empty evaluation set")
    if inputs.shape[1] != params.config.dphi + 1:
        raise ValidationError(
            f"tokenizer input width {inputs.shape[1]} != dphi+1={params.config.dphi + 1}")
    act = layers.ACTIVATIONS[params.config.activation]
    conditioned = params.condition_inputs(np.asarray(inputs, dtype=np.float64))
    x = T.constant(conditioned.astype(params.tok_w.data.dtype))
    return act(T.add(T.matmul(x, params.tok_w), params.tok_b))


def bottleneck_block(x, block: BottleneckParams):
    """Compression (latents attend to tokens) then broadcast (tokens attend back)."""
    h = layers.transformer_block(block.latents, x, x, block.compress)
    return layers.transformer_block(x, h, h, block.broadcast)


def aggregate(x, params: EncoderParams):
    """A single learned query row attends over the final tokens."""
    return layers.transformer_block(params.agg_query, x, x, params.agg)


def encode_forward(inputs, params: EncoderParams):
    """Full graph-building forward pass; returns a 1 x d tensor."""
    x = tokenize(inputs, params)
    for block in params.blocks:
        x = bottleneck_block(x, block)
    return aggregate(x, params)


def encode_model(records, params: EncoderParams, model_id="",
                 table=None, checkpoint_digest="", cap=EVALSET_CAP):
    """One inference forward pass over an evaluation set.

    Sets larger than `cap` are subsampled uniformly (seed derived from
    the model id so results stay reproducible); n_used records this.
    """
    if len(records) == 0:
        raise ValidationError(f"empty evaluation set for model {model_id!r}")
    used = records
    if len(records) > cap:
        seed = int.from_bytes(hashlib.sha256(model_id.encode()).digest()[:4], "little")
        used = sample_eval_subset(records, cap, seed)
    if table is not None:
        inputs = eval_matrix(used, table)
    else:
        inputs = used  # pre-stacked [phi | y] matrix
    with T.no_grad():
        z = encode_forward(np.asarray(inputs), params)
    return ModelEmbedding(
        model_id=model_id,
        z=z.data[0].astype(np.float32),
        checkpoint_digest=checkpoint_digest,
        evalset_digest=evalset_digest(used) if table is not None else "",
        n_used=len(used),
    )


def embed_corpus(corpus, params: EncoderParams, checkpoint_digest="",
                 subset_size=None, seed=0, model_ids=None, threads=1):
    """Embeddings for many models; optionally from fixed-size subsets.

    Embedding each model is pure over shared read-only parameters, so the
    map parallelizes; results are ordered by model id regardless of the
    thread count.
    """
    ids = sorted(model_ids) if model_ids is not None else corpus.model_ids

    def one(i_model):
        i, model_id = i_model
        records = corpus.models[model_id]
        if subset_size is not None:
            if subset_size > len(records):
                raise ValidationError(
                    f"subset size {subset_size} exceeds n_m={len(records)} "
                    f"for {model_id!r}")
            records = sample_eval_subset(records, subset_size, seed + i)
        return encode_model(records, params, model_id=model_id, table=corpus.table,
                            checkpoint_digest=checkpoint_digest)

    jobs = list(enumerate(ids))
    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(one, jobs))
    return [one(j) for j in jobs]


def save_embeddings_csv(embeddings, path):
    import json

    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        d = len(embeddings[0].z)
        writer.writerow(["model_id"] + [f"z{i}" for i in range(d)])
        for emb in embeddings:
            writer.writerow([emb.model_id] + [repr(float(v)) for v in emb.z])
    sidecar = {
        "checkpoint_digest": embeddings[0].checkpoint_digest,
        "d": d,
        "n_models": len(embeddings),
    }
    with open(f"{path}.meta.json", "w") as f:
        json.dump(sidecar, f, indent=2, sort_keys=True)
        f.write("\n")


def save_embeddings_binary(embeddings, out_dir):
    """Binary bundle in the encoding-table format, digest in the sidecar."""
    from .data import EncodingTable, save_encodings
    matrix = np.stack([e.z for e in embeddings]).astype(np.float32)
    table = EncodingTable(
        query_ids=[e.model_id for e in embeddings],
        dataset_tags=["model"] * len(embeddings),
        matrix=matrix,
    )
    return save_encodings(table, out_dir, extra_meta={
        "checkpoint_digest": embeddings[0].checkpoint_digest,
        "kind": "model_embeddings",
    })


def load_embeddings_csv(path):
    embeddings = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        d = len(header) - 1
        for row in reader:
            embeddings.append(ModelEmbedding(
                model_id=row[0],
                z=np.array([float(v) for v in row[1:]], dtype=np.float32),
                checkpoint_digest="", evalset_digest="", n_used=0,
            ))
            if len(embeddings[-1].z) != d:
                raise ValidationError(f"ragged embedding row for {row[0]!r}")
    return embeddings
