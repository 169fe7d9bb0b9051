"""Joint training of tokenizer, encoder, and correctness predictor.

Each step samples a mini-batch of models. Per model we draw an encoder
input subset (size log-uniform in a configured range, so one checkpoint
serves every test-time evaluation-set size) and an independent decoder
query batch; the loss is binary cross-entropy of the decoder
predictions, averaged over decoder queries then over models. Encoder
and decoder subsets may overlap during training only; every evaluation
protocol keeps them disjoint.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict

import numpy as np

from . import ckpt as ckpt_io
from .data import EvalCorpus, ValidationError, sample_eval_subset, split_corpus
from .encoder import (
    EncoderConfig,
    EncoderParams,
    embed_corpus,
    encode_forward,
    encode_model,
    eval_matrix,
    fit_input_conditioning,
    init_encoder,
)
from .nn import tensor as T
from .nn.params import ParamStore, adam_step
from .predictor import (
    PredictorParams,
    correctness_metrics,
    init_predictor,
    predict_matrix,
    predictor_forward,
)

DIVERGENCE_FACTOR = 10.0
DIVERGENCE_PATIENCE = 100


class DivergenceGuard:
    """Aborts when the loss stays above factor x initial for `patience`
    consecutive steps."""

    def __init__(self, factor=DIVERGENCE_FACTOR, patience=DIVERGENCE_PATIENCE):
        self.factor = factor
        self.patience = patience
        self.initial = None
        self.bad_steps = 0

    def update(self, value, step=0):
        if not math.isfinite(value):
            raise FloatingPointError(f"non-finite training loss at step {step}: {value}")
        if self.initial is None:
            self.initial = value
        if value > self.factor * self.initial:
            self.bad_steps += 1
            if self.bad_steps >= self.patience:
                raise FloatingPointError(
                    f"training diverged at step {step}: loss {value:.4f} vs "
                    f"initial {self.initial:.4f} for {self.bad_steps} consecutive steps")
        else:
            self.bad_steps = 0


@dataclass
class TrainConfig:
    steps: int = 1500
    models_per_batch: int = 8
    enc_subset_min: int = 16
    enc_subset_max: int = 256
    dec_queries_per_model: int = 64
    lr: float = 1e-3
    lr_schedule: str = "constant"      # constant | cosine
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    train_samples_per_model: int = 0   # 0 = use every available evaluation
    predictor_hidden: int = 64
    val_fraction: float = 0.1
    eval_every: int = 200

    def __post_init__(self):
        if self.enc_subset_min < 1 or self.dec_queries_per_model < 1:
            raise ValidationError("subset sizes must be >= 1")
        if self.steps < 0:
            raise ValidationError("steps must be >= 0")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValidationError(f"unknown lr schedule {self.lr_schedule!r}")

    def lr_at(self, step):
        if self.lr_schedule == "cosine":
            return self.lr * 0.5 * (1.0 + math.cos(math.pi * step / max(1, self.steps)))
        return self.lr


@dataclass
class Checkpoint:
    encoder_config: EncoderConfig
    encoder: EncoderParams
    predictor: PredictorParams
    store: ParamStore
    train_config: TrainConfig
    final_loss: float
    digest: str = ""

    def __post_init__(self):
        if not self.digest:
            self.digest = ckpt_io.tensor_digest(self.store.state_arrays())

    def refresh_digest(self):
        self.digest = ckpt_io.tensor_digest(self.store.state_arrays())
        return self.digest

    def save(self, path):
        blob = dict(self.encoder_config.to_dict())
        blob["seed"] = self.train_config.seed
        blob["predictor_hidden"] = self.train_config.predictor_hidden
        blob["train_config"] = asdict(self.train_config)
        blob["final_loss"] = self.final_loss
        digest = ckpt_io.write_checkpoint(path, blob, self.store.state_arrays())
        assert digest == self.digest
        return digest

    @classmethod
    def load(cls, path):
        blob, arrays, digest = ckpt_io.read_checkpoint(path)
        cfg = EncoderConfig.from_dict(blob)
        tcfg = TrainConfig(**blob["train_config"])
        store = ParamStore()
        rng = np.random.default_rng(0)
        encoder = init_encoder(store, cfg, rng)
        predictor = init_predictor(store, cfg.d, cfg.dphi, rng,
                                   hidden=blob.get("predictor_hidden", 64),
                                   activation=cfg.activation,
                                   norm_mean=encoder.norm_mean,
                                   norm_std=encoder.norm_std)
        store.load_arrays(arrays)
        return cls(encoder_config=cfg, encoder=encoder, predictor=predictor,
                   store=store, train_config=tcfg,
                   final_loss=blob.get("final_loss", float("nan")), digest=digest)


def build_model(cfg: EncoderConfig, tcfg: TrainConfig):
    store = ParamStore()
    rng = np.random.default_rng(tcfg.seed)
    encoder = init_encoder(store, cfg, rng)
    predictor = init_predictor(store, cfg.d, cfg.dphi, rng,
                               hidden=tcfg.predictor_hidden, activation=cfg.activation,
                               norm_mean=encoder.norm_mean, norm_std=encoder.norm_std)
    return store, encoder, predictor


def restrict_train_budget(corpus: EvalCorpus, budget, seed):
    """Cap every model at `budget` evaluations (the train-samples knob)."""
    if budget <= 0:
        return corpus
    models = {}
    for i, model_id in enumerate(corpus.model_ids):
        records = corpus.models[model_id]
        if len(records) > budget:
            records = sample_eval_subset(records, budget, seed + 7919 * i)
        models[model_id] = records
    return EvalCorpus(models=models, table=corpus.table, costs=corpus.costs)


def log_uniform_size(rng, lo, hi):
    if hi <= lo:
        return lo
    u = rng.uniform(math.log(lo), math.log(hi))
    return min(hi, max(lo, round_to_int(math.exp(u))))


def round_to_int(x):
    return int(math.floor(x + 0.5))


def make_batch(corpus: EvalCorpus, cfg: TrainConfig, rng):
    """Sample (model_id, encoder records, decoder records) triples."""
    ids = corpus.model_ids
    if not ids:
        raise ValidationError("empty corpus")
    k = min(cfg.models_per_batch, len(ids))
    chosen = rng.choice(len(ids), size=k, replace=False)
    batch = []
    for i in chosen:
        model_id = ids[i]
        records = corpus.models[model_id]
        budget = len(records)
        n_enc = log_uniform_size(rng, min(cfg.enc_subset_min, budget),
                                 min(cfg.enc_subset_max, budget))
        enc = sample_eval_subset(records, n_enc, int(rng.integers(1 << 31)))
        n_dec = min(cfg.dec_queries_per_model, budget)
        dec = sample_eval_subset(records, n_dec, int(rng.integers(1 << 31)))
        batch.append((model_id, enc, dec))
    return batch


def batch_loss(batch, corpus, encoder, predictor):
    """Graph-building mean-over-models of mean-over-queries BCE."""
    losses = []
    for _, enc_records, dec_records in batch:
        z = encode_forward(eval_matrix(enc_records, corpus.table), encoder)
        phis = corpus.table.rows([r.query_id for r in dec_records])
        targets = np.array([[r.score] for r in dec_records])
        p = predictor_forward(z, phis, predictor)
        losses.append(T.mean(T.bce_elementwise(
            p, targets.astype(p.data.dtype))))
    return T.mean_of_scalars(losses)


def train_step(store, encoder, predictor, corpus, batch, lr, cfg: TrainConfig):
    store.zero_grad()
    loss = batch_loss(batch, corpus, encoder, predictor)
    value = loss.item()
    if not math.isfinite(value):
        raise FloatingPointError(
            f"non-finite training loss at step {store.step_count}: {value}")
    loss.backward()
    adam_step(store, store.grads(), lr=lr, beta1=cfg.beta1, beta2=cfg.beta2,
              eps=cfg.adam_eps)
    return value


def validation_metrics(corpus, val_corpus, encoder, predictor, digest, seed):
    size = min(512, min(len(r) for r in corpus.models.values()))
    embeddings = embed_corpus(corpus, encoder, checkpoint_digest=digest,
                              subset_size=size, seed=seed)
    qids = sorted(val_corpus.query_ids())
    pm = predict_matrix(embeddings, val_corpus.table, predictor, query_ids=qids)
    m = correctness_metrics(pm, val_corpus)
    return {"routing": m.routing_accuracy, "correctness": m.correctness_accuracy}


def train(train_corpus: EvalCorpus, encoder_config: EncoderConfig,
          cfg: TrainConfig, log_stream=None) -> Checkpoint:
    """Run cfg.steps optimization steps; deterministic given cfg.seed."""
    corpus = restrict_train_budget(train_corpus, cfg.train_samples_per_model, cfg.seed)
    if 0.0 < cfg.val_fraction < 1.0 and min(
            len(r) for r in corpus.models.values()) >= 4:
        fit_corpus, val_corpus = split_corpus(corpus, cfg.val_fraction, cfg.seed + 1)
    else:
        fit_corpus, val_corpus = corpus, None

    store, encoder, predictor = build_model(encoder_config, cfg)
    # freeze encoding standardization on the training queries only
    train_qids = sorted(fit_corpus.query_ids())
    fit_input_conditioning(encoder, fit_corpus.table.rows(train_qids))
    rng = np.random.default_rng(cfg.seed)

    def emit(record):
        if log_stream is not None:
            log_stream.write(json.dumps(record, sort_keys=True) + "\n")
            log_stream.flush()

    guard = DivergenceGuard()
    value = float("nan")
    for step in range(cfg.steps):
        batch = make_batch(fit_corpus, cfg, rng)
        value = train_step(store, encoder, predictor, fit_corpus, batch,
                           cfg.lr_at(step), cfg)
        guard.update(value, step)
        if (step + 1) % cfg.eval_every == 0 or step + 1 == cfg.steps:
            record = {"step": step + 1, "loss": value}
            if val_corpus is not None:
                record["val"] = validation_metrics(
                    fit_corpus, val_corpus, encoder, predictor, "", cfg.seed)
            emit(record)
        elif (step + 1) % 50 == 0:
            emit({"step": step + 1, "loss": value})

    final_loss = value if cfg.steps > 0 else float("nan")
    return Checkpoint(encoder_config=encoder_config, encoder=encoder,
                      predictor=predictor, store=store, train_config=cfg,
                      final_loss=final_loss)


def onboard(checkpoint: Checkpoint, records, table, model_id="new-model"):
    """Embed a previously unseen model with frozen parameters.

    A pure forward pass: no training, no effect on existing embeddings
    or on the checkpoint itself.
    """
    if table.dim != checkpoint.encoder_config.dphi:
        raise ValidationError(
            f"encoding width {table.dim} != checkpoint dphi "
            f"{checkpoint.encoder_config.dphi}")
    return encode_model(records, checkpoint.encoder, model_id=model_id,
                        table=table, checkpoint_digest=checkpoint.digest)
