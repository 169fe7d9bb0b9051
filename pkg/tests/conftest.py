"""Shared fixtures: synthetic systems trained once per session."""

import numpy as np
import pytest

from locus.data import SyntheticSpec, generate_synthetic_corpus, split_corpus
from locus.encoder import EncoderConfig, embed_corpus
from locus.predictor import correctness_metrics, predict_matrix
from locus.training import TrainConfig, train

ACC_ENCODER = dict(d=32, L=2, r=16, h=4)
ACC_TRAIN = dict(steps=1200, models_per_batch=8, enc_subset_min=32,
                 enc_subset_max=256, dec_queries_per_model=64, lr=1e-3,
                 seed=7, val_fraction=0.0)


class TrainedSystem:
    """A synthetic corpus with its planted oracle and a trained checkpoint."""

    def __init__(self, spec: SyntheticSpec, train_config=None, model_ids=None):
        self.spec = spec
        self.table, self.corpus, self.oracle = generate_synthetic_corpus(spec)
        if model_ids is not None:
            self.corpus = type(self.corpus)(
                models={m: self.corpus.models[m] for m in model_ids},
                table=self.table)
        self.train_corpus, self.test_corpus = split_corpus(self.corpus, 0.25,
                                                           seed=spec.seed)
        enc_cfg = EncoderConfig(dphi=spec.dphi, **ACC_ENCODER)
        cfg = TrainConfig(**(train_config or ACC_TRAIN))
        self.checkpoint = train(self.train_corpus, enc_cfg, cfg)
        self.test_qids = sorted(self.test_corpus.query_ids())

    def embeddings(self, subset_size, seed, corpus=None):
        return embed_corpus(corpus or self.train_corpus, self.checkpoint.encoder,
                            checkpoint_digest=self.checkpoint.digest,
                            subset_size=subset_size, seed=seed)

    def routing_accuracy(self, subset_size, seed):
        embeddings = self.embeddings(subset_size, seed)
        pm = predict_matrix(embeddings, self.table, self.checkpoint.predictor,
                            query_ids=self.test_qids)
        return correctness_metrics(pm, self.test_corpus), embeddings

    def bayes_accuracy(self):
        X = self.table.rows(self.test_qids).astype(np.float64)
        routed = self.oracle.route(X)
        labels = {m: self.test_corpus.label_map(m) for m in self.test_corpus.models}
        return float(np.mean([labels[m][q] for m, q in zip(routed, self.test_qids)]))

    def best_single_accuracy(self):
        return max(
            float(np.mean([r.score for r in self.test_corpus.models[m]]))
            for m in self.test_corpus.models)


@pytest.fixture(scope="session")
def system_default():
    """The acceptance corpus: 20 models, 2000 queries, noise 0.1, seed 7."""
    return TrainedSystem(SyntheticSpec(seed=7))


@pytest.fixture(scope="session")
def system_large():
    """Same models over 4096 queries, enough for 2048-evaluation subsets."""
    return TrainedSystem(SyntheticSpec(n_queries=4096, seed=7))
