"""Capability embeddings for language models from evaluation records.

Subpackages and modules:
- data: corpus ingestion, splitting, sampling, synthetic oracle corpora
- nn: dense-tensor autograd, attention blocks, Adam
- encoder: evaluation-set encoder producing model embeddings
- predictor: correctness prediction and query routing
- training: joint optimization, checkpointing, onboarding
- geometry: distances, kernels, correlations, clustering, robustness
- portfolio: count- and budget-constrained model-subset selection
- baselines: learned-embedding, kNN, and K-means comparison routers
- cli: the `locus` command
"""

__version__ = "0.1.0"
