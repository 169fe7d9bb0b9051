"""Batch sentence encoding into the binary query-encoding bundle.

Matrix rows follow input order exactly. Pretrained encoders run through
sentence-transformers in inference mode, so output is deterministic for
a fixed model version; whether vectors are L2-normalized follows the
chosen model's own convention and is recorded in the meta sidecar. The
hashed-gaussian encoders are deterministic offline stand-ins (seeded
from the text digest, not semantic) for integration tests and air-gapped
pipelines.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class BridgeError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderSpec:
    name: str
    dim: int
    hf_repo: str | None    # None -> offline hashed encoder


ENCODERS = {
    "all-mpnet-base-v2": EncoderSpec(
        "all-mpnet-base-v2", 768, "sentence-transformers/all-mpnet-base-v2"),
    "all-MiniLM-L6-v2": EncoderSpec(
        "all-MiniLM-L6-v2", 384, "sentence-transformers/all-MiniLM-L6-v2"),
    "all-distilroberta-v1": EncoderSpec(
        "all-distilroberta-v1", 768, "sentence-transformers/all-distilroberta-v1"),
    "paraphrase-albert-small-v2": EncoderSpec(
        "paraphrase-albert-small-v2", 768,
        "sentence-transformers/paraphrase-albert-small-v2"),
    "hashed-gaussian-768": EncoderSpec("hashed-gaussian-768", 768, None),
    "hashed-gaussian-384": EncoderSpec("hashed-gaussian-384", 384, None),
}


@dataclass
class Query:
    id: str
    dataset: str
    text: str


def read_queries(path) -> list[Query]:
    path = Path(path)
    if not path.exists():
        raise BridgeError(f"missing input file: {path}")
    queries = []
    seen = set()
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as err:
                raise BridgeError(f"line {lineno}: invalid JSON ({err})")
            for key in ("id", "text"):
                if key not in row:
                    raise BridgeError(f"line {lineno}: missing field {key!r}")
            qid = str(row["id"])
            text = str(row["text"])
            if not text:
                raise BridgeError(f"line {lineno}: empty text for id {qid!r}")
            if qid in seen:
                raise BridgeError(f"line {lineno}: duplicate id {qid!r}")
            seen.add(qid)
            queries.append(Query(id=qid, dataset=str(row.get("dataset", "default")),
                                 text=text))
    if not queries:
        raise BridgeError(f"{path}: no queries found")
    return queries


def _hashed_rows(texts, dim):
    """Deterministic pseudo-encoding: one Gaussian row seeded per text."""
    rows = np.empty((len(texts), dim), dtype=np.float32)
    for i, text in enumerate(texts):
        digest = hashlib.sha256(text.encode()).digest()
        seed = int.from_bytes(digest[:8], "little")
        rng = np.random.default_rng(seed)
        rows[i] = rng.standard_normal(dim).astype(np.float32) / np.sqrt(dim)
    return rows, False


def _pretrained_rows(texts, spec: EncoderSpec, batch_size):
    try:
        from sentence_transformers import SentenceTransformer
    except ImportError as err:
        raise BridgeError(
            f"encoder {spec.name!r} needs the sentence-transformers extra: {err}")
    try:
        model = SentenceTransformer(spec.hf_repo)
    except Exception as err:
        raise BridgeError(f"failed to load encoder {spec.name!r}: {err}")
    rows = model.encode(texts, batch_size=batch_size, convert_to_numpy=True,
                        show_progress_bar=False)
    normalized = any(type(m).__name__ == "Normalize" for m in model._modules.values())
    return rows.astype(np.float32), normalized


def encode_file(input_jsonl, encoder_name, out_dir, batch_size=32):
    """Encode a JSONL query file into meta.json + ids.txt + matrix.f32.

    Returns the three output paths; row order matches input order.
    """
    if batch_size < 1:
        raise BridgeError("batch_size must be >= 1")
    if encoder_name not in ENCODERS:
        raise BridgeError(
            f"unknown encoder {encoder_name!r}; choices: {sorted(ENCODERS)}")
    spec = ENCODERS[encoder_name]
    queries = read_queries(input_jsonl)
    texts = [q.text for q in queries]

    if spec.hf_repo is None:
        matrix, normalized = _hashed_rows(texts, spec.dim)
    else:
        matrix, normalized = _pretrained_rows(texts, spec, batch_size)
    if matrix.shape != (len(queries), spec.dim):
        raise BridgeError(
            f"encoder produced shape {matrix.shape}, expected "
            f"({len(queries)}, {spec.dim})")
    if not np.all(np.isfinite(matrix)):
        raise BridgeError("encoder produced non-finite values")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    meta = {
        "n": len(queries),
        "dim": spec.dim,
        "dtype": "f32",
        "order": "row",
        "tags": [q.dataset for q in queries],
        "encoder": spec.name,
        "l2_normalized": normalized,
    }
    meta_path = out_dir / "meta.json"
    ids_path = out_dir / "ids.txt"
    matrix_path = out_dir / "matrix.f32"
    with open(meta_path, "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
        f.write("\n")
    ids_path.write_text("".join(q.id + "\n" for q in queries))
    matrix.astype("<f4").tofile(matrix_path)
    return meta_path, ids_path, matrix_path
