"""Text -> query-encoding bridge.

Reads JSONL query files ({id, dataset, text} per line), runs a sentence
encoder in batches, and writes the binary encoding bundle (meta.json +
ids.txt + matrix.f32) that the core pipeline ingests.
"""

from .encode import ENCODERS, BridgeError, encode_file, read_queries

__version__ = "0.1.0"

__all__ = ["ENCODERS", "BridgeError", "encode_file", "read_queries"]
