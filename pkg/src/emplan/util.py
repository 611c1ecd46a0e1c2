"""Shared small helpers: canonical JSON digests and determinism setup."""

from __future__ import annotations

import hashlib
import json

import torch


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_digest(obj) -> str:
    """Stable sha256 digest of a JSON-serializable config."""
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()


def configure_determinism(threads: int = 1) -> None:
    """Pin the arithmetic mode so identical seeds reproduce bit-identical runs.

    Thread count changes BLAS reduction order, so it is fixed here; every
    entry point (CLI, tests, train) calls this before numeric work.
    """
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(True)
