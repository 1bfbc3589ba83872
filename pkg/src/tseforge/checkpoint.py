"""Versioned checkpoint container: parameter names -> arrays, plus configs.

Every saved file starts life as a plain dict with a header string so that a
loader can refuse foreign or stale files before touching any weights.
"""

from __future__ import annotations

import torch

HEADER = "tseforge-ckpt-v1"


def save_checkpoint(path, state_dict: dict, configs: dict, extra: dict = None) -> None:
    """Write a self-describing checkpoint.

    configs maps config names to plain dicts (e.g. {"system": {...}});
    extra carries anything else (train state, metrics history).
    """
    payload = {
        "header": HEADER,
        "configs": {k: dict(v) for k, v in configs.items()},
        "state_dict": state_dict,
        "extra": dict(extra or {}),
    }
    torch.save(payload, path)


def load_checkpoint(path) -> dict:
    """Read and validate a checkpoint; raises on a missing or foreign header."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("header") != HEADER:
        raise ValueError(f"not a {HEADER} checkpoint: {path}")
    return payload
