"""Per-purpose seed derivation from a single root seed."""

from __future__ import annotations

import numpy as np
import torch

PURPOSES = {"data": 1, "init": 2, "pretrain": 3, "finetune": 4, "probes": 5, "eval": 6, "split": 7, "head": 8}


def derive_seed(root: int, purpose: str, *extra: int) -> int:
    """Stable 63-bit seed for (root, purpose, *extra)."""
    ss = np.random.SeedSequence([int(root) & 0xFFFFFFFF, PURPOSES[purpose], *(int(e) for e in extra)])
    lo, hi = (int(v) for v in ss.generate_state(2, dtype=np.uint32))
    return ((hi << 32) | lo) >> 1


def generator(root: int, purpose: str, *extra: int) -> torch.Generator:
    return torch.Generator().manual_seed(derive_seed(root, purpose, *extra))
