"""
Seed derivation for fogpipe.

All randomness flows from one root seed. Each stochastic step asks for a
seed derived from the root and a purpose label, so subcommands can be
rerun independently and still reproduce the same numbers.
"""

import hashlib
from typing import Union

import numpy as np

Label = Union[str, int]


def derive_seed(root: int, *labels: Label) -> int:
    """
    Derive a child seed from a root seed and purpose labels.

    Args:
        root: Root seed
        *labels: Purpose labels, e.g. ("train", 0) or ("split", 2)

    Returns:
        Non-negative 63-bit integer seed
    """
    text = "/".join([str(int(root))] + [str(label) for label in labels])
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & ((1 << 63) - 1)


def rng_for(root: int, *labels: Label) -> np.random.Generator:
    """Return a numpy Generator seeded from ``derive_seed(root, *labels)``."""
    return np.random.default_rng(derive_seed(root, *labels))
