"""Seeding and deterministic-mode helpers.

Deterministic mode is enabled explicitly or through the environment
variable ``SEAN_DETERMINISTIC=1``. In that mode torch is restricted to
deterministic kernels so repeated runs with the same seed produce
bit-identical results.
"""

import os
import random

import numpy as np
import torch

ENV_FLAG = "SEAN_DETERMINISTIC"


def deterministic_requested() -> bool:
    return os.environ.get(ENV_FLAG, "0") == "1"


def seed_everything(seed: int, deterministic: bool | None = None) -> None:
    """Seed python, numpy and torch RNGs; optionally force deterministic kernels."""
    if deterministic is None:
        deterministic = deterministic_requested()
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True)


def new_rng(*seed_parts: int) -> np.random.Generator:
    """Independent numpy generator keyed by a tuple of integer seeds."""
    return np.random.default_rng(list(seed_parts))
