"""Seed derivation and deterministic-execution helpers.

Every stochastic component draws from a sub-seed derived from one master
seed plus a purpose tag, so runs are reproducible and resumable: the seed
for (stage, epoch, sample) never depends on how many draws happened before.
"""

import os

import numpy as np
import torch

DETERMINISTIC_ENV = "CXR_SSLX_DETERMINISTIC"

# purpose tags for sub-seed derivation
INIT_BACKBONE = 1
INIT_PROJECTOR = 2
INIT_PREDICTOR = 3
INIT_HEAD = 4
SHUFFLE_SSL = 5
SHUFFLE_FINETUNE = 6
AUGMENT = 7
SPLIT = 8
SUBSAMPLE = 9


def deterministic_mode() -> bool:
    return os.environ.get(DETERMINISTIC_ENV, "") == "1"


def apply_determinism() -> None:
    """Force deterministic torch kernels when the env toggle is set."""
    if deterministic_mode():
        torch.use_deterministic_algorithms(True)


def derive_seed(master_seed: int, *tags: int) -> int:
    """Stable 32-bit sub-seed for (master, tags...)."""
    ss = np.random.SeedSequence([int(master_seed), *[int(t) for t in tags]])
    return int(ss.generate_state(1)[0])


def derive_rng(master_seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master_seed, *tags))


class torch_seeded:
    """Context manager: run a block under a fixed torch seed without
    disturbing the global RNG stream."""

    def __init__(self, seed: int):
        self.seed = seed

    def __enter__(self):
        self._state = torch.random.get_rng_state()
        torch.manual_seed(self.seed)
        return self

    def __exit__(self, *exc):
        torch.random.set_rng_state(self._state)
        return False
