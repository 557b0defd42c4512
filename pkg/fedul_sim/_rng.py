"""Seeded random streams, independent of thread scheduling order."""

import logging
import os
from typing import Optional

import numpy as np

_LOCAL_TRAIN = 0
_ROUND_SAMPLING = 1
_POISON = 2

THREADS_ENV = "FFUL_THREADS"


def client_rng(seed: int, round: int, client_id: int) -> np.random.Generator:
    """Stream for one client's local training in one round."""
    return np.random.default_rng(
        np.random.SeedSequence(seed, spawn_key=(_LOCAL_TRAIN, round, client_id))
    )


def round_rng(seed: int, round: int) -> np.random.Generator:
    """Stream for the server's sampling draw in one round."""
    return np.random.default_rng(
        np.random.SeedSequence(seed, spawn_key=(_ROUND_SAMPLING, round))
    )


def poison_seed(seed: int, client_id: int) -> int:
    ss = np.random.SeedSequence(seed, spawn_key=(_POISON, client_id))
    return int(ss.generate_state(1)[0])


def resolve_num_threads(explicit: Optional[int] = None) -> int:
    """Explicit argument, else FFUL_THREADS, else 1."""
    env = os.environ.get(THREADS_ENV)
    if explicit is not None:
        if env is not None:
            logging.info(
                f"Overriding {THREADS_ENV}={env} with explicit thread count {explicit}."
            )
        return max(1, int(explicit))
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            logging.warning(f"Ignoring non-integer {THREADS_ENV}={env!r}.")
    return 1
