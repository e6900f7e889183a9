"""Counter-based RNG streams keyed by (seed, purpose tags).

Every stochastic consumer in the repo (data generation, proposals,
resampling, diagnostics probes) draws from its own stream, derived
deterministically from the run seed plus string/int tags.  Streams with
different tags are statistically independent, so e.g. adding potential
evaluations to an SMC run can never perturb the proposal noise.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stream(seed: int, *tags) -> np.random.Generator:
    """Independent generator for (seed, *tags)."""
    h = hashlib.blake2b(digest_size=16)
    h.update(str(int(seed)).encode())
    for tag in tags:
        h.update(b"/")
        h.update(str(tag).encode())
    key = np.frombuffer(h.digest(), dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
