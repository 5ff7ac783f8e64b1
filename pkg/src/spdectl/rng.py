"""Per-path random streams.

Each path owns a Philox (counter-based) generator keyed by the master seed
and its stream id, so a path's noise never depends on how paths are
grouped into batches or spread over threads.
"""

import numpy as np


def stream(master_seed: int, stream_id: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(master_seed), spawn_key=(int(stream_id),))
    return np.random.Generator(np.random.Philox(ss))


def brownian_increments(master_seed: int, stream_id: int, n_steps: int, k: int,
                        dt: float) -> np.ndarray:
    """(n_steps, k) array of independent N(0, dt) increments."""
    return stream(master_seed, stream_id).standard_normal((n_steps, k)) * np.sqrt(dt)


def batch_increments(master_seed: int, stream_ids, n_steps: int, k: int,
                     dt: float) -> np.ndarray:
    out = np.empty((len(stream_ids), n_steps, k))
    for i, sid in enumerate(stream_ids):
        out[i] = brownian_increments(master_seed, sid, n_steps, k, dt)
    return out
