"""Pure numpy fallback for the activation sampler.

Produces bit-identical integer sums to the compiled ``_kernels`` module: both
draw from the same counter-based splitmix64 stream, addressed by
``(trial, token, step)``, and both run Floyd's subset algorithm.
"""

from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)

# draws per chunk; bounds peak memory of the vectorised path
_CHUNK_DRAWS = 1 << 22


def _mix(seed: np.uint64, counter: np.ndarray) -> np.ndarray:
    z = seed + (counter + np.uint64(1)) * _GOLDEN
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def _bounded(z: np.ndarray, m: int) -> np.ndarray:
    return ((z >> np.uint64(32)) * np.uint64(m)) >> np.uint64(32)


def sample_sums(n_ex: int, top_k: int, batch: int, n_gpus: int, seed: int, trials: int) -> tuple[int, int, int, int, int]:
    """Return (sum_unique, sum_unique_sq, sum_max_active, sum_max_active_sq, sum_max_load)."""
    if batch == 0 or top_k == 0 or trials == 0:
        return (0, 0, 0, 0, 0)
    per_gpu = n_ex // n_gpus
    seed64 = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
    with np.errstate(over="ignore"):
        chunk = max(1, _CHUNK_DRAWS // (batch * top_k))
        totals = [0, 0, 0, 0, 0]
        tok = np.arange(batch, dtype=np.uint64)
        for t0 in range(0, trials, chunk):
            nt = min(chunk, trials - t0)
            trial = np.arange(t0, t0 + nt, dtype=np.uint64)
            base = (trial[:, None] * np.uint64(batch) + tok[None, :]) * np.uint64(top_k)
            chosen = np.empty((nt, batch, top_k), dtype=np.int64)
            for step in range(top_k):
                j = n_ex - top_k + step
                t = _bounded(_mix(seed64, base + np.uint64(step)), j + 1).astype(np.int64)
                if step:
                    taken = (chosen[:, :, :step] == t[:, :, None]).any(axis=2)
                    t = np.where(taken, j, t)
                chosen[:, :, step] = t
            flat = (chosen.reshape(nt, -1) + (np.arange(nt, dtype=np.int64) * n_ex)[:, None]).ravel()
            counts = np.bincount(flat, minlength=nt * n_ex).reshape(nt, n_gpus, per_gpu)
            active = (counts > 0).sum(axis=2)
            unique = active.sum(axis=1)
            max_active = active.max(axis=1)
            max_load = counts.sum(axis=2).max(axis=1)
            totals[0] += int(unique.sum())
            totals[1] += int((unique * unique).sum())
            totals[2] += int(max_active.sum())
            totals[3] += int((max_active * max_active).sum())
            totals[4] += int(max_load.sum())
    return tuple(totals)
