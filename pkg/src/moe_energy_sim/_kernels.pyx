# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled activation sampler; mirrors ``_kernels_py.sample_sums`` exactly."""

from libc.stdint cimport uint64_t, int64_t
from libc.stdlib cimport calloc, free


cdef inline uint64_t _mix(uint64_t seed, uint64_t counter) nogil:
    cdef uint64_t z = seed + (counter + 1) * <uint64_t>0x9E3779B97F4A7C15ULL
    z = (z ^ (z >> 30)) * <uint64_t>0xBF58476D1CE4E5B9ULL
    z = (z ^ (z >> 27)) * <uint64_t>0x94D049BB133111EBULL
    return z ^ (z >> 31)


def sample_sums(int n_ex, int top_k, long long batch, int n_gpus, unsigned long long seed, long long trials):
    if batch == 0 or top_k == 0 or trials == 0:
        return (0, 0, 0, 0, 0)
    cdef int per_gpu = n_ex // n_gpus
    cdef int* counts = <int*>calloc(n_ex, sizeof(int))
    cdef int64_t* chosen = <int64_t*>calloc(top_k, sizeof(int64_t))
    if counts == NULL or chosen == NULL:
        free(counts)
        free(chosen)
        raise MemoryError()
    cdef long long s_unique = 0, s_unique_sq = 0, s_max = 0, s_max_sq = 0, s_load = 0
    cdef long long trial, tok
    cdef int step, i, g, e, j, active, load, unique, max_active, max_load
    cdef int64_t t
    cdef uint64_t base
    with nogil:
        for trial in range(trials):
            for e in range(n_ex):
                counts[e] = 0
            for tok in range(batch):
                base = (<uint64_t>trial * <uint64_t>batch + <uint64_t>tok) * <uint64_t>top_k
                for step in range(top_k):
                    j = n_ex - top_k + step
                    t = <int64_t>(((_mix(seed, base + step) >> 32) * <uint64_t>(j + 1)) >> 32)
                    for i in range(step):
                        if chosen[i] == t:
                            t = j
                            break
                    chosen[step] = t
                    counts[t] += 1
            unique = 0
            max_active = 0
            max_load = 0
            for g in range(n_gpus):
                active = 0
                load = 0
                for e in range(g * per_gpu, (g + 1) * per_gpu):
                    if counts[e] > 0:
                        active += 1
                    load += counts[e]
                unique += active
                if active > max_active:
                    max_active = active
                if load > max_load:
                    max_load = load
            s_unique += unique
            s_unique_sq += <long long>unique * unique
            s_max += max_active
            s_max_sq += <long long>max_active * max_active
            s_load += max_load
    free(counts)
    free(chosen)
    return (s_unique, s_unique_sq, s_max, s_max_sq, s_load)
