"""256-bit binary descriptors stored as (n, 32) uint8 arrays."""
import numpy as np

N_BYTES = 32
N_BITS = 256


def as_words(d):
    d = np.ascontiguousarray(d, dtype=np.uint8).reshape(-1, N_BYTES)
    return d.view(np.uint64)


def random_descriptors(rng, n):
    return rng.integers(0, 256, size=(n, N_BYTES), dtype=np.uint8)


def hamming(a, b):
    """Hamming distance between broadcastable descriptor arrays."""
    a = np.asarray(a, dtype=np.uint8)
    b = np.asarray(b, dtype=np.uint8)
    return np.bitwise_count(np.bitwise_xor(a, b)).sum(axis=-1, dtype=np.int64)


def hamming_matrix(a, b):
    """(len(a), len(b)) matrix of pairwise distances."""
    wa, wb = as_words(a), as_words(b)
    if len(wa) == 0 or len(wb) == 0:
        return np.zeros((len(wa), len(wb)), dtype=np.int64)
    x = np.bitwise_xor(wa[:, None, :], wb[None, :, :])
    return np.bitwise_count(x).sum(axis=-1, dtype=np.int64)


def flip_bits(d, n_flips, rng):
    """Copy of descriptor ``d`` with ``n_flips`` distinct random bits inverted."""
    bits = np.unpackbits(np.asarray(d, dtype=np.uint8))
    idx = rng.choice(N_BITS, size=n_flips, replace=False)
    bits[idx] ^= 1
    return np.packbits(bits)


def majority(descs):
    """Bitwise-majority centroid; ties resolve to 0."""
    descs = np.asarray(descs, dtype=np.uint8).reshape(-1, N_BYTES)
    bits = np.unpackbits(descs, axis=1)
    return np.packbits(bits.sum(axis=0) * 2 > len(descs))
