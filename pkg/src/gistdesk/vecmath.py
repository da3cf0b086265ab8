"""Dense vector primitives: normalization, cosine matrices, masked log-softmax.

Everything works in float64. Rows with zero norm are never divided by; they
come back as zero vectors together with a boolean ``degenerate`` flag.
"""
import math

import numpy as np

from .errors import ConfigError, ContractError


def l2_normalize(v):
    """Return ``(unit_vector, degenerate)`` for a 1-d vector."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size < 1:
        raise ContractError(f"expected a non-empty 1-d vector, got shape {v.shape}")
    norm = math.sqrt(float(np.dot(v, v)))
    if norm == 0.0:
        return v.copy(), True
    return v / norm, False


def l2_normalize_rows(m):
    """Row-wise version of :func:`l2_normalize`; returns ``(unit_rows, degenerate_mask)``."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ContractError(f"expected a 2-d matrix, got shape {m.shape}")
    norms = np.sqrt(np.einsum("ij,ij->i", m, m))
    degenerate = norms == 0.0
    safe = np.where(degenerate, 1.0, norms)
    out = m / safe[:, None]
    out[degenerate] = 0.0
    return out, degenerate


def cosine_matrix(a, b):
    """Pairwise dot products of pre-normalized rows: ``out[i, j] = a_i . b_j``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ConfigError(f"cosine_matrix needs 2-d inputs, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[1]:
        raise ConfigError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    return a @ b.T


def log_sum_exp(values):
    values = np.asarray(values, dtype=np.float64)
    top = values.max()
    return top + math.log(float(np.exp(values - top).sum()))


def masked_log_softmax(logits, mask, target_index):
    """Negative log-probability of ``logits[target_index]`` among unmasked entries.

    ``mask[j]`` true means entry j is excluded from the normalizer. Masked
    entries are dropped from the reduction instead of being set to -inf.
    """
    logits = np.asarray(logits, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if logits.shape != mask.shape or logits.ndim != 1:
        raise ContractError("logits and mask must be 1-d and of equal length")
    if not 0 <= target_index < logits.size:
        raise ContractError(f"target index {target_index} out of range")
    if mask[target_index]:
        raise ContractError("the target entry is masked")
    kept = logits[~mask]
    return max(0.0, log_sum_exp(kept) - float(logits[target_index]))
