"""In-batch negative selection: one boolean exclusion mask per similarity block.

Masks are True where a cell is *excluded* from the negatives of row i.
Block layout for anchor ``q_i``:

* ``qp`` - ``sim(q_i, p_j)``; the diagonal is the positive and never a negative
* ``qn`` - ``sim(q_i, n_j)``; absent for pairs-only batches
* ``qq`` - ``sim(q_i, q_j)``
* ``pp`` - ``sim(p_i, p_j)``

Guided selection starts from the full batch and additionally drops every cell
whose guide similarity strictly exceeds the guide's query-positive similarity
for that row.
"""
import enum
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError


class Strategy(str, enum.Enum):
    ASSIGNED = "assigned"
    BIDIRECTIONAL = "bidirectional"
    FULLBATCH = "fullbatch"
    GUIDED = "guided"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            names = "|".join(s.value for s in cls)
            raise ConfigError(f"strategy must be one of {names}, got {value!r}") from None


@dataclass
class ModelSimBlock:
    s_qp: np.ndarray
    s_qn: np.ndarray | None
    s_qq: np.ndarray
    s_pp: np.ndarray

    @property
    def size(self):
        return self.s_qp.shape[0]


@dataclass
class MaskSet:
    m_qp: np.ndarray
    m_qn: np.ndarray | None
    m_qq: np.ndarray
    m_pp: np.ndarray
    thresholds: np.ndarray | None = None

    def blocks(self):
        out = {"qp": self.m_qp, "qq": self.m_qq, "pp": self.m_pp}
        if self.m_qn is not None:
            out["qn"] = self.m_qn
        return out


def _check_shapes(model_block, guide_block):
    n = model_block.size
    square = [model_block.s_qp, model_block.s_qq, model_block.s_pp]
    if model_block.s_qn is not None:
        square.append(model_block.s_qn)
    if guide_block is not None:
        square += [guide_block.sigma_qp, guide_block.sigma_qq, guide_block.sigma_pp]
        if (guide_block.sigma_qn is None) != (model_block.s_qn is None):
            raise ContractError("guide and model disagree on whether negatives are present")
        if guide_block.sigma_qn is not None:
            square.append(guide_block.sigma_qn)
    for m in square:
        if np.shape(m) != (n, n):
            raise ContractError(f"expected {n}x{n} similarity blocks, got {np.shape(m)}")


def build_masks(model_block, guide_block, strategy):
    strategy = Strategy.parse(strategy)
    _check_shapes(model_block, guide_block)
    n = model_block.size
    has_neg = model_block.s_qn is not None
    eye = np.eye(n, dtype=bool)
    full = np.ones((n, n), dtype=bool)

    if strategy is Strategy.ASSIGNED and not has_neg:
        raise ConfigError("strategy 'assigned' needs assigned negatives; the batch has none")
    if strategy is Strategy.GUIDED and guide_block is None:
        raise ConfigError("strategy 'guided' needs a guide")

    m_qn = np.zeros((n, n), dtype=bool) if has_neg else None
    if strategy in (Strategy.ASSIGNED, Strategy.BIDIRECTIONAL):
        m_qp = full.copy()
        m_pp = full.copy()
        m_qq = full.copy() if strategy is Strategy.ASSIGNED else eye.copy()
        return MaskSet(m_qp, m_qn, m_qq, m_pp)

    masks = MaskSet(eye.copy(), m_qn, eye.copy(), eye.copy())
    if strategy is Strategy.FULLBATCH:
        return masks

    thresholds = np.diagonal(guide_block.sigma_qp).copy()
    cut = thresholds[:, None]
    masks.m_qp |= guide_block.sigma_qp > cut
    masks.m_qq |= guide_block.sigma_qq > cut
    masks.m_pp |= guide_block.sigma_pp > cut
    if has_neg:
        masks.m_qn |= guide_block.sigma_qn > cut
    masks.thresholds = thresholds
    return masks


def count_active_negatives(masks, include_pp_rows=True):
    """Per-row number of unmasked cells over all blocks (``pp`` optional)."""
    counts = (~masks.m_qp).sum(axis=1) + (~masks.m_qq).sum(axis=1)
    if masks.m_qn is not None:
        counts = counts + (~masks.m_qn).sum(axis=1)
    if include_pp_rows:
        counts = counts + (~masks.m_pp).sum(axis=1)
    return counts.astype(np.int64)


def masked_fraction(masks):
    """Fraction of excluded cells per block, for training logs."""
    return {name: float(m.mean()) for name, m in masks.blocks().items()}
