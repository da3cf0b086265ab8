"""Temperature-scaled contrastive loss over masked in-batch candidates."""
import logging
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ConfigError, ContractError
from .selection import ModelSimBlock
from .vecmath import cosine_matrix

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossConfig:
    temperature: float = 0.01
    include_pp_rows: bool = True
    reduction: str = "mean"

    def __post_init__(self):
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        if self.reduction not in ("mean", "sum"):
            raise ConfigError(f"reduction must be 'mean' or 'sum', got {self.reduction!r}")


@dataclass
class LossOutput:
    value: float
    per_sample: np.ndarray
    grad: ModelSimBlock  # d value / d similarity, same layout as the model block
    active_negative_counts: np.ndarray
    skipped: np.ndarray


def contrastive_loss(model_block, masks, cfg, skip=None):
    """Loss value plus its gradient with respect to every similarity cell.

    ``skip`` flags rows whose query or positive embedding is degenerate;
    they contribute nothing and are left out of the mean's denominator.
    """
    if not isinstance(cfg, LossConfig):
        raise ContractError("cfg must be a LossConfig")
    n = model_block.size
    skip = np.zeros(n, dtype=bool) if skip is None else np.asarray(skip, dtype=bool)
    if skip.shape != (n,):
        raise ContractError("skip flags must have one entry per row")
    if skip.any():
        log.info("skipping %d degenerate row(s): %s", int(skip.sum()), np.flatnonzero(skip).tolist())

    has_neg = model_block.s_qn is not None
    if has_neg != (masks.m_qn is not None):
        raise ContractError("mask set and similarity block disagree on negatives")
    s_qn = model_block.s_qn if has_neg else np.zeros((n, 0))
    m_qn = masks.m_qn if has_neg else np.zeros((n, 0), dtype=bool)
    for s, m in ((model_block.s_qp, masks.m_qp), (s_qn, m_qn),
                 (model_block.s_qq, masks.m_qq), (model_block.s_pp, masks.m_pp)):
        if np.shape(s) != np.shape(m):
            raise ContractError(f"mask shape {np.shape(m)} != similarity shape {np.shape(s)}")

    per_sample, counts, g_qp, g_qn, g_qq, g_pp = kernels.contrastive_rows(
        model_block.s_qp, s_qn, model_block.s_qq, model_block.s_pp,
        masks.m_qp, m_qn, masks.m_qq, masks.m_pp,
        1.0 / cfg.temperature, cfg.include_pp_rows, skip,
    )
    live = int(n - skip.sum())
    if cfg.reduction == "mean":
        scale = 1.0 / live if live else 0.0
        value = float(per_sample.sum()) * scale
        if scale != 1.0:
            for g in (g_qp, g_qn, g_qq, g_pp):
                g *= scale
    else:
        value = float(per_sample.sum())
    grad = ModelSimBlock(g_qp, g_qn if has_neg else None, g_qq, g_pp)
    return LossOutput(value, per_sample, grad, counts, skip)


def backprop_to_embeddings(grad, q, p, n=None):
    """Chain rule through ``sim(a, b) = a . b``; returns ``(grad_q, grad_p, grad_n)``."""
    grad_q = grad.s_qp @ p + grad.s_qq @ q + grad.s_qq.T @ q
    grad_p = grad.s_qp.T @ q + grad.s_pp @ p + grad.s_pp.T @ p
    grad_n = None
    if grad.s_qn is not None:
        if n is None:
            raise ContractError("negative gradient present but no negative embeddings given")
        grad_q = grad_q + grad.s_qn @ n
        grad_n = grad.s_qn.T @ q
    return grad_q, grad_p, grad_n


def model_similarities(q, p, n=None):
    return ModelSimBlock(
        s_qp=cosine_matrix(q, p),
        s_qn=None if n is None else cosine_matrix(q, n),
        s_qq=cosine_matrix(q, q),
        s_pp=cosine_matrix(p, p),
    )
