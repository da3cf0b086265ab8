"""Backend selection for the hot kernels.

The compiled ``_ckernels`` module is used when it was built; otherwise, or
when ``GISTDESK_PURE_PYTHON=1`` is set, the numpy versions in ``_pykernels``
are used. Both expose the same functions with the same signatures.
"""
import os

import numpy as np

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

if _ckernels is not None and os.environ.get("GISTDESK_PURE_PYTHON") != "1":
    _impl = _ckernels
    BACKEND = "cython"
else:
    _impl = _pykernels
    BACKEND = "python"


def available_backends():
    out = {"python": _pykernels}
    if _ckernels is not None:
        out["cython"] = _ckernels
    return out


def _as_ids(ids, offsets):
    return (np.ascontiguousarray(ids, dtype=np.int64),
            np.ascontiguousarray(offsets, dtype=np.int64))


def pool_forward(table, ids, offsets):
    ids, offsets = _as_ids(ids, offsets)
    return _impl.pool_forward(np.ascontiguousarray(table, dtype=np.float64), ids, offsets)


def pool_backward(grad_emb, emb, norms, ids, offsets, grad_table):
    ids, offsets = _as_ids(ids, offsets)
    _impl.pool_backward(np.ascontiguousarray(grad_emb, dtype=np.float64), emb, norms,
                        ids, offsets, grad_table)


def contrastive_rows(s_qp, s_qn, s_qq, s_pp, m_qp, m_qn, m_qq, m_pp,
                     inv_tau, include_pp, skip):
    c = np.ascontiguousarray
    return _impl.contrastive_rows(
        c(s_qp, dtype=np.float64), c(s_qn, dtype=np.float64),
        c(s_qq, dtype=np.float64), c(s_pp, dtype=np.float64),
        c(m_qp, dtype=bool), c(m_qn, dtype=bool), c(m_qq, dtype=bool), c(m_pp, dtype=bool),
        float(inv_tau), bool(include_pp), c(skip, dtype=bool),
    )


def adamw_update(param, grad, m, v, lr, beta1, beta2, eps, weight_decay, t):
    """In place on the flat views of ``param``, ``m`` and ``v`` (all C-contiguous)."""
    _impl.adamw_update(param.reshape(-1), np.ascontiguousarray(grad).reshape(-1),
                       m.reshape(-1), v.reshape(-1), float(lr), float(beta1),
                       float(beta2), float(eps), float(weight_decay), int(t))
