"""Pure numpy implementations of the hot kernels.

Signatures mirror ``_ckernels`` exactly; :mod:`gistdesk.kernels` picks one at
import time.
"""
import numpy as np


def pool_forward(table, ids, offsets):
    """Mean-pool token rows per text and L2-normalize.

    ``ids`` is the flat int64 token list, ``offsets`` has length n+1.
    Returns ``(pre_norm, embeddings, norms)``; empty or zero-norm texts get
    a zero embedding and norm 0.
    """
    n = offsets.shape[0] - 1
    dim = table.shape[1]
    counts = np.diff(offsets)
    pre = np.zeros((n, dim), dtype=np.float64)
    if ids.size:
        rows = np.repeat(np.arange(n), counts)
        np.add.at(pre, rows, table[ids])
    nonempty = counts > 0
    pre[nonempty] /= counts[nonempty, None]
    norms = np.sqrt(np.einsum("ij,ij->i", pre, pre))
    emb = np.zeros_like(pre)
    ok = norms > 0.0
    emb[ok] = pre[ok] / norms[ok, None]
    norms[~ok] = 0.0
    return pre, emb, norms


def pool_backward(grad_emb, emb, norms, ids, offsets, grad_table):
    """Accumulate d(loss)/d(table) into ``grad_table`` in place."""
    counts = np.diff(offsets)
    ok = (norms > 0.0) & (counts > 0)
    if not ok.any():
        return
    g = grad_emb[ok]
    u = emb[ok]
    radial = np.einsum("ij,ij->i", g, u)
    g = (g - radial[:, None] * u) / norms[ok, None] / counts[ok, None]
    per_text = np.zeros_like(grad_emb)
    per_text[ok] = g
    rows = np.repeat(np.arange(counts.size), counts)
    np.add.at(grad_table, ids, per_text[rows])


def contrastive_rows(s_qp, s_qn, s_qq, s_pp, m_qp, m_qn, m_qq, m_pp,
                     inv_tau, include_pp, skip):
    """Per-row softmax cross-entropy with the positive at ``s_qp[i, i]``.

    Masks are True where a cell is excluded. Returns
    ``(per_sample, counts, g_qp, g_qn, g_qq, g_pp)``; gradients are with
    respect to the raw similarities (already scaled by ``inv_tau``) and are
    exactly zero on masked cells and skipped rows.
    """
    n = s_qp.shape[0]
    live = ~skip
    blocks = [(s_qp, m_qp), (s_qn, m_qn), (s_qq, m_qq)]
    if include_pp:
        blocks.append((s_pp, m_pp))

    pos = np.diagonal(s_qp) * inv_tau
    top = pos.copy()
    scaled = []
    for s, m in blocks:
        valid = ~m & live[:, None]
        z = s * inv_tau
        if z.shape[1]:
            top = np.maximum(top, np.max(z, axis=1, initial=-np.inf, where=valid))
        scaled.append((z, valid))

    pos_e = np.exp(pos - top)
    total = pos_e.copy()
    exps = []
    counts = np.zeros(n, dtype=np.int64)
    for z, valid in scaled:
        e = np.zeros_like(z)
        np.exp(z - top[:, None], out=e, where=valid)
        total += e.sum(axis=1)
        counts += valid.sum(axis=1)
        exps.append(e)

    # mass of the negatives, summed directly so that a dominant positive
    # does not cancel it away in ``total - pos_e`` or ``log(total)``
    others = sum((e.sum(axis=1) for e in exps), np.zeros(n))
    loss = np.where(pos == top, np.log1p(others), np.log(total) + top - pos)
    per_sample = np.maximum(np.where(live, loss, 0.0), 0.0)
    grads = [e / total[:, None] * inv_tau for e in exps]
    diag = -others / total * inv_tau
    idx = np.arange(n)
    grads[0][idx, idx] = np.where(live, diag, 0.0)
    if not include_pp:
        grads.append(np.zeros_like(s_pp))
    return (per_sample, counts, *grads)


def adamw_update(param, grad, m, v, lr, beta1, beta2, eps, weight_decay, t):
    """One in-place decoupled-weight-decay Adam step; ``t`` is the 1-based step count."""
    if weight_decay:
        param *= 1.0 - lr * weight_decay
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    param -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
