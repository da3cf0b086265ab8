# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the hot kernels in ``_pykernels``."""
import numpy as np

cimport numpy as cnp
from libc.math cimport exp, log, log1p, sqrt

cnp.import_array()


def pool_forward(const double[:, ::1] table, const long long[::1] ids,
                 const long long[::1] offsets):
    cdef Py_ssize_t n = offsets.shape[0] - 1
    cdef Py_ssize_t dim = table.shape[1]
    pre_arr = np.zeros((n, dim), dtype=np.float64)
    emb_arr = np.zeros((n, dim), dtype=np.float64)
    norms_arr = np.zeros(n, dtype=np.float64)
    cdef double[:, ::1] pre = pre_arr
    cdef double[:, ::1] emb = emb_arr
    cdef double[::1] norms = norms_arr
    cdef Py_ssize_t i, k, d, row
    cdef long long count
    cdef double acc, norm
    for i in range(n):
        count = offsets[i + 1] - offsets[i]
        if count <= 0:
            continue
        for k in range(offsets[i], offsets[i + 1]):
            row = ids[k]
            for d in range(dim):
                pre[i, d] += table[row, d]
        acc = 0.0
        for d in range(dim):
            pre[i, d] /= count
            acc += pre[i, d] * pre[i, d]
        norm = sqrt(acc)
        if norm > 0.0:
            norms[i] = norm
            for d in range(dim):
                emb[i, d] = pre[i, d] / norm
    return pre_arr, emb_arr, norms_arr


def pool_backward(const double[:, ::1] grad_emb, const double[:, ::1] emb,
                  const double[::1] norms, const long long[::1] ids,
                  const long long[::1] offsets, double[:, ::1] grad_table):
    cdef Py_ssize_t n = offsets.shape[0] - 1
    cdef Py_ssize_t dim = emb.shape[1]
    cdef Py_ssize_t i, k, d, row
    cdef long long count
    cdef double radial, scale
    cdef double[::1] g = np.empty(dim, dtype=np.float64)
    for i in range(n):
        count = offsets[i + 1] - offsets[i]
        if count <= 0 or norms[i] <= 0.0:
            continue
        radial = 0.0
        for d in range(dim):
            radial += grad_emb[i, d] * emb[i, d]
        for d in range(dim):
            g[d] = (grad_emb[i, d] - radial * emb[i, d]) / norms[i] / count
        for k in range(offsets[i], offsets[i + 1]):
            row = ids[k]
            for d in range(dim):
                grad_table[row, d] += g[d]


cdef inline double _row_max(const double[:, ::1] s, const unsigned char[:, ::1] m,
                            Py_ssize_t i, double inv_tau, double top) noexcept nogil:
    cdef Py_ssize_t j
    cdef double z
    for j in range(s.shape[1]):
        if not m[i, j]:
            z = s[i, j] * inv_tau
            if z > top:
                top = z
    return top


cdef inline double _row_exp(const double[:, ::1] s, const unsigned char[:, ::1] m,
                            double[:, ::1] g, Py_ssize_t i, double inv_tau,
                            double top, long long* count) noexcept nogil:
    cdef Py_ssize_t j
    cdef double e, total = 0.0
    for j in range(s.shape[1]):
        if not m[i, j]:
            e = exp(s[i, j] * inv_tau - top)
            g[i, j] = e
            total += e
            count[0] += 1
    return total


cdef inline void _row_scale(const unsigned char[:, ::1] m, double[:, ::1] g,
                            Py_ssize_t i, double factor) noexcept nogil:
    cdef Py_ssize_t j
    for j in range(g.shape[1]):
        if not m[i, j]:
            g[i, j] *= factor


def contrastive_rows(const double[:, ::1] s_qp, const double[:, ::1] s_qn,
                     const double[:, ::1] s_qq, const double[:, ::1] s_pp,
                     m_qp_arr, m_qn_arr, m_qq_arr, m_pp_arr,
                     double inv_tau, bint include_pp, skip_arr):
    cdef Py_ssize_t n = s_qp.shape[0]
    cdef const unsigned char[:, ::1] m_qp = np.ascontiguousarray(m_qp_arr).view(np.uint8)
    cdef const unsigned char[:, ::1] m_qn = np.ascontiguousarray(m_qn_arr).view(np.uint8)
    cdef const unsigned char[:, ::1] m_qq = np.ascontiguousarray(m_qq_arr).view(np.uint8)
    cdef const unsigned char[:, ::1] m_pp = np.ascontiguousarray(m_pp_arr).view(np.uint8)
    cdef const unsigned char[::1] skip = np.ascontiguousarray(skip_arr).view(np.uint8)

    per_arr = np.zeros(n, dtype=np.float64)
    counts_arr = np.zeros(n, dtype=np.int64)
    gqp_arr = np.zeros((n, s_qp.shape[1]), dtype=np.float64)
    gqn_arr = np.zeros((s_qn.shape[0], s_qn.shape[1]), dtype=np.float64)
    gqq_arr = np.zeros((n, s_qq.shape[1]), dtype=np.float64)
    gpp_arr = np.zeros((n, s_pp.shape[1]), dtype=np.float64)
    cdef double[::1] per = per_arr
    cdef long long[::1] counts = counts_arr
    cdef double[:, ::1] gqp = gqp_arr
    cdef double[:, ::1] gqn = gqn_arr
    cdef double[:, ::1] gqq = gqq_arr
    cdef double[:, ::1] gpp = gpp_arr

    cdef Py_ssize_t i
    cdef double pos, top, pos_e, others, total, inv_total, loss
    cdef long long count
    with nogil:
        for i in range(n):
            if skip[i]:
                continue
            pos = s_qp[i, i] * inv_tau
            top = _row_max(s_qp, m_qp, i, inv_tau, pos)
            top = _row_max(s_qn, m_qn, i, inv_tau, top)
            top = _row_max(s_qq, m_qq, i, inv_tau, top)
            if include_pp:
                top = _row_max(s_pp, m_pp, i, inv_tau, top)
            pos_e = exp(pos - top)
            count = 0
            others = _row_exp(s_qp, m_qp, gqp, i, inv_tau, top, &count)
            others += _row_exp(s_qn, m_qn, gqn, i, inv_tau, top, &count)
            others += _row_exp(s_qq, m_qq, gqq, i, inv_tau, top, &count)
            if include_pp:
                others += _row_exp(s_pp, m_pp, gpp, i, inv_tau, top, &count)
            total = pos_e + others
            # log1p keeps rows with a dominant positive from rounding to 0
            if pos == top:
                loss = log1p(others)
            else:
                loss = log(total) + top - pos
            per[i] = loss if loss > 0.0 else 0.0
            counts[i] = count
            inv_total = inv_tau / total
            _row_scale(m_qp, gqp, i, inv_total)
            _row_scale(m_qn, gqn, i, inv_total)
            _row_scale(m_qq, gqq, i, inv_total)
            if include_pp:
                _row_scale(m_pp, gpp, i, inv_total)
            gqp[i, i] = -others * inv_total
    return per_arr, counts_arr, gqp_arr, gqn_arr, gqq_arr, gpp_arr


def adamw_update(double[::1] param, const double[::1] grad, double[::1] m,
                 double[::1] v, double lr, double beta1, double beta2,
                 double eps, double weight_decay, long long t):
    cdef Py_ssize_t k, size = param.shape[0]
    cdef double bc1 = 1.0 - beta1 ** t
    cdef double bc2 = 1.0 - beta2 ** t
    cdef double decay = 1.0 - lr * weight_decay
    cdef double g
    with nogil:
        for k in range(size):
            g = grad[k]
            if weight_decay != 0.0:
                param[k] *= decay
            m[k] = beta1 * m[k] + (1.0 - beta1) * g
            v[k] = beta2 * v[k] + (1.0 - beta2) * g * g
            param[k] -= lr * (m[k] / bc1) / (sqrt(v[k] / bc2) + eps)
