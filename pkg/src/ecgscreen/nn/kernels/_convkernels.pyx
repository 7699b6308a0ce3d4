# Compiled kernels for 1D convolution and max-pooling.
#
# Convolution is im2col into a reused per-sample column buffer followed
# by a BLAS GEMM (via scipy's cython_blas capsules), for float32 and
# float64. Each output element is produced by exactly one GEMM call with
# a fixed reduction order, so results are reproducible run to run.

import numpy as np

cimport cython
from scipy.linalg.cython_blas cimport dgemm, sgemm

ctypedef fused real:
    float
    double


cdef inline void gemm_rm(char flag_a, char flag_b, int m, int n, int k,
                         real alpha, real* a, int lda,
                         real* b, int ldb, real beta, real* c) noexcept nogil:
    # Row-major C(m,n) = alpha * opA(A)(m,k) @ opB(B)(k,n) + beta * C,
    # expressed through column-major BLAS by the transpose trick.
    cdef int bm = n, bn = m, ldc = n
    if real is float:
        sgemm(&flag_b, &flag_a, &bm, &bn, &k, <float*>&alpha, <float*>b, &ldb,
              <float*>a, &lda, <float*>&beta, <float*>c, &ldc)
    else:
        dgemm(&flag_b, &flag_a, &bm, &bn, &k, <double*>&alpha, <double*>b, &ldb,
              <double*>a, &lda, <double*>&beta, <double*>c, &ldc)


cdef void im2col(real[:, ::1] xn, real[:, ::1] col, int k, int stride, int pad) noexcept nogil:
    cdef int c_in = xn.shape[0], t = xn.shape[1], t_out = col.shape[1]
    cdef int c, kk, j, src, row
    for c in range(c_in):
        for kk in range(k):
            row = c * k + kk
            for j in range(t_out):
                src = j * stride + kk - pad
                if 0 <= src < t:
                    col[row, j] = xn[c, src]
                else:
                    col[row, j] = 0


cdef void col2im_add(real[:, ::1] dcol, real[:, ::1] dxn, int k, int stride, int pad) noexcept nogil:
    cdef int c_in = dxn.shape[0], t = dxn.shape[1], t_out = dcol.shape[1]
    cdef int c, kk, j, src, row
    for c in range(c_in):
        for kk in range(k):
            row = c * k + kk
            for j in range(t_out):
                src = j * stride + kk - pad
                if 0 <= src < t:
                    dxn[c, src] += dcol[row, j]


def conv1d_forward(real[:, :, ::1] x, real[:, :, ::1] w, int stride, int pad):
    cdef int n = x.shape[0], c_in = x.shape[1], t = x.shape[2]
    cdef int c_out = w.shape[0], k = w.shape[2]
    cdef int t_out = (t + 2 * pad - k) // stride + 1
    cdef int ck = c_in * k, i
    dtype = np.float32 if real is float else np.float64
    y_arr = np.empty((n, c_out, t_out), dtype=dtype)
    col_arr = np.empty((ck, t_out), dtype=dtype)
    cdef real[:, :, ::1] y = y_arr
    cdef real[:, ::1] col = col_arr
    with nogil:
        for i in range(n):
            im2col(x[i], col, k, stride, pad)
            gemm_rm(c'N', c'N', c_out, t_out, ck, <real>1.0,
                    &w[0, 0, 0], ck, &col[0, 0], t_out, <real>0.0, &y[i, 0, 0])
    return y_arr


def conv1d_backward(real[:, :, ::1] x, real[:, :, ::1] w, real[:, :, ::1] dy,
                    int stride, int pad, bint need_dx, bint need_dw):
    cdef int n = x.shape[0], c_in = x.shape[1], t = x.shape[2]
    cdef int c_out = w.shape[0], k = w.shape[2]
    cdef int t_out = dy.shape[2]
    cdef int ck = c_in * k, i
    dtype = np.float32 if real is float else np.float64
    dx_arr = np.zeros((n, c_in, t), dtype=dtype) if need_dx else None
    dw_arr = np.zeros((c_out, c_in, k), dtype=dtype) if need_dw else None
    col_arr = np.empty((ck, t_out), dtype=dtype)
    dcol_arr = np.empty((ck, t_out), dtype=dtype)
    cdef real[:, :, ::1] dx = x[:0]
    cdef real[:, :, ::1] dw = x[:0]
    if need_dx:
        dx = dx_arr
    if need_dw:
        dw = dw_arr
    cdef real[:, ::1] col = col_arr
    cdef real[:, ::1] dcol = dcol_arr
    with nogil:
        for i in range(n):
            if need_dw:
                im2col(x[i], col, k, stride, pad)
                # dW(c_out, ck) += dy_i(c_out, t_out) @ col(ck, t_out)^T
                gemm_rm(c'N', c'T', c_out, ck, t_out, <real>1.0,
                        &dy[i, 0, 0], t_out, &col[0, 0], t_out,
                        <real>1.0, &dw[0, 0, 0])
            if need_dx:
                # dcol(ck, t_out) = w(c_out, ck)^T @ dy_i(c_out, t_out)
                gemm_rm(c'T', c'N', ck, t_out, c_out, <real>1.0,
                        &w[0, 0, 0], ck, &dy[i, 0, 0], t_out,
                        <real>0.0, &dcol[0, 0])
                col2im_add(dcol, dx[i], k, stride, pad)
    return dx_arr, dw_arr


def maxpool1d_forward(real[:, :, ::1] x, int k, int stride, bint ceil_mode):
    cdef int n = x.shape[0], c = x.shape[1], t = x.shape[2]
    cdef int t_out
    if ceil_mode:
        t_out = -((-(t - k)) // stride) + 1
    else:
        t_out = (t - k) // stride + 1
    dtype = np.float32 if real is float else np.float64
    y_arr = np.empty((n, c, t_out), dtype=dtype)
    idx_arr = np.empty((n, c, t_out), dtype=np.int64)
    cdef real[:, :, ::1] y = y_arr
    cdef long long[:, :, ::1] idx = idx_arr
    cdef int i, j, p, q, start, end, best
    cdef real best_val
    with nogil:
        for i in range(n):
            for j in range(c):
                for p in range(t_out):
                    start = p * stride
                    end = start + k
                    if end > t:
                        end = t
                    best = start
                    best_val = x[i, j, start]
                    for q in range(start + 1, end):
                        if x[i, j, q] > best_val:
                            best_val = x[i, j, q]
                            best = q
                    y[i, j, p] = best_val
                    idx[i, j, p] = best
    return y_arr, idx_arr


def maxpool1d_backward(long long[:, :, ::1] idx, real[:, :, ::1] dy, int t):
    cdef int n = dy.shape[0], c = dy.shape[1], t_out = dy.shape[2]
    dtype = np.float32 if real is float else np.float64
    dx_arr = np.zeros((n, c, t), dtype=dtype)
    cdef real[:, :, ::1] dx = dx_arr
    cdef int i, j, p
    with nogil:
        for i in range(n):
            for j in range(c):
                for p in range(t_out):
                    dx[i, j, idx[i, j, p]] += dy[i, j, p]
    return dx_arr
