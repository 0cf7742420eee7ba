# cython: boundscheck=False, wraparound=False, cdivision=True
"""Fused float32 MLP forward: BLAS sgemm per layer with bias add, layer norm
and ReLU folded into one pass over the activations."""

from libc.math cimport sqrtf

import numpy as np

cimport numpy as cnp
from scipy.linalg.cython_blas cimport sgemm

cnp.import_array()

DEF LN_EPS = 1e-5


cdef void _gemm_rowmajor(const float* A, const float* B, float* C,
                         int m, int k, int n) noexcept nogil:
    # Row-major C(m,n) = A(m,k) @ B(k,n) via Fortran sgemm on the transposes.
    cdef char trans = b'N'
    cdef float alpha = 1.0, beta = 0.0
    cdef int mm = n, nn = m, kk = k, lda = n, ldb = k, ldc = n
    sgemm(&trans, &trans, &mm, &nn, &kk, &alpha,
          <float*> B, &lda, <float*> A, &ldb, &beta, C, &ldc)


cdef void _bias_ln_relu(float* z, const float* b, const float* gain,
                        const float* ln_bias, int batch, int width,
                        bint use_ln) noexcept nogil:
    cdef int i, j
    cdef float mean, var, inv_std, v
    cdef float* row
    for i in range(batch):
        row = z + i * width
        if use_ln:
            mean = 0.0
            for j in range(width):
                row[j] += b[j]
                mean += row[j]
            mean /= width
            var = 0.0
            for j in range(width):
                row[j] -= mean
                var += row[j] * row[j]
            var /= width
            inv_std = 1.0 / sqrtf(var + LN_EPS)
            for j in range(width):
                v = row[j] * inv_std * gain[j] + ln_bias[j]
                row[j] = v if v > 0.0 else 0.0
        else:
            for j in range(width):
                v = row[j] + b[j]
                row[j] = v if v > 0.0 else 0.0


cdef void _bias_only(float* z, const float* b, int batch, int width) noexcept nogil:
    cdef int i, j
    cdef float* row
    for i in range(batch):
        row = z + i * width
        for j in range(width):
            row[j] += b[j]


def mlp_forward_f32(cnp.ndarray[float, ndim=2, mode="c"] x, list layers,
                    bint use_layer_norm):
    """Forward through packed ``(W, b, gain, ln_bias)`` float32 layers."""
    cdef int batch = x.shape[0]
    cdef int last = len(layers) - 1
    cdef cnp.ndarray[float, ndim=2, mode="c"] h = x
    cdef cnp.ndarray[float, ndim=2, mode="c"] out
    cdef cnp.ndarray[float, ndim=2, mode="c"] W
    cdef cnp.ndarray[float, ndim=1, mode="c"] b, gain, ln_bias
    cdef int i, fan_in, fan_out
    cdef bint ln

    for i in range(last + 1):
        W = layers[i][0]
        b = layers[i][1]
        fan_in = W.shape[0]
        fan_out = W.shape[1]
        if h.shape[1] != fan_in:
            raise ValueError("layer width mismatch")
        out = np.empty((batch, fan_out), dtype=np.float32)
        if batch > 0:
            _gemm_rowmajor(<const float*> h.data, <const float*> W.data,
                           <float*> out.data, batch, fan_in, fan_out)
        if i < last:
            ln = use_layer_norm
            if ln:
                gain = layers[i][2]
                ln_bias = layers[i][3]
                _bias_ln_relu(<float*> out.data, <const float*> b.data,
                              <const float*> gain.data, <const float*> ln_bias.data,
                              batch, fan_out, True)
            else:
                _bias_ln_relu(<float*> out.data, <const float*> b.data,
                              NULL, NULL, batch, fan_out, False)
        else:
            _bias_only(<float*> out.data, <const float*> b.data, batch, fan_out)
        h = out
    return np.asarray(h)
