# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled float32 kernels: attention (BLAS gemms + fused masked softmax),
layer norm, GELU, and the AdamW update. Signatures mirror _npkernels."""

import numpy as np

cimport numpy as cnp
from libc.math cimport sqrtf, INFINITY
cimport scipy.linalg.cython_blas as blas

cnp.import_array()

cdef float C_GELU = <float> 0.7978845608028654
cdef float C_CUBE = <float> 0.044715
cdef float HALF = <float> 0.5
cdef float ONE = <float> 1.0
cdef float ZERO = <float> 0.0
cdef float TWO = <float> 2.0
cdef float THREE = <float> 3.0


cdef union _f32bits:
    float f
    unsigned int u


cdef inline float fast_expf(float x) noexcept nogil:
    """Cephes-style expf (poly degree 5 plus exponent scaling), ~2 ulp.

    Branch-free so the hot softmax loop auto-vectorizes instead of calling
    libm.
    """
    cdef float z, r, fn
    cdef int n
    cdef _f32bits bits
    x = min(max(x, <float> -87.0), <float> 88.0)
    z = x * <float> 1.442695040888963
    fn = <float> (<int> (z + (<float> 12582912.0))) - <float> 12582912.0  # round-to-nearest
    n = <int> fn
    x -= fn * <float> 0.693359375
    x -= fn * <float> -2.12194440e-4
    r = <float> 1.9875691500e-4
    r = r * x + <float> 1.3981999507e-3
    r = r * x + <float> 8.3334519073e-3
    r = r * x + <float> 4.1665795894e-2
    r = r * x + <float> 1.6666665459e-1
    r = r * x + <float> 5.0000001201e-1
    r = r * x * x + x + ONE
    bits.u = <unsigned int> ((n + 127) << 23)
    return r * bits.f


cdef inline float fast_tanhf(float x) noexcept nogil:
    cdef float e
    if x > <float> 9.0:
        return ONE
    if x < <float> -9.0:
        return -ONE
    e = fast_expf(TWO * x)
    return (e - ONE) / (e + ONE)


cdef void rm_gemm(bint transa, bint transb, int M, int N, int K,
                  float alpha, const float* A, int lda,
                  const float* B, int ldb,
                  float beta, float* C, int ldc) noexcept nogil:
    """Row-major C[M,N] = alpha*op(A)@op(B) + beta*C via column-major BLAS.

    lda/ldb/ldc are row strides of the row-major arrays.
    """
    cdef char ca = b'T' if transa else b'N'
    cdef char cb = b'T' if transb else b'N'
    blas.sgemm(&cb, &ca, &N, &M, &K, &alpha,
               <float*> B, &ldb, <float*> A, &lda, &beta, C, &ldc)


def gelu_fwd(const float[:, ::1] x not None):
    cdef Py_ssize_t n = x.shape[0] * x.shape[1]
    out = np.empty((x.shape[0], x.shape[1]), dtype=np.float32)
    cdef float[:, ::1] y = out
    cdef const float* xp = &x[0, 0]
    cdef float* yp = &y[0, 0]
    cdef Py_ssize_t i
    cdef float v, u
    with nogil:
        for i in range(n):
            v = xp[i]
            u = C_GELU * (v + C_CUBE * v * v * v)
            yp[i] = HALF * v * (ONE + fast_tanhf(u))
    return out


def gelu_bwd(const float[:, ::1] x not None, const float[:, ::1] dy not None):
    cdef Py_ssize_t n = x.shape[0] * x.shape[1]
    out = np.empty((x.shape[0], x.shape[1]), dtype=np.float32)
    cdef float[:, ::1] dx = out
    cdef const float* xp = &x[0, 0]
    cdef const float* dyp = &dy[0, 0]
    cdef float* dxp = &dx[0, 0]
    cdef Py_ssize_t i
    cdef float v, u, t, du
    with nogil:
        for i in range(n):
            v = xp[i]
            u = C_GELU * (v + C_CUBE * v * v * v)
            t = fast_tanhf(u)
            du = C_GELU * (ONE + THREE * C_CUBE * v * v)
            dxp[i] = dyp[i] * (HALF * (ONE + t) + HALF * v * (ONE - t * t) * du)
    return out


def layernorm_fwd(const float[:, ::1] x not None, const float[::1] g not None,
                  const float[::1] b not None, double eps):
    cdef Py_ssize_t T = x.shape[0], d = x.shape[1]
    y_arr = np.empty((T, d), dtype=np.float32)
    mean_arr = np.empty(T, dtype=np.float32)
    rstd_arr = np.empty(T, dtype=np.float32)
    cdef float[:, ::1] y = y_arr
    cdef float[::1] mean = mean_arr, rstd = rstd_arr
    cdef Py_ssize_t i, j
    cdef float mu, var, rs, feps = <float> eps
    with nogil:
        for i in range(T):
            mu = ZERO
            for j in range(d):
                mu += x[i, j]
            mu /= d
            var = ZERO
            for j in range(d):
                var += (x[i, j] - mu) * (x[i, j] - mu)
            var /= d
            rs = ONE / sqrtf(var + feps)
            mean[i] = mu
            rstd[i] = rs
            for j in range(d):
                y[i, j] = (x[i, j] - mu) * rs * g[j] + b[j]
    return y_arr, mean_arr, rstd_arr


def layernorm_bwd(const float[:, ::1] x not None, const float[::1] g not None,
                  const float[::1] mean not None, const float[::1] rstd not None,
                  const float[:, ::1] dy not None):
    cdef Py_ssize_t T = x.shape[0], d = x.shape[1]
    dx_arr = np.empty((T, d), dtype=np.float32)
    dg_arr = np.zeros(d, dtype=np.float32)
    db_arr = np.zeros(d, dtype=np.float32)
    cdef float[:, ::1] dx = dx_arr
    cdef float[::1] dg = dg_arr, db = db_arr
    cdef Py_ssize_t i, j
    cdef float xhat, ghat, m1, m2
    with nogil:
        for i in range(T):
            m1 = ZERO
            m2 = ZERO
            for j in range(d):
                xhat = (x[i, j] - mean[i]) * rstd[i]
                ghat = dy[i, j] * g[j]
                m1 += ghat
                m2 += ghat * xhat
                dg[j] += dy[i, j] * xhat
                db[j] += dy[i, j]
            m1 /= d
            m2 /= d
            for j in range(d):
                xhat = (x[i, j] - mean[i]) * rstd[i]
                dx[i, j] = (dy[i, j] * g[j] - m1 - xhat * m2) * rstd[i]
    return dx_arr, dg_arr, db_arr


def mha_fwd(const float[:, ::1] q not None, const float[:, ::1] k not None,
            const float[:, ::1] v not None, int n_heads, bint causal):
    cdef int T = <int> q.shape[0], d = <int> q.shape[1]
    cdef int dh = d // n_heads
    cdef float scale = ONE / sqrtf(<float> dh)
    out_arr = np.empty((T, d), dtype=np.float32)
    probs_arr = np.empty((n_heads, T, T), dtype=np.float32)
    cdef float[:, ::1] out = out_arr
    cdef float[:, :, ::1] probs = probs_arr
    cdef int h, i, j, lim
    cdef float mx, s, z
    cdef const float* qp
    cdef const float* kp
    cdef const float* vp
    cdef float* pp
    cdef float* op
    with nogil:
        for h in range(n_heads):
            qp = &q[0, h * dh]
            kp = &k[0, h * dh]
            vp = &v[0, h * dh]
            pp = &probs[h, 0, 0]
            op = &out[0, h * dh]
            # scores = scale * Q_h @ K_h^T
            rm_gemm(False, True, T, T, dh, scale, qp, d, kp, d, ZERO, pp, T)
            for i in range(T):
                lim = i + 1 if causal else T
                mx = -INFINITY
                for j in range(lim):
                    if pp[i * T + j] > mx:
                        mx = pp[i * T + j]
                z = ZERO
                for j in range(lim):
                    s = fast_expf(pp[i * T + j] - mx)
                    pp[i * T + j] = s
                    z += s
                for j in range(lim):
                    pp[i * T + j] /= z
                for j in range(lim, T):
                    pp[i * T + j] = ZERO
            # out_h = P @ V_h
            rm_gemm(False, False, T, dh, T, ONE, pp, T, vp, d, ZERO, op, d)
    return out_arr, probs_arr


def mha_bwd(const float[:, ::1] q not None, const float[:, ::1] k not None,
            const float[:, ::1] v not None, const float[:, :, ::1] probs not None,
            const float[:, ::1] dout not None, int n_heads, bint causal):
    cdef int T = <int> q.shape[0], d = <int> q.shape[1]
    cdef int dh = d // n_heads
    cdef float scale = ONE / sqrtf(<float> dh)
    dq_arr = np.empty((T, d), dtype=np.float32)
    dk_arr = np.empty((T, d), dtype=np.float32)
    dv_arr = np.empty((T, d), dtype=np.float32)
    ds_arr = np.empty((T, T), dtype=np.float32)
    cdef float[:, ::1] dq = dq_arr, dk = dk_arr, dv = dv_arr, ds = ds_arr
    cdef int h, i, j, lim
    cdef float rowsum
    cdef const float* pp
    cdef const float* dop
    cdef float* dsp = &ds[0, 0]
    with nogil:
        for h in range(n_heads):
            pp = &probs[h, 0, 0]
            dop = &dout[0, h * dh]
            # dV_h = P^T @ dOut_h
            rm_gemm(True, False, T, dh, T, ONE, pp, T, dop, d, ZERO, &dv[0, h * dh], d)
            # dP = dOut_h @ V_h^T
            rm_gemm(False, True, T, T, dh, ONE, dop, d, &v[0, h * dh], d, ZERO, dsp, T)
            # dS = P * (dP - rowsum(dP * P))
            for i in range(T):
                lim = i + 1 if causal else T
                rowsum = ZERO
                for j in range(lim):
                    rowsum += dsp[i * T + j] * pp[i * T + j]
                for j in range(lim):
                    dsp[i * T + j] = pp[i * T + j] * (dsp[i * T + j] - rowsum)
                for j in range(lim, T):
                    dsp[i * T + j] = ZERO
            # dQ_h = scale * dS @ K_h ; dK_h = scale * dS^T @ Q_h
            rm_gemm(False, False, T, dh, T, scale, dsp, T, &k[0, h * dh], d, ZERO, &dq[0, h * dh], d)
            rm_gemm(True, False, T, dh, T, scale, dsp, T, &q[0, h * dh], d, ZERO, &dk[0, h * dh], d)
    return dq_arr, dk_arr, dv_arr


def adamw_update(p, grad, m, v, long t, double lr, double beta1, double beta2,
                 double eps, double weight_decay):
    """In-place fused AdamW on C-contiguous float32 arrays of any rank."""
    _adamw_flat(p.reshape(-1), grad.reshape(-1), m.reshape(-1), v.reshape(-1),
                t, lr, beta1, beta2, eps, weight_decay)


def _adamw_flat(float[::1] p not None, const float[::1] grad not None,
                float[::1] m not None, float[::1] v not None,
                long t, double lr, double beta1, double beta2,
                double eps, double weight_decay):
    cdef Py_ssize_t n = p.shape[0]
    cdef float b1 = <float> beta1, b2 = <float> beta2
    cdef float flr = <float> lr, feps = <float> eps
    cdef float bc1 = <float> (1.0 - beta1 ** t)
    cdef float bc2 = <float> (1.0 - beta2 ** t)
    cdef float decay = <float> (1.0 - lr * weight_decay)
    cdef bint do_decay = weight_decay != 0.0
    cdef Py_ssize_t i
    cdef float g, mh, vh
    with nogil:
        for i in range(n):
            g = grad[i]
            m[i] = b1 * m[i] + (ONE - b1) * g
            v[i] = b2 * v[i] + (ONE - b2) * g * g
            mh = m[i] / bc1
            vh = v[i] / bc2
            if do_decay:
                p[i] *= decay
            p[i] -= flr * mh / (sqrtf(vh) + feps)
