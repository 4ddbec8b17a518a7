# Compiled hot loops. Signatures mirror triframe._pykernels exactly; callers
# allocate every output buffer.

import numpy as np

from cython.view cimport array as cvarray
from scipy.linalg.cython_blas cimport dgemm, sgemm

ctypedef fused real:
    float
    double

# rows of the unfolded image processed per GEMM; keeps the block cache resident
cdef enum:
    CHUNK = 512


cdef inline void _gemm(char* ta, char* tb, int m, int n, int kk, real* a, int lda,
                       real* b, int ldb, real beta, real* c, int ldc) noexcept nogil:
    cdef float one_f = 1.0, beta_f = beta
    cdef double one_d = 1.0, beta_d = beta
    if real is float:
        sgemm(ta, tb, &m, &n, &kk, &one_f, a, &lda, b, &ldb, &beta_f, c, &ldc)
    else:
        dgemm(ta, tb, &m, &n, &kk, &one_d, a, &lda, b, &ldb, &beta_d, c, &ldc)


cdef inline void _gather(real[:, :, ::1] hwc, int k, Py_ssize_t W, Py_ssize_t r0,
                         Py_ssize_t r1, real* dst) noexcept nogil:
    # unfold pixels r0..r1 (row-major order) from the padded channels-last buffer
    cdef Py_ssize_t C = hwc.shape[2], r, h, w, ky, j
    cdef const real* src
    for r in range(r0, r1):
        h = r // W
        w = r - h * W
        for ky in range(k):
            src = &hwc[h + ky, w, 0]
            for j in range(k * C):
                dst[j] = src[j]
            dst = dst + k * C


cdef inline void _scatter(real[:, :, ::1] hwc, int k, Py_ssize_t W, Py_ssize_t r0,
                          Py_ssize_t r1, const real* src) noexcept nogil:
    cdef Py_ssize_t C = hwc.shape[2], r, h, w, ky, j
    cdef real* dst
    for r in range(r0, r1):
        h = r // W
        w = r - h * W
        for ky in range(k):
            dst = &hwc[h + ky, w, 0]
            for j in range(k * C):
                dst[j] += src[j]
            src = src + k * C


cdef _padded_hwc(const real[:, :, ::1] x, int k):
    cdef Py_ssize_t C = x.shape[0], H = x.shape[1], W = x.shape[2], p = k // 2
    cdef Py_ssize_t c, h, w
    cdef real[:, :, ::1] hwc
    if real is float:
        hwc = np.zeros((H + 2 * p, W + 2 * p, C), dtype=np.float32)
    else:
        hwc = np.zeros((H + 2 * p, W + 2 * p, C), dtype=np.float64)
    with nogil:
        for h in range(H):
            for w in range(W):
                for c in range(C):
                    hwc[h + p, w + p, c] = x[c, h, w]
    return hwc


def im2col(const real[:, :, ::1] x, int k, real[:, ::1] out):
    """Unfold a zero-padded (C, H, W) image into (H*W, k*k*C) rows.

    Row ``h*W + w`` holds the k-by-k neighbourhood of pixel (h, w), ordered
    (ky, kx, c) so each kernel row is one contiguous copy from a padded
    channels-last buffer.
    """
    cdef Py_ssize_t C = x.shape[0], H = x.shape[1], W = x.shape[2]
    if out.shape[0] != H * W or out.shape[1] != k * k * C:
        raise ValueError("im2col: output buffer has the wrong shape")
    cdef real[:, :, ::1] hwc = _padded_hwc(x, k)
    with nogil:
        _gather(hwc, k, W, 0, H * W, &out[0, 0])


def col2im(const real[:, ::1] cols, int k, real[:, :, ::1] out):
    """Adjoint of im2col: scatter-add (H*W, k*k*C) rows into a (C, H, W) buffer."""
    cdef Py_ssize_t C = out.shape[0], H = out.shape[1], W = out.shape[2]
    cdef Py_ssize_t p = k // 2, c, h, w
    if cols.shape[0] != H * W or cols.shape[1] != k * k * C:
        raise ValueError("col2im: column buffer has the wrong shape")
    cdef real[:, :, ::1] acc
    if real is float:
        acc = np.zeros((H + 2 * p, W + 2 * p, C), dtype=np.float32)
    else:
        acc = np.zeros((H + 2 * p, W + 2 * p, C), dtype=np.float64)
    with nogil:
        _scatter(acc, k, W, 0, H * W, &cols[0, 0])
        for c in range(C):
            for h in range(H):
                for w in range(W):
                    out[c, h, w] = acc[h + p, w + p, c]


def conv_forward(const real[:, :, ::1] x, const real[:, ::1] wmat, int k, real[:, :, ::1] out):
    """Same-size correlation of a (C, H, W) image with a (Cout, k*k*C) weight matrix.

    The unfolded image is produced CHUNK pixels at a time and multiplied
    straight into the (Cout, H, W) output.
    """
    cdef Py_ssize_t C = x.shape[0], H = x.shape[1], W = x.shape[2]
    cdef Py_ssize_t Cout = wmat.shape[0], K = k * k * C, HW = H * W
    cdef Py_ssize_t r0, r1
    if wmat.shape[1] != K or out.shape[0] != Cout or out.shape[1] != H or out.shape[2] != W:
        raise ValueError("conv_forward: weight or output shape does not match the input")
    cdef real[:, :, ::1] hwc = _padded_hwc(x, k)
    cdef real[:, ::1] chunk, pix
    cdef Py_ssize_t rows = min(<Py_ssize_t>CHUNK, HW), i, o
    if real is float:
        chunk = np.empty((rows, K), dtype=np.float32)
        pix = np.empty((rows, Cout), dtype=np.float32)
    else:
        chunk = np.empty((rows, K), dtype=np.float64)
        pix = np.empty((rows, Cout), dtype=np.float64)
    cdef real* wp = <real*>&wmat[0, 0]
    cdef real* optr = &out[0, 0, 0]
    with nogil:
        r0 = 0
        while r0 < HW:
            r1 = min(r0 + CHUNK, HW)
            _gather(hwc, k, W, r0, r1, &chunk[0, 0])
            # pix (rows, Cout) = chunk @ wmat.T
            _gemm(b"T", b"N", <int>Cout, <int>(r1 - r0), <int>K, wp, <int>K,
                  &chunk[0, 0], <int>K, 0.0, &pix[0, 0], <int>Cout)
            for o in range(Cout):
                for i in range(r1 - r0):
                    optr[o * HW + r0 + i] = pix[i, o]
            r0 = r1


def conv_backward(const real[:, :, ::1] g, const real[:, :, ::1] x, const real[:, ::1] wmat,
                  int k, real[:, ::1] grad_w, real[:, :, ::1] grad_x=None):
    """Accumulate the weight gradient into ``grad_w`` and write the input gradient."""
    cdef Py_ssize_t C = x.shape[0], H = x.shape[1], W = x.shape[2]
    cdef Py_ssize_t Cout = wmat.shape[0], K = k * k * C, HW = H * W, p = k // 2
    cdef Py_ssize_t r0, r1, c, h, w
    cdef bint want_x = grad_x is not None
    if wmat.shape[1] != K or g.shape[0] != Cout or g.shape[1] != H or g.shape[2] != W \
            or grad_w.shape[0] != Cout or grad_w.shape[1] != K:
        raise ValueError("conv_backward: gradient or weight shape does not match the input")
    if want_x and (grad_x.shape[0] != C or grad_x.shape[1] != H or grad_x.shape[2] != W):
        raise ValueError("conv_backward: input-gradient buffer has the wrong shape")
    cdef real[:, :, ::1] hwc = _padded_hwc(x, k)
    cdef real[:, :, ::1] acc
    cdef real[:, ::1] chunk, gt
    cdef Py_ssize_t rows = min(<Py_ssize_t>CHUNK, HW), i, o
    cdef const real* gflat = &g[0, 0, 0]
    if real is float:
        chunk = np.empty((rows, K), dtype=np.float32)
        gt = np.empty((rows, Cout), dtype=np.float32)
        acc = np.zeros((H + 2 * p, W + 2 * p, C), dtype=np.float32)
    else:
        chunk = np.empty((rows, K), dtype=np.float64)
        gt = np.empty((rows, Cout), dtype=np.float64)
        acc = np.zeros((H + 2 * p, W + 2 * p, C), dtype=np.float64)
    cdef real* wp = <real*>&wmat[0, 0]
    with nogil:
        r0 = 0
        while r0 < HW:
            r1 = min(r0 + CHUNK, HW)
            _gather(hwc, k, W, r0, r1, &chunk[0, 0])
            for i in range(r1 - r0):
                for o in range(Cout):
                    gt[i, o] = gflat[o * HW + r0 + i]
            # grad_w (Cout, K) += gt.T @ chunk
            _gemm(b"N", b"T", <int>K, <int>Cout, <int>(r1 - r0), &chunk[0, 0], <int>K,
                  &gt[0, 0], <int>Cout, 1.0, &grad_w[0, 0], <int>K)
            if want_x:
                # chunk (rows, K) = gt @ wmat
                _gemm(b"N", b"N", <int>K, <int>(r1 - r0), <int>Cout, wp, <int>K,
                      &gt[0, 0], <int>Cout, 0.0, &chunk[0, 0], <int>K)
                _scatter(acc, k, W, r0, r1, &chunk[0, 0])
            r0 = r1
        if want_x:
            for c in range(C):
                for h in range(H):
                    for w in range(W):
                        grad_x[c, h, w] = acc[h + p, w + p, c]


def leaky_relu(const real[::1] x, double slope, real[::1] out):
    cdef Py_ssize_t i, n = x.shape[0]
    cdef real a = <real>slope, v, w
    if out.shape[0] != n:
        raise ValueError("leaky_relu: output buffer has the wrong size")
    with nogil:
        for i in range(n):
            # branch-free: for 0 <= a < 1 the larger of v and a*v is the answer
            v = x[i]
            w = a * v
            out[i] = v if v > w else w
    return None


def leaky_relu_backward(const real[::1] g, const real[::1] x, double slope, real[::1] out):
    cdef Py_ssize_t i, n = x.shape[0]
    cdef real a = <real>slope, one = 1
    if g.shape[0] != n or out.shape[0] != n:
        raise ValueError("leaky_relu_backward: buffers differ in size")
    with nogil:
        for i in range(n):
            out[i] = g[i] * (one if x[i] >= 0 else a)
    return None


def filter_valid(const double[:, :, ::1] x, const double[::1] g, double[:, :, ::1] out):
    """Separable valid-region correlation of each (H, W) plane with g (x) g."""
    cdef Py_ssize_t N = x.shape[0], H = x.shape[1], W = x.shape[2]
    cdef Py_ssize_t k = g.shape[0]
    cdef Py_ssize_t Ho = H - k + 1, Wo = W - k + 1
    cdef Py_ssize_t n, i, j, t
    if Ho < 1 or Wo < 1:
        raise ValueError("filter_valid: plane smaller than window")
    if out.shape[0] != N or out.shape[1] != Ho or out.shape[2] != Wo:
        raise ValueError("filter_valid: output buffer has the wrong shape")
    cdef double[:, ::1] tmp = cvarray_2d(H, Wo)
    with nogil:
        for n in range(N):
            for i in range(H):
                for j in range(Wo):
                    tmp[i, j] = 0
                for t in range(k):
                    for j in range(Wo):
                        tmp[i, j] += g[t] * x[n, i, j + t]
            for i in range(Ho):
                for j in range(Wo):
                    out[n, i, j] = 0
                for t in range(k):
                    for j in range(Wo):
                        out[n, i, j] += g[t] * tmp[i + t, j]


def filter_valid_adjoint(const double[:, :, ::1] gy, const double[::1] g, double[:, :, ::1] out):
    """Transpose of filter_valid: spread (Ho, Wo) gradients onto (H, W) planes."""
    cdef Py_ssize_t N = out.shape[0], H = out.shape[1], W = out.shape[2]
    cdef Py_ssize_t k = g.shape[0]
    cdef Py_ssize_t Ho = H - k + 1, Wo = W - k + 1
    cdef Py_ssize_t n, i, j, t
    if gy.shape[0] != N or gy.shape[1] != Ho or gy.shape[2] != Wo:
        raise ValueError("filter_valid_adjoint: gradient has the wrong shape")
    cdef double[:, ::1] tmp = cvarray_2d(H, Wo)
    with nogil:
        for n in range(N):
            for i in range(H):
                for j in range(Wo):
                    tmp[i, j] = 0
            for i in range(Ho):
                for t in range(k):
                    for j in range(Wo):
                        tmp[i + t, j] += g[t] * gy[n, i, j]
            for i in range(H):
                for j in range(W):
                    out[n, i, j] = 0
                for t in range(k):
                    for j in range(Wo):
                        out[n, i, j + t] += g[t] * tmp[i, j]


cdef inline void _hpass(const double* row, const double[::1] g, Py_ssize_t Wo,
                        double* dst) noexcept nogil:
    cdef Py_ssize_t j, t
    for j in range(Wo):
        dst[j] = 0
    for t in range(g.shape[0]):
        for j in range(Wo):
            dst[j] += g[t] * row[j + t]


def ssim_moments(const double[:, :, ::1] x, const double[:, :, ::1] y, const double[::1] g,
                 double[:, :, ::1] out):
    """Windowed (mx, my, Exx, Eyy, Exy) of N plane pairs, stacked as five N-blocks."""
    cdef Py_ssize_t N = x.shape[0], H = x.shape[1], W = x.shape[2]
    cdef Py_ssize_t k = g.shape[0]
    cdef Py_ssize_t Ho = H - k + 1, Wo = W - k + 1
    cdef Py_ssize_t n, i, j, t, q
    if Ho < 1 or Wo < 1:
        raise ValueError("ssim_moments: plane smaller than window")
    if y.shape[0] != N or y.shape[1] != H or y.shape[2] != W:
        raise ValueError("ssim_moments: planes differ in shape")
    if out.shape[0] != 5 * N or out.shape[1] != Ho or out.shape[2] != Wo:
        raise ValueError("ssim_moments: output buffer has the wrong shape")
    cdef double[:, ::1] prod = cvarray_2d(5, W)
    cdef double[:, ::1] tmp = cvarray_2d(5 * H, Wo)
    cdef double gt
    with nogil:
        for n in range(N):
            for i in range(H):
                for j in range(W):
                    prod[0, j] = x[n, i, j]
                    prod[1, j] = y[n, i, j]
                    prod[2, j] = x[n, i, j] * x[n, i, j]
                    prod[3, j] = y[n, i, j] * y[n, i, j]
                    prod[4, j] = x[n, i, j] * y[n, i, j]
                for q in range(5):
                    _hpass(&prod[q, 0], g, Wo, &tmp[q * H + i, 0])
            for q in range(5):
                for i in range(Ho):
                    for j in range(Wo):
                        out[q * N + n, i, j] = 0
                    for t in range(k):
                        gt = g[t]
                        for j in range(Wo):
                            out[q * N + n, i, j] += gt * tmp[q * H + i + t, j]
    return None


def ssim_moments_adjoint(const double[:, :, ::1] gm, const double[:, :, ::1] x,
                         const double[:, :, ::1] y, const double[::1] g, double[:, :, ::1] out):
    """Pull (g_mx, g_Exx, g_Exy) blocks back onto the first image of each pair.

    out = F'(g_mx) + 2 x F'(g_Exx) + y F'(g_Exy), where F' is the adjoint filter.
    """
    cdef Py_ssize_t N = x.shape[0], H = x.shape[1], W = x.shape[2]
    cdef Py_ssize_t k = g.shape[0]
    cdef Py_ssize_t Ho = H - k + 1, Wo = W - k + 1
    cdef Py_ssize_t n, i, j, t, q
    if gm.shape[0] != 3 * N or gm.shape[1] != Ho or gm.shape[2] != Wo:
        raise ValueError("ssim_moments_adjoint: gradient has the wrong shape")
    if y.shape[0] != N or y.shape[1] != H or y.shape[2] != W \
            or out.shape[0] != N or out.shape[1] != H or out.shape[2] != W:
        raise ValueError("ssim_moments_adjoint: planes differ in shape")
    cdef double[:, ::1] tmp = cvarray_2d(3 * H, Wo)
    cdef double[:, ::1] full = cvarray_2d(3, W)
    cdef double gt, v
    with nogil:
        for n in range(N):
            for q in range(3):
                for i in range(H):
                    for j in range(Wo):
                        tmp[q * H + i, j] = 0
                for i in range(Ho):
                    for t in range(k):
                        gt = g[t]
                        for j in range(Wo):
                            tmp[q * H + i + t, j] += gt * gm[q * N + n, i, j]
            for i in range(H):
                for q in range(3):
                    for j in range(W):
                        full[q, j] = 0
                    for t in range(k):
                        gt = g[t]
                        for j in range(Wo):
                            full[q, j + t] += gt * tmp[q * H + i, j]
                for j in range(W):
                    out[n, i, j] = full[0, j] + 2.0 * x[n, i, j] * full[1, j] + y[n, i, j] * full[2, j]
    return None


def ssim_maps(const double[:, :, ::1] m, double c1, double c2,
              double[:, :, ::1] ssim_out, double[:, :, ::1] cs_out):
    """SSIM and contrast-structure maps from stacked moments (mx, my, Exx, Eyy, Exy)."""
    cdef Py_ssize_t N5 = m.shape[0], H = m.shape[1], W = m.shape[2]
    cdef Py_ssize_t N = N5 // 5
    cdef Py_ssize_t n, i, j
    cdef double mx, my, a1, b1, a2, b2, cs
    if N5 != 5 * N or ssim_out.shape[0] != N or cs_out.shape[0] != N \
            or ssim_out.shape[1] != H or ssim_out.shape[2] != W \
            or cs_out.shape[1] != H or cs_out.shape[2] != W:
        raise ValueError("ssim_maps: buffer shapes do not match the moment stack")
    with nogil:
        for n in range(N):
            for i in range(H):
                for j in range(W):
                    mx = m[n, i, j]
                    my = m[N + n, i, j]
                    a1 = 2.0 * mx * my + c1
                    b1 = mx * mx + my * my + c1
                    a2 = 2.0 * (m[4 * N + n, i, j] - mx * my) + c2
                    b2 = (m[2 * N + n, i, j] - mx * mx) + (m[3 * N + n, i, j] - my * my) + c2
                    cs = a2 / b2
                    cs_out[n, i, j] = cs
                    ssim_out[n, i, j] = (a1 / b1) * cs


def ssim_map_grad(const double[:, :, ::1] m, double c1, double c2,
                  const double[::1] ws, const double[::1] wc, double[:, :, ::1] out):
    """Gradient of sum_n ws[n]*sum(ssim_n) + wc[n]*sum(cs_n) wrt (mx, Exx, Exy).

    ``out`` is (3N, H, W) laid out as the three blocks g_mx, g_exx, g_exy.
    """
    cdef Py_ssize_t N5 = m.shape[0], H = m.shape[1], W = m.shape[2]
    cdef Py_ssize_t N = N5 // 5
    cdef Py_ssize_t n, i, j
    cdef double mx, my, a1, b1, a2, b2, cs, s, c, sc
    if N5 != 5 * N or ws.shape[0] != N or wc.shape[0] != N or out.shape[0] != 3 * N \
            or out.shape[1] != H or out.shape[2] != W:
        raise ValueError("ssim_map_grad: buffer shapes do not match the moment stack")
    with nogil:
        for n in range(N):
            for i in range(H):
                for j in range(W):
                    mx = m[n, i, j]
                    my = m[N + n, i, j]
                    a1 = 2.0 * mx * my + c1
                    b1 = mx * mx + my * my + c1
                    a2 = 2.0 * (m[4 * N + n, i, j] - mx * my) + c2
                    b2 = (m[2 * N + n, i, j] - mx * mx) + (m[3 * N + n, i, j] - my * my) + c2
                    cs = a2 / b2
                    s = (a1 / b1) * cs * ws[n]
                    c = cs * wc[n]
                    sc = s + c
                    out[n, i, j] = (s * (2.0 * my / a1 - 2.0 * mx / b1)
                                    + sc * (2.0 * mx / b2 - 2.0 * my / a2))
                    out[N + n, i, j] = -sc / b2
                    out[2 * N + n, i, j] = 2.0 * sc / a2


cdef double[:, ::1] cvarray_2d(Py_ssize_t rows, Py_ssize_t cols):
    return cvarray(shape=(rows, cols), itemsize=sizeof(double), format="d")
