"""Pure-numpy implementations of the compiled kernels in ``_ckernels.pyx``.

Same call signatures: the caller allocates ``out`` and the kernel fills it.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(x, k, out):
    c, h, w = x.shape
    if out.shape != (h * w, k * k * c):
        raise ValueError("im2col: output buffer has the wrong shape")
    p = k // 2
    hwc = np.zeros((h + 2 * p, w + 2 * p, c), dtype=out.dtype)
    hwc[p:p + h, p:p + w] = x.transpose(1, 2, 0)
    windows = sliding_window_view(hwc, (k, k), axis=(0, 1))  # (H, W, C, k, k)
    out.reshape(h, w, k, k, c)[...] = windows.transpose(0, 1, 3, 4, 2)


def col2im(cols, k, out):
    c, h, w = out.shape
    if cols.shape != (h * w, k * k * c):
        raise ValueError("col2im: column buffer has the wrong shape")
    p = k // 2
    hwc = np.zeros((h + 2 * p, w + 2 * p, c), dtype=out.dtype)
    blocks = cols.reshape(h, w, k, k, c)
    for ky in range(k):
        for kx in range(k):
            hwc[ky:ky + h, kx:kx + w] += blocks[:, :, ky, kx]
    out[...] = hwc[p:p + h, p:p + w].transpose(2, 0, 1)


def conv_forward(x, wmat, k, out):
    c, h, w = x.shape
    cout = wmat.shape[0]
    if wmat.shape[1] != k * k * c or out.shape != (cout, h, w):
        raise ValueError("conv_forward: weight or output shape does not match the input")
    cols = np.empty((h * w, k * k * c), dtype=out.dtype)
    im2col(x, k, cols)
    out.reshape(cout, h * w)[...] = (cols @ wmat.T).T


def conv_backward(g, x, wmat, k, grad_w, grad_x=None):
    c, h, w = x.shape
    cout = wmat.shape[0]
    if wmat.shape[1] != k * k * c or g.shape != (cout, h, w) or grad_w.shape != wmat.shape:
        raise ValueError("conv_backward: gradient or weight shape does not match the input")
    if grad_x is not None and grad_x.shape != x.shape:
        raise ValueError("conv_backward: input-gradient buffer has the wrong shape")
    cols = np.empty((h * w, k * k * c), dtype=grad_w.dtype)
    im2col(x, k, cols)
    g2 = g.reshape(cout, h * w)
    grad_w += g2 @ cols
    if grad_x is not None:
        col2im(g2.T @ wmat, k, grad_x)


def leaky_relu(x, slope, out):
    np.copyto(out, np.where(x >= 0, x, x * out.dtype.type(slope)))


def leaky_relu_backward(g, x, slope, out):
    np.copyto(out, np.where(x >= 0, g, g * out.dtype.type(slope)))


def filter_valid(x, g, out):
    n, h, w = x.shape
    k = g.shape[0]
    ho, wo = h - k + 1, w - k + 1
    if ho < 1 or wo < 1:
        raise ValueError("filter_valid: plane smaller than window")
    if out.shape != (n, ho, wo):
        raise ValueError("filter_valid: output buffer has the wrong shape")
    tmp = np.zeros((n, h, wo))
    for t in range(k):
        tmp += g[t] * x[:, :, t:t + wo]
    out[...] = 0.0
    for t in range(k):
        out += g[t] * tmp[:, t:t + ho, :]


def filter_valid_adjoint(gy, g, out):
    n, h, w = out.shape
    k = g.shape[0]
    ho, wo = h - k + 1, w - k + 1
    if gy.shape != (n, ho, wo):
        raise ValueError("filter_valid_adjoint: gradient has the wrong shape")
    tmp = np.zeros((n, h, wo))
    for t in range(k):
        tmp[:, t:t + ho, :] += g[t] * gy
    out[...] = 0.0
    for t in range(k):
        out[:, :, t:t + wo] += g[t] * tmp


def _moments(m):
    n = m.shape[0] // 5
    if m.shape[0] != 5 * n:
        raise ValueError("moment stack must hold 5 blocks")
    return n, np.split(m, 5)


def ssim_maps(m, c1, c2, ssim_out, cs_out):
    n, (mx, my, exx, eyy, exy) = _moments(m)
    if ssim_out.shape != mx.shape or cs_out.shape != mx.shape:
        raise ValueError("ssim_maps: buffer shapes do not match the moment stack")
    a1 = 2.0 * mx * my + c1
    b1 = mx * mx + my * my + c1
    a2 = 2.0 * (exy - mx * my) + c2
    b2 = (exx - mx * mx) + (eyy - my * my) + c2
    cs_out[...] = a2 / b2
    ssim_out[...] = (a1 / b1) * cs_out


def ssim_map_grad(m, c1, c2, ws, wc, out):
    n, (mx, my, exx, eyy, exy) = _moments(m)
    if ws.shape != (n,) or wc.shape != (n,) or out.shape != (3 * n,) + mx.shape[1:]:
        raise ValueError("ssim_map_grad: buffer shapes do not match the moment stack")
    a1 = 2.0 * mx * my + c1
    b1 = mx * mx + my * my + c1
    a2 = 2.0 * (exy - mx * my) + c2
    b2 = (exx - mx * mx) + (eyy - my * my) + c2
    cs = a2 / b2
    s = (a1 / b1) * cs * ws[:, None, None]
    sc = s + cs * wc[:, None, None]
    out[:n] = s * (2.0 * my / a1 - 2.0 * mx / b1) + sc * (2.0 * mx / b2 - 2.0 * my / a2)
    out[n:2 * n] = -sc / b2
    out[2 * n:] = 2.0 * sc / a2


def ssim_moments(x, y, g, out):
    if y.shape != x.shape:
        raise ValueError("ssim_moments: planes differ in shape")
    filter_valid(np.concatenate([x, y, x * x, y * y, x * y]), g, out)


def ssim_moments_adjoint(gm, x, y, g, out):
    n, h, w = x.shape
    if y.shape != x.shape or out.shape != x.shape:
        raise ValueError("ssim_moments_adjoint: planes differ in shape")
    back = np.empty((3 * n, h, w))
    filter_valid_adjoint(gm, g, back)
    out[...] = back[:n] + 2.0 * x * back[n:2 * n] + y * back[2 * n:]
