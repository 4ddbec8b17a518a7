"""Dense tensor substrate: same-size convolution, leaky ReLU, Adam, gradient checks.

Tensors are plain numpy arrays. Convolution is cross-correlation (no kernel
flip) with zero padding of ``(K - 1) // 2`` so spatial size is preserved.
Images are ``(C, H, W)`` or batched ``(B, C, H, W)``; kernels are
``(Cout, Cin, K, K)``.
"""

from dataclasses import dataclass, field

import numpy as np

from . import backend
from .errors import NumericalError, ValidationError


def _compute_dtype(*arrays):
    dtype = np.result_type(*arrays)
    if dtype not in (np.float32, np.float64):
        dtype = np.dtype(np.float64)
    return dtype


def _as_batch(x):
    x = np.asarray(x)
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ValidationError(f"expected a (C, H, W) or (B, C, H, W) tensor, got shape {x.shape}")


def _check_conv_shapes(x, kernel, bias):
    if kernel.ndim != 4 or kernel.shape[2] != kernel.shape[3]:
        raise ValidationError(f"kernel must be (Cout, Cin, K, K), got {kernel.shape}")
    k = kernel.shape[2]
    if k % 2 == 0:
        raise ValidationError(f"kernel size must be odd, got {k}")
    if x.shape[1] != kernel.shape[1]:
        raise ValidationError(
            f"input has {x.shape[1]} channels but kernel expects Cin={kernel.shape[1]} "
            f"(input shape {x.shape[1:]}, kernel shape {kernel.shape})"
        )
    if x.shape[2] < 1 or x.shape[3] < 1:
        raise ValidationError(f"empty spatial extent {x.shape[2:]}")
    if bias is not None and np.shape(bias) != (kernel.shape[0],):
        raise ValidationError(f"bias must have shape ({kernel.shape[0]},), got {np.shape(bias)}")


def _kernel_matrix(kernel):
    # im2col rows are ordered (ky, kx, c)
    cout, cin, k, _ = kernel.shape
    return kernel.transpose(0, 2, 3, 1).reshape(cout, k * k * cin)


def conv2d_forward(x, kernel, bias=None):
    """Same-size 2-D cross-correlation.

    Args:
        x: ``(Cin, H, W)`` or ``(B, Cin, H, W)`` input.
        kernel: ``(Cout, Cin, K, K)`` weights, K odd.
        bias: optional ``(Cout,)`` vector.

    Returns:
        ``(Cout, H, W)`` (or batched) output in the promoted float dtype.
    """
    xb, squeeze = _as_batch(x)
    kernel = np.asarray(kernel)
    _check_conv_shapes(xb, kernel, bias)
    dtype = _compute_dtype(xb, kernel)
    xb = np.ascontiguousarray(xb, dtype=dtype)
    b, cin, h, w = xb.shape
    cout, _, k, _ = kernel.shape
    wmat = np.ascontiguousarray(_kernel_matrix(kernel), dtype=dtype)
    out = np.empty((b, cout, h, w), dtype=dtype)
    conv = backend.kernels.conv_forward
    for i in range(b):
        conv(xb[i], wmat, k, out[i])
    if bias is not None:
        out += np.asarray(bias, dtype=dtype)[None, :, None, None]
    return out[0] if squeeze else out


def conv2d_backward(grad_out, x, kernel, need_input_grad=True):
    """Gradients of :func:`conv2d_forward` with respect to input, kernel and bias.

    ``x`` is the input saved from the forward pass. Returns
    ``(grad_input, grad_kernel, grad_bias)``; ``grad_input`` is ``None`` when
    ``need_input_grad`` is false.
    """
    xb, squeeze = _as_batch(x)
    gb, _ = _as_batch(grad_out)
    kernel = np.asarray(kernel)
    _check_conv_shapes(xb, kernel, None)
    cout, cin, k, _ = kernel.shape
    b, _, h, w = xb.shape
    if gb.shape != (b, cout, h, w):
        raise ValidationError(
            f"grad_out shape {gb.shape} inconsistent with forward output {(b, cout, h, w)}"
        )
    dtype = _compute_dtype(xb, kernel, gb)
    xb = np.ascontiguousarray(xb, dtype=dtype)
    gb = np.ascontiguousarray(gb, dtype=dtype)
    wmat = np.ascontiguousarray(_kernel_matrix(kernel), dtype=dtype)
    grad_w = np.zeros((cout, cin * k * k), dtype=dtype)
    grad_x = np.empty((b, cin, h, w), dtype=dtype) if need_input_grad else None
    conv = backend.kernels.conv_backward
    for i in range(b):
        conv(gb[i], xb[i], wmat, k, grad_w, grad_x[i] if need_input_grad else None)
    grad_b = gb.sum(axis=(0, 2, 3))
    if grad_x is not None and squeeze:
        grad_x = grad_x[0]
    grad_k = grad_w.reshape(cout, k, k, cin).transpose(0, 3, 1, 2)
    return grad_x, np.ascontiguousarray(grad_k), grad_b


def _check_slope(slope):
    if not 0.0 <= slope < 1.0:
        raise ValidationError(f"slope must be in [0, 1), got {slope}")


def leaky_relu(x, slope=0.2):
    _check_slope(slope)
    x = np.asarray(x)
    dtype = _compute_dtype(x)
    x = np.ascontiguousarray(x, dtype=dtype)
    out = np.empty_like(x)
    backend.kernels.leaky_relu(x.reshape(-1), slope, out.reshape(-1))
    return out


def leaky_relu_backward(grad_out, x, slope=0.2):
    """Gradient through :func:`leaky_relu`; the slope at exactly 0 is taken as 1."""
    _check_slope(slope)
    x, grad_out = np.asarray(x), np.asarray(grad_out)
    if x.shape != grad_out.shape:
        raise ValidationError(f"gradient shape {grad_out.shape} does not match input {x.shape}")
    dtype = _compute_dtype(x, grad_out)
    x = np.ascontiguousarray(x, dtype=dtype)
    g = np.ascontiguousarray(grad_out, dtype=dtype)
    out = np.empty_like(g)
    backend.kernels.leaky_relu_backward(g.reshape(-1), x.reshape(-1), slope, out.reshape(-1))
    return out


@dataclass
class AdamState:
    """First/second moment estimates for one parameter tensor."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, param, beta1=0.9, beta2=0.999, eps=1e-8):
        param = np.asarray(param)
        return cls(np.zeros_like(param), np.zeros_like(param), 0, beta1, beta2, eps)


def adam_step(param, grad, state, lr):
    """One bias-corrected Adam update.

    Pure: returns ``(new_param, new_state)`` and leaves the inputs untouched.
    Arithmetic runs in the parameter dtype.
    """
    param = np.asarray(param)
    grad = np.asarray(grad)
    if grad.shape != param.shape or state.m.shape != param.shape or state.v.shape != param.shape:
        raise ValidationError(
            f"Adam shape mismatch: param {param.shape}, grad {grad.shape}, "
            f"m {state.m.shape}, v {state.v.shape}"
        )
    if not lr > 0:
        raise ValidationError(f"learning rate must be positive, got {lr}")
    if not np.all(np.isfinite(grad)):
        raise NumericalError(f"non-finite gradient ({np.count_nonzero(~np.isfinite(grad))} entries)")
    dt = param.dtype.type
    b1, b2 = dt(state.beta1), dt(state.beta2)
    g = grad.astype(param.dtype, copy=False)
    t = state.t + 1
    m = b1 * state.m + (dt(1) - b1) * g
    v = b2 * state.v + (dt(1) - b2) * (g * g)
    m_hat = m / dt(1.0 - state.beta1**t)
    v_hat = v / dt(1.0 - state.beta2**t)
    new_param = param - dt(lr) * m_hat / (np.sqrt(v_hat) + dt(state.eps))
    return new_param, AdamState(m, v, t, state.beta1, state.beta2, state.eps)


def lr_at_epoch(epoch, initial_lr, decay=0.1, every=100):
    """Step schedule: ``initial_lr * decay ** (epoch // every)``."""
    if epoch < 0:
        raise ValidationError(f"epoch must be >= 0, got {epoch}")
    return initial_lr * decay ** (epoch // every)


@dataclass
class GradCheck:
    max_rel_error: float
    ok: bool
    worst_index: tuple = field(default=())

    def __bool__(self):
        return self.ok


def finite_diff_check(f, x, grad=None, eps=1e-5, tol=1e-4, coords=None, rng=None):
    """Compare an analytic gradient with central finite differences.

    Args:
        f: callable ``f(x) -> (value, grad)``; ``grad`` may be omitted if
            ``grad`` is supplied directly.
        x: float64 array at which to check.
        grad: precomputed analytic gradient (overrides the one ``f`` returns).
        eps: perturbation size.
        tol: pass threshold on the returned error.
        coords: if an int, check only that many randomly chosen coordinates;
            a sequence of index tuples checks exactly those.
        rng: ``numpy.random.Generator`` used for coordinate sampling.

    Returns:
        :class:`GradCheck` with ``max |g_a - g_n| / max(1, |g_n|)``. Non-finite
        function values yield an infinite error and ``ok=False``.
    """
    x = np.array(x, dtype=np.float64)

    def value(z):
        out = f(z)
        return float(out[0] if isinstance(out, tuple) else out)

    if grad is None:
        out = f(x.copy())
        grad = out[1]
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != x.shape:
        raise ValidationError(f"gradient shape {grad.shape} != input shape {x.shape}")

    if coords is None:
        indices = list(np.ndindex(x.shape))
    elif not isinstance(coords, (int, np.integer)):
        indices = [tuple(int(i) for i in idx) for idx in coords]
    else:
        rng = rng if rng is not None else np.random.default_rng(0)
        flat = rng.choice(x.size, size=min(coords, x.size), replace=False)
        indices = [np.unravel_index(i, x.shape) for i in np.sort(flat)]

    worst, worst_idx = 0.0, ()
    for idx in indices:
        orig = x[idx]
        x[idx] = orig + eps
        fp = value(x)
        x[idx] = orig - eps
        fm = value(x)
        x[idx] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            return GradCheck(float("inf"), False, tuple(int(i) for i in idx))
        numeric = (fp - fm) / (2.0 * eps)
        err = abs(grad[idx] - numeric) / max(1.0, abs(numeric))
        if err > worst:
            worst, worst_idx = err, tuple(int(i) for i in idx)
    return GradCheck(float(worst), bool(worst < tol), worst_idx)
