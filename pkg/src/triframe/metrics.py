"""PSNR, SSIM and MS-SSIM, plus the PSNR gain report.

SSIM uses an 11x11 Gaussian window (sigma 1.5) applied over the valid region
only, K1 = 0.01, K2 = 0.03 and a dynamic range of 1. Inputs may be single
planes ``(H, W)``, images ``(C, H, W)``, batches ``(B, C, H, W)`` or
:class:`~triframe.frame_io.Frame` objects; scores are averaged over every
plane. The ``*_and_grad`` helpers return the gradient with respect to the
first argument and back the SSIM-family losses.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import backend
from .errors import ValidationError

logger = logging.getLogger(__name__)

MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
REPORT_CAP_DB = 99.99


def gaussian_window_1d(size=11, sigma=1.5):
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


@dataclass(frozen=True)
class SsimParams:
    window_size: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    data_range: float = 1.0

    @property
    def c1(self):
        return (self.k1 * self.data_range) ** 2

    @property
    def c2(self):
        return (self.k2 * self.data_range) ** 2

    def window_1d(self):
        return gaussian_window_1d(self.window_size, self.sigma)

    def window(self):
        g = self.window_1d()
        return np.outer(g, g)


@dataclass(frozen=True)
class MsSsimParams:
    weights: tuple = MS_SSIM_WEIGHTS
    ssim: SsimParams = SsimParams()

    def scale_count(self, height, width):
        """Largest scale count whose coarsest level still holds a full window."""
        win = self.ssim.window_size
        if min(height, width) < win:
            raise ValidationError(
                f"MS-SSIM needs at least {win}x{win} pixels, got {height}x{width}"
            )
        scales = len(self.weights)
        while scales > 1 and min(height, width) // 2 ** (scales - 1) < win:
            scales -= 1
        return scales

    def weights_for(self, scales):
        w = np.asarray(self.weights[:scales], dtype=np.float64)
        if scales < len(self.weights):
            w = w / w.sum()
        return w


def _planes(a):
    a = getattr(a, "planes", a)
    a = np.ascontiguousarray(a, dtype=np.float64)
    if a.ndim < 2:
        raise ValidationError(f"expected an image array, got shape {a.shape}")
    return a.reshape(-1, a.shape[-2], a.shape[-1])


def _pair(a, b):
    x, y = _planes(a), _planes(b)
    if x.shape != y.shape:
        raise ValidationError(f"shape mismatch: {np.shape(getattr(a, 'planes', a))} vs "
                              f"{np.shape(getattr(b, 'planes', b))}")
    return x, y


def _filter(stack, g):
    n, h, w = stack.shape
    k = g.shape[0]
    out = np.empty((n, h - k + 1, w - k + 1))
    backend.kernels.filter_valid(np.ascontiguousarray(stack), g, out)
    return out


def _filter_adjoint(grad, g, h, w):
    out = np.empty((grad.shape[0], h, w))
    backend.kernels.filter_valid_adjoint(np.ascontiguousarray(grad), g, out)
    return out


class _SsimStats:
    """Windowed moments of one scale, kept for the backward pass."""

    def __init__(self, x, y, params):
        n, h, w = x.shape
        win = params.window_size
        if h < win or w < win:
            raise ValidationError(f"image {h}x{w} is smaller than the {win}x{win} SSIM window")
        self.x, self.y, self.params = x, y, params
        self.g = params.window_1d()
        self.moments = np.empty((5 * n, h - win + 1, w - win + 1))
        backend.kernels.ssim_moments(x, y, self.g, self.moments)
        self.ssim_map = np.empty((n,) + self.moments.shape[1:])
        self.cs_map = np.empty_like(self.ssim_map)
        backend.kernels.ssim_maps(self.moments, params.c1, params.c2, self.ssim_map, self.cs_map)

    def ssim_per_plane(self):
        return self.ssim_map.mean(axis=(1, 2))

    def cs_per_plane(self):
        return self.cs_map.mean(axis=(1, 2))

    def grad(self, ssim_weight=None, cs_weight=None):
        """Gradient wrt x of ``sum_n ssim_weight[n]*ssim_n + cs_weight[n]*cs_n``."""
        n, h, w = self.x.shape
        size = self.ssim_map.shape[1] * self.ssim_map.shape[2]
        ws = np.zeros(n) if ssim_weight is None else np.asarray(ssim_weight, dtype=np.float64) / size
        wc = np.zeros(n) if cs_weight is None else np.asarray(cs_weight, dtype=np.float64) / size
        maps = np.empty((3 * n,) + self.ssim_map.shape[1:])
        backend.kernels.ssim_map_grad(self.moments, self.params.c1, self.params.c2,
                                      np.ascontiguousarray(ws), np.ascontiguousarray(wc), maps)
        out = np.empty((n, h, w))
        backend.kernels.ssim_moments_adjoint(maps, self.x, self.y, self.g, out)
        return out


def _pool2(x):
    n, h, w = x.shape
    h2, w2 = h // 2, w // 2
    out = x[:, 0:2 * h2:2, 0:2 * w2:2] + x[:, 1:2 * h2:2, 0:2 * w2:2]
    out += x[:, 0:2 * h2:2, 1:2 * w2:2]
    out += x[:, 1:2 * h2:2, 1:2 * w2:2]
    out *= 0.25
    return out


def _pool2_adjoint(g, h, w):
    n, h2, w2 = g.shape
    out = np.zeros((n, h, w))
    out[:, :2 * h2, :2 * w2] = np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) * 0.25
    return out


def ssim_and_grad(a, b, params=None, need_grad=True):
    params = params or SsimParams()
    x, y = _pair(a, b)
    stats = _SsimStats(x, y, params)
    per_plane = stats.ssim_per_plane()
    value = float(per_plane.mean())
    if not need_grad:
        return value, None
    n = x.shape[0]
    grad = stats.grad(ssim_weight=np.full(n, 1.0 / n))
    return value, grad.reshape(np.shape(getattr(a, "planes", a)))


def ssim(a, b, params=None):
    """Mean SSIM over the valid-region map and over all planes."""
    return ssim_and_grad(a, b, params, need_grad=False)[0]


def _ms_scales(params, h, w, scales):
    if scales is None:
        scales = params.scale_count(h, w)
        if scales < len(params.weights):
            logger.info("MS-SSIM on %dx%d input: using %d of %d scales with renormalized weights",
                        h, w, scales, len(params.weights))
    elif min(h, w) // 2 ** (scales - 1) < params.ssim.window_size:
        raise ValidationError(f"{scales} MS-SSIM scales do not fit a {h}x{w} input")
    return scales


class _MsSsim:
    """Per-scale statistics of one MS-SSIM evaluation plus its backward pass."""

    def __init__(self, x, y, params, scales, first=None):
        self.weights = params.weights_for(scales)
        self.scales = scales
        self.levels, raw = [], []
        xs, ys = x, y
        for j in range(scales):
            if j:
                xs, ys = _pool2(xs), _pool2(ys)
                stats = _SsimStats(xs, ys, params.ssim)
            else:
                stats = first or _SsimStats(xs, ys, params.ssim)
            self.levels.append(stats)
            raw.append(stats.ssim_per_plane() if j == scales - 1 else stats.cs_per_plane())
        self.terms = np.maximum(np.stack(raw), 0.0)  # (scales, n)
        self.per_plane = np.prod(self.terms ** self.weights[:, None], axis=0)

    def value(self):
        return float(self.per_plane.mean())

    def grad(self, scale=1.0, first_ssim_weight=None):
        """Gradient of ``scale * value()``; ``first_ssim_weight`` adds an SSIM term at scale 1."""
        n = self.terms.shape[1]
        # d(mean_n prod_j T_jn^w_j)/dT_jn; zero where a term was clamped
        positive = self.terms > 0
        safe = np.where(positive, self.terms, 1.0)
        coef = np.where(positive, self.weights[:, None] * self.per_plane[None, :] / safe, 0.0)
        coef *= scale / n
        grad = None
        last = self.scales - 1
        for j in reversed(range(self.scales)):
            stats = self.levels[j]
            ssim_w = coef[j] if j == last else None
            cs_w = None if j == last else coef[j]
            if j == 0 and first_ssim_weight is not None:
                ssim_w = first_ssim_weight if ssim_w is None else ssim_w + first_ssim_weight
            g = stats.grad(ssim_weight=ssim_w, cs_weight=cs_w)
            if grad is not None:
                g += _pool2_adjoint(grad, *stats.x.shape[1:])
            grad = g
        return grad


def ms_ssim_and_grad(a, b, params=None, need_grad=True, scales=None):
    params = params or MsSsimParams()
    x, y = _pair(a, b)
    n, h, w = x.shape
    ms = _MsSsim(x, y, params, _ms_scales(params, h, w, scales))
    if not need_grad:
        return ms.value(), None
    return ms.value(), ms.grad().reshape(np.shape(getattr(a, "planes", a)))


def ssim_pair_and_grad(a, b, ssim_weight, ms_weight, ssim_params=None, ms_params=None):
    """SSIM and MS-SSIM of the same pair with the gradient of their weighted sum.

    When both use the same window settings the full-resolution moments are
    computed once and back-propagated in a single adjoint pass.
    """
    ssim_params = ssim_params or SsimParams()
    ms_params = ms_params or MsSsimParams()
    x, y = _pair(a, b)
    n, h, w = x.shape
    scales = _ms_scales(ms_params, h, w, None)
    shape = np.shape(getattr(a, "planes", a))
    if ms_params.ssim != ssim_params:
        s_val, s_grad = ssim_and_grad(a, b, ssim_params)
        m_val, m_grad = ms_ssim_and_grad(a, b, ms_params, scales=scales)
        return s_val, m_val, ssim_weight * s_grad + ms_weight * m_grad
    first = _SsimStats(x, y, ssim_params)
    ms = _MsSsim(x, y, ms_params, scales, first=first)
    s_val = float(first.ssim_per_plane().mean())
    grad = ms.grad(ms_weight, first_ssim_weight=np.full(n, ssim_weight / n))
    return s_val, ms.value(), grad.reshape(shape)


def ms_ssim(a, b, params=None, scales=None):
    """Multi-scale SSIM; drops to fewer scales (weights renormalized) on small inputs."""
    return ms_ssim_and_grad(a, b, params, need_grad=False, scales=scales)[0]


def psnr(a, b, peak=1.0, luma_only=False):
    """PSNR in dB over all samples; ``math.inf`` when the inputs are identical."""
    if peak <= 0:
        raise ValidationError(f"peak must be positive, got {peak}")
    x = np.asarray(getattr(a, "planes", a), dtype=np.float64)
    y = np.asarray(getattr(b, "planes", b), dtype=np.float64)
    if x.shape != y.shape:
        raise ValidationError(f"shape mismatch: {x.shape} vs {y.shape}")
    if luma_only:
        x, y = x[..., 0, :, :], y[..., 0, :, :]
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


@dataclass(frozen=True)
class FrameGain:
    index: int
    anchor_db: float
    enhanced_db: float

    @property
    def delta_db(self):
        if self.enhanced_db == self.anchor_db:
            return 0.0
        return self.enhanced_db - self.anchor_db


@dataclass(frozen=True)
class GainReport:
    frames: tuple
    color: str = "ycbcr"
    channels: str = "all"

    @property
    def mean_anchor_db(self):
        return float(np.mean([f.anchor_db for f in self.frames]))

    @property
    def mean_enhanced_db(self):
        return float(np.mean([f.enhanced_db for f in self.frames]))

    @property
    def mean_delta_db(self):
        return float(np.mean([f.delta_db for f in self.frames]))

    def to_text(self):
        def fmt(v):
            return f"{min(v, REPORT_CAP_DB):.6f}"

        lines = [
            f"# psnr-gain-report color={self.color} channels={self.channels} cap_db={REPORT_CAP_DB}",
            "frame\tanchor_db\tenhanced_db\tdelta_db",
        ]
        for f in self.frames:
            lines.append(f"{f.index}\t{fmt(f.anchor_db)}\t{fmt(f.enhanced_db)}\t{fmt(f.delta_db)}")
        lines.append(f"mean\t{fmt(self.mean_anchor_db)}\t{fmt(self.mean_enhanced_db)}\t"
                     f"{fmt(self.mean_delta_db)}")
        return "\n".join(lines) + "\n"


def parse_report(text):
    """Read a report back into ``{"frames": [(i, anchor, enhanced, delta)], "mean": (...)}``."""
    rows, mean = [], None
    for line in text.splitlines():
        if not line or line.startswith("#") or line.startswith("frame\t"):
            continue
        fields = line.split("\t")
        if len(fields) != 4:
            raise ValidationError(f"malformed report line {line!r}")
        values = tuple(float(v) for v in fields[1:])
        if fields[0] == "mean":
            mean = values
        else:
            rows.append((int(fields[0]),) + values)
    return {"frames": rows, "mean": mean}


def psnr_gain_report(enhanced, anchor, reference, luma_only=False, color="ycbcr"):
    """Per-frame PSNR(enhanced, ref) - PSNR(anchor, ref) for aligned clips."""
    clips = (enhanced, anchor, reference)
    n = len(reference)
    for c in clips:
        if len(c) != n or (c.width, c.height) != (reference.width, reference.height):
            raise ValidationError(
                f"clips must share geometry and length: got "
                f"{[(len(c), c.width, c.height) for c in clips]}"
            )
    frames = tuple(
        FrameGain(i, psnr(anchor[i], reference[i], luma_only=luma_only),
                  psnr(enhanced[i], reference[i], luma_only=luma_only))
        for i in range(n)
    )
    return GainReport(frames, color, "luma" if luma_only else "all")


def sequence_table(gains):
    """Two-row summary table, one column per sequence name: ``{"S1": 0.08, ...}``."""
    names = list(gains)
    header = "Sequence No | " + " | ".join(names)
    row = "PSNR Gain   | " + " | ".join(f"{gains[k]:.2f}dB" for k in names)
    return header + "\n" + row + "\n"
