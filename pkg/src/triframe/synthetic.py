"""Deterministic synthetic test clips: smooth texture plus hard-edged shapes under slow pan."""

import numpy as np
from scipy.ndimage import gaussian_filter

from .frame_io import Clip


def _canvas(rng, h, w, shapes):
    base = gaussian_filter(rng.standard_normal((h, w)), 6.0)
    base = 0.5 + 0.18 * base / (np.abs(base).max() + 1e-12)
    detail = gaussian_filter(rng.standard_normal((h, w)), 1.2)
    base += 0.12 * detail / (np.abs(detail).max() + 1e-12)
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(shapes):
        level = rng.uniform(0.1, 0.9)
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        ry, rx = rng.uniform(4, 24), rng.uniform(4, 24)
        if rng.random() < 0.5:
            mask = (np.abs(yy - cy) < ry) & (np.abs(xx - cx) < rx)
        else:
            mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 < 1.0
        base = np.where(mask, level + (base - 0.5) * 0.5, base)
    return base


def synthetic_clip(width, height, frames=6, seed=0, motion=(1, 1), shapes=40):
    """YCbCr 4:4:4 clip panning across a random canvas by ``motion`` px/frame."""
    rng = np.random.default_rng(seed)
    dx, dy = motion
    ch = height + abs(dy) * (frames - 1)
    cw = width + abs(dx) * (frames - 1)
    planes = [
        _canvas(rng, ch, cw, shapes),
        0.5 + 0.8 * (_canvas(rng, ch, cw, shapes // 2) - 0.5),
        0.5 + 0.8 * (_canvas(rng, ch, cw, shapes // 2) - 0.5),
    ]
    canvas = np.clip(np.stack(planes), 0.0, 1.0)
    out = []
    for t in range(frames):
        oy = t * dy if dy >= 0 else (frames - 1 - t) * -dy
        ox = t * dx if dx >= 0 else (frames - 1 - t) * -dx
        out.append(canvas[:, oy:oy + height, ox:ox + width])
    return Clip.from_array(np.stack(out))
