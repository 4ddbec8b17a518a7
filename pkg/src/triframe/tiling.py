"""Tri-frame patch geometry: layouts, patch extraction, channel windows, stitching.

A patch stacks the (Y, Cb, Cr) planes of three consecutive frames at the same
spatial anchor, frames in temporal order, giving ``9 x 96 x 96``. Anchors
advance by ``patch - overlap`` (92 px) and the last anchor on each axis is
clamped to ``dim - patch``. Overlapping outputs are averaged when stitching.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .frame_io import YCBCR444, Frame

PATCH = 96
OVERLAP = 4


def axis_anchors(dim, patch=PATCH, overlap=OVERLAP):
    stride = patch - overlap
    if stride < 1:
        raise ValidationError(f"overlap {overlap} leaves no stride for patch {patch}")
    if dim < patch:
        raise ValidationError(f"dimension {dim} is smaller than the {patch}-pixel patch")
    anchors = list(range(0, dim - patch + 1, stride))
    if anchors[-1] != dim - patch:
        anchors.append(dim - patch)
    return anchors


@dataclass(frozen=True)
class TileLayout:
    frame_width: int
    frame_height: int
    anchors: tuple
    patch: int = PATCH
    overlap: int = OVERLAP

    @property
    def columns(self):
        return len({x for x, _ in self.anchors})

    @property
    def rows(self):
        return len({y for _, y in self.anchors})


def compute_layout(width, height, patch=PATCH, overlap=OVERLAP):
    """Row-major anchor grid covering a ``width x height`` frame."""
    xs = axis_anchors(width, patch, overlap)
    ys = axis_anchors(height, patch, overlap)
    return TileLayout(width, height, tuple((x, y) for y in ys for x in xs), patch, overlap)


def triframe_indices(i, n, pad_short=False):
    """Source frames for restoring frame ``i`` of an ``n``-frame clip.

    Interior frames use (i-1, i, i+1); the first frame uses the next two
    frames and the last frame the previous two. With ``pad_short``, clips
    shorter than three frames replicate edge frames instead of failing.
    """
    if not 0 <= i < n:
        raise ValidationError(f"frame index {i} outside clip of length {n}")
    if n < 3:
        if not pad_short:
            raise ValidationError(f"tri-frame processing needs at least 3 frames, clip has {n}")
        return (max(i - 1, 0), i, min(i + 1, n - 1))
    if i == 0:
        return (0, 1, 2)
    if i == n - 1:
        return (n - 3, n - 2, n - 1)
    return (i - 1, i, i + 1)


@dataclass(frozen=True)
class ChannelWindow:
    start: int
    length: int = 3

    def slice(self):
        return slice(self.start, self.start + self.length)


def channel_window(i, n, pad_short=False):
    """Which 3 output channels hold frame ``i``: 0 first, 6 last, 3 otherwise."""
    a, b, c = triframe_indices(i, n, pad_short)
    if n < 3:
        return ChannelWindow(3)
    return ChannelWindow(3 * (a, b, c).index(i))


@dataclass(frozen=True)
class TriPatch:
    data: np.ndarray
    anchor: tuple
    center_frame_index: int


def _check_geometry(clip, layout):
    if clip.space != YCBCR444:
        raise ValidationError(f"patches are cut from YCbCr 4:4:4 clips, got {clip.space}")
    if (clip.width, clip.height) != (layout.frame_width, layout.frame_height):
        raise ValidationError(
            f"layout is for {layout.frame_width}x{layout.frame_height}, "
            f"clip is {clip.width}x{clip.height}"
        )


def stack_frames(clip, i, pad_short=False):
    """``(9, H, W)`` stack of the three source frames for frame ``i``."""
    return np.concatenate([clip[j].planes for j in triframe_indices(i, len(clip), pad_short)])


def extract_patch_array(clip, i, layout, pad_short=False):
    """All patches for frame ``i`` as one ``(P, 9, patch, patch)`` array, layout order."""
    _check_geometry(clip, layout)
    stack = stack_frames(clip, i, pad_short)
    p = layout.patch
    return np.stack([stack[:, y:y + p, x:x + p] for x, y in layout.anchors])


def extract_tripatches(clip, i, layout, pad_short=False):
    arr = extract_patch_array(clip, i, layout, pad_short)
    return [TriPatch(arr[k], anchor, i) for k, anchor in enumerate(layout.anchors)]


def stitch(outputs, layout, width=None, height=None, space=YCBCR444):
    """Average overlapping ``(anchor, (3, p, p))`` outputs into one frame.

    Every layout anchor must appear exactly once.
    """
    width = layout.frame_width if width is None else width
    height = layout.frame_height if height is None else height
    if (width, height) != (layout.frame_width, layout.frame_height):
        raise ValidationError(f"stitch size {width}x{height} does not match the layout")
    p = layout.patch
    expected = set(layout.anchors)
    seen = set()
    acc = np.zeros((3, height, width))
    count = np.zeros((height, width))
    for anchor, block in outputs:
        anchor = (int(anchor[0]), int(anchor[1]))
        if anchor not in expected:
            raise ValidationError(f"anchor {anchor} is not part of the layout")
        if anchor in seen:
            raise ValidationError(f"duplicate output for anchor {anchor}")
        seen.add(anchor)
        block = np.asarray(block)
        if block.shape != (3, p, p):
            raise ValidationError(f"patch output must be (3, {p}, {p}), got {block.shape}")
        x, y = anchor
        acc[:, y:y + p, x:x + p] += block
        count[y:y + p, x:x + p] += 1.0
    missing = expected - seen
    if missing:
        raise ValidationError(f"{len(missing)} layout anchors have no output, e.g. {sorted(missing)[0]}")
    return Frame(acc / count, space)
