"""Frames, clips, planar YUV / Y4M / PNG I/O and colour conversion.

Inside the package every frame is 4:4:4 with samples normalized to [0, 1];
chroma subsampling and integer quantization exist only at file boundaries.
Quantization rounds half-up: ``floor(v * maxval + 0.5)`` after clamping.
"""

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, ValidationError

logger = logging.getLogger(__name__)

YCBCR444 = "YCbCr444"
RGB = "RGB"
SPACES = (YCBCR444, RGB)

# (Kr, Kb) luma coefficients
MATRICES = {"bt709": (0.2126, 0.0722), "bt601": (0.299, 0.114)}


@dataclass(frozen=True, eq=False)
class Frame:
    """One picture: ``planes`` is a read-only ``(3, H, W)`` float64 array."""

    planes: np.ndarray
    space: str = YCBCR444

    def __post_init__(self):
        planes = np.array(self.planes, dtype=np.float64)
        if planes.ndim != 3 or planes.shape[0] != 3:
            raise ValidationError(f"frame planes must be (3, H, W), got {planes.shape}")
        if planes.shape[1] < 1 or planes.shape[2] < 1:
            raise ValidationError(f"frame has zero size {planes.shape[1:]}")
        if self.space not in SPACES:
            raise ValidationError(f"unknown colour space {self.space!r}")
        if not np.all(np.isfinite(planes)):
            raise ValidationError("frame contains non-finite samples")
        planes.setflags(write=False)
        object.__setattr__(self, "planes", planes)

    @property
    def height(self):
        return self.planes.shape[1]

    @property
    def width(self):
        return self.planes.shape[2]


@dataclass(frozen=True, eq=False)
class Clip:
    frames: tuple
    fps: tuple = (25, 1)
    _array: np.ndarray = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        frames = tuple(self.frames)
        if not frames:
            raise ValidationError("a clip needs at least one frame")
        first = frames[0]
        for i, f in enumerate(frames):
            if not isinstance(f, Frame):
                raise ValidationError(f"clip element {i} is not a Frame")
            if (f.width, f.height, f.space) != (first.width, first.height, first.space):
                raise ValidationError(
                    f"frame {i} is {f.width}x{f.height} {f.space}, "
                    f"clip is {first.width}x{first.height} {first.space}"
                )
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "fps", (int(self.fps[0]), int(self.fps[1])))

    @classmethod
    def from_array(cls, array, space=YCBCR444, fps=(25, 1)):
        array = np.asarray(array, dtype=np.float64)
        if array.ndim != 4 or array.shape[1] != 3:
            raise ValidationError(f"clip array must be (N, 3, H, W), got {array.shape}")
        return cls(tuple(Frame(a, space) for a in array), fps)

    def array(self):
        """All frames stacked as a read-only ``(N, 3, H, W)`` array."""
        if self._array is None:
            arr = np.stack([f.planes for f in self.frames])
            arr.setflags(write=False)
            object.__setattr__(self, "_array", arr)
        return self._array

    def __len__(self):
        return len(self.frames)

    def __getitem__(self, i):
        return self.frames[i]

    def __iter__(self):
        return iter(self.frames)

    @property
    def width(self):
        return self.frames[0].width

    @property
    def height(self):
        return self.frames[0].height

    @property
    def space(self):
        return self.frames[0].space


# -- sample quantization ---------------------------------------------------

def _maxval(bit_depth):
    if bit_depth not in (8, 10):
        raise ValidationError(f"unsupported bit depth {bit_depth}; expected 8 or 10")
    return (1 << bit_depth) - 1


def quantize(samples, bit_depth=8):
    maxval = _maxval(bit_depth)
    q = np.floor(np.clip(samples, 0.0, 1.0) * maxval + 0.5)
    return q.astype(np.uint8 if bit_depth == 8 else np.uint16)


def _plane_bytes(plane, bit_depth):
    q = quantize(plane, bit_depth)
    return q.astype("<u2").tobytes() if bit_depth > 8 else q.tobytes()


def _decode_plane(buf, h, w, bit_depth):
    dtype = np.uint8 if bit_depth == 8 else np.dtype("<u2")
    return np.frombuffer(buf, dtype=dtype).reshape(h, w).astype(np.float64) / _maxval(bit_depth)


# -- chroma resampling -----------------------------------------------------

def _chroma_shape(h, w):
    return (h + 1) // 2, (w + 1) // 2


def _upsample_axis(plane, n, axis):
    # chroma sample j sits on luma sample 2j (co-sited)
    m = plane.shape[axis]
    pos = np.arange(n) / 2.0
    lo = np.minimum(np.floor(pos).astype(int), m - 1)
    hi = np.minimum(lo + 1, m - 1)
    frac = pos - lo
    a = np.take(plane, lo, axis=axis)
    b = np.take(plane, hi, axis=axis)
    shape = [1, 1]
    shape[axis] = n
    frac = frac.reshape(shape)
    return a * (1.0 - frac) + b * frac


def upsample_chroma(plane, height, width, method="bilinear"):
    plane = np.asarray(plane, dtype=np.float64)
    if plane.shape != _chroma_shape(height, width):
        raise ValidationError(
            f"chroma plane {plane.shape} does not match luma {height}x{width} "
            f"(expected {_chroma_shape(height, width)})"
        )
    if method == "nearest":
        return plane[np.arange(height) // 2][:, np.arange(width) // 2]
    if method != "bilinear":
        raise ValidationError(f"unknown upsampling method {method!r}")
    return _upsample_axis(_upsample_axis(plane, height, 0), width, 1)


def downsample_chroma(plane):
    """4:4:4 to 4:2:0 by co-sited decimation (inverse of the upsampler's siting)."""
    return np.asarray(plane)[::2, ::2]


def chroma_upsample_420_to_444(y, cb, cr, method="bilinear"):
    """Build a 4:4:4 :class:`Frame` from a full-size luma and two 4:2:0 chroma planes."""
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 2:
        raise ValidationError(f"luma plane must be 2-D, got shape {y.shape}")
    h, w = y.shape
    return Frame(np.stack([y, upsample_chroma(cb, h, w, method), upsample_chroma(cr, h, w, method)]))


# -- raw planar YUV --------------------------------------------------------

def _frame_layout(width, height, subsampling, bit_depth):
    if width <= 0 or height <= 0:
        raise ValidationError(f"invalid dimensions {width}x{height}")
    if subsampling not in (420, 444):
        raise ValidationError(f"unsupported subsampling {subsampling}; expected 420 or 444")
    bps = 1 if _maxval(bit_depth) < 256 else 2
    ch, cw = (height, width) if subsampling == 444 else _chroma_shape(height, width)
    sizes = [height * width * bps, ch * cw * bps, ch * cw * bps]
    return sizes, [(height, width), (ch, cw), (ch, cw)]


def _decode_frame(buf, width, height, subsampling, bit_depth, method):
    sizes, shapes = _frame_layout(width, height, subsampling, bit_depth)
    planes, off = [], 0
    for size, (h, w) in zip(sizes, shapes):
        planes.append(_decode_plane(buf[off:off + size], h, w, bit_depth))
        off += size
    if subsampling == 420:
        return chroma_upsample_420_to_444(*planes, method=method)
    return Frame(np.stack(planes))


def _encode_frame(frame, subsampling, bit_depth):
    if frame.space != YCBCR444:
        raise ValidationError(f"YUV writers need YCbCr frames, got {frame.space}")
    y, cb, cr = frame.planes
    if subsampling == 420:
        cb, cr = downsample_chroma(cb), downsample_chroma(cr)
    elif subsampling != 444:
        raise ValidationError(f"unsupported subsampling {subsampling}")
    return b"".join(_plane_bytes(p, bit_depth) for p in (y, cb, cr))


def read_planar_yuv(path, width, height, subsampling=420, bit_depth=8, upsample="bilinear"):
    """Read raw I420/I444 (8-bit, or 10-bit little-endian) into a 4:4:4 clip."""
    sizes, _ = _frame_layout(width, height, subsampling, bit_depth)
    frame_bytes = sum(sizes)
    data = Path(path).read_bytes()
    if not data:
        raise FormatError(f"{path}: empty file (expected multiples of {frame_bytes} bytes)")
    n, rem = divmod(len(data), frame_bytes)
    if rem:
        expected = (n + 1) * frame_bytes
        raise FormatError(
            f"{path}: file is {len(data)} bytes, expected a multiple of {frame_bytes} "
            f"({width}x{height} {subsampling} {bit_depth}-bit); frame {n} starting at byte "
            f"offset {n * frame_bytes} is truncated (needs {expected} bytes total)"
        )
    frames = [
        _decode_frame(data[i * frame_bytes:(i + 1) * frame_bytes], width, height, subsampling,
                      bit_depth, upsample)
        for i in range(n)
    ]
    return Clip(tuple(frames))


def write_planar_yuv(clip, path, subsampling=444, bit_depth=8):
    with open(path, "wb") as fh:
        for frame in clip:
            fh.write(_encode_frame(frame, subsampling, bit_depth))


# -- Y4M -------------------------------------------------------------------

_Y4M_MAGIC = b"YUV4MPEG2"
_Y4M_CHROMA = {"420": 420, "420jpeg": 420, "420mpeg2": 420, "420paldv": 420, "444": 444}


def parse_y4m_header(line):
    """Parse the stream header line (without the trailing newline)."""
    tokens = line.split(b" ")
    if tokens[0] != _Y4M_MAGIC:
        raise FormatError(f"not a Y4M stream: header starts with {tokens[0][:16]!r}")
    info = {"width": None, "height": None, "fps": (25, 1), "subsampling": 420}
    for tok in tokens[1:]:
        if not tok:
            continue
        key, val = chr(tok[0]), tok[1:].decode("ascii", "replace")
        try:
            if key == "W":
                info["width"] = int(val)
            elif key == "H":
                info["height"] = int(val)
            elif key == "F":
                num, den = val.split(":")
                info["fps"] = (int(num), int(den))
            elif key == "C":
                if val not in _Y4M_CHROMA:
                    raise FormatError(f"unsupported Y4M colourspace token C{val}")
                info["subsampling"] = _Y4M_CHROMA[val]
        except ValueError as exc:
            raise FormatError(f"malformed Y4M header token {tok!r}") from exc
    if not info["width"] or not info["height"] or info["width"] < 1 or info["height"] < 1:
        raise FormatError(f"Y4M header lacks valid W/H: {line!r}")
    return info


def read_y4m(path, upsample="bilinear"):
    """Read an 8-bit C420/C444 Y4M file into a 4:4:4 clip."""
    data = Path(path).read_bytes()
    end = data.find(b"\n")
    if end < 0:
        raise FormatError(f"{path}: no Y4M header line")
    info = parse_y4m_header(data[:end])
    w, h, sub = info["width"], info["height"], info["subsampling"]
    sizes, _ = _frame_layout(w, h, sub, 8)
    frame_bytes = sum(sizes)
    frames, off = [], end + 1
    while off < len(data):
        nl = data.find(b"\n", off)
        if nl < 0 or not data.startswith(b"FRAME", off):
            raise FormatError(f"{path}: expected FRAME marker at byte offset {off}")
        start = nl + 1
        if start + frame_bytes > len(data):
            raise FormatError(
                f"{path}: frame {len(frames)} at byte offset {start} needs {frame_bytes} bytes, "
                f"only {len(data) - start} remain"
            )
        frames.append(_decode_frame(data[start:start + frame_bytes], w, h, sub, 8, upsample))
        off = start + frame_bytes
    if not frames:
        raise FormatError(f"{path}: Y4M stream has no frames")
    return Clip(tuple(frames), info["fps"])


def write_y4m(clip, path, subsampling=444):
    token = {444: "C444", 420: "C420jpeg"}.get(subsampling)
    if token is None:
        raise ValidationError(f"unsupported subsampling {subsampling}")
    header = f"YUV4MPEG2 W{clip.width} H{clip.height} F{clip.fps[0]}:{clip.fps[1]} Ip A1:1 {token}\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        for frame in clip:
            fh.write(b"FRAME\n")
            fh.write(_encode_frame(frame, subsampling, 8))


def read_clip(path, width=None, height=None, subsampling=420, bit_depth=8):
    """Dispatch on extension: ``.y4m`` is self-describing, anything else is raw YUV."""
    if str(path).lower().endswith(".y4m"):
        return read_y4m(path)
    if width is None or height is None:
        raise ValidationError(f"{path}: raw YUV input needs --width and --height")
    return read_planar_yuv(path, width, height, subsampling, bit_depth)


def write_clip(clip, path, subsampling=444, bit_depth=8):
    if str(path).lower().endswith(".y4m"):
        if bit_depth != 8:
            raise ValidationError("Y4M output is 8-bit only")
        write_y4m(clip, path, subsampling)
    else:
        write_planar_yuv(clip, path, subsampling, bit_depth)


# -- PNG -------------------------------------------------------------------

def write_png_sequence(clip, directory):
    """Write an RGB clip as ``000000.png``, ``000001.png``, ... and return the paths."""
    from PIL import Image

    if clip.space != RGB:
        raise ValidationError(
            f"PNG output needs an RGB clip, got {clip.space}; convert with ycbcr_to_rgb first"
        )
    directory = Path(directory)
    os.makedirs(directory, exist_ok=True)
    paths = []
    for i, frame in enumerate(clip):
        pixels = quantize(frame.planes, 8).transpose(1, 2, 0)
        path = directory / f"{i:06d}.png"
        Image.fromarray(np.ascontiguousarray(pixels), mode="RGB").save(path)
        paths.append(path)
    return paths


def read_png_sequence(directory):
    from PIL import Image

    paths = sorted(Path(directory).glob("*.png"))
    if not paths:
        raise FormatError(f"{directory}: no PNG files")
    frames = []
    for p in paths:
        with Image.open(p) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
        frames.append(Frame(arr.transpose(2, 0, 1), RGB))
    return Clip(tuple(frames))


# -- colour conversion -----------------------------------------------------

def _rgb_to_ypbpr(matrix):
    try:
        kr, kb = MATRICES[matrix]
    except KeyError:
        raise ValidationError(f"unknown colour matrix {matrix!r}; expected {sorted(MATRICES)}")
    kg = 1.0 - kr - kb
    return np.array([
        [kr, kg, kb],
        [-kr / (2 * (1 - kb)), -kg / (2 * (1 - kb)), 0.5],
        [0.5, -kg / (2 * (1 - kr)), -kb / (2 * (1 - kr))],
    ])


def _range_scale(full_range):
    # code value = offset + scale * component, on the 8-bit scale
    if full_range:
        return np.array([255.0, 255.0, 255.0]), np.array([0.0, 128.0, 128.0])
    return np.array([219.0, 224.0, 224.0]), np.array([16.0, 128.0, 128.0])


def rgb_to_ycbcr(frame, matrix="bt709", full_range=False):
    if frame.space != RGB:
        raise ValidationError(f"rgb_to_ycbcr expects an RGB frame, got {frame.space}")
    scale, offset = _range_scale(full_range)
    ypbpr = np.tensordot(_rgb_to_ypbpr(matrix), frame.planes, axes=1)
    out = (offset[:, None, None] + scale[:, None, None] * ypbpr) / 255.0
    return Frame(np.clip(out, 0.0, 1.0), YCBCR444)


def ycbcr_to_rgb(frame, matrix="bt709", full_range=False):
    if frame.space != YCBCR444:
        raise ValidationError(f"ycbcr_to_rgb expects a YCbCr frame, got {frame.space}")
    scale, offset = _range_scale(full_range)
    ypbpr = (frame.planes * 255.0 - offset[:, None, None]) / scale[:, None, None]
    rgb = np.tensordot(np.linalg.inv(_rgb_to_ypbpr(matrix)), ypbpr, axes=1)
    return Frame(np.clip(rgb, 0.0, 1.0), RGB)


def convert_clip(clip, space, matrix="bt709", full_range=False):
    if clip.space == space:
        return clip
    fn = ycbcr_to_rgb if space == RGB else rgb_to_ycbcr
    return Clip(tuple(fn(f, matrix, full_range) for f in clip), clip.fps)
