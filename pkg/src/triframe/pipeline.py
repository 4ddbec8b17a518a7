"""Codec-proxy degradation, dataset building, training, enhancement and evaluation."""

import io
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.fft import dctn, idctn

from . import metrics
from .errors import FormatError, NumericalError, ValidationError
from .frame_io import RGB, YCBCR444, Clip, Frame, convert_clip
from .loss import LossWeights, combined_loss
from .model import BITRATE_TAGS, GeneratorConfig, apply_gradients, backward, forward, init_generator
from .tensor_core import lr_at_epoch
from .tiling import (
    PATCH,
    TriPatch,
    channel_window,
    compute_layout,
    extract_patch_array,
    stack_frames,
    stitch,
)

logger = logging.getLogger(__name__)

# JPEG luminance table; step for coefficient (u, v) is strength * table[u, v] / 255
FREQUENCY_WEIGHTS = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)


@dataclass(frozen=True)
class DegradeSpec:
    """Blockwise DCT quantizer standing in for a real encoder.

    The DC coefficient passes through unquantized, so flat content survives
    any strength; AC coefficients are rounded to ``strength`` times the
    frequency-weighting table.
    """

    strength: float = 1.0
    block: int = 8
    seed: int = 0

    def __post_init__(self):
        if not self.strength >= 0:
            raise ValidationError(f"strength must be >= 0, got {self.strength}")
        if self.block != 8:
            raise ValidationError("only 8x8 blocks are supported")


def degrade_plane(plane, spec):
    plane = np.asarray(plane, dtype=np.float64)
    if spec.strength == 0:
        return plane.copy()
    b = spec.block
    h, w = plane.shape
    ph, pw = -h % b, -w % b
    padded = np.pad(plane, ((0, ph), (0, pw)), mode="symmetric")
    hb, wb = padded.shape[0] // b, padded.shape[1] // b
    blocks = padded.reshape(hb, b, wb, b).transpose(0, 2, 1, 3)
    coef = dctn(blocks, axes=(2, 3), norm="ortho")
    step = spec.strength * FREQUENCY_WEIGHTS / 255.0
    q = np.round(coef / step) * step
    q[:, :, 0, 0] = coef[:, :, 0, 0]
    rec = idctn(q, axes=(2, 3), norm="ortho").transpose(0, 2, 1, 3).reshape(padded.shape)
    return np.clip(rec[:h, :w], 0.0, 1.0)


def degrade_clip(clip, spec):
    if clip.space != YCBCR444:
        raise ValidationError(f"degrade_clip expects YCbCr 4:4:4, got {clip.space}")
    frames = tuple(Frame(np.stack([degrade_plane(p, spec) for p in f.planes])) for f in clip)
    return Clip(frames, clip.fps)


def tune_strength(clips, target_db, lo=1e-3, hi=64.0, iterations=40):
    """Strength whose degraded clips score ``target_db`` PSNR against the originals."""

    def score(s):
        spec = DegradeSpec(s)
        errs = [np.mean((degrade_clip(c, spec).array() - c.array()) ** 2) for c in clips]
        return 10.0 * math.log10(1.0 / float(np.mean(errs)))

    if score(hi) > target_db or score(lo) < target_db:
        raise ValidationError(f"target {target_db} dB not reachable with strength in [{lo}, {hi}]")
    for _ in range(iterations):
        mid = math.sqrt(lo * hi)
        if score(mid) > target_db:
            lo = mid
        else:
            hi = mid
    return math.sqrt(lo * hi)


# -- dataset -----------------------------------------------------------------

AUGMENTATIONS = ("identity", "rot90", "rot180", "rot270", "hflip", "vflip")


def augment(patch, name):
    """Apply a rotation/flip to the spatial axes of a ``(C, H, W)`` patch."""
    if name == "identity":
        return patch
    if name.startswith("rot"):
        return np.ascontiguousarray(np.rot90(patch, int(name[3:]) // 90, axes=(1, 2)))
    if name == "hflip":
        return np.ascontiguousarray(patch[:, :, ::-1])
    if name == "vflip":
        return np.ascontiguousarray(patch[:, ::-1, :])
    raise ValidationError(f"unknown augmentation {name!r}")


def unaugment(patch, name):
    if name.startswith("rot") and name != "rot180":
        return augment(patch, "rot270" if name == "rot90" else "rot90")
    return augment(patch, name)


@dataclass
class PatchPair:
    degraded: TriPatch
    pristine: np.ndarray
    clip_index: int = 0
    augmentation: str = "identity"


def build_dataset(pristine_clips, spec, count, seed=0, patch=PATCH):
    """Sample ``count`` augmented (degraded, pristine) tri-frame patch pairs.

    Anchors are drawn half the time from the inference tiling grid and half
    the time uniformly over all in-bounds positions.
    """
    clips = list(pristine_clips)
    if not clips:
        raise ValidationError("build_dataset needs at least one clip")
    if count < 1:
        raise ValidationError(f"count must be >= 1, got {count}")
    for k, c in enumerate(clips):
        if len(c) < 3 or c.width < patch or c.height < patch:
            raise ValidationError(
                f"clip {k} is {len(c)} frames of {c.width}x{c.height}; need >= 3 frames of "
                f">= {patch}x{patch}"
            )
    degraded = [degrade_clip(c, spec) for c in clips]
    layouts = [compute_layout(c.width, c.height, patch) for c in clips]
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(count):
        k = int(rng.integers(len(clips)))
        clip = clips[k]
        i = int(rng.integers(len(clip)))
        if rng.random() < 0.5:
            x, y = layouts[k].anchors[int(rng.integers(len(layouts[k].anchors)))]
        else:
            x = int(rng.integers(clip.width - patch + 1))
            y = int(rng.integers(clip.height - patch + 1))
        aug = AUGMENTATIONS[int(rng.integers(len(AUGMENTATIONS)))]
        d = stack_frames(degraded[k], i)[:, y:y + patch, x:x + patch]
        p = stack_frames(clip, i)[:, y:y + patch, x:x + patch]
        pairs.append(PatchPair(
            TriPatch(augment(d, aug).astype(np.float32), (x, y), i),
            augment(p, aug).astype(np.float32),
            k,
            aug,
        ))
    return pairs


DATASET_MAGIC = b"TRIFDSET"
DATASET_VERSION = 1


def dataset_bytes(pairs, strength=0.0, seed=0):
    if not pairs:
        raise ValidationError("refusing to write an empty dataset")
    p = pairs[0].pristine.shape[-1]
    out = io.BytesIO()
    out.write(DATASET_MAGIC)
    out.write(struct.pack("<IIHdQ", DATASET_VERSION, len(pairs), p, float(strength), int(seed)))
    for pair in pairs:
        x, y = pair.degraded.anchor
        out.write(struct.pack("<IIIIB", pair.clip_index, pair.degraded.center_frame_index, x, y,
                              AUGMENTATIONS.index(pair.augmentation)))
        out.write(np.ascontiguousarray(pair.degraded.data, dtype="<f4").tobytes())
        out.write(np.ascontiguousarray(pair.pristine, dtype="<f4").tobytes())
    return out.getvalue()


def save_dataset(pairs, path, strength=0.0, seed=0):
    Path(path).write_bytes(dataset_bytes(pairs, strength, seed))


def load_dataset(path):
    data = Path(path).read_bytes()
    head = struct.calcsize("<IIHdQ")
    if data[:8] != DATASET_MAGIC:
        raise FormatError(f"{path}: not a dataset file (magic {data[:8]!r})")
    if len(data) < 8 + head:
        raise FormatError(f"{path}: truncated header")
    version, count, p, _strength, _seed = struct.unpack("<IIHdQ", data[8:8 + head])
    if version != DATASET_VERSION:
        raise FormatError(f"{path}: unsupported dataset version {version}")
    rec = struct.calcsize("<IIIIB")
    size = 9 * p * p * 4
    expected = 8 + head + count * (rec + 2 * size)
    if len(data) != expected:
        raise FormatError(f"{path}: {len(data)} bytes, header implies {expected}")
    pairs, off = [], 8 + head
    for _ in range(count):
        k, i, x, y, aug = struct.unpack("<IIIIB", data[off:off + rec])
        off += rec
        d = np.frombuffer(data[off:off + size], dtype="<f4").astype(np.float32).reshape(9, p, p)
        off += size
        t = np.frombuffer(data[off:off + size], dtype="<f4").astype(np.float32).reshape(9, p, p)
        off += size
        if aug >= len(AUGMENTATIONS):
            raise FormatError(f"{path}: bad augmentation code {aug} at byte offset {off}")
        pairs.append(PatchPair(TriPatch(d, (x, y), i), t, k, AUGMENTATIONS[aug]))
    return pairs


# -- training ----------------------------------------------------------------

@dataclass
class TrainingConfig:
    batch_size: int = 16
    epochs: int = 100
    initial_lr: float = 1e-4
    lr_decay: float = 0.1
    decay_every: int = 100
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    seed: int = 0
    loss: LossWeights = field(default_factory=LossWeights)
    dataset_size: int = None
    max_steps: int = None
    target_bitrate: str = "low"
    hidden_width: int = 32
    residual_blocks: int = 4

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossWeights(**self.loss)
        for name in ("batch_size", "epochs", "decay_every"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")
        for name in ("initial_lr", "lr_decay", "beta1", "beta2", "eps"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"{name} must be positive")
        if self.weight_decay < 0:
            raise ValidationError("weight_decay must be >= 0")
        if self.target_bitrate not in BITRATE_TAGS:
            raise ValidationError(f"target_bitrate must be one of {BITRATE_TAGS}")

    def generator_config(self):
        return GeneratorConfig(hidden_width=self.hidden_width, residual_blocks=self.residual_blocks)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValidationError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self):
        return asdict(self)


def load_training_config(path):
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON training config: {exc}") from exc
    if not isinstance(data, dict):
        raise ValidationError(f"{path}: training config must be a JSON object")
    return TrainingConfig.from_dict(data)


@dataclass
class TrainResult:
    model: object
    epoch_losses: list
    step_losses: list


def _stack_pairs(pairs):
    x = np.stack([p.degraded.data for p in pairs]).astype(np.float32)
    y = np.stack([p.pristine for p in pairs]).astype(np.float32)
    return x, y


def train(config, dataset, model=None, progress=None):
    """Train the generator with Adam on the combined loss.

    Mini-batches are drawn from a per-epoch shuffle seeded by ``config.seed``;
    ``max_steps`` stops early. ``progress(step, loss)`` is called after each step.
    """
    pairs = list(dataset)
    if config.dataset_size is not None:
        pairs = pairs[:config.dataset_size]
    if not pairs:
        raise ValidationError("training dataset is empty")
    if model is None:
        model = init_generator(config.generator_config(), config.seed, config.target_bitrate)
    model.meta["target_bitrate"] = config.target_bitrate
    x_all, y_all = _stack_pairs(pairs)
    rng = np.random.default_rng(config.seed)
    n = len(pairs)
    epoch_losses, step_losses = [], []
    steps = 0
    done = False
    for epoch in range(config.epochs):
        lr = lr_at_epoch(epoch, config.initial_lr, config.lr_decay, config.decay_every)
        order = rng.permutation(n)
        losses = []
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = np.sort(order[start:start + config.batch_size])
            out, tape = forward(model, x_all[idx], record_tape=True)
            value = combined_loss(out, y_all[idx], config.loss)
            if not (math.isfinite(value.total) and np.all(np.isfinite(value.grad))):
                raise NumericalError(
                    f"non-finite loss at epoch {epoch} batch {b} (pairs {idx.tolist()})"
                )
            grads = backward(model, tape, value.grad)
            apply_gradients(model, grads, lr, config.weight_decay,
                            (config.beta1, config.beta2), config.eps)
            losses.append(value.total)
            step_losses.append(value.total)
            steps += 1
            if progress is not None:
                progress(steps, value.total)
            if config.max_steps is not None and steps >= config.max_steps:
                done = True
                break
        epoch_losses.append(float(np.mean(losses)))
        if not done or start + config.batch_size >= n:
            model.meta["epochs_completed"] = model.meta.get("epochs_completed", 0) + 1
        logger.info("epoch %d lr %.3g loss %.6f", epoch, lr, epoch_losses[-1])
        if done:
            break
    return TrainResult(model, epoch_losses, step_losses)


def dataset_loss(model, pairs, weights=None, batch=16):
    """Mean combined loss of ``model`` over ``pairs`` (no parameter update)."""
    x, y = _stack_pairs(pairs)
    total = 0.0
    for s in range(0, len(pairs), batch):
        out = forward(model, x[s:s + batch])
        total += combined_loss(out, y[s:s + batch], weights).total * len(out)
    return total / len(pairs)


# -- inference ---------------------------------------------------------------

def enhance_clip(model, decoded, batch=16, pad_short=False):
    """Restore every frame of ``decoded`` through tri-frame patches and stitching."""
    if decoded.space != YCBCR444:
        raise ValidationError(f"enhance_clip expects YCbCr 4:4:4, got {decoded.space}")
    n = len(decoded)
    if n < 3 and not pad_short:
        raise ValidationError(f"enhancement needs at least 3 frames, clip has {n}")
    layout = compute_layout(decoded.width, decoded.height)
    frames = []
    for i in range(n):
        patches = extract_patch_array(decoded, i, layout, pad_short)
        window = channel_window(i, n, pad_short).slice()
        outputs = []
        for s in range(0, len(patches), batch):
            out = forward(model, patches[s:s + batch])
            outputs.extend(out[:, window])
        frames.append(stitch(zip(layout.anchors, outputs), layout))
    return Clip(tuple(frames), decoded.fps)


def evaluate(model, decoded, pristine, color="ycbcr", luma_only=False, matrix="bt709",
             full_range=False):
    """PSNR gain of the enhanced clip over the decoded anchor, against ``pristine``."""
    if color not in ("ycbcr", "rgb"):
        raise ValidationError(f"color must be 'ycbcr' or 'rgb', got {color!r}")
    if len(decoded) != len(pristine) or (decoded.width, decoded.height) != (pristine.width, pristine.height):
        raise ValidationError(
            f"decoded ({len(decoded)} x {decoded.width}x{decoded.height}) and pristine "
            f"({len(pristine)} x {pristine.width}x{pristine.height}) clips are not aligned"
        )
    enhanced = enhance_clip(model, decoded)
    anchor, reference = decoded, pristine
    if color == "rgb":
        if luma_only:
            raise ValidationError("luma-only PSNR is not defined for RGB evaluation")
        enhanced, anchor, reference = (convert_clip(c, RGB, matrix, full_range)
                                       for c in (enhanced, anchor, reference))
    return metrics.psnr_gain_report(enhanced, anchor, reference, luma_only, color)
