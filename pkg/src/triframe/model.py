"""Compact residual generator mapping 9-channel tri-frame patches to 9 channels.

Layout: ``head`` conv + leaky ReLU, ``residual_blocks`` blocks of
``conv -> leaky ReLU -> conv`` with identity shortcut, ``tail`` conv, and a
global skip adding the input back. The tail starts at zero, so a fresh model
is exactly the identity mapping.
"""

import io
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import FormatError, ValidationError
from .tensor_core import (
    AdamState,
    adam_step,
    conv2d_backward,
    conv2d_forward,
    leaky_relu,
    leaky_relu_backward,
)

BITRATE_TAGS = ("high", "low")


@dataclass(frozen=True)
class GeneratorConfig:
    channels_in: int = 9
    channels_out: int = 9
    hidden_width: int = 32
    residual_blocks: int = 4
    kernel: int = 3
    slope: float = 0.2
    global_skip: bool = True

    def __post_init__(self):
        if self.channels_in != 9 or self.channels_out != 9:
            raise ValidationError(
                f"generator maps 9 channels to 9, got {self.channels_in}->{self.channels_out}"
            )
        if self.hidden_width < 1 or self.residual_blocks < 0:
            raise ValidationError(f"invalid width/depth {self.hidden_width}/{self.residual_blocks}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValidationError(f"kernel size must be odd, got {self.kernel}")
        if not 0.0 <= self.slope < 1.0:
            raise ValidationError(f"slope must be in [0, 1), got {self.slope}")

    def parameter_shapes(self):
        """Ordered ``{name: shape}`` for every tensor the config implies."""
        k, w = self.kernel, self.hidden_width
        shapes = {
            "head.weight": (w, self.channels_in, k, k),
            "head.bias": (w,),
        }
        for i in range(self.residual_blocks):
            for j in (1, 2):
                shapes[f"block{i}.conv{j}.weight"] = (w, w, k, k)
                shapes[f"block{i}.conv{j}.bias"] = (w,)
        shapes["tail.weight"] = (self.channels_out, w, k, k)
        shapes["tail.bias"] = (self.channels_out,)
        return shapes

    def parameter_count(self):
        return sum(int(np.prod(s)) for s in self.parameter_shapes().values())


@dataclass
class GeneratorModel:
    config: GeneratorConfig
    params: dict
    adam: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    version: int = 0

    @property
    def dtype(self):
        return self.params["head.weight"].dtype

    def astype(self, dtype):
        """Copy with parameters cast to ``dtype`` (float64 for gradient checks)."""
        params = {k: v.astype(dtype) for k, v in self.params.items()}
        return GeneratorModel(self.config, params, {}, dict(self.meta))


def init_generator(config=None, seed=0, target_bitrate="low"):
    """Fan-in scaled normal kernels, zero biases, zero tail."""
    config = config or GeneratorConfig()
    if target_bitrate not in BITRATE_TAGS:
        raise ValidationError(f"target_bitrate must be one of {BITRATE_TAGS}")
    rng = np.random.default_rng(seed)
    gain = 2.0 / (1.0 + config.slope ** 2)
    params = {}
    for name, shape in config.parameter_shapes().items():
        if name.endswith(".bias") or name.startswith("tail."):
            params[name] = np.zeros(shape, dtype=np.float32)
        else:
            fan_in = shape[1] * shape[2] * shape[3]
            std = np.sqrt(gain / fan_in)
            params[name] = (rng.standard_normal(shape) * std).astype(np.float32)
    meta = {"seed": int(seed), "epochs_completed": 0, "steps": 0, "target_bitrate": target_bitrate}
    return GeneratorModel(config, params, {}, meta)


@dataclass
class Tape:
    model_id: int
    version: int
    saved: dict
    input_shape: tuple


def forward(model, x, record_tape=False):
    """Run the generator on ``(9, H, W)`` or ``(B, 9, H, W)`` patches.

    The convolutions run in the parameter dtype; the global skip adds the
    original input, so an all-zero residual returns ``x`` bit for bit.
    Returns ``out`` or ``(out, tape)`` when ``record_tape`` is set.
    """
    x = np.asarray(x)
    cfg = model.config
    if x.ndim not in (3, 4) or x.shape[-3] != cfg.channels_in:
        raise ValidationError(
            f"generator expects ({cfg.channels_in}, H, W) patches, got shape {x.shape}"
        )
    if min(x.shape[-2:]) < cfg.kernel:
        raise ValidationError(f"spatial size {x.shape[-2:]} smaller than kernel {cfg.kernel}")
    p, s = model.params, cfg.slope
    saved = {}
    h = x.astype(model.dtype, copy=False)
    saved["head.in"] = h
    z = conv2d_forward(h, p["head.weight"], p["head.bias"])
    saved["head.pre"] = z
    h = leaky_relu(z, s)
    for i in range(cfg.residual_blocks):
        pre = f"block{i}"
        saved[f"{pre}.in"] = h
        z1 = conv2d_forward(h, p[f"{pre}.conv1.weight"], p[f"{pre}.conv1.bias"])
        a1 = leaky_relu(z1, s)
        saved[f"{pre}.pre1"], saved[f"{pre}.act1"] = z1, a1
        h = h + conv2d_forward(a1, p[f"{pre}.conv2.weight"], p[f"{pre}.conv2.bias"])
    saved["tail.in"] = h
    residual = conv2d_forward(h, p["tail.weight"], p["tail.bias"])
    out = x + residual if cfg.global_skip else residual
    if not record_tape:
        return out
    return out, Tape(id(model), model.version, saved, x.shape)


def backward(model, tape, grad_output, input_grad=False):
    """Exact parameter gradients of :func:`forward`.

    Returns ``{name: grad}``; with ``input_grad`` also the gradient with
    respect to the network input as a second value.
    """
    if tape is None:
        raise ValidationError("backward needs the tape from forward(..., record_tape=True)")
    if tape.model_id != id(model) or tape.version != model.version:
        raise ValidationError("stale tape: parameters changed since the forward pass")
    grad_output = np.asarray(grad_output)
    if grad_output.shape != tape.input_shape:
        raise ValidationError(f"grad_output {grad_output.shape} != output shape {tape.input_shape}")
    cfg, p, saved, s = model.config, model.params, tape.saved, model.config.slope
    grads = {}
    g = grad_output.astype(model.dtype, copy=False)
    gh, grads["tail.weight"], grads["tail.bias"] = conv2d_backward(g, saved["tail.in"], p["tail.weight"])
    for i in reversed(range(cfg.residual_blocks)):
        pre = f"block{i}"
        ga1, grads[f"{pre}.conv2.weight"], grads[f"{pre}.conv2.bias"] = conv2d_backward(
            gh, saved[f"{pre}.act1"], p[f"{pre}.conv2.weight"])
        gz1 = leaky_relu_backward(ga1, saved[f"{pre}.pre1"], s)
        gin, grads[f"{pre}.conv1.weight"], grads[f"{pre}.conv1.bias"] = conv2d_backward(
            gz1, saved[f"{pre}.in"], p[f"{pre}.conv1.weight"])
        gh = gh + gin
    gz = leaky_relu_backward(gh, saved["head.pre"], s)
    gx, grads["head.weight"], grads["head.bias"] = conv2d_backward(
        gz, saved["head.in"], p["head.weight"], need_input_grad=input_grad)
    grads = {name: grads[name] for name in p}
    if not input_grad:
        return grads
    if cfg.global_skip:
        gx = gx + grad_output
    return grads, gx


def apply_gradients(model, grads, lr, weight_decay=0.0, betas=(0.9, 0.999), eps=1e-8):
    """Adam update of every parameter in place; bumps ``model.version``.

    ``weight_decay`` adds ``weight_decay * param`` to each gradient (L2 decay).
    """
    for name, param in model.params.items():
        g = grads[name]
        if weight_decay:
            g = g + weight_decay * param
        state = model.adam.get(name)
        if state is None:
            state = AdamState.zeros_like(param, betas[0], betas[1], eps)
        model.params[name], model.adam[name] = adam_step(param, g, state, lr)
    model.version += 1
    model.meta["steps"] = model.meta.get("steps", 0) + 1


# -- checkpoints -------------------------------------------------------------
#
#   magic "TRIFRAME" | u32 version | u64 payload length
#   payload: u32 len + JSON {config, meta}
#            u32 tensor count, then per tensor: u16 len + name, u8 ndim,
#            u32 dims..., float32 LE data
#            u8 has_adam; if set: u64 t, f64 beta1, beta2, eps, then m and v
#            (float32 LE) for each tensor in order

CHECKPOINT_MAGIC = b"TRIFRAME"
CHECKPOINT_VERSION = 1


def _header_json(model):
    record = {"config": asdict(model.config), "meta": model.meta}
    return json.dumps(record, sort_keys=True, separators=(",", ":")).encode("utf-8")


def checkpoint_bytes(model):
    out = io.BytesIO()
    header = _header_json(model)
    out.write(struct.pack("<I", len(header)))
    out.write(header)
    out.write(struct.pack("<I", len(model.params)))
    for name, arr in model.params.items():
        raw = name.encode("utf-8")
        out.write(struct.pack("<H", len(raw)))
        out.write(raw)
        out.write(struct.pack("<B", arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    if model.adam and set(model.adam) == set(model.params):
        states = [model.adam[n] for n in model.params]
        t = states[0].t
        if any(st.t != t for st in states):
            raise ValidationError("optimizer states disagree on the step counter")
        first = states[0]
        out.write(struct.pack("<BQddd", 1, t, first.beta1, first.beta2, first.eps))
        for st in states:
            out.write(np.ascontiguousarray(st.m, dtype="<f4").tobytes())
            out.write(np.ascontiguousarray(st.v, dtype="<f4").tobytes())
    else:
        out.write(struct.pack("<B", 0))
    payload = out.getvalue()
    return CHECKPOINT_MAGIC + struct.pack("<IQ", CHECKPOINT_VERSION, len(payload)) + payload


def save_checkpoint(model, path):
    data = checkpoint_bytes(model)
    with open(path, "wb") as fh:
        fh.write(data)
    return len(data)


class _Reader:
    def __init__(self, data, source):
        self.data, self.off, self.source = data, 0, source

    def take(self, n, what):
        if self.off + n > len(self.data):
            raise FormatError(
                f"{self.source}: truncated while reading {what} at byte offset {self.off} "
                f"(needs {n} bytes, {len(self.data) - self.off} remain)"
            )
        chunk = self.data[self.off:self.off + n]
        self.off += n
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def checkpoint_from_bytes(data, expect_config=None, source="<bytes>"):
    r = _Reader(data, source)
    magic = r.take(len(CHECKPOINT_MAGIC), "magic")
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r} at byte offset 0")
    version, length = r.unpack("<IQ", "header")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{source}: unsupported checkpoint version {version} at byte offset 8")
    if length != len(data) - r.off:
        raise FormatError(
            f"{source}: payload length field at byte offset 12 says {length} bytes, "
            f"file holds {len(data) - r.off}"
        )
    (hlen,) = r.unpack("<I", "config length")
    hoff = r.off
    try:
        record = json.loads(r.take(hlen, "config record").decode("utf-8"))
        config = GeneratorConfig(**record["config"])
        meta = record["meta"]
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{source}: bad config record at byte offset {hoff}: {exc}") from exc
    if expect_config is not None and config != expect_config:
        raise ValidationError(f"{source}: checkpoint config {config} != required {expect_config}")

    shapes = config.parameter_shapes()
    (count,) = r.unpack("<I", "tensor count")
    if count != len(shapes):
        raise FormatError(f"{source}: {count} tensors stored, config implies {len(shapes)}")
    params = {}
    for expected_name, expected_shape in shapes.items():
        at = r.off
        (nlen,) = r.unpack("<H", "name length")
        name = r.take(nlen, "tensor name").decode("utf-8", "replace")
        (ndim,) = r.unpack("<B", f"{name} rank")
        dims = r.unpack(f"<{ndim}I", f"{name} shape")
        if name != expected_name or tuple(dims) != expected_shape:
            raise FormatError(
                f"{source}: tensor record at byte offset {at} is {name}{list(dims)}, "
                f"config expects {expected_name}{list(expected_shape)}"
            )
        n = int(np.prod(dims))
        params[name] = np.frombuffer(r.take(4 * n, f"{name} data"), dtype="<f4").astype(np.float32).reshape(dims)
    (has_adam,) = r.unpack("<B", "optimizer flag")
    adam = {}
    if has_adam == 1:
        t, b1, b2, eps = r.unpack("<Qddd", "optimizer header")
        for name, shape in shapes.items():
            n = int(np.prod(shape))
            m = np.frombuffer(r.take(4 * n, f"{name} first moment"), dtype="<f4").astype(np.float32)
            v = np.frombuffer(r.take(4 * n, f"{name} second moment"), dtype="<f4").astype(np.float32)
            adam[name] = AdamState(m.reshape(shape), v.reshape(shape), int(t), b1, b2, eps)
    elif has_adam != 0:
        raise FormatError(f"{source}: bad optimizer flag {has_adam} at byte offset {r.off - 1}")
    if r.off != len(data):
        raise FormatError(f"{source}: {len(data) - r.off} trailing bytes at offset {r.off}")
    return GeneratorModel(config, params, adam, meta)


def load_checkpoint(path, expect_config=None):
    """Read a checkpoint; the config comes from the file unless ``expect_config`` pins it."""
    with open(path, "rb") as fh:
        data = fh.read()
    return checkpoint_from_bytes(data, expect_config, source=str(path))
