"""Toy steganalysis network with a hand-derived backward pass.

    image -> high-pass residual (fixed 3x3 stencil)
          -> [conv3x3 -> ReLU -> 2x2 avg-pool] per entry of ``channels``
          -> global average pool -> linear projection (z)
          -> linear classifier (2 logits)

``z`` is what the contrastive losses see; the logits feed cross-entropy.
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

HIGH_PASS = np.array([[-1.0, 2.0, -1.0], [2.0, -4.0, 2.0], [-1.0, 2.0, -1.0]]) / 4.0

CKPT_MAGIC = b"SCFC"
CKPT_VERSION = 1


class CheckpointFormatError(ValueError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 16
    channels: tuple[int, ...] = (8, 16)
    feature_dim: int = 32
    kernel_size: int = 3
    trainable_preprocessing: bool = False

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.image_size < 8:
            raise ValueError(f"image_size must be >= 8, got {self.image_size}")
        if self.feature_dim < 2:
            raise ValueError(f"feature_dim must be >= 2, got {self.feature_dim}")
        if self.kernel_size != 3:
            raise ValueError("only 3x3 kernels are supported")
        if not self.channels or min(self.channels) < 1:
            raise ValueError("channels must be a non-empty list of positive counts")
        if self.image_size % (2 ** len(self.channels)):
            raise ValueError(
                f"image_size {self.image_size} must be divisible by 2**{len(self.channels)} for the pooling stages"
            )

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {"hp": (3, 3)}
        cin = 1
        for i, cout in enumerate(self.channels):
            shapes[f"conv{i}.W"] = (cout, cin, 3, 3)
            shapes[f"conv{i}.b"] = (cout,)
            cin = cout
        shapes["proj.W"] = (self.feature_dim, cin)
        shapes["proj.b"] = (self.feature_dim,)
        shapes["cls.W"] = (2, self.feature_dim)
        shapes["cls.b"] = (2,)
        return shapes


ModelParams = dict  # name -> float64 ndarray, ordered as ModelConfig.param_shapes()


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """High-pass stencil for preprocessing; He-uniform weights; zero biases."""
    params = {}
    for name, shape in cfg.param_shapes().items():
        if name == "hp":
            params[name] = HIGH_PASS.copy()
        elif name.endswith(".b"):
            params[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape)
    return params


# -- layers -----------------------------------------------------------------

def _windows(xp: np.ndarray, h: int, w: int) -> np.ndarray:
    """(B, C, h+2, w+2) -> (B*h*w, C*9) patch matrix."""
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))
    B, C = xp.shape[:2]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(B * h * w, C * 9)


def conv_forward(x: np.ndarray, W: np.ndarray, b: np.ndarray):
    """Stride-1, zero-padded 3x3 cross-correlation. Returns (out, cols)."""
    B, C, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = _windows(xp, h, w)
    out = cols @ W.reshape(W.shape[0], -1).T + b
    return out.reshape(B, h, w, -1).transpose(0, 3, 1, 2), cols


def conv_backward(dout: np.ndarray, cols: np.ndarray, W: np.ndarray, need_dx: bool = True):
    B, cout, h, w = dout.shape
    d2 = dout.transpose(0, 2, 3, 1).reshape(-1, cout)
    dW = (d2.T @ cols).reshape(W.shape)
    db = d2.sum(axis=0)
    if not need_dx:
        return None, dW, db
    cin = W.shape[1]
    dcols = (d2 @ W.reshape(cout, -1)).reshape(B, h, w, cin, 3, 3)
    dxp = np.zeros((B, cin, h + 2, w + 2))
    for i in range(3):
        for j in range(3):
            dxp[:, :, i:i + h, j:j + w] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return dxp[:, :, 1:-1, 1:-1], dW, db


def high_pass(x: np.ndarray, kernel: np.ndarray):
    """Residual of single-channel images under ``kernel`` with reflect padding.

    Reflection keeps constant images at exactly zero residual, border included.
    """
    B, _, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)), mode="reflect")
    cols = _windows(xp, h, w)
    return (cols @ kernel.reshape(9)).reshape(B, 1, h, w), cols


def avg_pool2(x: np.ndarray) -> np.ndarray:
    B, C, h, w = x.shape
    return x.reshape(B, C, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def avg_pool2_backward(d: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(d, 2, axis=2), 2, axis=3) * 0.25


# -- network ----------------------------------------------------------------

@dataclass
class ForwardTrace:
    cfg: ModelConfig
    batch: int
    hp_cols: np.ndarray
    conv_cols: list
    pre_act: list
    pooled_shape: tuple
    g: np.ndarray
    z: np.ndarray


def _check_images(cfg: ModelConfig, images) -> np.ndarray:
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 3:
        x = x[:, None]
    if x.ndim != 4 or x.shape[1] != 1 or x.shape[2:] != (cfg.image_size, cfg.image_size):
        raise ValueError(
            f"expected images of shape (B, {cfg.image_size}, {cfg.image_size}), got {np.shape(images)}"
        )
    return x


def forward(params: dict, cfg: ModelConfig, images):
    """Run the network on images scaled to [0, 1].

    Returns ``(z, logits, trace)``.
    """
    x = _check_images(cfg, images)
    B = x.shape[0]
    r, hp_cols = high_pass(x, params["hp"])
    conv_cols, pre_act = [], []
    h = r
    for i in range(len(cfg.channels)):
        a, cols = conv_forward(h, params[f"conv{i}.W"], params[f"conv{i}.b"])
        conv_cols.append(cols)
        pre_act.append(a)
        h = avg_pool2(np.maximum(a, 0.0))
    g = h.mean(axis=(2, 3))
    z = g @ params["proj.W"].T + params["proj.b"]
    logits = z @ params["cls.W"].T + params["cls.b"]
    trace = ForwardTrace(cfg, B, hp_cols, conv_cols, pre_act, h.shape, g, z)
    return z, logits, trace


def backward(params: dict, trace: ForwardTrace, dZ, dlogits) -> dict[str, np.ndarray]:
    """Parameter gradients given upstream ``dZ`` (contrastive) and ``dlogits`` (CE).

    Either upstream may be ``None``, meaning zero. The preprocessing kernel
    gradient is always returned; whether it is applied is the optimizer's call.
    """
    cfg, B = trace.cfg, trace.batch
    shapes = {"dZ": (B, cfg.feature_dim), "dlogits": (B, 2)}
    for name, arr in (("dZ", dZ), ("dlogits", dlogits)):
        if arr is not None and np.shape(arr) != shapes[name]:
            raise ValueError(f"{name} shape {np.shape(arr)} does not match trace {shapes[name]}")
    grads: dict[str, np.ndarray] = {}

    if dlogits is not None:
        grads["cls.W"] = dlogits.T @ trace.z
        grads["cls.b"] = dlogits.sum(axis=0)
        dz = dlogits @ params["cls.W"]
        if dZ is not None:
            dz = dz + dZ
    else:
        grads["cls.W"] = np.zeros_like(params["cls.W"])
        grads["cls.b"] = np.zeros_like(params["cls.b"])
        dz = np.zeros((B, cfg.feature_dim)) if dZ is None else np.asarray(dZ, dtype=np.float64)

    grads["proj.W"] = dz.T @ trace.g
    grads["proj.b"] = dz.sum(axis=0)
    dg = dz @ params["proj.W"]
    _, C, ph, pw = trace.pooled_shape
    dh = np.broadcast_to(dg[:, :, None, None] / (ph * pw), trace.pooled_shape)

    for i in reversed(range(len(cfg.channels))):
        a = trace.pre_act[i]
        da = avg_pool2_backward(dh) * (a > 0)
        dh, grads[f"conv{i}.W"], grads[f"conv{i}.b"] = conv_backward(
            da, trace.conv_cols[i], params[f"conv{i}.W"])
    # dh is now d(loss)/d(residual)
    grads["hp"] = (trace.hp_cols.T @ dh.reshape(-1)).reshape(3, 3)
    return {name: grads[name] for name in cfg.param_shapes()}


# -- checkpoints ------------------------------------------------------------

def dumps_checkpoint(cfg: ModelConfig, params: dict) -> bytes:
    ints = [cfg.image_size, cfg.kernel_size, cfg.feature_dim, int(cfg.trainable_preprocessing),
            len(cfg.channels), *cfg.channels]
    parts = [CKPT_MAGIC, bytes([CKPT_VERSION]), struct.pack(f"<{len(ints)}I", *ints)]
    for name, shape in cfg.param_shapes().items():
        arr = np.asarray(params[name], dtype="<f8")
        if arr.shape != shape:
            raise ValueError(f"parameter {name} has shape {arr.shape}, expected {shape}")
        parts.append(struct.pack("<I", arr.size))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def loads_checkpoint(buf: bytes) -> tuple[ModelConfig, dict]:
    if buf[:4] != CKPT_MAGIC:
        raise CheckpointFormatError("magic", f"expected {CKPT_MAGIC!r}, found {bytes(buf[:4])!r}")
    if len(buf) < 5 or buf[4] != CKPT_VERSION:
        raise CheckpointFormatError("version", f"expected {CKPT_VERSION}")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointFormatError("checksum", "CRC32 mismatch (file truncated or corrupted)")
    try:
        off = 5
        image_size, kernel_size, feature_dim, trainable, n_layers = struct.unpack_from("<5I", body, off)
        off += 20
        channels = struct.unpack_from(f"<{n_layers}I", body, off)
        off += 4 * n_layers
        cfg = ModelConfig(image_size, channels, feature_dim, kernel_size, bool(trainable))
        params = {}
        for name, shape in cfg.param_shapes().items():
            (n,) = struct.unpack_from("<I", body, off)
            off += 4
            if n != int(np.prod(shape)):
                raise CheckpointFormatError(name, f"block length {n} does not match shape {shape}")
            params[name] = np.frombuffer(body, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64)
            off += 8 * n
    except struct.error as exc:
        raise CheckpointFormatError("length", str(exc)) from None
    if off != len(body):
        raise CheckpointFormatError("length", f"{len(body) - off} trailing bytes")
    return cfg, params


def save_checkpoint(path, cfg: ModelConfig, params: dict) -> None:
    Path(path).write_bytes(dumps_checkpoint(cfg, params))


def load_checkpoint(path) -> tuple[ModelConfig, dict]:
    return loads_checkpoint(Path(path).read_bytes())
