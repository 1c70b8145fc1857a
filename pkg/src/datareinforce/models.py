"""Tiny feed-forward vision models built on hand-written layers.

Each layer owns its parameter tensors and implements forward plus a backward
that consumes the upstream gradient and fills per-parameter gradients.  The
math is plain numpy, dtype-generic: training runs in float32, gradient checks
build float64 twins.  Two stock architectures are provided: a one-conv
student ("student-s") and a three-conv teacher ("teacher-l"), both ending in
global average pooling and a linear classifier head.

Checkpoints are a small length-prefixed tensor archive together with the
architecture signature needed to rebuild the model before loading weights.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .rng import SeededRng

CKPT_MAGIC = b"DRWT"
CKPT_VERSION = 1

ARCH_NAMES = ("student-s", "teacher-l")


class Layer:
    """Base layer: no parameters, identity semantics left abstract."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dout: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class Dense(Layer):
    def __init__(self, d_in: int, d_out: int, rng: SeededRng, dtype=np.float32):
        super().__init__()
        scale = np.sqrt(2.0 / d_in)
        w = rng.normal(0.0, scale, size=(d_in, d_out))
        self.params = {"w": w.astype(dtype), "b": np.zeros(d_out, dtype=dtype)}
        self._x = None

    def forward(self, x):
        self._x = x
        return x @ self.params["w"] + self.params["b"]

    def backward(self, dout):
        self.grads = {"w": self._x.T @ dout, "b": dout.sum(axis=0)}
        return dout @ self.params["w"].T


class Conv3x3(Layer):
    """3x3 convolution, padding 1, configurable stride, NHWC layout."""

    def __init__(self, c_in: int, c_out: int, rng: SeededRng, stride: int = 1, dtype=np.float32):
        super().__init__()
        if stride < 1:
            raise ValueError("stride must be >= 1")
        self.stride = stride
        self.c_in = c_in
        self.c_out = c_out
        scale = np.sqrt(2.0 / (9 * c_in))
        w = rng.normal(0.0, scale, size=(3, 3, c_in, c_out))
        self.params = {"w": w.astype(dtype), "b": np.zeros(c_out, dtype=dtype)}
        self._cols = None
        self._in_shape = None

    def _out_hw(self, h: int, w: int) -> tuple[int, int]:
        return (h + 2 - 3) // self.stride + 1, (w + 2 - 3) // self.stride + 1

    def forward(self, x):
        b, h, w, c = x.shape
        if c != self.c_in:
            raise ValueError(f"expected {self.c_in} input channels, got {c}")
        oh, ow = self._out_hw(h, w)
        s = self.stride
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
        cols = np.empty((b, oh, ow, 9, c), dtype=x.dtype)
        for ki in range(3):
            for kj in range(3):
                cols[:, :, :, ki * 3 + kj, :] = xp[
                    :, ki : ki + s * (oh - 1) + 1 : s, kj : kj + s * (ow - 1) + 1 : s, :
                ]
        self._cols = cols
        self._in_shape = x.shape
        wmat = self.params["w"].reshape(9 * c, self.c_out)
        out = cols.reshape(b * oh * ow, 9 * c) @ wmat + self.params["b"]
        return out.reshape(b, oh, ow, self.c_out)

    def backward(self, dout):
        b, h, w, c = self._in_shape
        _, oh, ow, _ = dout.shape
        s = self.stride
        dflat = dout.reshape(b * oh * ow, self.c_out)
        cols_flat = self._cols.reshape(b * oh * ow, 9 * c)
        self.grads = {
            "w": (cols_flat.T @ dflat).reshape(3, 3, c, self.c_out),
            "b": dflat.sum(axis=0),
        }
        dcols = (dflat @ self.params["w"].reshape(9 * c, self.c_out).T).reshape(b, oh, ow, 9, c)
        dxp = np.zeros((b, h + 2, w + 2, c), dtype=dout.dtype)
        for ki in range(3):
            for kj in range(3):
                dxp[:, ki : ki + s * (oh - 1) + 1 : s, kj : kj + s * (ow - 1) + 1 : s, :] += dcols[
                    :, :, :, ki * 3 + kj, :
                ]
        return dxp[:, 1 : h + 1, 1 : w + 1, :]


class ReLU(Layer):
    def forward(self, x):
        self._mask = x > 0
        return x * self._mask

    def backward(self, dout):
        return dout * self._mask


class GlobalAvgPool(Layer):
    def forward(self, x):
        self._in_shape = x.shape
        return x.mean(axis=(1, 2))

    def backward(self, dout):
        b, h, w, c = self._in_shape
        return np.broadcast_to(dout[:, None, None, :] / (h * w), (b, h, w, c)).astype(dout.dtype)


class Model:
    """A layer list ending in class logits; softmax lives in the loss."""

    def __init__(self, layers: list[Layer], arch: str, in_channels: int, num_classes: int, width: int):
        self.layers = layers
        self.arch = arch
        self.in_channels = in_channels
        self.num_classes = num_classes
        self.width = width

    def forward(self, x: np.ndarray) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, dlogits: np.ndarray) -> None:
        d = dlogits
        for layer in reversed(self.layers):
            d = layer.backward(d)

    def parameters(self):
        for i, layer in enumerate(self.layers):
            for name, arr in layer.params.items():
                yield f"layer{i}.{name}", arr

    def num_params(self) -> int:
        return sum(arr.size for _, arr in self.parameters())

    def predict_probs(self, batch_u8: np.ndarray, batch_size: int = 1000) -> np.ndarray:
        """Softmax class probabilities for a uint8 image batch, float64."""
        outs = []
        for lo in range(0, batch_u8.shape[0], batch_size):
            x = batch_u8[lo : lo + batch_size].astype(np.float32) / np.float32(255.0)
            logits = self.forward(x).astype(np.float64)
            logits -= logits.max(axis=1, keepdims=True)
            e = np.exp(logits)
            outs.append(e / e.sum(axis=1, keepdims=True))
        return np.concatenate(outs, axis=0)


def build_model(
    arch: str,
    in_channels: int,
    num_classes: int,
    rng: SeededRng,
    width: int | None = None,
    dtype=np.float32,
) -> Model:
    """Construct a stock architecture with deterministic initialization.

    Args:
        width: channel count of the first conv; defaults to 16 for
            "student-s" and "teacher-l" alike.  The teacher doubles it in
            deeper stages.
    """
    if arch not in ARCH_NAMES:
        raise ValueError(f"unknown architecture {arch!r}, expected one of {ARCH_NAMES}")
    w = 16 if width is None else int(width)
    if w < 1:
        raise ValueError("width must be >= 1")
    if arch == "student-s":
        layers = [
            Conv3x3(in_channels, w, rng.derive(0), stride=2, dtype=dtype),
            ReLU(),
            GlobalAvgPool(),
            Dense(w, num_classes, rng.derive(1), dtype=dtype),
        ]
    else:
        layers = [
            Conv3x3(in_channels, w, rng.derive(0), stride=2, dtype=dtype),
            ReLU(),
            Conv3x3(w, 2 * w, rng.derive(1), stride=2, dtype=dtype),
            ReLU(),
            Conv3x3(2 * w, 2 * w, rng.derive(2), stride=1, dtype=dtype),
            ReLU(),
            GlobalAvgPool(),
            Dense(2 * w, num_classes, rng.derive(3), dtype=dtype),
        ]
    return Model(layers, arch, in_channels, num_classes, w)


# ---------------------------------------------------------------------------
# checkpoints


def save_model(model: Model, path: str | Path) -> None:
    """Write architecture signature plus all tensors, little endian f32."""
    parts = [CKPT_MAGIC, struct.pack("<H", CKPT_VERSION)]
    arch = model.arch.encode("utf-8")
    parts.append(struct.pack("<H", len(arch)))
    parts.append(arch)
    parts.append(struct.pack("<HHH", model.in_channels, model.num_classes, model.width))
    tensors = list(model.parameters())
    parts.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_model(path: str | Path) -> Model:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise ValueError(f"bad checkpoint magic {raw[:4]!r}")
    off = 4
    (version,) = struct.unpack_from("<H", raw, off)
    off += 2
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    (arch_len,) = struct.unpack_from("<H", raw, off)
    off += 2
    arch = raw[off : off + arch_len].decode("utf-8")
    off += arch_len
    in_channels, num_classes, width = struct.unpack_from("<HHH", raw, off)
    off += 6
    model = build_model(arch, in_channels, num_classes, SeededRng(0), width=width)
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    tensors = dict(model.parameters())
    if count != len(tensors):
        raise ValueError(f"checkpoint has {count} tensors, model expects {len(tensors)}")
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off : off + name_len].decode("utf-8")
        off += name_len
        (ndim,) = struct.unpack_from("<B", raw, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(raw, dtype="<f4", count=size, offset=off).reshape(shape)
        off += 4 * size
        if name not in tensors:
            raise ValueError(f"unexpected tensor {name!r} in checkpoint")
        if tensors[name].shape != data.shape:
            raise ValueError(
                f"tensor {name!r} has shape {data.shape}, model expects {tensors[name].shape}"
            )
        tensors[name][...] = data
    if off != len(raw):
        raise ValueError(f"{len(raw) - off} trailing bytes in checkpoint")
    return model
