"""Target classifiers, the initialization generator, and checkpoint I/O.

Modules here are thin parameter containers over :mod:`fgsmsdi.tensor`. Each
exposes its parameters by dotted name, which is also how they are laid out in
checkpoints.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, Optional, Tuple, Union

import numpy as np

from . import tensor as T
from .tensor import Tensor

CHECKPOINT_MAGIC = b"ADVT"
CHECKPOINT_VERSION = 1
_DTYPE_TAGS = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


class Module:
    """Minimal container: parameters are ``Tensor`` attributes, buffers are arrays."""

    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix + name + ".")

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield from value.named_buffers(prefix + name + ".")
            elif isinstance(value, np.ndarray) and name in getattr(self, "_buffers", ()):
                yield prefix + name, value

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(np.sum([p.data.size for p in self.parameters()]))

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def requires_grad_(self, flag: bool) -> "Module":
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: b.copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        bufs = dict(self.named_buffers())
        missing = (set(own) | set(bufs)) - set(state)
        if missing:
            raise KeyError(f"state dict is missing {sorted(missing)}")
        for name, p in own.items():
            if state[name].shape != p.shape:
                raise T.ShapeError(f"load_state_dict: {name} has shape {state[name].shape}, "
                                   f"expected {p.shape}")
            p.data = np.ascontiguousarray(state[name], dtype=p.dtype)
        for name, b in bufs.items():
            b[...] = state[name]

    def __call__(self, *args):
        return self.forward(*args)


class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int = 3, stride: int = 1,
                 padding: int = 1, bias: bool = False, dtype=T.DEFAULT_DTYPE):
        self.weight = Tensor(np.zeros((out_ch, in_ch, kernel, kernel), dtype), requires_grad=True)
        if bias:
            self.bias = Tensor(np.zeros(out_ch, dtype), requires_grad=True)
        self.stride, self.padding = stride, padding

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, getattr(self, "bias", None), self.stride, self.padding)


class BatchNorm2d(Module):
    _buffers = ("running_mean", "running_var")

    def __init__(self, channels: int, dtype=T.DEFAULT_DTYPE):
        self.weight = Tensor(np.ones(channels, dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(channels, dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype)
        self.running_var = np.ones(channels, dtype)

    def forward(self, x: Tensor) -> Tensor:
        return T.batchnorm2d(x, self.weight, self.bias, self.running_mean, self.running_var,
                             self.training)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, dtype=T.DEFAULT_DTYPE):
        self.weight = Tensor(np.zeros((out_features, in_features), dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(out_features, dtype), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class ResBlock(Module):
    """conv-BN-ReLU-conv-BN on a residual branch, identity skip, ReLU after the sum."""

    def __init__(self, channels: int, dtype=T.DEFAULT_DTYPE):
        self.conv1 = Conv2d(channels, channels, 3, 1, 1, dtype=dtype)
        self.bn1 = BatchNorm2d(channels, dtype)
        self.conv2 = Conv2d(channels, channels, 3, 1, 1, dtype=dtype)
        self.bn2 = BatchNorm2d(channels, dtype)

    def forward(self, x: Tensor) -> Tensor:
        h = T.relu(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        return T.relu(T.add(x, h))


@dataclass(frozen=True)
class Architecture:
    """Describes a :class:`TargetNet`.

    ``kind`` is ``"linear"``, ``"mlp"`` or ``"cnn"``. ``hidden`` is the MLP
    width; ``widths`` are the channel counts of the two CNN blocks (the second
    block downsamples by 2).
    """

    kind: str = "cnn"
    image_shape: Tuple[int, int, int] = (3, 16, 16)
    num_classes: int = 10
    hidden: int = 128
    widths: Tuple[int, int] = (32, 64)

    def __post_init__(self):
        if self.kind not in ("linear", "mlp", "cnn"):
            raise ValueError(f"unknown architecture kind {self.kind!r}")
        object.__setattr__(self, "image_shape", tuple(int(d) for d in self.image_shape))
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))


class TargetNet(Module):
    """The classifier being trained, ``logits = f(x; w)``."""

    def __init__(self, arch: Architecture = Architecture(), dtype=T.DEFAULT_DTYPE):
        self.arch = arch
        c, h, w = arch.image_shape
        if arch.kind == "linear":
            self.fc = Linear(c * h * w, arch.num_classes, dtype)
        elif arch.kind == "mlp":
            self.fc1 = Linear(c * h * w, arch.hidden, dtype)
            self.fc2 = Linear(arch.hidden, arch.num_classes, dtype)
        else:
            w1, w2 = arch.widths
            self.conv1 = Conv2d(c, w1, 3, 1, 1, dtype=dtype)
            self.bn1 = BatchNorm2d(w1, dtype)
            self.conv2 = Conv2d(w1, w2, 3, 2, 1, dtype=dtype)
            self.bn2 = BatchNorm2d(w2, dtype)
            self.fc = Linear(w2, arch.num_classes, dtype)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or tuple(x.shape[1:]) != self.arch.image_shape:
            raise T.ShapeError(f"target_forward: input shape {x.shape} does not match "
                               f"image shape {self.arch.image_shape}")
        kind = self.arch.kind
        if kind == "linear":
            return self.fc(T.flatten(x))
        if kind == "mlp":
            return self.fc2(T.relu(self.fc1(T.flatten(x))))
        h = T.relu(self.bn1(self.conv1(x)))
        h = T.relu(self.bn2(self.conv2(h)))
        return self.fc(T.mean(h, axis=(2, 3)))


class GeneratorNet(Module):
    """Maps an image and its signed gradient to an initialization in ``[-1, 1]``.

    Layers: conv(2C->hidden)+BN+ReLU, ResBlock(hidden), conv(hidden->C)+BN, tanh.
    All convolutions are 3x3, stride 1, padding 1, so the output has the image's shape.
    """

    def __init__(self, image_channels: int = 3, hidden: int = 64, dtype=T.DEFAULT_DTYPE,
                 spectral_norm: bool = False):
        if spectral_norm:
            raise NotImplementedError("spectral normalisation of the ResBlock is not supported")
        self.image_channels = image_channels
        self.conv1 = Conv2d(2 * image_channels, hidden, 3, 1, 1, dtype=dtype)
        self.bn1 = BatchNorm2d(hidden, dtype)
        self.block = ResBlock(hidden, dtype)
        self.conv3 = Conv2d(hidden, image_channels, 3, 1, 1, dtype=dtype)
        self.bn3 = BatchNorm2d(image_channels, dtype)

    def forward(self, x: Tensor, s_x: Tensor) -> Tensor:
        if x.shape != s_x.shape:
            raise T.ShapeError(f"generator_forward: image shape {x.shape} and signed "
                               f"gradient shape {s_x.shape} differ")
        if x.ndim != 4 or x.shape[1] != self.image_channels:
            raise T.ShapeError(f"generator_forward: expected [N, {self.image_channels}, H, W] "
                               f"input, got {x.shape}")
        h = T.concat([x, s_x], axis=1)
        h = T.relu(self.bn1(self.conv1(h)))
        h = self.block(h)
        return T.tanh(self.bn3(self.conv3(h)))


def init_params(net: Module, seed: Union[int, np.random.Generator]) -> None:
    """He-normal weights (std ``sqrt(2 / fan_in)``), zero biases, unit BN scale."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    for m in net.modules():
        if isinstance(m, (Conv2d, Linear)):
            fan_in = int(np.prod(m.weight.shape[1:]))
            w = rng.standard_normal(m.weight.shape) * np.sqrt(2.0 / fan_in)
            m.weight.data = w.astype(m.weight.dtype)
            if hasattr(m, "bias"):
                m.bias.data = np.zeros_like(m.bias.data)
        elif isinstance(m, BatchNorm2d):
            m.weight.data = np.ones_like(m.weight.data)
            m.bias.data = np.zeros_like(m.bias.data)
            m.running_mean[...] = 0
            m.running_var[...] = 1


# ---------------------------------------------------------------------------
# checkpoint format
#
#   "ADVT" | version u32 | count u32 | per tensor:
#   name_len u32 | utf-8 name | rank u32 | dims u32 * rank | dtype tag u32 | data (LE)


def encode_checkpoint(tensors: Dict[str, np.ndarray]) -> bytes:
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _DTYPE_TAGS:
            raise TypeError(f"checkpoint: unsupported dtype {arr.dtype} for {name!r}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(struct.pack("<I", _DTYPE_TAGS[dt]))
        parts.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return b"".join(parts)


def decode_checkpoint(buf: bytes) -> Dict[str, np.ndarray]:
    if buf[:4] != CHECKPOINT_MAGIC:
        raise ValueError("checkpoint: bad magic bytes")
    pos = 4

    def take(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise ValueError(f"checkpoint: truncated at byte {pos}")
        vals = struct.unpack_from(fmt, buf, pos)
        pos += size
        return vals

    version, count = take("<II")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"checkpoint: unsupported format version {version}")
    out: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = take("<I")
        name = bytes(take(f"<{n}s")[0]).decode("utf-8")
        (rank,) = take("<I")
        dims = take(f"<{rank}I")
        (tag,) = take("<I")
        if tag not in _TAG_DTYPES:
            raise ValueError(f"checkpoint: unknown dtype tag {tag} for {name!r}")
        dt = _TAG_DTYPES[tag]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        if pos + nbytes > len(buf):
            raise ValueError(f"checkpoint: truncated at byte {pos}")
        out[name] = np.frombuffer(buf, dt, int(np.prod(dims, dtype=np.int64)), pos).reshape(dims).copy()
        pos += nbytes
    if pos != len(buf):
        raise ValueError(f"checkpoint: {len(buf) - pos} trailing bytes")
    return out


def save_checkpoint(path: Union[str, Path], tensors: Dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode_checkpoint(tensors))


def load_checkpoint(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    return decode_checkpoint(Path(path).read_bytes())


def bundle_state(target: TargetNet, generator: Optional[GeneratorNet] = None) -> Dict[str, np.ndarray]:
    """Checkpoint contents: target tensors under ``target.``, generator under ``generator.``."""
    state = {f"target.{k}": v for k, v in target.state_dict().items()}
    if generator is not None:
        state.update({f"generator.{k}": v for k, v in generator.state_dict().items()})
    return state


def split_state(state: Dict[str, np.ndarray], prefix: str) -> Dict[str, np.ndarray]:
    p = prefix + "."
    return {k[len(p):]: v for k, v in state.items() if k.startswith(p)}
