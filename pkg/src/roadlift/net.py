"""Reference inference for the fixed descriptor network.

Architecture: six blocks of (3x3 conv, stride 1, same padding, ReLU) then
(2x2 max-pool, stride 2), channels 4 -> 8 -> ... -> 256, followed by three
fully connected layers 1024 -> 256 -> 64 -> 22 (ReLU after the first two,
identity on the last).

Tensors are channel-last.  Conv weights are stored as (out, in, 3, 3), FC
weights as (out, in).  The 2x2x256 feature map is flattened in (h, w, c)
row-major order.

Weight file
-----------
Little-endian throughout::

    magic   b"RLNW"
    u16     major version, u16 minor version
    u32     tensor count
    per tensor:
        u16 name length, name (utf-8)
        u8  ndim, u32 * ndim shape
        f32 * prod(shape) values (row-major)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"RLNW"
VERSION = (1, 0)


class NetError(ValueError):
    pass


class FormatError(NetError):
    pass


class ShapeMismatch(NetError):
    pass


class NonFiniteWeights(NetError):
    pass


@dataclass(frozen=True)
class NetSpec:
    input_size: int = 128
    in_channels: int = 4
    conv_channels: tuple[int, ...] = (8, 16, 32, 64, 128, 256)
    fc_dims: tuple[int, ...] = (256, 64, 22)

    @property
    def flat_dim(self) -> int:
        side = self.input_size // 2 ** len(self.conv_channels)
        return side * side * self.conv_channels[-1]

    @property
    def output_dim(self) -> int:
        return self.fc_dims[-1]

    def layers(self) -> list[tuple[str, tuple[int, ...], tuple[int, ...]]]:
        """(name, weight shape, bias shape) in file order."""
        out = []
        cin = self.in_channels
        for i, cout in enumerate(self.conv_channels, 1):
            out.append((f"conv{i}", (cout, cin, 3, 3), (cout,)))
            cin = cout
        fin = self.flat_dim
        for i, fout in enumerate(self.fc_dims, 1):
            out.append((f"fc{i}", (fout, fin), (fout,)))
            fin = fout
        return out

    def tensor_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        shapes = []
        for name, w, b in self.layers():
            shapes.append((f"{name}.weight", w))
            shapes.append((f"{name}.bias", b))
        return shapes

    def spatial_sizes(self) -> list[int]:
        return [self.input_size // 2**k for k in range(len(self.conv_channels) + 1)]


DEFAULT_SPEC = NetSpec()
BOTTOM_ONLY_SPEC = NetSpec(fc_dims=(256, 64, 9))


def layer_parameter_count(weight_shape, bias_shape) -> int:
    return int(np.prod(weight_shape)) + int(np.prod(bias_shape))


def parameter_count(spec: NetSpec = DEFAULT_SPEC) -> int:
    return sum(layer_parameter_count(w, b) for _, w, b in spec.layers())


def parameter_table(spec: NetSpec = DEFAULT_SPEC) -> list[tuple[str, tuple[int, ...], int]]:
    return [(name, w, layer_parameter_count(w, b)) for name, w, b in spec.layers()]


class WeightBundle:
    """Validated, read-only weight tensors keyed by ``<layer>.weight|bias``."""

    def __init__(self, tensors: dict[str, np.ndarray], spec: NetSpec = DEFAULT_SPEC):
        self.spec = spec
        expected = spec.tensor_shapes()
        names = [n for n, _ in expected]
        missing = [n for n in names if n not in tensors]
        if missing:
            raise ShapeMismatch(f"missing tensors: {', '.join(missing)}")
        extra = [n for n in tensors if n not in names]
        if extra:
            raise ShapeMismatch(f"unexpected tensors: {', '.join(extra)}")
        self.tensors: dict[str, np.ndarray] = {}
        for name, shape in expected:
            t = np.array(tensors[name], dtype=np.float32)
            if t.shape != shape:
                raise ShapeMismatch(f"{name}: expected shape {shape}, got {t.shape}")
            if not np.all(np.isfinite(t)):
                raise NonFiniteWeights(f"{name} contains non-finite values")
            t.flags.writeable = False
            self.tensors[name] = t

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    @classmethod
    def zeros(cls, spec: NetSpec = DEFAULT_SPEC) -> "WeightBundle":
        return cls({n: np.zeros(s, np.float32) for n, s in spec.tensor_shapes()}, spec)

    @classmethod
    def random(cls, seed: int = 0, spec: NetSpec = DEFAULT_SPEC) -> "WeightBundle":
        rng = np.random.default_rng(seed)
        tensors = {}
        for name, shape in spec.tensor_shapes():
            if name.endswith(".bias"):
                tensors[name] = (0.01 * rng.standard_normal(shape)).astype(np.float32)
            else:
                fan_in = int(np.prod(shape[1:]))
                tensors[name] = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)
        return cls(tensors, spec)

    def parameter_count(self) -> int:
        return sum(t.size for t in self.tensors.values())


def conv3x3_same(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """x: (H, W, Cin); w: (Cout, Cin, 3, 3) -> (H, W, Cout)."""
    xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(0, 1))  # H, W, Cin, 3, 3
    return np.tensordot(win, w, axes=([2, 3, 4], [1, 2, 3])) + b


def maxpool2x2(x: np.ndarray) -> np.ndarray:
    h, w, c = x.shape
    return x[: h - h % 2, : w - w % 2].reshape(h // 2, 2, w // 2, 2, c).max(axis=(1, 3))


def forward(weights: WeightBundle, x) -> np.ndarray:
    spec = weights.spec
    x = np.asarray(x, dtype=np.float64)
    want = (spec.input_size, spec.input_size, spec.in_channels)
    if x.shape != want:
        raise ShapeMismatch(f"input: expected shape {want}, got {x.shape}")
    for i in range(1, len(spec.conv_channels) + 1):
        w = weights[f"conv{i}.weight"].astype(np.float64)
        b = weights[f"conv{i}.bias"].astype(np.float64)
        x = maxpool2x2(np.maximum(conv3x3_same(x, w, b), 0.0))
    x = x.reshape(-1)
    n_fc = len(spec.fc_dims)
    for i in range(1, n_fc + 1):
        w = weights[f"fc{i}.weight"].astype(np.float64)
        b = weights[f"fc{i}.bias"].astype(np.float64)
        x = w @ x + b
        if i < n_fc:
            x = np.maximum(x, 0.0)
    return x


# -- serialisation ------------------------------------------------------------


def dumps_weights(bundle: WeightBundle) -> bytes:
    parts = [MAGIC, struct.pack("<HHI", *VERSION, len(bundle.tensors))]
    for name, shape in bundle.spec.tensor_shapes():
        t = bundle[name]
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack(f"<B{len(shape)}I", len(shape), *shape))
        parts.append(t.astype("<f4").tobytes())
    return b"".join(parts)


def save_weights(bundle: WeightBundle, path) -> None:
    Path(path).write_bytes(dumps_weights(bundle))


def loads_weights(data: bytes, spec: NetSpec = DEFAULT_SPEC) -> WeightBundle:
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise FormatError(f"truncated weight file at byte {pos}")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    if take(4) != MAGIC:
        raise FormatError("bad magic")
    major, _minor, count = struct.unpack("<HHI", take(8))
    if major != VERSION[0]:
        raise FormatError(f"unsupported weight format version {major}")
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        try:
            name = take(nlen).decode()
        except UnicodeDecodeError as exc:
            raise FormatError("tensor name is not utf-8") from exc
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = int(np.prod(shape)) if shape else 1
        tensors[name] = np.frombuffer(take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
    if pos != len(data):
        raise FormatError(f"{len(data) - pos} trailing bytes after tensors")
    return WeightBundle(tensors, spec)


def load_weights(path, spec: NetSpec = DEFAULT_SPEC) -> WeightBundle:
    return loads_weights(Path(path).read_bytes(), spec)
