"""Dense 4-D tensor type, deterministic RNG, and the binary tensor record format.

Everything downstream (layers, model, optimizer) stores activations and
parameters as ``Tensor`` objects: a contiguous (batch, channel, height, width)
float array plus an optional gradient buffer of the same shape.
"""

from __future__ import annotations

import struct

import numpy as np

DTYPES = {"f32": np.float32, "f64": np.float64}
_DTYPE_CODES = {"f32": 0, "f64": 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}

MAGIC = b"DSRT"


def dtype_name(dt) -> str:
    dt = np.dtype(dt)
    if dt == np.float32:
        return "f32"
    if dt == np.float64:
        return "f64"
    raise ValueError(f"unsupported dtype {dt}; expected f32 or f64")


class Tensor:
    """A dense 4-D array in (n, c, h, w) row-major order.

    The flat element at index ((i*c + j)*h + y)*w + x is the value at
    (i, j, y, x).  ``grad`` is lazily attached by the backward pass (for
    activations) or pre-allocated to zeros (for parameters), and always
    shape-matches ``data`` when present.

    Tensors are treated as immutable once built except through the optimizer
    update and explicit test manipulation; do not mutate one concurrently.
    """

    __slots__ = ("data", "grad")

    def __init__(self, data, dtype=None):
        arr = np.ascontiguousarray(data, dtype=dtype)
        if arr.ndim != 4:
            raise ValueError(f"tensor must be 4-D (n,c,h,w), got shape {arr.shape}")
        if arr.dtype not in (np.float32, np.float64):
            raise ValueError(f"tensor dtype must be f32 or f64, got {arr.dtype}")
        self.data = arr
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @classmethod
    def zeros(cls, shape, dtype=np.float32) -> "Tensor":
        return cls(np.zeros(shape, dtype=dtype))

    @classmethod
    def from_flat(cls, shape, values, dtype=np.float32) -> "Tensor":
        """Build from a flat row-major value sequence of length n*c*h*w."""
        flat = np.asarray(values, dtype=dtype).ravel()
        n = int(np.prod(shape))
        if flat.size != n:
            raise ValueError(f"expected {n} values for shape {tuple(shape)}, got {flat.size}")
        return cls(flat.reshape(shape))

    def flat(self) -> np.ndarray:
        """Row-major flat view of the data."""
        return self.data.reshape(-1)

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy())

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(())[()])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={dtype_name(self.dtype)})"


class Rng:
    """Deterministic random source; identical seed gives identical draws.

    One Rng is owned by exactly one consumer (never shared across threads).
    ``derive`` fans a root seed out into independent named streams so that
    e.g. init and patch sampling can be re-seeded separately.
    """

    def __init__(self, seed: int, stream: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.stream = tuple(int(s) for s in stream)
        self._gen = np.random.default_rng((self.seed, *self.stream) if self.stream else self.seed)

    def derive(self, *stream: int) -> "Rng":
        return Rng(self.seed, self.stream + tuple(stream))

    def normal(self, shape, std: float = 1.0, dtype=np.float32) -> np.ndarray:
        return (self._gen.standard_normal(size=shape) * std).astype(dtype)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def uniform(self, shape, dtype=np.float64) -> np.ndarray:
        return self._gen.random(size=shape).astype(dtype)


def elementwise_add(a: Tensor, b: Tensor) -> Tensor:
    """out[i] = a[i] + b[i]; shapes and dtypes must match exactly (no broadcasting)."""
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")
    if a.dtype != b.dtype:
        raise ValueError(f"add dtype mismatch: {a.dtype} vs {b.dtype}")
    return Tensor(a.data + b.data)


def he_normal_init(shape, rng: Rng, dtype=np.float32) -> Tensor:
    """He-normal draw for a (out, in, kh, kw) kernel: Normal(0, sqrt(2/(in*kh*kw)))."""
    o, i, kh, kw = (int(s) for s in shape)
    if min(o, i, kh, kw) < 1:
        raise ValueError(f"he_normal_init needs all dims >= 1, got {tuple(shape)}")
    fan_in = i * kh * kw
    std = float(np.sqrt(2.0 / fan_in))
    return Tensor(rng.normal((o, i, kh, kw), std=std, dtype=dtype))


def write_tensor_record(fp, arr: np.ndarray) -> None:
    """Append one binary tensor record: magic, dtype code, 4 u32 LE dims, LE data."""
    if arr.ndim != 4:
        raise ValueError(f"tensor record requires 4-D data, got shape {arr.shape}")
    name = dtype_name(arr.dtype)
    fp.write(MAGIC)
    fp.write(struct.pack("<I", _DTYPE_CODES[name]))
    fp.write(struct.pack("<4I", *arr.shape))
    le = arr.astype("<" + ("f4" if name == "f32" else "f8"), copy=False)
    fp.write(np.ascontiguousarray(le).tobytes())


def read_tensor_record(fp) -> np.ndarray:
    header = fp.read(len(MAGIC) + 4 + 16)
    if len(header) != len(MAGIC) + 20:
        raise ValueError("truncated tensor record header")
    if header[:4] != MAGIC:
        raise ValueError(f"bad tensor record magic {header[:4]!r}")
    (code,) = struct.unpack("<I", header[4:8])
    if code not in _CODE_DTYPES:
        raise ValueError(f"unknown dtype code {code}")
    shape = struct.unpack("<4I", header[8:24])
    np_dt = np.dtype("<f4" if code == 0 else "<f8")
    count = int(np.prod(shape))
    raw = fp.read(count * np_dt.itemsize)
    if len(raw) != count * np_dt.itemsize:
        raise ValueError("truncated tensor record data")
    arr = np.frombuffer(raw, dtype=np_dt).reshape(shape)
    return arr.astype(DTYPES[_CODE_DTYPES[code]])


def save_tensor(path, t: Tensor) -> None:
    with open(path, "wb") as fp:
        write_tensor_record(fp, t.data)


def load_tensor(path) -> Tensor:
    with open(path, "rb") as fp:
        return Tensor(read_tensor_record(fp))
