# tensor_store.py
import logging
import math
import struct
from dataclasses import dataclass
from types import MappingProxyType

import numpy as np

from helpers import FormatError, ParameterError, StorageError, StructuralError

logger = logging.getLogger(__name__)

MAGIC = b"CMCK"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIQQ")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")


@dataclass(frozen=True, eq=False)
class Tensor:
    """Row-major float32 tensor. An empty dims tuple is a scalar holding one value."""
    dims: tuple
    data: np.ndarray

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if any(d <= 0 for d in dims):
            raise ParameterError(f"tensor dims must be positive, got {dims}")
        data = np.array(self.data, dtype=np.float32).reshape(-1)
        if data.size != math.prod(dims):
            raise ParameterError(
                f"tensor data length {data.size} does not match dims {dims}"
            )
        if not np.all(np.isfinite(data)):
            raise ParameterError("tensor values must be finite")
        data.setflags(write=False)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "data", data)

    @classmethod
    def from_array(cls, array):
        arr = np.asarray(array, dtype=np.float32)
        return cls(dims=arr.shape, data=arr.reshape(-1))

    @classmethod
    def scalar(cls, value):
        return cls(dims=(), data=[value])

    @property
    def rank(self):
        return len(self.dims)

    @property
    def size(self):
        return self.data.size

    def to_array(self):
        return self.data.reshape(self.dims)

    def __eq__(self, other):
        if not isinstance(other, Tensor):
            return NotImplemented
        # Bitwise, so -0.0 and 0.0 differ like they do on disk.
        return self.dims == other.dims and np.array_equal(
            self.data.view(np.uint32), other.data.view(np.uint32)
        )

    def __repr__(self):
        return f"Tensor(dims={self.dims})"


class Checkpoint:
    """Immutable, insertion-ordered name -> Tensor map tagged with an adaptation step."""

    def __init__(self, step, entries):
        step = int(step)
        if step < 0:
            raise ParameterError(f"checkpoint step must be non-negative, got {step}")
        items = list(entries.items()) if hasattr(entries, "items") else list(entries)
        ordered = {}
        for name, tensor in items:
            if not isinstance(name, str) or not name:
                raise ParameterError("parameter names must be non-empty strings")
            if name in ordered:
                raise ParameterError(f"duplicate parameter name '{name}'")
            if not isinstance(tensor, Tensor):
                tensor = Tensor.from_array(tensor)
            ordered[name] = tensor
        self._step = step
        self._entries = MappingProxyType(ordered)

    @property
    def step(self):
        return self._step

    @property
    def entries(self):
        return self._entries

    @property
    def names(self):
        return tuple(self._entries)

    def __getitem__(self, name):
        return self._entries[name]

    def __iter__(self):
        return iter(self._entries)

    def __len__(self):
        return len(self._entries)

    def items(self):
        return self._entries.items()

    def with_step(self, step):
        return Checkpoint(step, self._entries)

    def __eq__(self, other):
        if not isinstance(other, Checkpoint):
            return NotImplemented
        return (
            self.step == other.step
            and self.names == other.names
            and all(self[n] == other[n] for n in self.names)
        )

    def __repr__(self):
        shapes = ", ".join(f"{n}: {t.dims}" for n, t in self.items())
        return f"Checkpoint(step={self.step}, {{{shapes}}})"


def flatten_checkpoint(checkpoint):
    """Concatenate every tensor in insertion order into one float64 vector."""
    if len(checkpoint) == 0:
        return np.zeros(0, dtype=np.float64)
    return np.concatenate([t.data.astype(np.float64) for t in checkpoint.entries.values()])


def check_same_structure(checkpoints):
    if not checkpoints:
        raise ParameterError("at least one checkpoint is required")
    reference = checkpoints[0]
    for other in checkpoints[1:]:
        if other.names != reference.names:
            missing = set(reference.names) ^ set(other.names)
            name = sorted(missing)[0] if missing else reference.names[0]
            raise StructuralError(
                f"parameter sets differ (first mismatch: '{name}')", parameter=name
            )
        for name in reference.names:
            if other[name].dims != reference[name].dims:
                raise StructuralError(
                    f"parameter '{name}' has dims {other[name].dims}, expected {reference[name].dims}",
                    parameter=name,
                )
    return reference


def checkpoint_linear_combination(terms):
    """Coordinate-wise sum of coeff_k * checkpoint_k, accumulated in float64."""
    terms = list(terms)
    if not terms:
        raise ParameterError("linear combination needs at least one term")
    coeffs = [float(c) for c, _ in terms]
    checkpoints = [ckpt for _, ckpt in terms]
    if not all(math.isfinite(c) for c in coeffs):
        raise ParameterError("linear combination coefficients must be finite")
    reference = check_same_structure(checkpoints)
    combined = {}
    for name in reference.names:
        acc = np.zeros(reference[name].size, dtype=np.float64)
        for coeff, ckpt in zip(coeffs, checkpoints):
            acc += coeff * ckpt[name].data.astype(np.float64)
        combined[name] = Tensor(reference[name].dims, acc.astype(np.float32))
    return Checkpoint(max(c.step for c in checkpoints), combined)


#############################
# CMCK file format
#############################

def encode_checkpoint(checkpoint):
    parts = [_HEADER.pack(MAGIC, FORMAT_VERSION, checkpoint.step, len(checkpoint))]
    for name, tensor in checkpoint.items():
        raw_name = name.encode("utf-8")
        parts.append(_U32.pack(len(raw_name)))
        parts.append(raw_name)
        parts.append(_U32.pack(tensor.rank))
        parts.extend(_U64.pack(d) for d in tensor.dims)
        parts.append(tensor.data.astype("<f4").tobytes())
    return b"".join(parts)


class BinaryReader:
    """Cursor over an in-memory buffer that reports truncation by field name."""

    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n, field):
        end = self.pos + n
        if end > len(self.buf):
            raise FormatError(f"truncated file while reading {field}", field=field)
        chunk = self.buf[self.pos:end]
        self.pos = end
        return chunk

    def u32(self, field):
        return _U32.unpack(self.take(4, field))[0]

    def u64(self, field):
        return _U64.unpack(self.take(8, field))[0]

    def f32(self, count, field):
        raw = self.take(4 * count, field)
        values = np.frombuffer(raw, dtype="<f4")
        if not np.all(np.isfinite(values)):
            raise FormatError(f"non-finite value in {field}", field=field)
        return values

    def utf8(self, n, field):
        try:
            return self.take(n, field).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"{field} is not valid UTF-8", field=field)

    def expect_end(self):
        if self.pos != len(self.buf):
            raise FormatError(
                f"{len(self.buf) - self.pos} trailing bytes after payload", field="trailer"
            )


def check_header(reader, magic, what):
    found = reader.take(4, "magic")
    if found != magic:
        raise FormatError(f"bad magic {found!r}, expected {magic!r} for a {what} file", field="magic")
    version = reader.u32("version")
    if version != FORMAT_VERSION:
        raise FormatError(
            f"unsupported {what} format version {version}, expected {FORMAT_VERSION}",
            field="version",
        )


def decode_checkpoint(buf):
    reader = BinaryReader(buf)
    check_header(reader, MAGIC, "CMCK")
    step = reader.u64("step")
    count = reader.u64("tensor count")
    entries = {}
    for index in range(count):
        name_len = reader.u32(f"name length of tensor #{index}")
        name = reader.utf8(name_len, f"name of tensor #{index}")
        if not name:
            raise FormatError(f"tensor #{index} has an empty name", field="name")
        if name in entries:
            raise FormatError(f"duplicate tensor name '{name}'", field=name)
        rank = reader.u32(f"rank of tensor '{name}'")
        dims = tuple(reader.u64(f"dims of tensor '{name}'") for _ in range(rank))
        if any(d == 0 for d in dims):
            raise FormatError(f"tensor '{name}' has a zero dimension", field=name)
        count_values = math.prod(dims)
        if 4 * count_values > len(buf) - reader.pos:
            raise FormatError(f"truncated file while reading data of tensor '{name}'", field=name)
        values = reader.f32(count_values, f"data of tensor '{name}'")
        entries[name] = Tensor(dims, values)
    reader.expect_end()
    return Checkpoint(step, entries)


def checkpoint_save(checkpoint, path):
    payload = encode_checkpoint(checkpoint)
    try:
        with open(path, "wb") as f:
            f.write(payload)
    except OSError as e:
        raise StorageError(f"could not write checkpoint: {e.strerror or e}", path=path)
    logger.debug(f"Saved checkpoint step {checkpoint.step} ({len(checkpoint)} tensors) to {path}")


def checkpoint_load(path):
    try:
        with open(path, "rb") as f:
            buf = f.read()
    except OSError as e:
        raise StorageError(f"could not read checkpoint: {e.strerror or e}", path=path)
    checkpoint = decode_checkpoint(buf)
    logger.debug(f"Loaded checkpoint step {checkpoint.step} from {path}")
    return checkpoint
