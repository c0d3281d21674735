"""Binary checkpoint format: magic "TKAS", version, step, dense master
weights, mask pair, momentum buffers, seed keys, and the metric-tracker
state needed for a resumed run to reproduce subsequent metrics rows
bit-exactly. All header integers are little-endian; float payloads are raw
little-endian arrays. Roundtrips are exact.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .masking import MaskPair
from .tensor import DenseParamStore

MAGIC = b"TKAS"
VERSION = 1

_DTYPE_CODES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}
_CODE_FOR = {np.dtype(np.float32): 4, np.dtype(np.float64): 8}


class CheckpointFormatError(ValueError):
    """Not a checkpoint file, or structurally invalid."""


class CheckpointVersionError(CheckpointFormatError):
    """Version field does not match this reader."""


class CheckpointTruncatedError(CheckpointFormatError):
    """File ends before the declared payload does."""


@dataclass
class Checkpoint:
    """Everything a run needs to continue exactly where it stopped."""

    step: int
    store: DenseParamStore
    masks: MaskPair
    velocity: dict  # None when momentum is off
    seed: int
    reservoir_c0: dict  # layer -> bool array
    reservoir_hist: dict
    churn_snapshot_step: int
    churn_snapshot_bits: dict
    churn_latest: tuple  # (min, mean, max), nan before first measurement
    nonfinite_run: int


class _Writer:
    def __init__(self):
        self.parts = [MAGIC, struct.pack("<I", VERSION)]

    def u8(self, v):
        self.parts.append(struct.pack("<B", v))

    def u32(self, v):
        self.parts.append(struct.pack("<I", v))

    def u64(self, v):
        self.parts.append(struct.pack("<Q", v))

    def f64(self, v):
        self.parts.append(struct.pack("<d", v))

    def text(self, s):
        raw = s.encode("utf-8")
        self.parts.append(struct.pack("<H", len(raw)))
        self.parts.append(raw)

    def floats(self, arr):
        code = _CODE_FOR[np.dtype(arr.dtype)]
        self.u8(code)
        self.u64(arr.size)
        self.parts.append(np.ascontiguousarray(arr.reshape(-1), dtype=_DTYPE_CODES[code]).tobytes())

    def indices(self, arr):
        self.u64(arr.size)
        self.parts.append(np.ascontiguousarray(arr, dtype="<i8").tobytes())

    def bits(self, mask):
        self.u64(mask.size)
        self.parts.append(np.packbits(mask.astype(np.uint8)).tobytes())

    def blob(self):
        return b"".join(self.parts)


class _Reader:
    def __init__(self, raw):
        self.raw = raw
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.raw):
            raise CheckpointTruncatedError(
                f"need {n} bytes at offset {self.pos}, file has {len(self.raw)}"
            )
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self):
        return struct.unpack("<B", self.take(1))[0]

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def u64(self):
        return struct.unpack("<Q", self.take(8))[0]

    def f64(self):
        return struct.unpack("<d", self.take(8))[0]

    def text(self):
        n = struct.unpack("<H", self.take(2))[0]
        return self.take(n).decode("utf-8")

    def floats(self):
        code = self.u8()
        if code not in _DTYPE_CODES:
            raise CheckpointFormatError(f"unknown dtype code {code}")
        n = self.u64()
        dt = _DTYPE_CODES[code]
        data = self.take(n * dt.itemsize)
        native = np.float32 if code == 4 else np.float64
        return np.frombuffer(data, dtype=dt).astype(native)

    def indices(self):
        n = self.u64()
        data = self.take(n * 8)
        return np.frombuffer(data, dtype="<i8").astype(np.int64)

    def bits(self):
        n = self.u64()
        nbytes = (n + 7) // 8
        data = np.frombuffer(self.take(nbytes), dtype=np.uint8)
        return np.unpackbits(data, count=n).astype(bool)

    def done(self):
        if self.pos != len(self.raw):
            raise CheckpointFormatError(
                f"{len(self.raw) - self.pos} trailing bytes after payload"
            )


def checkpoint_to_bytes(ck):
    w = _Writer()
    w.u64(ck.step)
    w.u64(ck.seed)
    w.u8(1 if ck.velocity is not None else 0)

    names = ck.store.names()
    w.u32(len(names))
    for name in names:
        arr = ck.store.get(name)
        w.text(name)
        w.u8(1 if ck.store.is_maskable(name) else 0)
        w.u8(arr.ndim)
        for dim in arr.shape:
            w.u32(dim)
        w.floats(arr)
        if ck.velocity is not None:
            w.floats(ck.velocity[name])

    w.u64(ck.masks.step_built)
    masked = sorted(ck.masks.a_indices)
    w.u32(len(masked))
    for name in masked:
        w.text(name)
        w.indices(ck.masks.a_indices[name])
        w.indices(ck.masks.b_indices[name])

    w.u32(len(ck.reservoir_c0))
    for name in sorted(ck.reservoir_c0):
        w.text(name)
        w.bits(ck.reservoir_c0[name])
        w.bits(ck.reservoir_hist[name])

    w.u64(ck.churn_snapshot_step)
    w.u32(len(ck.churn_snapshot_bits))
    for name in sorted(ck.churn_snapshot_bits):
        w.text(name)
        w.bits(ck.churn_snapshot_bits[name])
    for v in ck.churn_latest:
        w.f64(v)
    w.u32(ck.nonfinite_run)
    return w.blob()


def checkpoint_from_bytes(raw):
    if len(raw) < 8:
        raise CheckpointTruncatedError("file too short for magic and version")
    if raw[:4] != MAGIC:
        raise CheckpointFormatError(f"bad magic {raw[:4]!r}, expected {MAGIC!r}")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != VERSION:
        raise CheckpointVersionError(f"version {version}, reader supports {VERSION}")
    r = _Reader(raw)
    r.pos = 8
    step = r.u64()
    seed = r.u64()
    has_velocity = r.u8()

    store = DenseParamStore()
    velocity = {} if has_velocity else None
    for _ in range(r.u32()):
        name = r.text()
        maskable = bool(r.u8())
        ndim = r.u8()
        shape = tuple(r.u32() for _ in range(ndim))
        flat = r.floats()
        if flat.size != int(np.prod(shape)):
            raise CheckpointFormatError(f"{name}: payload does not fill {shape}")
        store.add(name, flat.reshape(shape), maskable)
        if has_velocity:
            velocity[name] = r.floats()

    step_built = r.u64()
    a_sets, b_sets = {}, {}
    for _ in range(r.u32()):
        name = r.text()
        a_sets[name] = r.indices()
        b_sets[name] = r.indices()
    masks = MaskPair(a_sets, b_sets, step_built=step_built)

    c0, hist = {}, {}
    for _ in range(r.u32()):
        name = r.text()
        c0[name] = r.bits()
        hist[name] = r.bits()

    churn_step = r.u64()
    churn_bits = {}
    for _ in range(r.u32()):
        name = r.text()
        churn_bits[name] = r.bits()
    churn_latest = (r.f64(), r.f64(), r.f64())
    nonfinite_run = r.u32()
    r.done()
    return Checkpoint(
        step=step,
        store=store,
        masks=masks,
        velocity=velocity,
        seed=seed,
        reservoir_c0=c0,
        reservoir_hist=hist,
        churn_snapshot_step=churn_step,
        churn_snapshot_bits=churn_bits,
        churn_latest=churn_latest,
        nonfinite_run=nonfinite_run,
    )


def save_checkpoint(ck, path):
    blob = checkpoint_to_bytes(ck)
    with open(path, "wb") as f:
        f.write(blob)
    return path


def load_checkpoint(path):
    with open(path, "rb") as f:
        raw = f.read()
    return checkpoint_from_bytes(raw)


def checkpoints_equal(a, b):
    """Exact equality of every field; used by roundtrip tests."""
    if (a.step, a.seed, a.nonfinite_run) != (b.step, b.seed, b.nonfinite_run):
        return False
    if a.store.names() != b.store.names():
        return False
    for name in a.store.names():
        if a.store.is_maskable(name) != b.store.is_maskable(name):
            return False
        x, y = a.store.get(name), b.store.get(name)
        if x.shape != y.shape or x.dtype != y.dtype or not np.array_equal(x, y):
            return False
    if (a.velocity is None) != (b.velocity is None):
        return False
    if a.velocity is not None:
        for name in a.velocity:
            if not np.array_equal(a.velocity[name], b.velocity[name]):
                return False
    if a.masks.step_built != b.masks.step_built:
        return False
    if set(a.masks.a_indices) != set(b.masks.a_indices):
        return False
    for name in a.masks.a_indices:
        if not np.array_equal(a.masks.a_indices[name], b.masks.a_indices[name]):
            return False
        if not np.array_equal(a.masks.b_indices[name], b.masks.b_indices[name]):
            return False
    for field_a, field_b in ((a.reservoir_c0, b.reservoir_c0),
                             (a.reservoir_hist, b.reservoir_hist),
                             (a.churn_snapshot_bits, b.churn_snapshot_bits)):
        if set(field_a) != set(field_b):
            return False
        for name in field_a:
            if not np.array_equal(field_a[name], field_b[name]):
                return False
    if a.churn_snapshot_step != b.churn_snapshot_step:
        return False
    for x, y in zip(a.churn_latest, b.churn_latest):
        if not (x == y or (np.isnan(x) and np.isnan(y))):
            return False
    return True
