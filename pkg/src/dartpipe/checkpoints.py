"""Read and write safetensors checkpoint containers

A container is an 8-byte little-endian header length N, N bytes of JSON
header, then the raw little-endian tensor payload. We only handle the
float dtypes we know how to fuse.
"""
from __future__ import annotations
import hashlib
import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .const import DType, CheckpointFormatError

import logging
log = logging.getLogger('dartpipe')

HEADER_LENGTH_BYTES = 8

# Refuse absurd header lengths before trying to read them
MAX_HEADER_BYTES = 100 * 1024 ** 2

METADATA_KEY = '__metadata__'

# numpy storage dtypes. BF16 has no numpy type so we keep its raw bits.
STORAGE_DTYPES = {
    DType.F32: np.dtype('<f4'),
    DType.F16: np.dtype('<f2'),
    DType.BF16: np.dtype('<u2'),
}

@dataclass(frozen=True)
class TensorMeta:
    """ Name, dtype, shape and payload byte range of a tensor

    The byte range is relative to the start of the data region.
    """
    name: str
    dtype: DType
    shape: tuple[int, ...]
    byte_offset_range: tuple[int, int]

    @property
    def numel(self) -> int:
        return math.prod(self.shape)

    @property
    def nbytes(self) -> int:
        return self.byte_offset_range[1] - self.byte_offset_range[0]

    def _asdict(self) -> dict:
        return {
            'dtype': self.dtype.value,
            'shape': list(self.shape),
            'data_offsets': list(self.byte_offset_range),
        }

@dataclass
class CheckpointManifest:
    """ The parsed header of a checkpoint, without any payload

    Tensors are kept in payload order.
    """
    tensors: list[TensorMeta] = field(default_factory=list)
    metadata: dict[str, str] = field(default_factory=dict)
    total_bytes: int = 0
    path: Optional[Path] = None
    data_start: int = 0

    def __len__(self):
        return len(self.tensors)

    def __iter__(self):
        return self.tensors.__iter__()

    def __contains__(self, name: str):
        return any(t.name == name for t in self.tensors)

    def __getitem__(self, name: str) -> TensorMeta:
        for meta in self.tensors:
            if meta.name == name:
                return meta
        raise KeyError(name)

    def names(self) -> list[str]:
        return [t.name for t in self.tensors]

@dataclass
class CompatIssue:
    kind: str
    name: str
    detail: str = ''

    def __str__(self):
        return f"{self.kind}: {self.name} {self.detail}".rstrip()

@dataclass
class CompatReport:
    """ Differences between two manifests. Empty means the pair is fusable.
    """
    issues: list[CompatIssue] = field(default_factory=list)

    def __len__(self):
        return len(self.issues)

    def __iter__(self):
        return self.issues.__iter__()

    @property
    def is_fusable(self) -> bool:
        return len(self.issues) == 0

    def __str__(self):
        return '; '.join(str(i) for i in self.issues)


def _parse_tensor_entry(name: str, entry, data_size: int) -> TensorMeta:
    if not isinstance(entry, dict):
        raise CheckpointFormatError(f"Header entry for '{name}' is not an object")
    try:
        dtype = DType(entry['dtype'])
    except KeyError:
        raise CheckpointFormatError(f"Tensor '{name}' has no dtype")
    except ValueError:
        raise CheckpointFormatError(f"Tensor '{name}' has unsupported dtype '{entry['dtype']}'")

    shape = entry.get('shape')
    if not isinstance(shape, list) or not all(isinstance(d, int) and d >= 0 for d in shape):
        raise CheckpointFormatError(f"Tensor '{name}' has invalid shape {shape}")

    offsets = entry.get('data_offsets')
    if (not isinstance(offsets, list) or len(offsets) != 2
            or not all(isinstance(o, int) for o in offsets)):
        raise CheckpointFormatError(f"Tensor '{name}' has invalid data_offsets {offsets}")
    start, end = offsets
    if start < 0 or end < start:
        raise CheckpointFormatError(f"Tensor '{name}' has inverted byte range [{start}, {end})")
    if end > data_size:
        raise CheckpointFormatError(
            f"Tensor '{name}' byte range [{start}, {end}) exceeds the {data_size}-byte data region")

    meta = TensorMeta(name, dtype, tuple(shape), (start, end))
    expected = meta.numel * dtype.itemsize
    if meta.nbytes != expected:
        raise CheckpointFormatError(
            f"Tensor '{name}' spans {meta.nbytes} bytes but shape {shape} of {dtype.value} needs {expected}")
    return meta

def read_manifest(path: str | os.PathLike) -> CheckpointManifest:
    """Parse the header of a checkpoint without loading tensor payloads

    @param path: path to a .safetensors file
    @returns: a CheckpointManifest with tensors in payload order
    """
    path = Path(path)
    file_size = path.stat().st_size
    with open(path, 'rb') as fp:
        raw_len = fp.read(HEADER_LENGTH_BYTES)
        if len(raw_len) != HEADER_LENGTH_BYTES:
            raise CheckpointFormatError(f"{path}: file too short for a header length")
        (header_len,) = struct.unpack('<Q', raw_len)
        if header_len == 0 or header_len > MAX_HEADER_BYTES:
            raise CheckpointFormatError(f"{path}: malformed header length {header_len}")
        if HEADER_LENGTH_BYTES + header_len > file_size:
            raise CheckpointFormatError(
                f"{path}: header length {header_len} runs past end of {file_size}-byte file")
        header_bytes = fp.read(header_len)

    def unique_keys(pairs: list) -> dict:
        seen = {}
        for key, value in pairs:
            if key in seen:
                raise CheckpointFormatError(f"{path}: header declares '{key}' more than once")
            seen[key] = value
        return seen

    try:
        header = json.loads(header_bytes.decode('utf-8'), object_pairs_hook=unique_keys)
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointFormatError(f"{path}: header is not valid JSON: {e}")
    if not isinstance(header, dict):
        raise CheckpointFormatError(f"{path}: header is not a JSON object")

    metadata = header.pop(METADATA_KEY, None) or {}
    if not isinstance(metadata, dict):
        raise CheckpointFormatError(f"{path}: {METADATA_KEY} is not an object")
    metadata = {str(k): str(v) for k, v in metadata.items()}

    data_start = HEADER_LENGTH_BYTES + header_len
    data_size = file_size - data_start

    tensors = [_parse_tensor_entry(name, entry, data_size) for name, entry in header.items()]
    tensors.sort(key=lambda t: (t.byte_offset_range, t.name))

    prev = None
    for meta in tensors:
        if prev is not None and meta.byte_offset_range[0] < prev.byte_offset_range[1]:
            raise CheckpointFormatError(
                f"{path}: tensors '{prev.name}' and '{meta.name}' have overlapping byte ranges")
        if meta.nbytes:
            prev = meta

    total = sum(t.nbytes for t in tensors)
    log.debug(f"Read manifest of {path}: {len(tensors)} tensors, {total} payload bytes")
    return CheckpointManifest(tensors, metadata, total, path, data_start)

def validate_compat(a: CheckpointManifest, b: CheckpointManifest) -> CompatReport:
    """List name, shape and dtype mismatches between two manifests
    """
    report = CompatReport()
    b_by_name = {t.name: t for t in b.tensors}
    a_names = set()
    for ta in a.tensors:
        a_names.add(ta.name)
        tb = b_by_name.get(ta.name)
        if tb is None:
            report.issues.append(CompatIssue('missing', ta.name, 'absent from second checkpoint'))
            continue
        if ta.shape != tb.shape:
            report.issues.append(CompatIssue('shape', ta.name, f"{list(ta.shape)} != {list(tb.shape)}"))
        if ta.dtype != tb.dtype:
            report.issues.append(CompatIssue('dtype', ta.name, f"{ta.dtype.value} != {tb.dtype.value}"))
    for tb in b.tensors:
        if tb.name not in a_names:
            report.issues.append(CompatIssue('missing', tb.name, 'absent from first checkpoint'))
    return report


def widen(dtype: DType, storage: np.ndarray) -> np.ndarray:
    """Exactly convert stored values to float32"""
    if dtype is DType.BF16:
        return (storage.astype(np.uint32) << 16).view(np.float32)
    return storage.astype(np.float32)

def narrow(dtype: DType, values: np.ndarray) -> np.ndarray:
    """Round float32 values to the storage dtype, round-to-nearest-even"""
    values = np.asarray(values, dtype=np.float32)
    if dtype is DType.F32:
        return values.astype('<f4')
    if dtype is DType.F16:
        return values.astype('<f2')

    bits = values.view(np.uint32)
    nan = np.isnan(values)
    # Keep NaN bits away from the rounding add, which would overflow
    safe = np.where(nan, np.uint32(0), bits)
    rounding_bias = ((safe >> 16) & np.uint32(1)) + np.uint32(0x7FFF)
    rounded = ((safe + rounding_bias) >> 16).astype('<u2')
    quiet_nan = ((bits >> 16) & np.uint32(0x8000)).astype('<u2') | np.uint16(0x7FC0)
    return np.where(nan, quiet_nan, rounded).astype('<u2')


class TensorSet:
    """ Named tensors in storage form, plus container metadata

    Values stay in their storage dtype so a write/read round trip is
    bit-identical.
    """
    def __init__(self, metadata: dict[str, str]=None):
        self.metadata = dict(metadata or {})
        self._tensors: dict[str, tuple[DType, tuple[int, ...], np.ndarray]] = {}

    def __len__(self):
        return len(self._tensors)

    def __iter__(self):
        return self._tensors.__iter__()

    def __contains__(self, name: str):
        return name in self._tensors

    def add(self, name: str, dtype: DType, storage: np.ndarray, shape: tuple[int, ...]=None):
        storage = np.ascontiguousarray(storage, dtype=STORAGE_DTYPES[dtype]).reshape(-1)
        if shape is None:
            shape = (storage.size,)
        shape = tuple(int(d) for d in shape)
        if math.prod(shape) != storage.size:
            raise ValueError(f"Tensor '{name}' has {storage.size} elements but shape {list(shape)}")
        self._tensors[name] = (dtype, shape, storage)

    def add_values(self, name: str, dtype: DType, values, shape: tuple[int, ...]=None):
        """Add a tensor from float values, rounding them to the storage dtype"""
        values = np.asarray(values, dtype=np.float32)
        if shape is None:
            shape = values.shape
        self.add(name, dtype, narrow(dtype, values.reshape(-1)), shape)

    def dtype(self, name: str) -> DType:
        return self._tensors[name][0]

    def shape(self, name: str) -> tuple[int, ...]:
        return self._tensors[name][1]

    def storage(self, name: str) -> np.ndarray:
        return self._tensors[name][2]

    def values(self, name: str) -> np.ndarray:
        """float32 view of a tensor, reshaped"""
        dtype, shape, storage = self._tensors[name]
        return widen(dtype, storage).reshape(shape)

    def manifest(self) -> CheckpointManifest:
        """Lay the tensors out contiguously in insertion order"""
        tensors = []
        offset = 0
        for name, (dtype, shape, storage) in self._tensors.items():
            nbytes = storage.size * dtype.itemsize
            tensors.append(TensorMeta(name, dtype, shape, (offset, offset + nbytes)))
            offset += nbytes
        return CheckpointManifest(tensors, dict(self.metadata), offset)


def read_tensor(fp, manifest: CheckpointManifest, meta: TensorMeta) -> np.ndarray:
    """Read one tensor payload in storage form from an open file"""
    fp.seek(manifest.data_start + meta.byte_offset_range[0])
    raw = fp.read(meta.nbytes)
    if len(raw) != meta.nbytes:
        raise CheckpointFormatError(f"Short read for tensor '{meta.name}'")
    return np.frombuffer(raw, dtype=STORAGE_DTYPES[meta.dtype]).copy()

def iter_tensors(manifest: CheckpointManifest) -> Iterator[tuple[TensorMeta, np.ndarray]]:
    """Stream tensors one at a time in payload order"""
    with open(manifest.path, 'rb') as fp:
        for meta in manifest.tensors:
            yield meta, read_tensor(fp, manifest, meta)

def load_tensor_set(path: str | os.PathLike) -> TensorSet:
    """Load every tensor of a checkpoint into memory"""
    manifest = read_manifest(path)
    tensors = TensorSet(manifest.metadata)
    for meta, storage in iter_tensors(manifest):
        tensors.add(meta.name, meta.dtype, storage, meta.shape)
    return tensors


def encode_header(tensors: list[TensorMeta], metadata: dict[str, str]=None) -> bytes:
    """Serialise a header, space-padded to an 8-byte boundary"""
    header = {}
    if metadata:
        header[METADATA_KEY] = {str(k): str(v) for k, v in metadata.items()}
    for meta in tensors:
        header[meta.name] = meta._asdict()
    encoded = json.dumps(header, separators=(',', ':')).encode('utf-8')
    padding = (-len(encoded)) % 8
    return encoded + b' ' * padding

class CheckpointWriter:
    """ Stream tensors into a new checkpoint

    The layout is fixed up front from the metas, so tensors can be written
    one at a time in the same order. Output goes to a temporary file that
    is renamed into place on close().
    """
    def __init__(self, path: str | os.PathLike, tensors: list[TensorMeta],
        metadata: dict[str, str]=None):
        self.path = Path(path)
        self.tmp_path = self.path.with_name(f".{self.path.name}.partial")
        offset = 0
        self.layout = []
        for meta in tensors:
            self.layout.append(TensorMeta(meta.name, meta.dtype, meta.shape, (offset, offset + meta.nbytes)))
            offset += meta.nbytes
        self.header = encode_header(self.layout, metadata)
        self.expected_size = HEADER_LENGTH_BYTES + len(self.header) + offset
        self._next = 0
        self._fp = None

    def open(self) -> CheckpointWriter:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fp = open(self.tmp_path, 'wb')
        self._fp.write(struct.pack('<Q', len(self.header)))
        self._fp.write(self.header)
        return self

    def write(self, name: str, storage: np.ndarray):
        meta = self.layout[self._next]
        if meta.name != name:
            raise ValueError(f"Expected tensor '{meta.name}' next, got '{name}'")
        data = np.ascontiguousarray(storage, dtype=STORAGE_DTYPES[meta.dtype]).tobytes()
        if len(data) != meta.nbytes:
            raise ValueError(f"Tensor '{name}' has {len(data)} bytes, layout expects {meta.nbytes}")
        self._fp.write(data)
        self._next += 1

    def close(self) -> Path:
        if self._next != len(self.layout):
            self.abort()
            raise ValueError(f"Only {self._next} of {len(self.layout)} tensors written to {self.path}")
        self._fp.flush()
        os.fsync(self._fp.fileno())
        self._fp.close()
        self._fp = None
        os.replace(self.tmp_path, self.path)
        return self.path

    def abort(self):
        """Drop a partially written output"""
        if self._fp is not None:
            self._fp.close()
            self._fp = None
        if self.tmp_path.exists():
            self.tmp_path.unlink()

    def __enter__(self):
        return self.open()

    def __exit__(self, exc_type, exc_value, traceback):
        if exc_type is not None:
            self.abort()
        elif self._fp is not None:
            self.close()

def write_tensor_set(path: str | os.PathLike, tensors: TensorSet) -> Path:
    """Save a TensorSet as a checkpoint"""
    manifest = tensors.manifest()
    with CheckpointWriter(path, manifest.tensors, tensors.metadata) as writer:
        for meta in manifest.tensors:
            writer.write(meta.name, tensors.storage(meta.name))
    return Path(path)

def sha256_file(path: str | os.PathLike, blocksize: int=1024 ** 2) -> str:
    digest = hashlib.sha256()
    with open(path, 'rb') as fp:
        for block in iter(lambda: fp.read(blocksize), b''):
            digest.update(block)
    return digest.hexdigest()
