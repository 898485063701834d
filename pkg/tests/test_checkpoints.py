"""Test reading and writing checkpoint containers
"""
import json
import struct

import numpy as np
import pytest

from util import write_checkpoint, small_checkpoints
from dartpipe.checkpoints import (read_manifest, validate_compat, load_tensor_set, narrow, widen,
    TensorSet, write_tensor_set, sha256_file)
from dartpipe.const import DType, CheckpointFormatError

def raw_checkpoint(path, header: dict, payload: bytes):
    encoded = json.dumps(header).encode('utf-8')
    path.write_bytes(struct.pack('<Q', len(encoded)) + encoded + payload)
    return path

def test_manifest_roundtrip(tmp_path):
    base, _ = small_checkpoints(tmp_path)
    manifest = read_manifest(base)

    assert manifest.names() == ['layer.weight', 'layer.bias']
    assert manifest['layer.weight'].shape == (2, 3)
    assert manifest['layer.weight'].dtype == DType.F32
    assert manifest['layer.bias'].byte_offset_range == (24, 32)
    assert manifest.total_bytes == 32
    assert manifest.metadata == {'format': 'pt'}

def test_tensor_values_survive(tmp_path):
    base, _ = small_checkpoints(tmp_path, dtype=DType.BF16)
    tensors = load_tensor_set(base)

    assert tensors.dtype('layer.weight') == DType.BF16
    assert tensors.values('layer.weight').tolist() == [[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]
    assert tensors.values('layer.bias').tolist() == [0.5, -0.5]

def test_rewrite_is_bit_identical(tmp_path):
    base, _ = small_checkpoints(tmp_path, dtype=DType.F16)
    copy = write_tensor_set(tmp_path / 'copy.safetensors', load_tensor_set(base))

    assert sha256_file(copy) == sha256_file(base)

def test_header_is_padded_to_8_bytes(tmp_path):
    base, _ = small_checkpoints(tmp_path)
    with open(base, 'rb') as fp:
        (header_len,) = struct.unpack('<Q', fp.read(8))
    assert header_len % 8 == 0

def test_zero_header_length(tmp_path):
    path = tmp_path / 'bad.safetensors'
    path.write_bytes(struct.pack('<Q', 0) + b'{}')
    with pytest.raises(CheckpointFormatError):
        read_manifest(path)

def test_header_length_past_end_of_file(tmp_path):
    path = tmp_path / 'bad.safetensors'
    path.write_bytes(struct.pack('<Q', 4096) + b'{}')
    with pytest.raises(CheckpointFormatError):
        read_manifest(path)

def test_header_not_json(tmp_path):
    path = tmp_path / 'bad.safetensors'
    path.write_bytes(struct.pack('<Q', 8) + b'not json')
    with pytest.raises(CheckpointFormatError):
        read_manifest(path)

def test_repeated_tensor_name(tmp_path):
    entry = '{"dtype": "F32", "shape": [1], "data_offsets": [%d, %d]}'
    encoded = ('{"w": ' + entry % (0, 4) + ', "w": ' + entry % (4, 8) + '}').encode('utf-8')
    path = tmp_path / 'twice.safetensors'
    path.write_bytes(struct.pack('<Q', len(encoded)) + encoded + bytes(8))
    with pytest.raises(CheckpointFormatError, match="'w' more than once"):
        read_manifest(path)

def test_overlapping_ranges(tmp_path):
    path = raw_checkpoint(tmp_path / 'overlap.safetensors', {
        'a': {'dtype': 'F32', 'shape': [2], 'data_offsets': [0, 8]},
        'b': {'dtype': 'F32', 'shape': [2], 'data_offsets': [4, 12]},
    }, bytes(12))
    with pytest.raises(CheckpointFormatError, match='overlapping'):
        read_manifest(path)

def test_range_beyond_data(tmp_path):
    path = raw_checkpoint(tmp_path / 'short.safetensors', {
        'a': {'dtype': 'F32', 'shape': [4], 'data_offsets': [0, 16]},
    }, bytes(8))
    with pytest.raises(CheckpointFormatError, match='exceeds'):
        read_manifest(path)

def test_range_size_must_match_shape(tmp_path):
    path = raw_checkpoint(tmp_path / 'mismatch.safetensors', {
        'a': {'dtype': 'F32', 'shape': [3], 'data_offsets': [0, 8]},
    }, bytes(8))
    with pytest.raises(CheckpointFormatError):
        read_manifest(path)

def test_unsupported_dtype(tmp_path):
    path = raw_checkpoint(tmp_path / 'ints.safetensors', {
        'a': {'dtype': 'I64', 'shape': [1], 'data_offsets': [0, 8]},
    }, bytes(8))
    with pytest.raises(CheckpointFormatError, match='unsupported dtype'):
        read_manifest(path)

def test_manifest_sorted_by_offset(tmp_path):
    path = raw_checkpoint(tmp_path / 'order.safetensors', {
        'second': {'dtype': 'F32', 'shape': [1], 'data_offsets': [4, 8]},
        'first': {'dtype': 'F32', 'shape': [1], 'data_offsets': [0, 4]},
    }, bytes(8))
    assert read_manifest(path).names() == ['first', 'second']

def test_compat_report(tmp_path):
    a = write_checkpoint(tmp_path / 'a.safetensors', {
        'w': (DType.F32, [1.0, 2.0]),
        'x': (DType.F32, [1.0]),
        'only_a': (DType.F32, [1.0]),
    })
    b = write_checkpoint(tmp_path / 'b.safetensors', {
        'w': (DType.F32, [1.0, 2.0, 3.0]),
        'x': (DType.F16, [1.0]),
    })
    report = validate_compat(read_manifest(a), read_manifest(b))

    assert not report.is_fusable
    kinds = sorted((issue.kind, issue.name) for issue in report)
    assert kinds == [('dtype', 'x'), ('missing', 'only_a'), ('shape', 'w')]

def test_compat_report_empty_for_matching(tmp_path):
    base, distilled = small_checkpoints(tmp_path)
    assert validate_compat(read_manifest(base), read_manifest(distilled)).is_fusable

def test_bf16_round_to_nearest_even():
    halfway_down = np.float32(1 + 2 ** -8)
    halfway_up = np.float32(1 + 3 * 2 ** -8)
    bits = narrow(DType.BF16, np.array([1.0, halfway_down, halfway_up], dtype=np.float32))

    assert bits.tolist() == [0x3F80, 0x3F80, 0x3F82]

def test_bf16_widen_is_exact():
    bits = np.array([0x3F80, 0xBF80, 0x4049], dtype='<u2')
    values = widen(DType.BF16, bits)

    assert values.tolist() == [1.0, -1.0, 3.140625]

def test_bf16_nan_stays_nan():
    bits = narrow(DType.BF16, np.array([np.nan], dtype=np.float32))
    assert np.isnan(widen(DType.BF16, bits))[0]

def test_tensor_set_shape_check():
    ts = TensorSet()
    with pytest.raises(ValueError):
        ts.add('w', DType.F32, np.zeros(6, dtype=np.float32), (2, 2))
