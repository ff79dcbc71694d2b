import struct

import numpy as np
import pytest

from kktrecon import io as kio
from kktrecon.mlp import InitScheme, init_params


@pytest.mark.parametrize("precision", [32, 64])
def test_checkpoint_round_trip(tmp_path, precision):
    p = init_params(InitScheme("standard", 1), [7, 5, 3], precision=precision)
    path = tmp_path / "ck.bin"
    kio.save_params(p, path)
    q = kio.load_params(path)
    assert q.precision == precision
    assert all(np.array_equal(a, b) for a, b in zip(p.layer_weights, q.layer_weights))


def test_layout_header_fields():
    p = init_params(InitScheme("standard", 1), [2, 3])
    blob = kio.encode(p.layer_weights, kio.KIND_CHECKPOINT, 64)
    magic, version, width, kind, meta_len = struct.unpack_from("<8sHBBI", blob, 0)
    assert (magic, version, width, kind, meta_len) == (b"KKTRECON", 1, 8, 0, 0)
    (count,) = struct.unpack_from("<I", blob, 16)
    rows, cols = struct.unpack_from("<QQ", blob, 20)
    assert (count, rows, cols) == (1, 2, 3)
    assert np.frombuffer(blob, "<f8", 6, 36).tolist() == p.layer_weights[0].ravel().tolist()
    assert len(blob) == 36 + 48 + 8


def test_checksum_rejects_any_flipped_byte(tmp_path):
    p = init_params(InitScheme("standard", 1), [4, 3, 2])
    blob = bytearray(kio.encode(p.layer_weights, kio.KIND_CHECKPOINT))
    for pos in (0, 10, 30, len(blob) // 2, len(blob) - 1):
        bad = bytearray(blob)
        bad[pos] ^= 0x01
        with pytest.raises(kio.ChecksumError):
            kio.decode(bytes(bad))


def test_truncated_and_wrong_kind(tmp_path):
    p = init_params(InitScheme("standard", 1), [4, 3, 2])
    blob = kio.encode(p.layer_weights, kio.KIND_CHECKPOINT)
    with pytest.raises((kio.ChecksumError, kio.FormatError)):
        kio.decode(blob[:-3])
    with pytest.raises(kio.FormatError):
        kio.decode(b"short")
    path = tmp_path / "state.bin"
    path.write_bytes(kio.encode([np.zeros(3)], kio.KIND_RECON_STATE, meta={"x": 1}))
    with pytest.raises(kio.FormatError):
        kio.load_params(path)


def test_meta_round_trip():
    kind, bits, meta, arrays = kio.decode(kio.encode([np.arange(3.0)], kio.KIND_RECON_STATE, 32, {"a": [1, 2]}))
    assert (kind, bits, meta) == (kio.KIND_RECON_STATE, 32, {"a": [1, 2]})
    assert arrays[0].dtype == np.float32 and arrays[0].tolist() == [[0.0, 1.0, 2.0]]
