import struct

import numpy as np
import pytest

from etacnn.checkpoint import from_bytes, load_checkpoint, save_checkpoint, to_bytes
from etacnn.errors import CheckpointError
from etacnn.maskgen import MaskSpec
from etacnn.model import build_model

from conftest import SMALL


def test_round_trip_forward_is_bitwise(small_checkpoint, tmp_path, rng):
    path = tmp_path / "m.mcnn"
    save_checkpoint(small_checkpoint, path)
    back = load_checkpoint(path)
    x = rng.integers(0, SMALL.classes, (3, SMALL.window, SMALL.segments))
    assert np.array_equal(small_checkpoint.model.forward(x), back.model.forward(x))
    assert back.config == small_checkpoint.config
    assert back.quantizer == small_checkpoint.quantizer
    assert np.array_equal(back.fill_classes, small_checkpoint.fill_classes)
    assert back.history == small_checkpoint.history
    assert back.optimizer["decay"] == 0.9 and back.optimizer["epsilon"] == 1e-8


def test_file_starts_with_magic_and_version(small_checkpoint):
    data = to_bytes(small_checkpoint)
    assert data[:4] == b"MCNN"
    assert struct.unpack("<H", data[4:6])[0] == 1


def test_corrupted_byte_fails_checksum(small_checkpoint):
    data = bytearray(to_bytes(small_checkpoint))
    data[len(data) // 2] ^= 0x01
    with pytest.raises(CheckpointError, match="checksum"):
        from_bytes(bytes(data))


def test_unknown_version(small_checkpoint):
    data = bytearray(to_bytes(small_checkpoint))
    data[4:6] = struct.pack("<H", 99)
    with pytest.raises(CheckpointError, match="version"):
        from_bytes(bytes(data))


def test_bad_magic_and_truncation(small_checkpoint, tmp_path):
    with pytest.raises(CheckpointError):
        from_bytes(b"NOPE" + to_bytes(small_checkpoint)[4:])
    with pytest.raises(CheckpointError):
        from_bytes(to_bytes(small_checkpoint)[:-10])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "absent.mcnn")


def test_custom_masks_survive_reload(small_checkpoint):
    cells = np.zeros((3, 3))
    cells[0, 1] = 1
    cells[1, 0] = 1
    model = build_model(SMALL, seed=0, masks=(MaskSpec(3, "A", None, cells),
                                              MaskSpec(3, "B", None, np.eye(3) * [1, 1, 0])))
    small_checkpoint_copy = type(small_checkpoint)(model=model, quantizer=small_checkpoint.quantizer,
                                                   fill_classes=small_checkpoint.fill_classes)
    back = from_bytes(to_bytes(small_checkpoint_copy))
    assert np.array_equal(back.model.layers[0].mask.cells, cells)
    assert back.model.layers[1].mask.kind == "B"
