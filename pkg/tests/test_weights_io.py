import struct

import numpy as np
import pytest

from vap.model import WeightsFileError, init_weights, load_weights, save_weights


def saved(tmp_path, cfg, w):
    path = tmp_path / "w.vapw"
    save_weights(w, path, cfg)
    return path


def test_roundtrip_bit_identical(tmp_path, tiny_cfg, tiny_weights):
    w, cfg = load_weights(saved(tmp_path, tiny_cfg, tiny_weights))
    assert cfg == tiny_cfg
    assert set(w) == set(tiny_weights)
    for k in w:
        assert w[k].dtype == np.float32 and w[k].tobytes() == tiny_weights[k].tobytes()


def test_layout_header(tmp_path, tiny_cfg, tiny_weights):
    buf = saved(tmp_path, tiny_cfg, tiny_weights).read_bytes()
    assert buf[:4] == b"VAPW"
    assert struct.unpack("<I", buf[4:8])[0] == 1


@pytest.mark.parametrize("cut", [3, 10, 100, -5, -1])
def test_truncated(tmp_path, tiny_cfg, tiny_weights, cut):
    path = saved(tmp_path, tiny_cfg, tiny_weights)
    buf = path.read_bytes()
    path.write_bytes(buf[:cut] if cut > 0 else buf[:len(buf) + cut])
    with pytest.raises(WeightsFileError):
        load_weights(path)


def test_bad_magic(tmp_path, tiny_cfg, tiny_weights):
    path = saved(tmp_path, tiny_cfg, tiny_weights)
    path.write_bytes(b"NOPE" + path.read_bytes()[4:])
    with pytest.raises(WeightsFileError, match="magic"):
        load_weights(path)


def test_edited_shape_names_tensor(tmp_path, tiny_cfg, tiny_weights):
    path = saved(tmp_path, tiny_cfg, tiny_weights)
    buf = bytearray(path.read_bytes())
    name = b"cross1.0.ffn.W1"
    at = buf.find(name) + len(name)
    rank = struct.unpack("<I", buf[at:at + 4])[0]
    assert rank == 2
    struct.pack_into("<I", buf, at + 4, 7)  # first dim
    path.write_bytes(bytes(buf))
    with pytest.raises(WeightsFileError, match="cross1.0.ffn.W1"):
        load_weights(path)


def test_corrupt_value_fails_crc(tmp_path, tiny_cfg, tiny_weights):
    path = saved(tmp_path, tiny_cfg, tiny_weights)
    buf = bytearray(path.read_bytes())
    buf[-40] ^= 0xFF
    path.write_bytes(bytes(buf))
    with pytest.raises(WeightsFileError, match="CRC"):
        load_weights(path)


def test_save_rejects_mismatched_weights(tmp_path, tiny_cfg):
    w = init_weights(tiny_cfg)
    w["vap.b"] = np.zeros(255, np.float32)
    with pytest.raises(WeightsFileError, match="vap.b"):
        save_weights(w, tmp_path / "x", tiny_cfg)
