import json
import struct

import numpy as np
import pytest

from mf_readout import DataError, crop, default_config, generate_dataset, read_stack, write_stack


@pytest.fixture()
def stack():
    return generate_dataset(default_config(n_images=6, seed=13))


def test_round_trip(tmp_path, stack):
    path = tmp_path / "ds.qimg"
    write_stack(path, stack)
    assert path.exists() and (tmp_path / "ds.json").exists()
    back = read_stack(path)
    assert np.array_equal(back.images, stack.images)
    assert back.images.dtype == np.float32
    assert np.array_equal(back.truth, stack.truth)
    assert back.config == stack.config


def test_write_is_deterministic(tmp_path, stack):
    write_stack(tmp_path / "a.qimg", stack)
    write_stack(tmp_path / "b.qimg", stack)
    assert (tmp_path / "a.qimg").read_bytes() == (tmp_path / "b.qimg").read_bytes()
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_cropped_stack_round_trips(tmp_path, stack):
    cropped = crop(stack, 2, 3, 20, 21)
    path = tmp_path / "c.qimg"
    write_stack(path, cropped)
    back = read_stack(path)
    assert back.images.shape == (6, 20, 21)
    assert back.config.geometry.origin_px == (6.0, 5.0)


def test_header_layout(tmp_path, stack):
    path = tmp_path / "ds.qimg"
    write_stack(path, stack)
    raw = path.read_bytes()
    magic, version, n, h, w = struct.unpack_from("<4sHIHH", raw)
    assert (magic, version, n, h, w) == (b"QIMG", 1, 6, 28, 28)
    assert len(raw) == 14 + 4 * n * h * w


def test_missing_file(tmp_path):
    with pytest.raises(DataError):
        read_stack(tmp_path / "nope.qimg")


def test_bad_magic(tmp_path, stack):
    path = tmp_path / "ds.qimg"
    write_stack(path, stack)
    raw = bytearray(path.read_bytes())
    raw[:4] = b"NOPE"
    path.write_bytes(bytes(raw))
    with pytest.raises(DataError, match="magic"):
        read_stack(path)


def test_bad_version(tmp_path, stack):
    path = tmp_path / "ds.qimg"
    write_stack(path, stack)
    raw = bytearray(path.read_bytes())
    raw[4:6] = struct.pack("<H", 9)
    path.write_bytes(bytes(raw))
    with pytest.raises(DataError, match="version"):
        read_stack(path)


def test_truncated_payload(tmp_path, stack):
    path = tmp_path / "ds.qimg"
    write_stack(path, stack)
    raw = path.read_bytes()
    path.write_bytes(raw[:-10])
    with pytest.raises(DataError, match="bytes"):
        read_stack(path)


def test_missing_sidecar(tmp_path, stack):
    path = tmp_path / "ds.qimg"
    write_stack(path, stack)
    (tmp_path / "ds.json").unlink()
    with pytest.raises(DataError, match="sidecar"):
        read_stack(path)


def test_sidecar_key_check(tmp_path, stack):
    path = tmp_path / "ds.qimg"
    write_stack(path, stack)
    sidecar = json.loads((tmp_path / "ds.json").read_text())
    sidecar["extra"] = 1
    (tmp_path / "ds.json").write_text(json.dumps(sidecar))
    with pytest.raises(DataError, match="keys"):
        read_stack(path)


def test_sidecar_truth_shape_check(tmp_path, stack):
    path = tmp_path / "ds.qimg"
    write_stack(path, stack)
    sidecar = json.loads((tmp_path / "ds.json").read_text())
    sidecar["truth"] = sidecar["truth"][:-1]
    (tmp_path / "ds.json").write_text(json.dumps(sidecar))
    with pytest.raises(DataError, match="truth"):
        read_stack(path)
