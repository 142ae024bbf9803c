import json

import numpy as np
import pytest

from condseg.errors import CorruptFileError, ValidationError
from condseg.storage import (decode_tensor, encode_tensor, load_dataset, read_manifest, read_tensor,
                             regenerate_from_manifest, save_dataset, write_pgm, write_tensor)
from condseg.synth import gen_multitask


@pytest.mark.parametrize("arr", [
    np.arange(6, dtype=np.float32).reshape(2, 3),
    np.linspace(0, 1, 5),
    np.eye(3, dtype=np.uint8)[None],
    np.array(7, dtype=np.int32),
])
def test_tensor_round_trip(arr, tmp_path):
    write_tensor(tmp_path / "t.cseg", arr)
    back = read_tensor(tmp_path / "t.cseg")
    assert back.dtype == arr.dtype and back.shape == arr.shape
    np.testing.assert_array_equal(back, arr)


def test_header_layout():
    buf = encode_tensor(np.zeros((2, 3), dtype=np.float32))
    assert buf[:4] == b"CSEG"
    assert buf[4:6] == b"\x01\x00" and buf[6] == 1 and buf[7] == 2
    assert buf[8:16] == b"\x02\x00\x00\x00\x03\x00\x00\x00"
    assert len(buf) == 16 + 24


def test_unsupported_dtype():
    with pytest.raises(ValidationError):
        encode_tensor(np.zeros(2, dtype=np.complex64))


@pytest.mark.parametrize("mutate,match", [
    (lambda b: b"XXXX" + b[4:], "magic"),
    (lambda b: b[:4] + b"\x09\x00" + b[6:], "version"),
    (lambda b: b[:6] + b"\x63" + b[7:], "dtype"),
    (lambda b: b[:-1], "truncated"),
    (lambda b: b[:10], "truncated"),
])
def test_corrupt_containers(mutate, match):
    with pytest.raises(CorruptFileError, match=match):
        decode_tensor(mutate(encode_tensor(np.ones((2, 2)))))


def test_trailing_bytes(tmp_path):
    (tmp_path / "t.cseg").write_bytes(encode_tensor(np.ones(2)) + b"\0")
    with pytest.raises(CorruptFileError, match="trailing"):
        read_tensor(tmp_path / "t.cseg")


def test_pgm(tmp_path):
    write_pgm(tmp_path / "a.pgm", np.array([[0.0, 1.0]]))
    assert (tmp_path / "a.pgm").read_bytes() == b"P5\n2 1\n255\n\x00\xff"
    with pytest.raises(ValidationError):
        write_pgm(tmp_path / "b.pgm", np.zeros((2, 2, 2)))


@pytest.fixture(scope="module")
def small():
    return gen_multitask(2, nuclei_n=6, anomaly_n=3, val=(2, 1), test=(2, 1))


def test_dataset_round_trip(small, tmp_path):
    save_dataset(small, tmp_path, pgm=True)
    back = load_dataset(tmp_path)
    assert back.schema == small.schema and back.params == small.params
    for a, b in zip(small.samples, back.samples):
        assert (a.sample_id, a.split, a.subset_tag, a.record) == (b.sample_id, b.split, b.subset_tag, b.record)
        np.testing.assert_array_equal(a.image, b.image)
        np.testing.assert_array_equal(a.mask, b.mask)
    # paired samples share one stored image
    assert len(list((tmp_path / "images").iterdir())) == len({s.image_id for s in small.samples})
    assert any(p.suffix == ".pgm" for p in (tmp_path / "pgm").iterdir())


def test_manifest_is_deterministic(small, tmp_path):
    save_dataset(small, tmp_path / "a")
    save_dataset(small, tmp_path / "b")
    assert (tmp_path / "a/manifest.json").read_bytes() == (tmp_path / "b/manifest.json").read_bytes()


def test_regenerate_from_manifest(small, tmp_path):
    save_dataset(small, tmp_path)
    regen = regenerate_from_manifest(tmp_path)
    for a, b in zip(small.samples, regen.samples):
        assert a.image.tobytes() == b.image.tobytes()


def test_manifest_errors(small, tmp_path):
    with pytest.raises(ValidationError, match="no manifest"):
        read_manifest(tmp_path)
    save_dataset(small, tmp_path)
    m = json.loads((tmp_path / "manifest.json").read_text())
    m["counts"]["train"]["nuclei"] += 1
    (tmp_path / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(CorruptFileError, match="counts"):
        load_dataset(tmp_path)
    (tmp_path / "manifest.json").write_text("{")
    with pytest.raises(CorruptFileError):
        load_dataset(tmp_path)
    (tmp_path / "manifest.json").write_text('{"format": "other"}')
    with pytest.raises(ValidationError):
        load_dataset(tmp_path)
