import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from modetreg.volgrid import (DisplacementField, LabelMap, Volume, VolumeFormatError, center_crop,
                              decode_volume, encode_volume, load_volume, normalize_minmax, save_volume)


def _header(blob):
    return json.loads(blob[:blob.index(b"\n")])


def test_roundtrip_random_volume(tmp_path, rng):
    v = Volume(rng.standard_normal((1, 8, 8, 8)).astype(np.float32))
    save_volume(v, tmp_path / "v.vvol")
    first = (tmp_path / "v.vvol").read_bytes()
    back = load_volume(tmp_path / "v.vvol")
    assert back == v
    save_volume(back, tmp_path / "w.vvol")
    assert (tmp_path / "w.vvol").read_bytes() == first


def test_large_header_shape(tmp_path):
    header = {"magic": "VVOL", "version": 1, "kind": "image", "shape": [160, 192, 160],
              "channels": 1, "dtype": "f32", "order": "C"}
    path = tmp_path / "big.vvol"
    path.write_bytes(json.dumps(header).encode() + b"\n" + bytes(160 * 192 * 160 * 4))
    v = load_volume(path)
    assert isinstance(v, Volume) and v.shape == (160, 192, 160) and v.channels == 1


def test_small_field_header():
    f = DisplacementField(np.ones((3, 4, 4, 4)))
    blob = encode_volume(f)
    h = _header(blob)
    assert h["kind"] == "field" and h["channels"] == 3 and h["shape"] == [4, 4, 4]
    back = decode_volume(blob)
    assert isinstance(back, DisplacementField) and back.shape == (4, 4, 4)


def test_payload_sizes():
    blob = encode_volume(Volume(np.zeros((2, 2, 2))))
    payload = blob[blob.index(b"\n") + 1:]
    assert payload == bytes(32)
    blob = encode_volume(DisplacementField.zeros((2, 2, 2)))
    assert len(blob) - blob.index(b"\n") - 1 == 96


def test_label_roundtrip_exact():
    lab = LabelMap(np.arange(27).reshape(3, 3, 3) % 4)
    back = decode_volume(encode_volume(lab))
    assert isinstance(back, LabelMap)
    assert back.data.dtype == np.int32
    np.testing.assert_array_equal(back.data, lab.data)
    assert _header(encode_volume(lab))["dtype"] == "i32"


def test_payload_is_little_endian_c_order():
    v = Volume(np.arange(8, dtype=np.float32).reshape(1, 2, 2, 2))
    blob = encode_volume(v)
    assert blob[blob.index(b"\n") + 1:] == np.arange(8, dtype="<f4").tobytes()


@pytest.mark.parametrize("mutate, field", [
    (lambda h: h.update(magic="NOPE"), "magic"),
    (lambda h: h.update(version=2), "version"),
    (lambda h: h.update(dtype="f64"), "dtype"),
    (lambda h: h.update(kind="mesh"), "kind"),
    (lambda h: h.update(shape=[2, 2]), "shape"),
    (lambda h: h.update(channels=0), "channels"),
])
def test_malformed_header_names_field(mutate, field):
    blob = encode_volume(Volume(np.zeros((2, 2, 2))))
    h = _header(blob)
    mutate(h)
    bad = json.dumps(h).encode() + blob[blob.index(b"\n"):]
    with pytest.raises(VolumeFormatError, match=field):
        decode_volume(bad)


def test_truncated_payload():
    blob = encode_volume(Volume(np.zeros((2, 2, 2))))
    with pytest.raises(VolumeFormatError, match="payload"):
        decode_volume(blob[:-4])


def test_missing_newline():
    with pytest.raises(VolumeFormatError, match="header"):
        decode_volume(b'{"magic": "VVOL"}')


@settings(max_examples=40, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 2), st.integers(1, 4), st.integers(1, 4),
                                    st.integers(1, 4)),
              elements=st.floats(-1e6, 1e6, width=32, allow_nan=False)))
def test_roundtrip_property(data):
    v = Volume(data)
    blob = encode_volume(v)
    assert decode_volume(blob) == v
    assert encode_volume(decode_volume(blob)) == blob


def test_normalize_examples():
    out = normalize_minmax(Volume(np.array([2.0, 4.0, 6.0]).reshape(1, 3, 1, 1)))
    np.testing.assert_allclose(out.data.ravel(), [0, 0.5, 1])
    out = normalize_minmax(Volume(np.array([-1.0, 0.0, 3.0]).reshape(1, 3, 1, 1)))
    np.testing.assert_allclose(out.data.ravel(), [0, 0.25, 1])


def test_normalize_idempotent(rng):
    v = normalize_minmax(Volume(rng.uniform(-5, 9, (1, 4, 4, 4))))
    assert v.data.min() == 0 and v.data.max() == 1
    np.testing.assert_array_equal(normalize_minmax(v).data, v.data)


def test_normalize_constant_raises():
    with pytest.raises(ValueError, match="constant"):
        normalize_minmax(Volume(np.ones((2, 2, 2))))


def test_center_crop_symmetric_and_tie():
    base = np.arange(6 ** 3).reshape(6, 6, 6)
    out = center_crop(LabelMap(base), (4, 4, 4))
    np.testing.assert_array_equal(out.data, base[1:5, 1:5, 1:5])
    base5 = np.arange(5 ** 3, dtype=np.float32).reshape(1, 5, 5, 5)
    out = center_crop(Volume(base5), (4, 4, 4))
    np.testing.assert_array_equal(out.data, base5[:, :4, :4, :4])


@pytest.mark.parametrize("src, mid, dst", [((8, 8, 8), (6, 6, 6), (4, 4, 4)),
                                            ((9, 8, 7), (7, 6, 5), (5, 4, 3))])
def test_center_crop_composition(rng, src, mid, dst):
    v = Volume(rng.standard_normal((2,) + src))
    assert center_crop(center_crop(v, mid), dst) == center_crop(v, dst)


def test_center_crop_preserves_kind_and_dtype(rng):
    v = center_crop(Volume(rng.standard_normal((2, 6, 6, 6))), (4, 4, 4))
    assert v.channels == 2 and v.data.dtype == np.float32
    f = center_crop(DisplacementField(rng.standard_normal((3, 6, 6, 6))), (4, 4, 4))
    assert isinstance(f, DisplacementField) and f.shape == (4, 4, 4)
    lab = center_crop(LabelMap(np.ones((5, 5, 5))), (3, 3, 3))
    assert isinstance(lab, LabelMap) and lab.data.dtype == np.int32


def test_center_crop_too_large():
    with pytest.raises(ValueError, match="exceeds"):
        center_crop(Volume(np.zeros((3, 3, 3))), (4, 3, 3))
