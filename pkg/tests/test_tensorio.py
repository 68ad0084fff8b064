import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from anocon.errors import ParseError, StorageError
from anocon.tensorio import (
    DatasetManifest,
    ManifestEntry,
    load_manifest,
    read_tensor,
    save_manifest,
    validate,
    write_tensor,
)


def test_header_and_payload_layout(tmp_path):
    p = tmp_path / "g.t"
    write_tensor(p, np.array([[0, 1], [1, 0]], np.float32))
    raw = p.read_bytes()
    head, payload = raw.split(b"\n", 1)
    assert json.loads(head) == {"dtype": "f32", "shape": [2, 2], "byte_order": "little"}
    assert len(payload) == 16
    assert np.frombuffer(payload, "<f4").tolist() == [0, 1, 1, 0]


def test_mask_stored_as_u8(tmp_path):
    p = tmp_path / "m.t"
    m = np.array([[True, False, True]])
    write_tensor(p, m)
    head, payload = p.read_bytes().split(b"\n", 1)
    assert json.loads(head)["dtype"] == "u8"
    assert payload == b"\x01\x00\x01"
    out = read_tensor(p)
    assert out.dtype == bool and np.array_equal(out, m)


def test_empty_shape_rejected(tmp_path):
    with pytest.raises(ValueError):
        write_tensor(tmp_path / "e.t", np.zeros((0, 3), np.float32))
    with pytest.raises(ValueError):
        write_tensor(tmp_path / "s.t", np.float32(1.0))


def test_truncated_payload(tmp_path):
    p = tmp_path / "t.t"
    p.write_bytes(b'{"dtype":"f32","shape":[2,2],"byte_order":"little"}\n' + b"\x00" * 12)
    with pytest.raises(ParseError) as ei:
        read_tensor(p)
    assert ei.value.field == "payload"
    assert "truncated" in str(ei.value)


def test_unknown_dtype(tmp_path):
    p = tmp_path / "d.t"
    p.write_bytes(b'{"dtype":"f64","shape":[1],"byte_order":"little"}\n' + b"\x00" * 8)
    with pytest.raises(ParseError) as ei:
        read_tensor(p)
    assert ei.value.field == "dtype"


@pytest.mark.parametrize("header", [b"not json", b'{"dtype":"f32"}', b'{"dtype":"f32","shape":[0]}', b"[1,2]"])
def test_malformed_header(tmp_path, header):
    p = tmp_path / "h.t"
    p.write_bytes(header + b"\n")
    with pytest.raises(ParseError):
        read_tensor(p)


def test_mask_values_other_than_binary(tmp_path):
    p = tmp_path / "m.t"
    p.write_bytes(b'{"dtype":"u8","shape":[2],"byte_order":"little"}\n\x01\x02')
    with pytest.raises(ParseError):
        read_tensor(p)


def test_storage_error_names_path(tmp_path):
    missing = tmp_path / "nope" / "x.t"
    with pytest.raises(StorageError) as ei:
        write_tensor(missing, np.ones((1, 1)))
    assert str(missing) in str(ei.value)
    with pytest.raises(StorageError):
        read_tensor(missing)


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=1, max_dims=4, max_side=6),
                  elements=st.floats(-1e6, 1e6, width=32)))
def test_roundtrip_bit_exact(tmp_path_factory, arr):
    p = tmp_path_factory.mktemp("rt") / "a.t"
    write_tensor(p, arr)
    out = read_tensor(p)
    assert out.dtype == np.float32
    assert out.tobytes() == arr.tobytes()
    # and read -> write reproduces the file
    q = p.with_name("b.t")
    write_tensor(q, out)
    assert q.read_bytes() == p.read_bytes()


def _dataset(tmp_path, split="train", masks=False):
    (tmp_path / "p0").mkdir()
    write_tensor(tmp_path / "p0" / "s0.t", np.zeros((4, 4)))
    write_tensor(tmp_path / "p0" / "s1.t", np.ones((4, 4)))
    m = None
    if masks:
        write_tensor(tmp_path / "p0" / "m0.t", np.zeros((4, 4), bool))
        write_tensor(tmp_path / "p0" / "m1.t", np.ones((4, 4), bool))
        m = ["p0/m0.t", "p0/m1.t"]
    man = DatasetManifest(split, [ManifestEntry("p0", ["p0/s0.t", "p0/s1.t"], m)], 2, tmp_path)
    save_manifest(man, tmp_path / "manifest.json")
    return tmp_path / "manifest.json"


class TestManifest:
    def test_valid_train(self, tmp_path):
        man = load_manifest(_dataset(tmp_path))
        assert man.split == "train" and man.n_slices == 2
        assert validate(man) == []

    def test_format_version_written(self, tmp_path):
        doc = json.loads(_dataset(tmp_path).read_text())
        assert doc["format_version"] == 1

    def test_train_with_mask(self, tmp_path):
        man = load_manifest(_dataset(tmp_path, masks=True))
        assert validate(man) == ["train entry has mask"]

    def test_test_split_may_have_masks(self, tmp_path):
        assert validate(load_manifest(_dataset(tmp_path, "test", masks=True))) == []

    def test_missing_file(self, tmp_path):
        path = _dataset(tmp_path)
        (tmp_path / "p0" / "s1.t").unlink()
        assert validate(load_manifest(path)) == ["missing file p0/s1.t"]

    def test_unparseable_file(self, tmp_path):
        path = _dataset(tmp_path)
        (tmp_path / "p0" / "s1.t").write_bytes(b"junk")
        (v,) = validate(load_manifest(path))
        assert v.startswith("unparseable file p0/s1.t")

    def test_unreadable_json(self, tmp_path):
        p = tmp_path / "manifest.json"
        p.write_text("{oops")
        with pytest.raises(ParseError):
            load_manifest(p)

    def test_order_independent(self, tmp_path):
        path = _dataset(tmp_path, masks=True)
        man = load_manifest(path)
        man.entries.append(ManifestEntry("p1", ["p1/a.t", "p1/b.t"], None))
        forward = validate(man)
        man.entries.reverse()
        assert validate(man) == forward
        assert "missing file p1/a.t" in forward
