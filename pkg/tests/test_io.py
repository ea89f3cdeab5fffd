import json
import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_array_equal

from aneurysm3d.errors import FormatError
from aneurysm3d.io import (
    WEIGHTS_MAGIC,
    dumps_report,
    load_annotation,
    load_volume,
    load_weights,
    read_weights,
    rle_decode,
    rle_encode,
    save_annotation,
    save_report,
    load_report,
    save_volume,
    save_weights,
    volume_paths,
)
from aneurysm3d.model import NetworkConfig, build_network
from aneurysm3d.pipeline import RunConfig, phantom_cases, phantom_run_config, read_dataset, write_dataset
from aneurysm3d.volume import Volume

TOY = NetworkConfig(levels=2, base_channels=2, se_ratio=2, input_dims=8)


# ----------------------------------------------------------------- volumes


def test_volume_round_trip_bit_exact(tmp_path):
    data = np.random.default_rng(0).standard_normal((16, 16, 16)).astype(np.float32)
    vol = Volume(data, (0.5, 0.25, 0.8))
    save_volume(vol, tmp_path / "v")
    back = load_volume(tmp_path / "v")
    assert back.data.tobytes() == data.tobytes()
    assert back.spacing == (0.5, 0.25, 0.8)
    assert back.dims == (16, 16, 16)


def test_volume_x_fastest_layout(tmp_path):
    data = np.arange(24, dtype=np.float32).reshape(2, 3, 4)  # (z, y, x)
    save_volume(Volume(data), tmp_path / "v")
    header = json.loads((tmp_path / "v.vol.json").read_text())
    assert header["dims"] == [4, 3, 2]
    raw = np.frombuffer((tmp_path / "v.raw").read_bytes(), "<f4")
    assert raw[1] == data[0, 0, 1] and raw[4] == data[0, 1, 0] and raw[12] == data[1, 0, 0]


def test_i16_round_trip_and_rejection(tmp_path):
    data = np.random.default_rng(1).integers(-300, 3000, (4, 5, 6)).astype(np.float32)
    save_volume(Volume(data), tmp_path / "a", "i16")
    assert_array_equal(load_volume(tmp_path / "a.raw").data, data)
    assert (tmp_path / "a.raw").stat().st_size == 4 * 5 * 6 * 2
    with pytest.raises(FormatError):
        save_volume(Volume(data + 0.5), tmp_path / "b", "i16")


def test_truncated_payload(tmp_path):
    save_volume(Volume(np.ones((4, 4, 4), np.float32)), tmp_path / "v")
    raw = tmp_path / "v.raw"
    raw.write_bytes(raw.read_bytes()[:-4])
    with pytest.raises(FormatError) as e:
        load_volume(tmp_path / "v")
    assert "expected 256 bytes, got 252" in str(e.value)
    assert e.value.field == "payload"


@pytest.mark.parametrize(
    "field,value",
    [("dims", [4, 4]), ("dtype", "f64"), ("byte_order", "big"), ("spacing", [1, 0, 1]), ("format", "nifti")],
)
def test_bad_header_names_field(tmp_path, field, value):
    save_volume(Volume(np.ones((4, 4, 4), np.float32)), tmp_path / "v")
    side = tmp_path / "v.vol.json"
    h = json.loads(side.read_text())
    h[field] = value
    side.write_text(json.dumps(h))
    with pytest.raises(FormatError) as e:
        load_volume(side)
    assert e.value.field == field


def test_invalid_json_header_gives_offset(tmp_path):
    side, _ = volume_paths(tmp_path / "v")
    side.write_text('{"dims": [1, 2,')
    with pytest.raises(FormatError) as e:
        load_volume(side)
    assert e.value.offset is not None


def test_failed_save_leaves_no_partial_file(tmp_path):
    with pytest.raises(FormatError):
        save_volume(Volume(np.full((2, 2, 2), 0.5, np.float32)), tmp_path / "x", "i16")
    assert os.listdir(tmp_path) == []


# -------------------------------------------------------------- annotations


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_rle_round_trip(seed):
    rng = np.random.default_rng(seed)
    dims = tuple(int(v) for v in rng.integers(1, 9, 3))
    mask = rng.random(dims[::-1]) < 0.3
    idx = np.argwhere(mask)[:, ::-1]
    back = rle_decode(rle_encode(idx, dims), dims)
    out = np.zeros(dims[::-1], bool)
    out[back[:, 2], back[:, 1], back[:, 0]] = True
    assert_array_equal(out, mask)


def test_rle_runs_are_contiguous():
    idx = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0], [0, 1, 0], [3, 3, 1]])
    assert rle_encode(idx, (4, 4, 2)) == [[0, 5], [31, 1]]


def test_annotation_round_trip(tmp_path):
    a = np.array([[1, 2, 3], [2, 2, 3]])
    b = np.array([[0, 0, 0]])
    save_annotation(tmp_path / "c.ann.json", "c7", (8, 8, 8), [a, b], [3.5, 1.0], ["ICA", None])
    ann = load_annotation(tmp_path / "c.ann.json")
    assert ann["case_id"] == "c7" and ann["dims"] == (8, 8, 8)
    assert_array_equal(ann["aneurysms"][0], a)
    assert_array_equal(ann["aneurysms"][1], b)
    assert ann["diameters_mm"] == [3.5, 1.0]
    assert ann["locations"] == ["ICA", None]


@pytest.mark.parametrize(
    "rle,field",
    [([[600, 1]], "aneurysms[0].rle[0]"), ([[5, 2], [4, 1]], "aneurysms[0].rle[1]"), ([[1]], "aneurysms[0].rle[0]"), ([], "aneurysms[0].rle")],
)
def test_bad_annotation_runs(tmp_path, rle, field):
    doc = {"format": "aneurysm3d-annotation", "version": 1, "case_id": "c", "dims": [8, 8, 8],
           "aneurysms": [{"rle": rle, "max_diameter_mm": 2.0}]}
    (tmp_path / "a.json").write_text(json.dumps(doc))
    with pytest.raises(FormatError) as e:
        load_annotation(tmp_path / "a.json")
    assert e.value.field == field


def test_annotation_rejects_non_positive_diameter(tmp_path):
    with pytest.raises(FormatError):
        save_annotation(tmp_path / "a.json", "c", (4, 4, 4), [np.array([[0, 0, 0]])], [0.0])


# ------------------------------------------------------------------ weights


def test_weights_round_trip_identical_outputs(tmp_path):
    m = build_network(TOY, seed=5).eval()
    save_weights(m, tmp_path / "w.bin")
    back = load_weights(tmp_path / "w.bin")
    x = np.random.default_rng(0).random((1, 1, 8, 8, 8)).astype(np.float32)
    assert m.forward(x).tobytes() == back.forward(x).tobytes()
    for (na, pa), (nb, pb) in zip(m.named_parameters(), back.named_parameters()):
        assert na == nb and pa.value.tobytes() == pb.value.tobytes()


def test_weights_payload_length(tmp_path):
    m = build_network(TOY)
    path = save_weights(m, tmp_path / "w.bin")
    manifest, params = read_weights(path)
    n = sum(p.value.size for _, p in m.named_parameters())
    head = len(json.dumps(manifest, sort_keys=True).encode())
    assert path.stat().st_size == len(WEIGHTS_MAGIC) + 8 + head + 4 * n
    assert list(params) == [k for k, _ in m.named_parameters()]


def test_weights_truncated_and_bad_magic(tmp_path):
    path = save_weights(build_network(TOY), tmp_path / "w.bin")
    raw = path.read_bytes()
    path.write_bytes(raw[:-8])
    with pytest.raises(FormatError) as e:
        read_weights(path)
    assert e.value.field == "payload" and "got" in str(e.value)
    path.write_bytes(b"XXXXXXXX" + raw[8:])
    with pytest.raises(FormatError) as e:
        read_weights(path)
    assert e.value.field == "magic" and e.value.offset == 0


# ------------------------------------------------------------ reports, data


def test_report_round_trip_is_stable(tmp_path):
    rep = {"b": [1, 0.1 + 0.2], "a": {"sensitivity": 2 / 3}}
    save_report(rep, tmp_path / "r.json")
    again = load_report(tmp_path / "r.json")
    assert dumps_report(again) == (tmp_path / "r.json").read_bytes()
    assert list(json.loads((tmp_path / "r.json").read_text())) == ["a", "b"]


def test_dataset_round_trip(tmp_path):
    cases = phantom_cases(3, 0.67, seed=2)
    write_dataset(cases, tmp_path / "d")
    back = read_dataset(tmp_path / "d")
    assert [c.case_id for c in back] == [c.case_id for c in cases]
    for a, b in zip(cases, back):
        assert a.volume.data.tobytes() == b.volume.data.tobytes()
        assert a.positive == b.positive
        for ga, gb in zip(a.truth.aneurysms, b.truth.aneurysms):
            assert sorted(map(tuple, ga)) == sorted(map(tuple, gb))
    with pytest.raises(FormatError):
        read_dataset(tmp_path)


def test_run_config_round_trip(tmp_path):
    cfg = phantom_run_config(max_epochs=7)
    (tmp_path / "c.json").write_text(json.dumps(cfg.to_dict()))
    assert RunConfig.load(tmp_path / "c.json") == cfg
    assert cfg.with_seed(3).train.seed == 3
