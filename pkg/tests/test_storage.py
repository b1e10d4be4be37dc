import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from nlccam import storage
from nlccam.localization import Box
from nlccam.model import CheckpointError, init_checkpoint, load_model, save_model, small_config

f32 = st.floats(-1e6, 1e6, allow_nan=False, width=32)


class TestTensor:
    @settings(max_examples=50, deadline=None)
    @given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=1, max_dims=4, min_side=1, max_side=5), elements=f32))
    def test_round_trip(self, arr):
        data = storage.encode_tensor(arr)
        np.testing.assert_array_equal(storage.decode_tensor(data), arr.astype(np.float64))
        assert storage.encode_tensor(storage.decode_tensor(data)) == data

    def test_layout(self):
        data = storage.encode_tensor(np.array([[1.0, 2.0, 3.0]]))
        assert data[:8] == b"CCAMTNSR"
        assert struct.unpack("<5I", data[8:28]) == (1, 1, 2, 1, 3)
        assert np.frombuffer(data[28:], "<f4").tolist() == [1.0, 2.0, 3.0]
        assert len(data) == 8 + 4 * 5 + 12

    def test_file_round_trip(self, tmp_path):
        arr = np.arange(24.0).reshape(2, 3, 4)
        storage.save_tensor(tmp_path / "a.tensor", arr)
        storage.save_tensor(tmp_path / "b.tensor", arr)
        assert (tmp_path / "a.tensor").read_bytes() == (tmp_path / "b.tensor").read_bytes()
        np.testing.assert_array_equal(storage.load_tensor(tmp_path / "a.tensor"), arr)

    def test_bad_magic(self):
        data = bytearray(storage.encode_tensor(np.ones(2)))
        data[0] = ord("X")
        with pytest.raises(storage.BadMagicError):
            storage.decode_tensor(bytes(data))

    @pytest.mark.parametrize("cut", [4, 10, 20, 27])
    def test_truncated(self, cut):
        data = storage.encode_tensor(np.ones((2, 2)))
        with pytest.raises(storage.TruncatedError):
            storage.decode_tensor(data[: len(data) - cut])

    @pytest.mark.parametrize("offset, value", [(8, 2), (12, 7)])
    def test_unknown_version_or_dtype(self, offset, value):
        data = bytearray(storage.encode_tensor(np.ones(2)))
        data[offset : offset + 4] = struct.pack("<I", value)
        with pytest.raises(storage.UnsupportedFormatError):
            storage.decode_tensor(bytes(data))

    def test_errors_are_distinct(self):
        kinds = [storage.BadMagicError, storage.TruncatedError, storage.UnsupportedFormatError]
        assert len(set(kinds)) == 3
        assert not any(issubclass(a, b) for a in kinds for b in kinds if a is not b)

    def test_rank_zero(self):
        with pytest.raises(storage.FormatError):
            storage.encode_tensor(np.float64(1.0))

    def test_trailing_bytes(self):
        with pytest.raises(storage.FormatError):
            storage.decode_tensor(storage.encode_tensor(np.ones(2)) + b"\0")


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        tensors = {"b": np.ones((2, 3)), "a": np.arange(4.0)}
        meta = {"epochs": "3", "note": "x=y"}
        storage.save_checkpoint(tmp_path / "c.ckpt", tensors, meta)
        out, out_meta = storage.load_checkpoint(tmp_path / "c.ckpt")
        assert out.keys() == tensors.keys()
        for k in tensors:
            np.testing.assert_array_equal(out[k], tensors[k])
        assert out_meta == meta

    def test_deterministic_bytes(self):
        t = {"w": np.eye(3)}
        assert storage.encode_checkpoint(t, {"b": "1", "a": "2"}) == storage.encode_checkpoint(t, {"a": "2", "b": "1"})

    def test_duplicate_names(self):
        with pytest.raises(storage.DuplicateNameError):
            storage.encode_checkpoint([("w", np.ones(1)), ("w", np.zeros(1))])

    def test_duplicate_names_on_read(self):
        one = storage.encode_checkpoint([("w", np.ones(1)), ("v", np.ones(1))])
        forged = one.replace(b"\x01\x00\x00\x00v", b"\x01\x00\x00\x00w")
        with pytest.raises(storage.DuplicateNameError):
            storage.decode_checkpoint(forged)

    def test_truncated(self):
        data = storage.encode_checkpoint({"w": np.ones(3)}, {"k": "v"})
        with pytest.raises(storage.TruncatedError):
            storage.decode_checkpoint(data[:-2])

    def test_bad_magic(self):
        data = storage.encode_checkpoint({"w": np.ones(3)})
        with pytest.raises(storage.BadMagicError):
            storage.decode_checkpoint(b"CCAMTNSR" + data[8:])

    def test_model_round_trip(self, tmp_path):
        ckpt = init_checkpoint(small_config())
        save_model(tmp_path / "m.ckpt", ckpt)
        loaded = load_model(tmp_path / "m.ckpt")
        assert loaded.config == ckpt.config
        for k, v in ckpt.params.items():
            np.testing.assert_array_equal(loaded.params[k], v.astype(np.float32))

    def test_missing_parameter_named(self, tmp_path):
        ckpt = init_checkpoint(small_config())
        params = dict(ckpt.params)
        del params["nl1.Wk"]
        storage.save_checkpoint(tmp_path / "m.ckpt", params, ckpt.config.to_metadata())
        with pytest.raises(CheckpointError, match="nl1.Wk"):
            load_model(tmp_path / "m.ckpt")


MANIFEST = (
    "train-00000\timages/train-00000.tensor\t3\t1,2,10,12\n"
    "train-00001\timages/train-00001.tensor\t0\t0,0,4,4;5,5,9,9\n"
    "train-00002\timages/train-00002.tensor\t7\t2,2,3,3\n"
)


class TestManifest:
    def test_parse_fixture(self):
        entries = storage.parse_manifest(MANIFEST)
        assert [e.label for e in entries] == [3, 0, 7]
        assert entries[1].boxes == (Box(0, 0, 4, 4), Box(5, 5, 9, 9))
        assert entries[0].tensor_path == "images/train-00000.tensor"

    def test_round_trip(self, tmp_path):
        entries = storage.parse_manifest(MANIFEST)
        storage.write_manifest(tmp_path / "m.tsv", entries)
        assert (tmp_path / "m.tsv").read_text() == MANIFEST
        assert storage.read_manifest(tmp_path / "m.tsv") == entries

    @pytest.mark.parametrize(
        "bad_line",
        ["x\tp\t1\t1,2,3", "x\tp\t1\t5,5,2,9", "x\tp\tone\t1,2,3,4", "x\tp\t1"],
    )
    def test_malformed_line_number(self, bad_line):
        with pytest.raises(storage.ManifestParseError) as exc:
            storage.parse_manifest(MANIFEST + bad_line + "\n")
        assert exc.value.line_no == 4
        assert "line 4" in str(exc.value)


class TestReport:
    def test_round_trip(self, tmp_path):
        rows = [("top1_loc_err", 100 / 3, 2, 3), ("top1_cls_err", 0.0, 3, 3)]
        storage.write_report(tmp_path / "r.csv", rows)
        text = (tmp_path / "r.csv").read_text()
        assert text.splitlines()[0] == "metric,value,count_correct,count_total"
        assert storage.read_report(tmp_path / "r.csv") == rows

    def test_bad_header(self):
        with pytest.raises(storage.FormatError):
            storage.parse_report("a,b\n")


class TestHeatmap:
    def test_zero_map_gray(self, tmp_path):
        storage.render_heatmap(np.zeros((3, 4)), tmp_path / "z.pgm")
        img = storage.read_pnm(tmp_path / "z.pgm")
        assert img.shape == (3, 4) and not img.any()

    def test_value_one_is_255(self):
        data = storage.encode_heatmap(np.array([[1.0, 0.5]]))
        assert data[-2:] == bytes([255, 128])

    def test_two_by_two_byte_count(self):
        data = storage.encode_heatmap(np.array([[0.0, 1.0], [0.25, 0.75]]))
        header = b"P5\n2 2\n255\n"
        assert len(header) == 11
        assert data == header + bytes([0, 255, 64, 191])
        assert len(data) == 15

    def test_color_endpoints(self, tmp_path):
        storage.render_heatmap(np.array([[0.0, 0.5, 1.0]]), tmp_path / "c.ppm", style="color")
        img = storage.read_pnm(tmp_path / "c.ppm")
        assert img[0].tolist() == [[0, 0, 255], [0, 255, 0], [255, 0, 0]]

    def test_box_outline(self):
        m = np.zeros((6, 6))
        img = np.frombuffer(storage.encode_heatmap(m, box=Box(1, 1, 4, 5))[len(b"P5\n6 6\n255\n"):], np.uint8)
        img = img.reshape(6, 6)
        assert img[1, 1:4].tolist() == [255] * 3 and img[4, 1:4].tolist() == [255] * 3
        assert img[2, 2] == 0 and img[0].sum() == 0

    def test_unknown_style(self):
        with pytest.raises(ValueError):
            storage.encode_heatmap(np.zeros((2, 2)), style="sepia")
