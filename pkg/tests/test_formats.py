import numpy as np
import pytest

from cladelab.formats import (
    CheckpointError, SpecParseError, load_checkpoint, parse_graph_spec,
    read_mask, read_ppm, save_checkpoint, serialize_graph_spec, write_mask,
    write_ppm,
)
from cladelab.generator import build_generator, generate, graph_preset
from cladelab.norms import SegmentationMask


class TestMaskFiles:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        mask = SegmentationMask(rng.integers(0, 5, size=(8, 6)).astype(np.int32), 5)
        path = tmp_path / "m.mask"
        write_mask(path, mask)
        back = read_mask(path)
        assert back.num_classes == 5
        np.testing.assert_array_equal(back.labels, mask.labels)

    def test_header_format(self, tmp_path):
        path = tmp_path / "m.mask"
        write_mask(path, SegmentationMask(np.zeros((2, 3), np.int32), 4))
        assert path.read_text().splitlines()[0] == "2 3 4"

    def test_bad_row_count(self, tmp_path):
        path = tmp_path / "m.mask"
        path.write_text("2 2 2\n0 0\n")
        with pytest.raises(SpecParseError):
            read_mask(path)


class TestPpm:
    def test_round_trip_quantized(self, tmp_path):
        rng = np.random.default_rng(1)
        img = rng.uniform(-1, 1, size=(3, 5, 7)).astype(np.float32)
        path = tmp_path / "img.ppm"
        write_ppm(path, img)
        back = read_ppm(path)
        assert back.shape == (3, 5, 7)
        assert np.abs(back - img).max() <= 1.0 / 127.5

    def test_mapping_formula(self, tmp_path):
        img = np.zeros((3, 1, 2), np.float32)
        img[:, 0, 0] = -1.0
        img[:, 0, 1] = 1.0
        path = tmp_path / "img.ppm"
        write_ppm(path, img)
        raw = path.read_bytes()
        body = raw.split(b"\n", 3)[3]
        assert body[:3] == b"\x00\x00\x00" and body[3:6] == b"\xff\xff\xff"


class TestGraphSpecText:
    def test_serialize_parse_round_trip(self):
        spec = graph_preset("toy-64", norm_mode="spade")
        text = serialize_graph_spec(spec)
        back = parse_graph_spec(text)
        assert serialize_graph_spec(back) == text

    def test_preset_shortcut_with_override(self):
        spec = parse_graph_spec("preset=toy-64\nnorm_mode=bn\n")
        assert spec.norm_mode == "bn"
        assert spec.image_size == 64

    def test_empty_spec_rejected(self):
        with pytest.raises(SpecParseError):
            parse_graph_spec("")

    def test_error_carries_line_number(self):
        bad = "noise_dim=16\nnum_classes=2\nimage_size=64\n\nlayer=linear\ncout=64\nh=4\nw=4\n\nbogus line\n"
        with pytest.raises(SpecParseError, match="line 10"):
            parse_graph_spec(bad)

    def test_unknown_header_key_rejected(self):
        with pytest.raises(SpecParseError, match="unknown header key"):
            parse_graph_spec("preset=toy-64\nwidth=3\n")

    def test_comments_ignored(self):
        spec = parse_graph_spec("# a comment\npreset=toy-64  # inline\n")
        assert spec.image_size == 64


class TestCheckpoint:
    def test_round_trip_bitwise_outputs(self, tmp_path):
        model = build_generator(graph_preset("toy-64"), seed=11)
        mask = SegmentationMask(
            np.random.default_rng(2).integers(0, 5, size=(64, 64)).astype(np.int32), 5)
        noise = np.random.default_rng(3).standard_normal(16).astype(np.float32)
        # advance running stats so the checkpoint carries non-initial state
        model.forward(noise[None], mask.labels[None], training=True)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, model)
        loaded, seed = load_checkpoint(path)
        assert seed == 11
        a = generate(model, mask, noise)
        b = generate(loaded, mask, noise)
        np.testing.assert_array_equal(a.data, b.data)

    def test_magic_prefix(self, tmp_path):
        model = build_generator(graph_preset("toy-64"), seed=0)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, model)
        assert path.read_bytes().startswith(b"CLADELAB1")

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOTACKPT" + b"\x00" * 64)
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)

    def test_truncated_rejected(self, tmp_path):
        model = build_generator(graph_preset("toy-64"), seed=0)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, model)
        (tmp_path / "trunc.ckpt").write_bytes(path.read_bytes()[:20])
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "trunc.ckpt")

    def test_missing_file_is_checkpoint_error(self, tmp_path):
        with pytest.raises(CheckpointError, match="not found"):
            load_checkpoint(tmp_path / "nope.ckpt")

    def test_params_stored_little_endian_float32(self, tmp_path):
        model = build_generator(graph_preset("toy-64"), seed=5)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, model)
        import json, struct
        raw = path.read_bytes()
        (hlen,) = struct.unpack_from("<I", raw, 9)
        header = json.loads(raw[13:13 + hlen])
        entry = next(e for e in header["params"] if e["name"] == "entry.weight")
        count = int(np.prod(entry["shape"]))
        arr = np.frombuffer(raw, "<f4", count=count, offset=13 + hlen + entry["offset"])
        np.testing.assert_array_equal(arr.reshape(entry["shape"]),
                                      dict(model.parameters())["entry.weight"].data)
