import numpy as np
import pytest

from linvid.ppm import PPMError, load_frames, parse_ppm, write_ppm
from linvid.weights_io import load_weights, save_weights


def test_two_pixel_file():
    pix = parse_ppm(b"P6\n2 1\n255\n" + bytes.fromhex("FF000000FF00"))
    assert pix.shape == (1, 2, 3)
    assert pix[0, 0].tolist() == [255, 0, 0] and pix[0, 1].tolist() == [0, 255, 0]


def test_comments_and_whitespace():
    pix = parse_ppm(b"P6 # c\n1\t1 # x\n255 " + b"\x01\x02\x03")
    assert pix.tolist() == [[[1, 2, 3]]]


@pytest.mark.parametrize(
    "data,offset",
    [
        (b"P5\n1 1\n255\n\x00", 0),
        (b"P6\n1 1\n65535\n\x00\x00", 12),
        (b"P6\n2 2\n255\n\x00\x00\x00", 14),
        (b"P6\nx 1\n255\n", 3),
        (b"P6\n1 1\n255", 10),
    ],
)
def test_malformed_reports_offset(data, offset):
    with pytest.raises(PPMError) as ei:
        parse_ppm(data, "f.ppm")
    assert ei.value.offset == offset
    assert "f.ppm" in str(ei.value)


def test_load_frames_order(tmp_path):
    write_ppm(tmp_path / "b.ppm", np.full((2, 2, 3), 2, np.uint8))
    write_ppm(tmp_path / "a.ppm", np.full((2, 2, 3), 1, np.uint8))
    (tmp_path / "notes.txt").write_text("x")
    frames, names = load_frames(tmp_path)
    assert names == ["a.ppm", "b.ppm"]
    assert [f.timestamp_index for f in frames] == [0, 1]
    assert frames[1].pixels[0, 0, 0] == 2


def test_empty_dir(tmp_path):
    with pytest.raises(PPMError, match="no frames"):
        load_frames(tmp_path)


def test_mixed_sizes(tmp_path):
    write_ppm(tmp_path / "a.ppm", np.zeros((2, 2, 3), np.uint8))
    write_ppm(tmp_path / "b.ppm", np.zeros((3, 2, 3), np.uint8))
    with pytest.raises(PPMError) as ei:
        load_frames(tmp_path)
    assert "a.ppm" in str(ei.value) and "b.ppm" in str(ei.value)


def test_weights_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    t = {"w": rng.standard_normal((3, 4)), "b": rng.standard_normal(4).astype(np.float32),
         "idx": np.arange(5, dtype=np.int64)}
    save_weights(tmp_path / "m.bin", t, {"note": "x"})
    got, meta = load_weights(tmp_path / "m.bin")
    assert meta == {"note": "x"}
    for k in t:
        assert got[k].dtype == t[k].dtype
        np.testing.assert_array_equal(got[k], t[k])


def test_weights_layout_little_endian(tmp_path):
    save_weights(tmp_path / "m.bin", {"x": np.array([1.0], dtype=np.float32)})
    raw = (tmp_path / "m.bin").read_bytes()
    assert raw[:4] == b"LVW1"
    n = int.from_bytes(raw[4:12], "little")
    assert raw[12 + n:] == b"\x00\x00\x80\x3f"


def test_weights_truncated(tmp_path):
    save_weights(tmp_path / "m.bin", {"x": np.ones(10)})
    p = tmp_path / "m.bin"
    p.write_bytes(p.read_bytes()[:-8])
    with pytest.raises(ValueError):
        load_weights(p)


def test_torch_module_roundtrip(tmp_path):
    import torch

    from linvid.model import RWKVBlock
    from linvid.weights_io import load_module, save_module

    a = RWKVBlock(4, seed=1, dtype=torch.float64)
    save_module(tmp_path / "b.bin", a, {"d": 4})
    b = RWKVBlock(4, seed=2, dtype=torch.float64)
    assert load_module(tmp_path / "b.bin", b) == {"d": 4}
    for (ka, va), (kb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert ka == kb and torch.equal(va, vb)
