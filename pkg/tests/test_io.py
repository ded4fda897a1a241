import numpy as np
import pytest

from opseg import io
from opseg.preprocess import Volume
from opseg.segnet import DenseEncoderConfig, build_segnet


def make_volume(rng, n=3, masks=True):
    slices = [io.quantize_image(rng.uniform(0, 1, (9, 7))) for _ in range(n)]
    ms = [rng.integers(0, 10, (9, 7)).astype(np.uint8) for _ in range(n)] if masks else None
    return Volume("subject_7", "scanner_03", "T2", slices, ms)


def test_volume_roundtrip(tmp_path, rng):
    vol = make_volume(rng)
    io.save_volume(vol, tmp_path / "v")
    back = io.load_volume(tmp_path / "v")
    assert (back.subject_id, back.scanner_id, back.modality) == ("subject_7", "scanner_03", "T2")
    for a, b in zip(vol.slices, back.slices):
        np.testing.assert_array_equal(a, b)
    for a, b in zip(vol.masks, back.masks):
        np.testing.assert_array_equal(a, b)
    io.save_volume(back, tmp_path / "w")
    for name in ["meta.json", "slice_0000.pgm", "mask_0002.pgm"]:
        assert (tmp_path / "v" / name).read_bytes() == (tmp_path / "w" / name).read_bytes()


def test_volume_without_masks(tmp_path, rng):
    io.save_volume(make_volume(rng, masks=False), tmp_path / "v")
    assert io.load_volume(tmp_path / "v").masks is None


def test_meta_is_canonical(tmp_path, rng):
    io.save_volume(make_volume(rng, 1), tmp_path / "v")
    text = (tmp_path / "v" / "meta.json").read_text()
    assert text == (
        '{"format":"opseg/1","masks":["mask_0000.pgm"],"modality":"T2","scanner_id":"scanner_03",'
        '"slices":["slice_0000.pgm"],"subject_id":"subject_7"}\n'
    )


def test_sixteen_bit_full_scale_is_one(tmp_path):
    p = tmp_path / "a.pgm"
    p.write_bytes(io.encode_pgm(np.array([[65535, 0]], dtype=np.uint16), 65535))
    assert io.read_image(p).tolist() == [[1.0, 0.0]]
    assert p.read_bytes()[-4:] == b"\xff\xff\x00\x00"  # big-endian samples


def test_eight_bit_image_and_comments(tmp_path):
    p = tmp_path / "b.pgm"
    p.write_bytes(b"P5\n# made by hand\n2 1\n255\n\x00\xff")
    assert io.read_image(p).tolist() == [[0.0, 1.0]]


def test_mask_value_ten_rejected_with_offset(tmp_path):
    p = tmp_path / "m.pgm"
    p.write_bytes(b"P5\n3 1\n255\n\x01\x0a\x02")
    with pytest.raises(io.FormatError, match="byte 12"):
        io.read_mask(p)


@pytest.mark.parametrize(
    "data,needle",
    [
        (b"P6\n1 1\n255\n\x00", "magic"),
        (b"P5\n0 1\n255\n", "width"),
        (b"P5\n2 2\n255\n\x00", "truncated"),
        (b"P5\n2", "header"),
        (b"P5\n1 1\n70000\n\x00\x00", "maxval"),
        (b"P5\n1 1\n100\n\xc8", "exceeds maxval"),
    ],
)
def test_malformed_pgm(tmp_path, data, needle):
    p = tmp_path / "x.pgm"
    p.write_bytes(data)
    with pytest.raises(io.FormatError, match=needle):
        io.read_pgm(p)


def test_missing_files(tmp_path, rng):
    with pytest.raises(FileNotFoundError, match="meta.json"):
        io.load_volume(tmp_path)
    io.save_volume(make_volume(rng, 2), tmp_path / "v")
    (tmp_path / "v" / "slice_0001.pgm").unlink()
    with pytest.raises(FileNotFoundError, match="slice_0001"):
        io.load_volume(tmp_path / "v")
    with pytest.raises(FileNotFoundError, match="no volumes"):
        io.volume_dirs(_empty_dir(tmp_path))


def _empty_dir(tmp_path):
    d = tmp_path / "empty"
    d.mkdir()
    return d


def test_dataset_listing_sorted(tmp_path, rng):
    for name in ("b", "a", "c"):
        io.save_volume(make_volume(rng, 1), tmp_path / name)
    assert [p.name for p in io.volume_dirs(tmp_path)] == ["a", "b", "c"]
    assert io.volume_dirs(tmp_path / "a") == [tmp_path / "a"]


def test_atomic_write_leaves_no_temp(tmp_path):
    io.atomic_write_text(tmp_path / "f.txt", "hello")
    assert [p.name for p in tmp_path.iterdir()] == ["f.txt"]


def test_atomic_dir_removed_on_failure(tmp_path):
    with pytest.raises(RuntimeError):
        with io.atomic_dir(tmp_path / "out") as d:
            (d / "partial").write_text("x")
            raise RuntimeError("boom")
    assert list(tmp_path.iterdir()) == []


def test_checkpoint_roundtrip(tmp_path, rng):
    net = build_segnet(DenseEncoderConfig(2, (1, 1, 1), 3, 32), 3, 2, seed=4)
    for p in net.parameters():
        p.data[...] = rng.standard_normal(p.data.shape)
    io.save_checkpoint(tmp_path / "a.ckpt", net)
    back = io.load_checkpoint(tmp_path / "a.ckpt")
    assert back.config() == net.config()
    for a, b in zip(net.parameters(), back.parameters()):
        np.testing.assert_array_equal(a.data, b.data)
    io.save_checkpoint(tmp_path / "b.ckpt", back)
    data = (tmp_path / "a.ckpt").read_bytes()
    assert data == (tmp_path / "b.ckpt").read_bytes()
    assert data.startswith(b"OPSG1\n")
    n = sum(p.data.size for p in net.parameters())
    assert len(data) - len(data.split(b"\n", 3)[3]) + 8 * n == len(data)


def test_checkpoint_corruption(tmp_path):
    net = build_segnet(DenseEncoderConfig(2, (1, 1, 1), 3, 32), 3, 2)
    blob = io.encode_checkpoint(net.config(), net.parameters())
    with pytest.raises(io.FormatError, match="magic"):
        io.decode_checkpoint(b"XXXX" + blob)
    with pytest.raises(io.FormatError, match="parameter bytes"):
        io.decode_checkpoint(blob[:-8])
