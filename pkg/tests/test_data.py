import numpy as np
import pytest
from PIL import Image

from dcelanm.data import (
    MULTISCALE_SIDES,
    DataError,
    DatasetManifest,
    SegSample,
    draw_scale,
    load_png,
    multiscale_resize,
    pad_to_square_resize,
    restore_geometry,
    save_png,
    split_of,
    square_padding,
    synth_dataset,
    synth_sample,
    write_dataset,
)
from dcelanm.rng import Rng


def test_white_mask_loads_as_ones(tmp_path):
    Image.fromarray(np.full((5, 7), 255, np.uint8)).save(tmp_path / "m.png")
    m = load_png(tmp_path / "m.png", mask=True)
    assert m.shape == (1, 5, 7) and (m == 1).all()


def test_mask_binarized_at_127(tmp_path):
    Image.fromarray(np.array([[127, 128, 0, 255]], np.uint8)).save(tmp_path / "m.png")
    assert load_png(tmp_path / "m.png", mask=True).ravel().tolist() == [0, 1, 0, 1]


def test_binary_mask_roundtrip_bitwise(tmp_path):
    m = (np.random.default_rng(0).random((1, 9, 11)) > 0.5).astype(np.float32)
    save_png(m, tmp_path / "m.png")
    assert np.array_equal(load_png(tmp_path / "m.png", mask=True), m)
    assert set(np.unique(np.asarray(Image.open(tmp_path / "m.png")))) <= {0, 255}


def test_cvc_sized_image_shape(tmp_path):
    Image.fromarray(np.zeros((288, 384, 3), np.uint8)).save(tmp_path / "x.png")
    img = load_png(tmp_path / "x.png")
    assert img.shape == (3, 288, 384) and img.dtype == np.float32


def test_grayscale_image_replicated(tmp_path):
    Image.fromarray(np.full((4, 4), 51, np.uint8)).save(tmp_path / "g.png")
    img = load_png(tmp_path / "g.png")
    assert img.shape == (3, 4, 4) and np.allclose(img, 0.2)


def test_unreadable_and_unsupported(tmp_path):
    (tmp_path / "bad.png").write_bytes(b"not a png")
    with pytest.raises(DataError):
        load_png(tmp_path / "bad.png")
    Image.fromarray(np.zeros((4, 4), np.uint16)).save(tmp_path / "deep.png")
    with pytest.raises(DataError, match="unsupported"):
        load_png(tmp_path / "deep.png")


def test_square_padding_arithmetic():
    assert square_padding(288, 384) == (384, 48, 0)
    assert square_padding(256, 256) == (256, 0, 0)


def test_pad_to_square_resize_cvc():
    img = np.ones((3, 288, 384), np.float32)
    mask = np.ones((1, 288, 384), np.float32)
    out = pad_to_square_resize(SegSample(img, mask), 384)
    # at the padded side no resize happens: 48 zero rows above and below
    assert out.image.shape == (3, 384, 384)
    assert out.image[:, :48].max() == 0 and out.image[:, -48:].max() == 0
    assert out.image[:, 48:336].min() == 1.0
    small = pad_to_square_resize(SegSample(img, mask), 256)
    assert small.image.shape == (3, 256, 256) and small.mask.shape == (1, 256, 256)
    assert np.isin(small.mask, (0, 1)).all()
    # 48/384 of 256 = 32 rows of padding
    assert small.mask[:, :32].max() == 0 and small.mask[:, 32:224].min() == 1


def test_square_input_resize_only_and_idempotent():
    s = synth_sample(Rng(0), 64)
    once = pad_to_square_resize(s, 32)
    twice = pad_to_square_resize(once, 32)
    assert np.array_equal(once.image, twice.image) and np.array_equal(once.mask, twice.mask)
    same = pad_to_square_resize(s, 64)
    assert np.allclose(same.image, s.image)


def test_restore_geometry_inverts_shape():
    prob = np.random.default_rng(0).random((1, 256, 256)).astype(np.float32)
    assert restore_geometry(prob, 288, 384).shape == (1, 288, 384)
    assert restore_geometry(prob, 300, 200).shape == (1, 300, 200)


def test_multiscale_distribution():
    rng = Rng(0)
    draws = np.array([draw_scale(rng) for _ in range(10_000)])
    assert set(draws.tolist()) == set(MULTISCALE_SIDES)
    for side in MULTISCALE_SIDES:
        assert abs((draws == side).mean() - 0.2) <= 0.02
    assert (draws % 32 == 0).all()


def test_multiscale_deterministic_and_binary():
    s = synth_sample(Rng(1), 256)
    a = [multiscale_resize(s, Rng(5).spawn(i)).image.shape for i in range(5)]
    b = [multiscale_resize(s, Rng(5).spawn(i)).image.shape for i in range(5)]
    assert a == b
    out = multiscale_resize(s, side=192)
    assert out.image.shape == (3, 192, 192) and np.isin(out.mask, (0, 1)).all()
    with pytest.raises(ValueError):
        multiscale_resize(s, side=200)


def test_synth_foreground_bounds_and_mask_analytic():
    ds = synth_dataset(1000, 32, Rng(3))
    fracs = np.array([s.mask.mean() for s in ds])
    assert fracs.min() >= 0.02 and fracs.max() <= 0.40
    assert all(np.isin(s.mask, (0, 1)).all() and s.image.min() >= 0 and s.image.max() <= 1 for s in ds[:20])


def test_synth_deterministic():
    a = synth_dataset(3, 64, Rng(11))
    b = synth_dataset(3, 64, Rng(11))
    assert all(np.array_equal(x.image, y.image) and np.array_equal(x.mask, y.mask) for x, y in zip(a, b))
    c = synth_dataset(3, 64, Rng(12))
    assert not np.array_equal(a[0].image, c[0].image)


def test_segsample_invariants():
    with pytest.raises(DataError):
        SegSample(np.zeros((3, 4, 4)), np.zeros((1, 4, 5)))
    with pytest.raises(DataError):
        SegSample(np.zeros((3, 4, 4)), np.full((1, 4, 4), 0.5))


def test_manifest_roundtrip_and_scan(tmp_path):
    ds = synth_dataset(4, 32, Rng(0))
    path = write_dataset(ds, tmp_path)
    m = DatasetManifest.read(path)
    assert [e.id for e in m.entries] == [s.id for s in ds]
    loaded = m.load(32)
    assert np.array_equal(loaded[0].mask, ds[0].mask)
    assert np.allclose(loaded[0].image, ds[0].image, atol=0.5 / 255 + 1e-6)
    path.unlink()
    scanned = DatasetManifest.open(tmp_path)
    assert sorted(e.id for e in scanned.entries) == sorted(s.id for s in ds)


def test_manifest_errors(tmp_path):
    (tmp_path / "m.tsv").write_text("a\timg.png\tmask.png\na\timg.png\tmask.png\n")
    with pytest.raises(DataError, match="duplicate"):
        DatasetManifest.read(tmp_path / "m.tsv")
    (tmp_path / "m.tsv").write_text("a\timg.png\tmask.png\n")
    with pytest.raises(DataError):
        DatasetManifest.read(tmp_path / "m.tsv").load()
    with pytest.raises(DataError):
        DatasetManifest.scan(tmp_path / "nowhere")


def test_split_by_hash():
    ids = [f"img{i}" for i in range(2000)]
    splits = [split_of(i) for i in ids]
    assert splits == [split_of(i) for i in ids]
    frac = {s: splits.count(s) / len(ids) for s in ("train", "val", "test")}
    assert abs(frac["train"] - 0.8) < 0.03 and abs(frac["val"] - 0.1) < 0.03
