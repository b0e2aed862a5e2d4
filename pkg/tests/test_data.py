import numpy as np
import pytest
from PIL import Image

from vitdae.data import (DEFAULT_RECIPES, Dataset, TextureRecipe, ToySpec, from_uint8, generate_toy, ingest,
                         to_uint8, write_dataset)


def _png(path, value, size=(6, 6)):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.full((*size, 3), value, dtype=np.uint8)).save(path)


def test_empty_directory_has_no_classes(tmp_path):
    with pytest.raises(ValueError, match="no classes found"):
        ingest(tmp_path, 4)


def test_two_classes_in_path_order(tmp_path):
    for cls in ("b_second", "a_first"):
        for i in (2, 0, 1):
            _png(tmp_path / cls / f"img{i}.png", 10 * i)
    ds = ingest(tmp_path, 4)
    assert len(ds) == 6
    assert ds.labels.tolist() == [0, 0, 0, 1, 1, 1]
    assert ds.class_names == ["a_first", "b_second"]
    assert ds.ids[:3] == ["a_first/img0", "a_first/img1", "a_first/img2"]
    assert ds.images.shape == (6, 3, 4, 4)


def test_pixel_affine_map():
    px = from_uint8(np.array([255, 0, 128], dtype=np.uint8))
    assert px[0] == 1.0 and px[1] == -1.0
    assert px[2] == pytest.approx(128 / 127.5 - 1, abs=1e-7)
    assert np.array_equal(to_uint8(from_uint8(np.arange(256, dtype=np.uint8))), np.arange(256))


def test_center_crop_and_resize(tmp_path):
    arr = np.zeros((4, 8, 3), dtype=np.uint8)
    arr[:, 2:6] = 255
    path = tmp_path / "c" / "x.png"
    path.parent.mkdir()
    Image.fromarray(arr).save(path)
    ds = ingest(tmp_path, 4)
    assert np.all(ds.images == 1.0)


def test_empty_class_and_unreadable_files(tmp_path):
    _png(tmp_path / "good" / "a.png", 5)
    (tmp_path / "good" / "broken.png").write_bytes(b"not a png")
    ds = ingest(tmp_path, 4)
    assert len(ds) == 1 and ds.skipped == 1
    (tmp_path / "empty").mkdir()
    with pytest.raises(ValueError, match="empty class"):
        ingest(tmp_path, 4)


def test_dataset_invariants():
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 3, 4, 4)), [0, 0], ["a", "a"], ["x"])
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 3, 4, 4)), [0, 1], ["a", "b"], ["x"])


def test_toy_deterministic_and_seed_sensitive():
    a = generate_toy(ToySpec(count=5, resolution=8, seed=7))
    b = generate_toy(ToySpec(count=5, resolution=8, seed=7))
    c = generate_toy(ToySpec(count=5, resolution=8, seed=8))
    assert a.images.tobytes() == b.images.tobytes() and a.ids == b.ids
    assert not np.array_equal(a.images, c.images)
    assert a.class_counts().tolist() == [5, 5, 5, 5]
    assert a.images.min() >= -1 and a.images.max() <= 1


def test_toy_spec_errors():
    with pytest.raises(ValueError):
        ToySpec(count=0)
    with pytest.raises(ValueError):
        ToySpec(class_count=5)
    dup = (DEFAULT_RECIPES[0], TextureRecipe("copy", *[getattr(DEFAULT_RECIPES[0], f) for f in
                                                       ("kind", "base", "accent", "blob_density",
                                                        "stripe_freq", "noise_amp")]))
    with pytest.raises(ValueError, match="degenerate recipe collision"):
        ToySpec(class_count=2, recipes=dup)


def test_png_round_trip_is_exact(tmp_path):
    ds = generate_toy(ToySpec(count=3, resolution=8, seed=1))
    write_dataset(ds, tmp_path)
    back = ingest(tmp_path, 8)
    assert back.class_names == sorted(ds.class_names)
    by_id = {i: (img, ds.class_names[lab]) for img, lab, i in ds.items()}
    for img, lab, ident in back.items():
        ref_img, ref_name = by_id[ident]
        assert back.class_names[lab] == ref_name
        assert np.array_equal(img, ref_img)
