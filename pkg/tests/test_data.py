"""Data pipeline tests: class map, loading, splitting, augmentation, normalization."""

import numpy as np
import numpy.testing as npt
import pytest

from lulcmap import data as D
from lulcmap.data import (
    EUROSAT_CLASSES, ClassDef, ClassMap, LabeledDataset, Preprocessor, SplitSpec,
    augment, dataset_statistics, hflip, load_dataset, normalize, random_crop,
    split, vflip,
)
from lulcmap.errors import DataError
from lulcmap.imgio import bilinear_resize, write_image

from synthdata import make_image, synthetic_dataset, write_dataset_tree


class TestClassMap:
    def test_exactly_ten_fixed_names(self):
        assert len(EUROSAT_CLASSES) == 10
        assert EUROSAT_CLASSES.names() == [
            "AnnualCrop", "Forest", "HerbaceousVegetation", "Highway", "Industrial",
            "Pasture", "PermanentCrop", "Residential", "River", "SeaLake",
        ]

    def test_ids_contiguous_and_colors_unique(self):
        assert [c.id for c in EUROSAT_CLASSES] == list(range(10))
        colors = [c.color for c in EUROSAT_CLASSES]
        assert len(set(colors)) == 10

    def test_duplicate_color_rejected(self):
        with pytest.raises(ValueError, match="unique"):
            ClassMap([ClassDef("A", 0, (1, 2, 3)), ClassDef("B", 1, (1, 2, 3))])

    def test_unknown_name_lookup(self):
        with pytest.raises(DataError, match="Cloud"):
            EUROSAT_CLASSES.by_name("Cloud")


class TestLoadDataset:
    def _write(self, root, class_name, count, size=64, start=0):
        rng = np.random.default_rng(start)
        d = root / class_name
        d.mkdir(parents=True, exist_ok=True)
        for i in range(start, start + count):
            img = rng.integers(0, 256, size=(size, size, 3), dtype=np.uint8)
            write_image(d / f"img_{i:03d}.png", img)

    def test_single_class(self, tmp_path):
        self._write(tmp_path, "Forest", 3)
        ds = load_dataset(tmp_path)
        assert len(ds) == 3
        assert all(ds.label(i) == EUROSAT_CLASSES.by_name("Forest").id for i in range(3))
        assert ds.image(0).shape == (64, 64, 3)

    def test_item_count_equals_file_count(self, tmp_path):
        self._write(tmp_path, "Forest", 3)
        self._write(tmp_path, "River", 2)
        self._write(tmp_path, "Highway", 4)
        assert len(load_dataset(tmp_path)) == 9

    def test_unknown_class_directory_named_in_error(self, tmp_path):
        self._write(tmp_path, "Forest", 1)
        (tmp_path / "Clouds").mkdir()
        write_image(tmp_path / "Clouds" / "x.png", np.zeros((64, 64, 3), dtype=np.uint8))
        with pytest.raises(DataError, match="Clouds"):
            load_dataset(tmp_path)

    def test_deterministic_lexicographic_order(self, tmp_path):
        # create files in non-sorted order; loading must sort by path
        d = tmp_path / "Forest"
        d.mkdir()
        for name in ("c.png", "a.png", "b.png"):
            write_image(d / name, np.zeros((64, 64, 3), dtype=np.uint8))
        ds1 = load_dataset(tmp_path)
        ds2 = load_dataset(tmp_path)
        paths1 = [str(src) for src, _ in ds1.items]
        assert paths1 == sorted(paths1)
        assert paths1 == [str(src) for src, _ in ds2.items]

    def test_wrong_dimensions_error_on_access(self, tmp_path):
        d = tmp_path / "Forest"
        d.mkdir()
        write_image(d / "small.png", np.zeros((32, 32, 3), dtype=np.uint8))
        ds = load_dataset(tmp_path)
        with pytest.raises(DataError, match="64x64"):
            ds.image(0)

    def test_undecodable_image_error_on_access(self, tmp_path):
        d = tmp_path / "Forest"
        d.mkdir()
        (d / "broken.png").write_bytes(b"this is not a png")
        ds = load_dataset(tmp_path)
        with pytest.raises(DataError, match="decode"):
            ds.image(0)

    def test_empty_root_rejected(self, tmp_path):
        with pytest.raises(DataError, match="no images"):
            load_dataset(tmp_path)


class TestSplit:
    def _index_dataset(self, n):
        # distinct array objects so the partition can be tracked by identity
        return LabeledDataset(items=[(np.zeros((64, 64, 3), dtype=np.uint8), i % 10) for i in range(n)])

    def test_eurosat_sizes(self):
        ds = self._index_dataset(27_000)
        train, test = split(ds, SplitSpec(train_fraction=0.8, seed=0))
        assert len(train) == 21_600
        assert len(test) == 5_400

    def test_small_case(self):
        train, test = split(self._index_dataset(10), SplitSpec(seed=1))
        assert (len(train), len(test)) == (8, 2)

    def test_disjoint_and_exhaustive(self):
        ds = self._index_dataset(100)
        train, test = split(ds, SplitSpec(seed=2))
        train_ids = {id(src) for src, _ in train.items}
        test_ids = {id(src) for src, _ in test.items}
        all_ids = {id(src) for src, _ in ds.items}
        assert train_ids | test_ids == all_ids
        assert not (train_ids & test_ids)

    def test_same_seed_identical_different_seeds_differ(self):
        ds = self._index_dataset(50)
        a1, _ = split(ds, SplitSpec(seed=3))
        a2, _ = split(ds, SplitSpec(seed=3))
        assert [id(s) for s, _ in a1.items] == [id(s) for s, _ in a2.items]
        partitions = set()
        for seed in range(5):
            tr, _ = split(ds, SplitSpec(seed=seed))
            partitions.add(tuple(sorted(id(s) for s, _ in tr.items)))
        assert len(partitions) > 1

    def test_stratified_per_class_sizes(self):
        ds = self._index_dataset(100)  # 10 per class
        train, test = split(ds, SplitSpec(seed=4, stratified=True))
        train_labels = train.labels()
        for class_id in range(10):
            assert (train_labels == class_id).sum() == 8

    def test_degenerate_split_rejected(self):
        ds = self._index_dataset(3)
        with pytest.raises(DataError, match="degenerate"):
            split(ds, SplitSpec(train_fraction=0.9, seed=0))

    def test_bad_fraction_rejected(self):
        with pytest.raises(DataError, match="train_fraction"):
            SplitSpec(train_fraction=1.2)


class _ScriptedRng:
    """Stand-in generator returning pre-scripted draws."""

    def __init__(self, integers=(), randoms=()):
        self._integers = list(integers)
        self._randoms = list(randoms)

    def integers(self, low, high, size=None):
        return np.array([self._integers.pop(0) for _ in range(size or 1)])

    def random(self, size=None):
        return self._randoms.pop(0)


class TestAugment:
    def test_identity_branch(self):
        img = make_image(3, np.random.default_rng(0), size=16)
        # crop offset (4,4) recovers the original; coins 0.9 skip both flips
        rng = _ScriptedRng(integers=[4, 4], randoms=[0.9, 0.9])
        npt.assert_array_equal(augment(img, rng), img)

    def test_double_flips_are_identities(self):
        img = make_image(5, np.random.default_rng(1), size=16)
        npt.assert_array_equal(hflip(hflip(img)), img)
        npt.assert_array_equal(vflip(vflip(img)), img)

    def test_vflip_coordinate_map(self):
        h, w = 16, 16
        for r, c in [(0, 0), (3, 7), (15, 15), (9, 2)]:
            img = np.zeros((h, w, 3), dtype=np.uint8)
            img[r, c] = 255
            out = vflip(img)
            marked = np.argwhere(out[:, :, 0] == 255)
            npt.assert_array_equal(marked, [[h - 1 - r, c]])

    def test_hflip_coordinate_map(self):
        img = np.zeros((8, 8, 3), dtype=np.uint8)
        img[2, 1] = 255
        out = hflip(img)
        assert out[2, 8 - 1 - 1, 0] == 255

    def test_crop_window_content(self):
        img = np.arange(16 * 16 * 3, dtype=np.uint8).reshape(16, 16, 3)
        out = random_crop(img, _ScriptedRng(integers=[0, 8]))
        padded = np.pad(img, ((4, 4), (4, 4), (0, 0)), mode="reflect")
        npt.assert_array_equal(out, padded[0:16, 8:24])

    def test_shape_and_label_preserved(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            img = make_image(int(rng.integers(0, 10)), rng, size=16)
            out = augment(img, rng)
            assert out.shape == img.shape and out.dtype == np.uint8


class TestNormalize:
    def test_identity_statistics(self):
        img = np.random.default_rng(3).integers(0, 256, size=(8, 8, 3), dtype=np.uint8)
        out = normalize(img, mean=(0.0, 0.0, 0.0), std=(1.0, 1.0, 1.0))
        npt.assert_allclose(out.values, (img / 255.0).transpose(2, 0, 1), atol=1e-7)
        assert out.shape == (3, 8, 8)

    def test_constant_image_at_mean_maps_to_zero(self):
        mean = (0.4, 0.2, 0.6)
        img = np.zeros((4, 4, 3))
        for ch, m in enumerate(mean):
            img[:, :, ch] = m * 255.0
        out = normalize(img, mean=mean, std=(0.5, 0.5, 0.5))
        npt.assert_allclose(out.values, 0.0, atol=1e-6)

    def test_round_trip_within_half(self):
        rng = np.random.default_rng(4)
        img = rng.integers(0, 256, size=(16, 16, 3), dtype=np.uint8)
        mean, std = (0.3, 0.5, 0.7), (0.2, 0.25, 0.3)
        out = normalize(img, mean, std).values
        recovered = (out * np.asarray(std)[:, None, None] + np.asarray(mean)[:, None, None]) * 255.0
        assert np.abs(recovered.transpose(1, 2, 0) - img).max() < 0.5

    def test_affine_property(self):
        rng = np.random.default_rng(5)
        a = rng.integers(0, 256, size=(8, 8, 3)).astype(np.float64)
        b = rng.integers(0, 256, size=(8, 8, 3)).astype(np.float64)
        mean, std = (0.1, 0.2, 0.3), (0.5, 0.4, 0.6)
        diff = normalize(a, mean, std).values - normalize(b, mean, std).values
        expected = ((a - b) / 255.0).transpose(2, 0, 1) / np.asarray(std)[:, None, None]
        npt.assert_allclose(diff, expected, atol=1e-4)

    def test_bad_statistics_rejected(self):
        with pytest.raises(ValueError):
            normalize(np.zeros((4, 4, 3)), mean=(0, 0, 0), std=(1, 0, 1))
        with pytest.raises(ValueError):
            normalize(np.zeros((4, 4, 3)), mean=(0, 0), std=(1, 1))


class TestStatistics:
    def test_hand_computed_case(self):
        # two constant images: channel means are the average of the two levels
        a = np.full((4, 4, 3), 51, dtype=np.uint8)   # 0.2
        b = np.full((4, 4, 3), 153, dtype=np.uint8)  # 0.6
        ds = LabeledDataset(items=[(a, 0), (b, 1)], image_size=4)
        stats = dataset_statistics(ds)
        npt.assert_allclose(stats["mean"], [0.4] * 3, atol=1e-9)
        npt.assert_allclose(stats["std"], [0.2] * 3, atol=1e-9)

    def test_empty_rejected(self):
        ds = synthetic_dataset(1, size=16).subset([])
        with pytest.raises(DataError):
            dataset_statistics(ds)

    def test_write_statistics_json(self, tmp_path):
        import json
        path = tmp_path / "stats.json"
        D.write_statistics({"mean": [0.1, 0.2, 0.3], "std": [0.4, 0.5, 0.6]}, path)
        doc = json.loads(path.read_text())
        assert doc == {"mean": [0.1, 0.2, 0.3], "std": [0.4, 0.5, 0.6]}
        with pytest.raises(ValueError):
            D.write_statistics({"mean": [0.1, 0.2, 0.3]}, path)


class TestPreprocessor:
    def test_resize_path(self):
        prep = Preprocessor(mean=(0.5, 0.5, 0.5), std=(0.5, 0.5, 0.5), resize_to=32)
        img = make_image(0, np.random.default_rng(6), size=16)
        out = prep(img)
        assert out.shape == (3, 32, 32)

    def test_constant_image_resize_exact(self):
        img = np.full((16, 16, 3), 100, dtype=np.uint8)
        out = bilinear_resize(img, (37, 11))
        npt.assert_allclose(out, 100.0, atol=1e-4)

    def test_resize_same_size_identity(self):
        img = np.random.default_rng(7).integers(0, 256, size=(16, 16, 3), dtype=np.uint8)
        npt.assert_array_equal(bilinear_resize(img, (16, 16)), img.astype(np.float32))

    def test_augment_requires_rng(self):
        prep = Preprocessor(mean=(0.5, 0.5, 0.5), std=(0.5, 0.5, 0.5))
        with pytest.raises(ValueError):
            prep(make_image(0, np.random.default_rng(8)), train=True, augment_enabled=True)


class TestWriteTree:
    def test_round_trip_through_disk(self, tmp_path):
        ds = synthetic_dataset(2, size=64, seed=9)
        write_dataset_tree(ds, tmp_path)
        loaded = load_dataset(tmp_path)
        assert len(loaded) == len(ds)
        assert sorted(loaded.labels().tolist()) == sorted(ds.labels().tolist())
