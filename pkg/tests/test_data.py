import logging
import math

import numpy as np
import pytest
from PIL import Image

from cxr_sslx.data import (DatasetManifest, SampleRecord, TEST, TRAIN,
                           assert_disjoint_splits, load_image, load_manifest,
                           save_manifest, scan_dataset, split,
                           stratified_subsample)
from cxr_sslx.errors import DataError

REAL_CLASS_SIZES = {"COVID": 3616, "LungOpacity": 6012, "Normal": 10192,
                    "ViralPneumonia": 1345}


def synthetic_manifest(class_sizes: dict) -> DatasetManifest:
    records = [SampleRecord(path=f"{name}/{name}_{i:05d}.png", class_label=name)
               for name in sorted(class_sizes)
               for i in range(class_sizes[name])]
    return DatasetManifest(records=tuple(records))


def split_counts_oracle(class_sizes: dict, ratio: float) -> tuple:
    """Independent floor-plus-remainder arithmetic: total train count and
    the per-class floor baselines."""
    target_total = math.floor(ratio * sum(class_sizes.values()))
    floors = {c: math.floor(ratio * n) for c, n in class_sizes.items()}
    return target_total, floors


class TestScanDataset:
    def test_enumerates_with_directory_labels(self, tmp_path):
        for name in ("left", "right"):
            for i in range(3):
                img = Image.fromarray(np.full((8, 8), 100, dtype=np.uint8))
                (tmp_path / name).mkdir(exist_ok=True)
                img.save(tmp_path / name / f"{i}.png")
        manifest = scan_dataset(tmp_path)
        assert len(manifest) == 6
        assert manifest.classes == ("left", "right")
        assert manifest.class_counts() == {"left": 3, "right": 3}

    def test_sorted_by_path(self, blob_root):
        manifest = scan_dataset(blob_root)
        paths = [r.path for r in manifest.records]
        assert paths == sorted(paths)

    def test_nested_images_directory_tolerated(self, tmp_path):
        nest = tmp_path / "classA" / "images"
        nest.mkdir(parents=True)
        Image.fromarray(np.zeros((8, 8), dtype=np.uint8)).save(nest / "x.png")
        manifest = scan_dataset(tmp_path)
        assert len(manifest) == 1
        assert manifest.records[0].class_label == "classA"

    def test_empty_root_warns(self, tmp_path, caplog):
        with caplog.at_level(logging.WARNING):
            manifest = scan_dataset(tmp_path)
        assert len(manifest) == 0
        assert "no class directories" in caplog.text

    def test_unreadable_file_goes_to_skip_report(self, tmp_path, caplog):
        d = tmp_path / "classA"
        d.mkdir()
        Image.fromarray(np.zeros((8, 8), dtype=np.uint8)).save(d / "good.png")
        (d / "bad.png").write_bytes(b"not actually a png")
        with caplog.at_level(logging.WARNING):
            manifest = scan_dataset(tmp_path)
        assert len(manifest) == 1
        assert len(manifest.skipped) == 1
        assert manifest.skipped[0].endswith("bad.png")

    def test_missing_root_rejected(self, tmp_path):
        with pytest.raises(DataError, match="root"):
            scan_dataset(tmp_path / "nowhere")


class TestSplit:
    def test_full_corpus_totals(self):
        manifest = synthetic_manifest(REAL_CLASS_SIZES)
        assert len(manifest) == 21165
        assert manifest.class_counts()["COVID"] == 3616
        result = split(manifest, 0.8, seed=0)
        train = result.by_split(TRAIN)
        test = result.by_split(TEST)
        assert len(train) == 16932
        assert len(test) == 4233
        # against the independent floor-plus-remainder oracle
        target_total, floors = split_counts_oracle(REAL_CLASS_SIZES, 0.8)
        assert len(train) == target_total
        per_class = result.class_counts(TRAIN)
        for name, floor in floors.items():
            assert per_class[name] in (floor, floor + 1)

    def test_small_single_class(self):
        manifest = synthetic_manifest({"only": 10})
        result = split(manifest, 0.8, seed=3)
        assert len(result.by_split(TRAIN)) == 8
        assert len(result.by_split(TEST)) == 2

    def test_deterministic_and_order_independent(self):
        manifest = synthetic_manifest({"a": 13, "b": 29})
        first = split(manifest, 0.7, seed=5)
        second = split(manifest, 0.7, seed=5)
        assert first.records == second.records
        # reshuffled record order must not change assignments
        shuffled = DatasetManifest(
            records=tuple(np.random.default_rng(0).permutation(
                np.array(manifest.records, dtype=object)).tolist()))
        third = split(shuffled, 0.7, seed=5)
        assert third.records == first.records
        different = split(manifest, 0.7, seed=6)
        assert different.records != first.records

    def test_partition_is_exact(self):
        manifest = synthetic_manifest({"a": 57, "b": 31, "c": 12})
        result = split(manifest, 0.66, seed=1)
        train_paths = {r.path for r in result.by_split(TRAIN)}
        test_paths = {r.path for r in result.by_split(TEST)}
        assert not train_paths & test_paths
        assert len(train_paths) + len(test_paths) == len(manifest)

    def test_stratification_invariant(self):
        sizes = {"a": 530, "b": 77, "c": 1204}
        result = split(synthetic_manifest(sizes), 0.8, seed=2)
        train_counts = result.class_counts(TRAIN)
        global_fraction = len(result.by_split(TRAIN)) / len(result)
        for name, n in sizes.items():
            class_fraction = train_counts[name] / n
            assert abs(class_fraction - global_fraction) <= 1.0 / n + 1e-12

    def test_tiny_class_rejected(self):
        manifest = synthetic_manifest({"a": 10, "b": 1})
        with pytest.raises(DataError, match="'b'"):
            split(manifest, 0.8, seed=0)

    def test_bad_ratio_rejected(self):
        manifest = synthetic_manifest({"a": 10})
        for ratio in (0.0, 1.0, -0.5):
            with pytest.raises(DataError, match="ratio"):
                split(manifest, ratio, seed=0)


class TestStratifiedSubsample:
    def _split_manifest(self):
        return split(synthetic_manifest(REAL_CLASS_SIZES), 0.8, seed=0)

    def test_one_and_ten_percent_totals(self):
        manifest = self._split_manifest()
        assert len(manifest.by_split(TRAIN)) == 16932
        one = stratified_subsample(manifest, 0.01, seed=4)
        assert len(one.by_split(TRAIN)) == 169
        ten = stratified_subsample(manifest, 0.10, seed=4)
        assert len(ten.by_split(TRAIN)) == 1693

    def test_exact_per_class_floor(self):
        manifest = split(synthetic_manifest({"a": 100, "b": 100}), 0.5, seed=0)
        # 50 train per class; 10% -> exactly 5 each
        sub = stratified_subsample(manifest, 0.10, seed=1)
        assert sub.class_counts(TRAIN) == {"a": 5, "b": 5}

    def test_test_split_untouched(self):
        manifest = self._split_manifest()
        sub = stratified_subsample(manifest, 0.01, seed=4)
        assert sub.by_split(TEST) == manifest.by_split(TEST)

    def test_deterministic(self):
        manifest = self._split_manifest()
        a = stratified_subsample(manifest, 0.05, seed=9)
        b = stratified_subsample(manifest, 0.05, seed=9)
        assert a.records == b.records
        c = stratified_subsample(manifest, 0.05, seed=10)
        assert c.records != a.records

    def test_draws_without_replacement(self):
        manifest = self._split_manifest()
        sub = stratified_subsample(manifest, 0.02, seed=3)
        paths = [r.path for r in sub.by_split(TRAIN)]
        assert len(paths) == len(set(paths))

    def test_zero_sample_class_rejected(self):
        manifest = split(synthetic_manifest({"small": 20, "big": 2000}),
                         0.8, seed=0)
        with pytest.raises(DataError, match="'small'"):
            stratified_subsample(manifest, 0.01, seed=0)

    def test_full_fraction_is_identity(self):
        manifest = self._split_manifest()
        assert stratified_subsample(manifest, 1.0, seed=0) is manifest

    def test_bad_fraction_rejected(self):
        manifest = self._split_manifest()
        with pytest.raises(DataError, match="fraction"):
            stratified_subsample(manifest, 0.0, seed=0)


class TestLoadImage:
    def _write_gray(self, path, value, size=(299, 299)):
        Image.fromarray(np.full(size, value, dtype=np.uint8)).save(path)
        return path

    def test_shape_and_range(self, tmp_path):
        path = self._write_gray(tmp_path / "x.png", 180)
        arr = load_image(path, channels_expected=3)
        assert arr.shape == (3, 299, 299)
        assert arr.dtype == np.float32
        assert 0.0 <= arr.min() and arr.max() <= 1.0
        assert np.allclose(arr, 180 / 255)
        # channels are replicas
        assert np.array_equal(arr[0], arr[1]) and np.array_equal(arr[0], arr[2])

    def test_all_black_and_all_white(self, tmp_path):
        black = load_image(self._write_gray(tmp_path / "b.png", 0, (8, 8)))
        white = load_image(self._write_gray(tmp_path / "w.png", 255, (8, 8)))
        assert np.all(black == 0.0)
        assert np.all(white == 1.0)

    def test_sixteen_bit_rejected(self, tmp_path):
        img = Image.fromarray(np.full((8, 8), 1000, dtype=np.uint16))
        path = tmp_path / "deep.png"
        img.save(path)
        with pytest.raises(DataError, match="bit depth"):
            load_image(path)

    def test_corrupt_file_rejected(self, tmp_path):
        path = tmp_path / "junk.png"
        path.write_bytes(b"garbage")
        with pytest.raises(DataError, match="decode"):
            load_image(path)

    def test_accepts_sample_record(self, tmp_path):
        path = self._write_gray(tmp_path / "r.png", 42, (8, 8))
        record = SampleRecord(path=str(path), class_label="c")
        arr = load_image(record, channels_expected=2)
        assert arr.shape == (2, 8, 8)


class TestManifestIO:
    def test_round_trip(self, tmp_path):
        manifest = split(synthetic_manifest({"a": 5, "b": 7}), 0.6, seed=1)
        path = tmp_path / "manifest.tsv"
        save_manifest(manifest, path)
        loaded = load_manifest(path)
        assert loaded.records == manifest.records

    def test_line_format(self, tmp_path):
        manifest = DatasetManifest(records=(
            SampleRecord(path="a/x.png", class_label="a", split=TRAIN),))
        path = tmp_path / "m.tsv"
        save_manifest(manifest, path)
        assert path.read_text() == "a/x.png\ta\ttrain\n"

    def test_malformed_line_rejected(self, tmp_path):
        path = tmp_path / "bad.tsv"
        path.write_text("only_two\tfields\n")
        with pytest.raises(DataError, match="3 tab-separated"):
            load_manifest(path)

    def test_duplicate_paths_rejected(self):
        with pytest.raises(DataError, match="duplicate"):
            DatasetManifest(records=(
                SampleRecord(path="same.png", class_label="a"),
                SampleRecord(path="same.png", class_label="b")))


def test_disjoint_split_guard():
    assert_disjoint_splits(["a", "b"], ["c"])
    with pytest.raises(DataError, match="both"):
        assert_disjoint_splits(["a", "b"], ["b", "c"])


def test_unlabeled_view_has_no_labels():
    manifest = split(synthetic_manifest({"a": 6, "b": 6}), 0.5, seed=0)
    paths = manifest.unlabeled_paths(TRAIN)
    assert all(isinstance(p, str) for p in paths)
    assert len(paths) == 6
