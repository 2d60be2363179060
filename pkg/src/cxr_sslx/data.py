"""Dataset ingestion, splitting, stratified subsampling, image decoding.

Dataset layout: one directory per class under the root, holding image
files directly or in a single nested ``images/`` directory. Class labels
come from directory names alone. All manifest operations are pure
functions of (records, seed) and never depend on record order: records are
canonically sorted by path first.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
from PIL import Image, UnidentifiedImageError

from cxr_sslx import seeding
from cxr_sslx.errors import DataError

logger = logging.getLogger(__name__)

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg")
TRAIN, TEST = "train", "test"


@dataclass(frozen=True)
class SampleRecord:
    path: str
    class_label: str
    split: str = TRAIN


@dataclass
class DatasetManifest:
    """Enumerated (path, class, split) records plus the seed and fraction
    that produced them."""

    records: tuple
    seed: Optional[int] = None
    fraction: float = 1.0
    skipped: tuple = field(default_factory=tuple)

    def __post_init__(self):
        self.records = tuple(self.records)
        paths = [r.path for r in self.records]
        if len(set(paths)) != len(paths):
            raise DataError("manifest contains duplicate paths")

    def __len__(self):
        return len(self.records)

    @property
    def classes(self) -> tuple:
        return tuple(sorted({r.class_label for r in self.records}))

    def by_split(self, split: str) -> tuple:
        return tuple(r for r in self.records if r.split == split)

    def class_counts(self, split: Optional[str] = None) -> dict:
        counts: dict = {}
        for r in self.records:
            if split is None or r.split == split:
                counts[r.class_label] = counts.get(r.class_label, 0) + 1
        return counts

    def unlabeled_paths(self, split: str = TRAIN) -> tuple:
        """Label-stripped view for the self-supervised stage: paths only."""
        return tuple(r.path for r in self.by_split(split))


def scan_dataset(root) -> DatasetManifest:
    """Enumerate every decodable image under ``root/<ClassName>/``.

    One level of nesting (``<ClassName>/images/``) is tolerated. Unreadable
    files go to the manifest's skip report; empty class directories and an
    empty root produce warnings, not errors. Records come back sorted
    lexicographically by path.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root is not a directory: {root}")
    records = []
    skipped = []
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        logger.warning("dataset root %s contains no class directories", root)
    for class_dir in class_dirs:
        label = class_dir.name
        candidates = sorted(p for p in class_dir.rglob("*")
                            if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS)
        found = 0
        for path in candidates:
            try:
                with Image.open(path) as img:
                    img.verify()
            except (UnidentifiedImageError, OSError, SyntaxError):
                skipped.append(str(path))
                continue
            records.append(SampleRecord(path=str(path), class_label=label))
            found += 1
        if found == 0:
            logger.warning("class directory %s contains no decodable images",
                           class_dir)
    if skipped:
        logger.warning("skipped %d unreadable files (first: %s)",
                       len(skipped), skipped[0])
    records.sort(key=lambda r: r.path)
    return DatasetManifest(records=tuple(records), skipped=tuple(skipped))


def _largest_remainder_counts(class_sizes: dict, ratio: float,
                              rng: np.random.Generator) -> dict:
    """Per-class take counts: floor(ratio * n) each, then distribute the
    shortfall against floor(ratio * total) one sample per class, largest
    fractional part first (seeded shuffle breaks ties)."""
    names = sorted(class_sizes)
    target_total = math.floor(ratio * sum(class_sizes.values()))
    counts = {c: math.floor(ratio * class_sizes[c]) for c in names}
    deficit = target_total - sum(counts.values())
    if deficit > 0:
        order = list(names)
        rng.shuffle(order)
        order.sort(key=lambda c: ratio * class_sizes[c] - counts[c], reverse=True)
        for c in order[:deficit]:
            counts[c] += 1
    return counts


def split(manifest: DatasetManifest, train_ratio: float,
          seed: int) -> DatasetManifest:
    """Stratified train/test assignment.

    Per class, a seeded shuffle of the (path-sorted) records decides
    membership; take counts follow the floor-plus-remainder rule so the
    train split totals floor(train_ratio * n). A function of
    (seed, path set) only.
    """
    if not 0.0 < train_ratio < 1.0:
        raise DataError(f"train_ratio must be in (0, 1), got {train_ratio}")
    by_class: dict = {}
    for r in sorted(manifest.records, key=lambda r: r.path):
        by_class.setdefault(r.class_label, []).append(r)
    for label, recs in sorted(by_class.items()):
        if len(recs) < 2:
            raise DataError(
                f"class {label!r} has {len(recs)} sample(s); need at least 2 "
                "to stratify")
    counts = _largest_remainder_counts(
        {c: len(rs) for c, rs in by_class.items()}, train_ratio,
        seeding.derive_rng(seed, seeding.SPLIT, 0))
    out = []
    for label in sorted(by_class):
        recs = by_class[label]
        rng = seeding.derive_rng(seed, seeding.SPLIT, 1, _label_tag(label))
        order = rng.permutation(len(recs))
        n_train = counts[label]
        train_idx = set(order[:n_train].tolist())
        for i, rec in enumerate(recs):
            out.append(replace(rec, split=TRAIN if i in train_idx else TEST))
    out.sort(key=lambda r: r.path)
    return DatasetManifest(records=tuple(out), seed=seed,
                           fraction=manifest.fraction, skipped=manifest.skipped)


def stratified_subsample(manifest: DatasetManifest, fraction: float,
                         seed: int) -> DatasetManifest:
    """Draw a label-balanced fraction of the train split without
    replacement; the test split passes through untouched.

    Per class floor(fraction * n) samples, with the shortfall against
    floor(fraction * n_train) distributed largest-fractional-part first,
    so the subsample total is stable across class compositions.
    """
    if not 0.0 < fraction <= 1.0:
        raise DataError(f"fraction must be in (0, 1], got {fraction}")
    if fraction == 1.0:
        return manifest
    train = manifest.by_split(TRAIN)
    by_class: dict = {}
    for r in sorted(train, key=lambda r: r.path):
        by_class.setdefault(r.class_label, []).append(r)
    counts = _largest_remainder_counts(
        {c: len(rs) for c, rs in by_class.items()}, fraction,
        seeding.derive_rng(seed, seeding.SUBSAMPLE, 0))
    for label in sorted(by_class):
        if counts[label] == 0:
            raise DataError(
                f"fraction {fraction} yields zero samples for class {label!r}")
    kept = []
    for label in sorted(by_class):
        recs = by_class[label]
        rng = seeding.derive_rng(seed, seeding.SUBSAMPLE, 1, _label_tag(label))
        order = rng.permutation(len(recs))
        kept.extend(recs[i] for i in sorted(order[:counts[label]].tolist()))
    out = list(kept) + list(manifest.by_split(TEST))
    out.sort(key=lambda r: r.path)
    return DatasetManifest(records=tuple(out), seed=manifest.seed,
                           fraction=fraction, skipped=manifest.skipped)


def _label_tag(label: str) -> int:
    # stable integer tag for a class name, independent of process hashing
    digest = 0
    for ch in label:
        digest = (digest * 131 + ord(ch)) % (2 ** 31)
    return digest


def load_image(record, channels_expected: int = 3) -> np.ndarray:
    """Decode to a (channels_expected, H, W) float32 array in [0, 1].

    Grayscale content is replicated across channels. Only 8-bit sources
    are accepted; standardization happens downstream at batch assembly.
    """
    path = record.path if isinstance(record, SampleRecord) else str(record)
    try:
        with Image.open(path) as img:
            if img.mode in ("I", "I;16", "I;16B", "I;16L", "F"):
                raise DataError(
                    f"unexpected bit depth (mode {img.mode!r}) in {path}; "
                    "only 8-bit images are supported")
            gray = img.convert("L")
            arr = np.asarray(gray, dtype=np.float32) / 255.0
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from exc
    return np.repeat(arr[None, :, :], channels_expected, axis=0)


def save_manifest(manifest: DatasetManifest, path) -> None:
    """Write the line-oriented text form: path<TAB>class<TAB>split."""
    lines = [f"{r.path}\t{r.class_label}\t{r.split}" for r in manifest.records]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def load_manifest(path) -> DatasetManifest:
    records = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise DataError(f"manifest line {lineno}: expected 3 tab-separated "
                            f"fields, got {len(parts)}")
        rec_path, label, split_name = parts
        if split_name not in (TRAIN, TEST):
            raise DataError(f"manifest line {lineno}: bad split {split_name!r}")
        records.append(SampleRecord(path=rec_path, class_label=label,
                                    split=split_name))
    records.sort(key=lambda r: r.path)
    return DatasetManifest(records=tuple(records))


def assert_disjoint_splits(train_paths: Iterable[str],
                           test_paths: Iterable[str]) -> None:
    """Guard against test-set leakage into any training stage."""
    overlap = set(train_paths) & set(test_paths)
    if overlap:
        raise DataError(
            f"{len(overlap)} sample(s) appear in both train and test splits "
            f"(first: {sorted(overlap)[0]})")
