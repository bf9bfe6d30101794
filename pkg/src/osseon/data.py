"""Loading datasets stored in the on-disk layout.

A dataset directory holds ``images/NNNN.pgm``, ``masks/NNNN.pgm``, a
``labels.csv`` with header ``filename,class_id``, and (when produced by the
generator) a ``manifest.csv`` adding the train/test split. Ground-truth
contours are recovered from the masks as the per-column band centers.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError
from .image import Image2D, LabeledSample, load_pgm
from .metrics import EvalConfig, extract_surface


@dataclass(frozen=True)
class DatasetEntry:
    filename: str
    sample: LabeledSample
    split: str  # "train", "test", or "" when no manifest exists


def _read_labels(path: Path) -> dict[str, int]:
    if not path.exists():
        raise FormatError(f"missing labels file: {path}")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "filename" not in reader.fieldnames:
            raise FormatError(f"{path}: expected header filename,class_id")
        return {row["filename"]: int(row["class_id"]) for row in reader}


def _read_splits(path: Path) -> dict[str, str]:
    if not path.exists():
        return {}
    with open(path, newline="") as fh:
        return {row["filename"]: row["split"] for row in csv.DictReader(fh)}


def contour_from_mask(mask: Image2D) -> np.ndarray:
    """Per-column centers of the mask band, as (row, col) points."""
    surface = extract_surface(mask, EvalConfig(prob_threshold=0.5))
    return surface.points


def load_dataset(data_dir: str | Path,
                 spacing_mm: tuple[float, float] | None = None) -> list[DatasetEntry]:
    """Load every labeled sample of a dataset directory, sorted by filename."""
    data_dir = Path(data_dir)
    labels = _read_labels(data_dir / "labels.csv")
    splits = _read_splits(data_dir / "manifest.csv")
    entries: list[DatasetEntry] = []
    for filename in sorted(labels):
        image = load_pgm(data_dir / "images" / filename, spacing_mm)
        mask = load_pgm(data_dir / "masks" / filename, image.spacing_mm)
        sample = LabeledSample(
            image=image,
            gt_contour=contour_from_mask(mask),
            gt_mask=mask,
            class_id=labels[filename],
        )
        entries.append(DatasetEntry(filename=filename, sample=sample,
                                    split=splits.get(filename, "")))
    return entries


def split_entries(entries: list[DatasetEntry]) -> tuple[list[DatasetEntry], list[DatasetEntry]]:
    """(train, test) partition; entries without a split land in train."""
    train = [e for e in entries if e.split != "test"]
    test = [e for e in entries if e.split == "test"]
    return train, test
