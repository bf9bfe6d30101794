"""Seeded synthetic ultrasound phantoms with exact ground truth.

Each phantom reproduces the three salient appearances of bone in B-mode
ultrasound: multiplicative speckle over a dim tissue background, a bright
Gaussian-profile ridge along the bone surface, and an acoustic shadow
below it. The four anatomy classes differ only in surface geometry:

* knee (0): two adjacent convex arcs,
* femur (1): one deep convex arc,
* radius (2): shallow near-flat line with a step,
* tibia (3): straight line with constant slope.

Generation is driven by a counter-based RNG (Philox) keyed on the seed, so
samples never depend on evaluation order.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError
from .image import CLASS_NAMES, DEFAULT_SPACING_MM, Image2D, LabeledSample, from_array, save_pgm
from .metrics import dilate_contour


@dataclass(frozen=True)
class PhantomSpec:
    class_id: int
    size: int = 64
    seed: int = 0
    speckle_sigma: float = 0.25
    surface_brightness: float = 0.9
    shadow_attenuation: float = 0.15
    surface_blur_px: float = 1.0
    depth_range: tuple[float, float] = (0.45, 0.75)
    spacing_mm: tuple[float, float] = DEFAULT_SPACING_MM
    gt_dilation_mm: float = 1.0

    def __post_init__(self):
        if self.class_id not in (0, 1, 2, 3):
            raise ContractError(f"class_id {self.class_id} outside 0..3")
        if self.size < 32:
            raise ContractError(f"size must be >= 32, got {self.size}")
        lo, hi = self.depth_range
        if not (0.0 < lo < hi < 1.0):
            raise ContractError(f"depth_range must satisfy 0 < lo < hi < 1, got {self.depth_range}")
        if not 0.0 < self.shadow_attenuation < 1.0:
            raise ContractError(f"shadow_attenuation must lie in (0,1), got {self.shadow_attenuation}")


BACKGROUND_LEVEL = 0.3


def _surface_curve(spec: PhantomSpec, rng: np.random.Generator) -> np.ndarray:
    """Bone surface row per column, in (possibly fractional) pixels."""
    size = spec.size
    cols = np.arange(size, dtype=np.float64)
    lo, hi = spec.depth_range
    span = (hi - lo) * size
    base_lo = lo * size

    if spec.class_id == 0:  # knee: two convex arcs
        base = base_lo + rng.uniform(0.30, 0.42) * span
        amp = rng.uniform(0.22, 0.30) * span
        c1 = (0.30 + rng.uniform(-0.03, 0.03)) * (size - 1)
        c2 = (0.70 + rng.uniform(-0.03, 0.03)) * (size - 1)
        width = 0.11 * size
        curve = base - amp * (
            np.exp(-((cols - c1) ** 2) / (2 * width**2))
            + np.exp(-((cols - c2) ** 2) / (2 * width**2))
        )
    elif spec.class_id == 1:  # femur: single deep convex arc
        base = base_lo + rng.uniform(0.78, 0.92) * span
        amp = rng.uniform(0.30, 0.42) * span
        curve = base - amp * np.sin(np.pi * cols / (size - 1))
    elif spec.class_id == 2:  # radius: shallow near-flat with a step
        base = base_lo + rng.uniform(0.0, 0.08) * span
        step = rng.uniform(0.15, 0.22) * span
        step_col = rng.uniform(0.42, 0.58) * (size - 1)
        curve = base + step * 0.5 * (1.0 + np.tanh((cols - step_col) / 1.5))
    else:  # tibia: constant slope
        center = base_lo + rng.uniform(0.45, 0.62) * span
        slope = rng.uniform(0.20, 0.33) * span / size
        if rng.uniform() < 0.5:
            slope = -slope
        curve = center + slope * (cols - size / 2.0)

    if curve.min() < 1.0 or curve.max() > size - 2.0:
        raise ContractError(
            f"degenerate phantom geometry: curve spans [{curve.min():.1f}, {curve.max():.1f}] "
            f"in a {size}-row image")
    return curve


def generate_phantom(spec: PhantomSpec) -> LabeledSample:
    """Deterministically generate one phantom from its spec."""
    rng = np.random.default_rng(np.random.Philox(key=spec.seed))
    curve = _surface_curve(spec, rng)
    size = spec.size

    noise = rng.standard_normal((size, size))
    field = np.clip(BACKGROUND_LEVEL * (1.0 + spec.speckle_sigma * noise), 0.0, 1.0)

    rows = np.arange(size, dtype=np.float64)[:, None]
    below = rows > curve[None, :]
    field = np.where(below, field * spec.shadow_attenuation, field)

    ridge = spec.surface_brightness * np.exp(
        -((rows - curve[None, :]) ** 2) / (2.0 * spec.surface_blur_px**2))
    img = np.clip(field + ridge, 0.0, 1.0)

    contour = np.column_stack([np.round(curve), np.arange(size, dtype=np.float64)])
    gt_mask = dilate_contour(contour, spec.gt_dilation_mm, spec.spacing_mm, (size, size))
    return LabeledSample(
        image=from_array(img, spec.spacing_mm),
        gt_contour=contour,
        gt_mask=gt_mask,
        class_id=spec.class_id,
    )


def contour_shape_features(contour: np.ndarray, rows: int) -> tuple[float, int]:
    """(mean depth fraction, convex-arc count) of a surface contour.

    Arc count is the number of descending-to-ascending turns of the smoothed
    depth curve, which separates the four phantom geometries exactly.
    """
    y = np.asarray(contour, dtype=np.float64)[:, 0]
    kernel = np.ones(5) / 5.0
    smooth = np.convolve(y, kernel, mode="valid")
    d = np.diff(smooth)
    threshold = 0.05
    count = 0
    state = 0  # 1 after a significant descent
    for step in d:
        if step < -threshold:
            state = 1
        elif step > threshold:
            if state == 1:
                count += 1
            state = 0
    return float(np.mean(y) / rows), count


# ---------------------------------------------------------------------------
# dataset generation
# ---------------------------------------------------------------------------

def _splitmix64(x: int) -> int:
    """Stable 64-bit mixing function used to rank samples for the split."""
    x = (x + 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return (z ^ (z >> 31)) & 0xFFFFFFFFFFFFFFFF


@dataclass(frozen=True)
class ManifestEntry:
    filename: str
    class_id: int
    split: str  # "train" or "test"


def split_by_index_hash(count: int, seed: int, train_fraction: float = 0.8) -> list[str]:
    """Assign train/test by ranking a seeded hash of each index.

    Exactly ``floor(train_fraction * count)`` samples land in the train split.
    """
    hashes = [_splitmix64(_splitmix64(seed) ^ i) for i in range(count)]
    order = sorted(range(count), key=lambda i: (hashes[i], i))
    n_train = int(train_fraction * count)
    split = ["test"] * count
    for i in order[:n_train]:
        split[i] = "train"
    return split


def generate_dataset(count: int, size: int, seed: int, out_dir: str | Path,
                     spacing_mm: tuple[float, float] = DEFAULT_SPACING_MM,
                     ) -> list[ManifestEntry]:
    """Write a class-balanced phantom dataset with an 80/20 split manifest.

    Layout: ``images/NNNN.pgm``, ``masks/NNNN.pgm``, ``labels.csv``
    (``filename,class_id``), and ``manifest.csv`` (``filename,class_id,split``).
    """
    if count < 4:
        raise ContractError(f"dataset needs at least 4 samples, got {count}")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)

    split = split_by_index_hash(count, seed)
    manifest: list[ManifestEntry] = []
    for i in range(count):
        spec = PhantomSpec(class_id=i % 4, size=size, seed=seed + i, spacing_mm=spacing_mm)
        sample = generate_phantom(spec)
        filename = f"{i:04d}.pgm"
        save_pgm(sample.image, out_dir / "images" / filename)
        save_pgm(sample.gt_mask, out_dir / "masks" / filename)
        manifest.append(ManifestEntry(filename=filename, class_id=spec.class_id, split=split[i]))

    with open(out_dir / "labels.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["filename", "class_id"])
        for entry in manifest:
            writer.writerow([entry.filename, entry.class_id])
    with open(out_dir / "manifest.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["filename", "class_id", "split"])
        for entry in manifest:
            writer.writerow([entry.filename, entry.class_id, entry.split])
    return manifest


def class_name(class_id: int) -> str:
    return CLASS_NAMES[class_id]
