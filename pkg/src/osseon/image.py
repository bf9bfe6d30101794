"""Core image containers, normalization, and bit-exact file I/O.

All pipeline stages exchange :class:`Image2D` values: single-channel 2-D
scalar fields with physical pixel spacing. Two on-disk formats are supported:

* binary PGM (P5, 8-bit) for viewable images, and
* a raw little-endian float32 container (magic ``OSSR1``) for lossless
  intermediate maps and tensors.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, FormatError, PayloadLengthError, UnsupportedDepthError

RAW_MAGIC = b"OSSR1"

#: Fallback pixel spacing (mm per pixel) when neither a sidecar file nor a
#: CLI flag supplies one. 0.3 mm/px puts a 256-px image at ~7.7 cm depth.
DEFAULT_SPACING_MM = (0.3, 0.3)


@dataclass(frozen=True)
class Image2D:
    """Immutable single-channel image with physical pixel spacing.

    ``data`` is a read-only float64 array of shape ``(rows, cols)``.
    ``spacing_mm`` is (row-direction, column-direction) mm per pixel.
    """

    rows: int
    cols: int
    spacing_mm: tuple[float, float]
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.rows <= 0 or self.cols <= 0:
            raise ContractError(f"image dimensions must be positive, got {self.rows}x{self.cols}")
        if self.spacing_mm[0] <= 0 or self.spacing_mm[1] <= 0:
            raise ContractError(f"pixel spacing must be positive, got {self.spacing_mm}")
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.size != self.rows * self.cols:
            raise ContractError(
                f"data length {arr.size} does not match {self.rows}x{self.cols}"
            )
        if not np.all(np.isfinite(arr)):
            raise ContractError("image data contains NaN or Inf")
        arr = np.ascontiguousarray(arr.reshape(self.rows, self.cols))
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing_mm", (float(self.spacing_mm[0]), float(self.spacing_mm[1])))


def from_array(data: np.ndarray, spacing_mm: tuple[float, float] = DEFAULT_SPACING_MM) -> Image2D:
    """Wrap a 2-D array as an :class:`Image2D`."""
    data = np.asarray(data)
    if data.ndim != 2:
        raise ContractError(f"expected a 2-D array, got shape {data.shape}")
    return Image2D(rows=data.shape[0], cols=data.shape[1], spacing_mm=spacing_mm, data=data)


@dataclass(frozen=True)
class LabeledSample:
    """One annotated image: bone contour, dilated mask, and bone-type label.

    ``gt_contour`` holds (row, col) points; ``gt_mask`` is a binary image of
    the contour dilated to fixed physical width; ``class_id`` indexes the
    scanned anatomy (0 knee, 1 femur, 2 radius, 3 tibia).
    """

    image: Image2D
    gt_contour: np.ndarray
    gt_mask: Image2D
    class_id: int

    def __post_init__(self):
        if self.gt_mask.rows != self.image.rows or self.gt_mask.cols != self.image.cols:
            raise ContractError("gt_mask dimensions differ from image")
        vals = np.unique(self.gt_mask.data)
        if not np.all(np.isin(vals, (0.0, 1.0))):
            raise ContractError("gt_mask values must be exactly 0 or 1")
        if self.class_id not in (0, 1, 2, 3):
            raise ContractError(f"class_id {self.class_id} outside 0..3")
        pts = np.asarray(self.gt_contour, dtype=np.float64).reshape(-1, 2)
        object.__setattr__(self, "gt_contour", pts)


CLASS_NAMES = ("knee", "femur", "radius", "tibia")


# ---------------------------------------------------------------------------
# PGM (P5, 8-bit)
# ---------------------------------------------------------------------------

def _read_pgm_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    # Skips whitespace and '#' comment lines between header tokens.
    n = len(buf)
    while pos < n:
        c = buf[pos : pos + 1]
        if c.isspace():
            pos += 1
        elif c == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos : pos + 1].isspace():
        pos += 1
    if start == pos:
        raise FormatError("truncated PGM header")
    return buf[start:pos], pos


def load_pgm(path: str | Path, spacing_mm: tuple[float, float] | None = None) -> Image2D:
    """Load a binary 8-bit PGM, scaling pixel values to [0, 1].

    Spacing resolution order: explicit argument, then a sidecar file named
    ``<stem>.spacing`` next to the image (one or two floats, mm per pixel),
    then :data:`DEFAULT_SPACING_MM`.
    """
    path = Path(path)
    buf = path.read_bytes()
    if buf[:2] != b"P5":
        raise FormatError(f"{path}: not a binary PGM (missing P5 magic)")
    pos = 2
    try:
        w_tok, pos = _read_pgm_token(buf, pos)
        h_tok, pos = _read_pgm_token(buf, pos)
        maxval_tok, pos = _read_pgm_token(buf, pos)
        cols, rows, maxval = int(w_tok), int(h_tok), int(maxval_tok)
    except (ValueError, FormatError) as exc:
        raise FormatError(f"{path}: malformed PGM header ({exc})") from exc
    if maxval > 255:
        raise UnsupportedDepthError(f"{path}: 16-bit PGM (maxval {maxval}) is not supported")
    if maxval <= 0 or cols <= 0 or rows <= 0:
        raise FormatError(f"{path}: invalid PGM header values")
    pos += 1  # single whitespace byte after maxval
    payload = buf[pos : pos + rows * cols]
    if len(payload) != rows * cols:
        raise FormatError(f"{path}: expected {rows * cols} pixel bytes, got {len(payload)}")
    data = np.frombuffer(payload, dtype=np.uint8).astype(np.float64) / 255.0

    if spacing_mm is None:
        spacing_mm = _sidecar_spacing(path)
    return Image2D(rows=rows, cols=cols, spacing_mm=spacing_mm, data=data)


def _sidecar_spacing(path: Path) -> tuple[float, float]:
    sidecar = path.with_suffix(".spacing")
    if sidecar.exists():
        parts = sidecar.read_text().split()
        if len(parts) == 1:
            s = float(parts[0])
            return (s, s)
        if len(parts) >= 2:
            return (float(parts[0]), float(parts[1]))
    return DEFAULT_SPACING_MM


def save_pgm(image: Image2D, path: str | Path) -> None:
    """Write an image as binary 8-bit PGM.

    Values are clipped to [0, 1] first, then quantized with round-half-up:
    ``byte = floor(clip(v) * 255 + 0.5)``.
    """
    clipped = np.clip(image.data, 0.0, 1.0)
    quantized = np.floor(clipped * 255.0 + 0.5).astype(np.uint8)
    header = f"P5\n{image.cols} {image.rows}\n255\n".encode("ascii")
    Path(path).write_bytes(header + quantized.tobytes())


# ---------------------------------------------------------------------------
# Raw float container (magic OSSR1)
# ---------------------------------------------------------------------------

def save_raw(obj: Image2D | np.ndarray, path: str | Path) -> None:
    """Write an array (or image) as the raw float32 container.

    Layout: ``OSSR1`` magic, u32-LE rank, rank u32-LE dims, then the
    row-major float32-LE payload. Float32 data round-trips bit-exactly.
    """
    arr = obj.data if isinstance(obj, Image2D) else np.asarray(obj)
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    if arr.ndim < 1 or any(d <= 0 for d in arr.shape):
        raise ContractError(f"raw container requires positive dims, got shape {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(RAW_MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def load_raw(path: str | Path) -> np.ndarray:
    """Read a raw float32 container back as a float32 array."""
    path = Path(path)
    buf = path.read_bytes()
    if buf[:5] != RAW_MAGIC:
        raise FormatError(f"{path}: missing {RAW_MAGIC!r} magic")
    if len(buf) < 9:
        raise PayloadLengthError(f"{path}: truncated header")
    (rank,) = struct.unpack_from("<I", buf, 5)
    if rank == 0 or rank > 8:
        raise FormatError(f"{path}: implausible rank {rank}")
    if len(buf) < 9 + 4 * rank:
        raise PayloadLengthError(f"{path}: truncated dims")
    dims = struct.unpack_from(f"<{rank}I", buf, 9)
    if any(d == 0 for d in dims):
        raise FormatError(f"{path}: zero dimension in {dims}")
    count = int(np.prod(dims))
    payload = buf[9 + 4 * rank :]
    if len(payload) != 4 * count:
        raise PayloadLengthError(
            f"{path}: payload holds {len(payload)} bytes, header implies {4 * count}"
        )
    return np.frombuffer(payload, dtype="<f4").reshape(dims).copy()


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------

def normalize01_array(data: np.ndarray) -> np.ndarray:
    """Affine map of [min, max] to [0, 1]; constant input maps to all zeros."""
    data = np.asarray(data, dtype=np.float64)
    lo = data.min()
    hi = data.max()
    if hi == lo:
        return np.zeros_like(data)
    return (data - lo) / (hi - lo)


def normalize01(image: Image2D) -> Image2D:
    """Return the image affinely rescaled so min maps to 0 and max to 1.

    A constant image maps to all zeros (it carries no structure and a 0/0
    rescale would otherwise be undefined).
    """
    return Image2D(
        rows=image.rows,
        cols=image.cols,
        spacing_mm=image.spacing_mm,
        data=normalize01_array(image.data),
    )
