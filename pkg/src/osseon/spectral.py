"""Frequency-domain machinery: 2-D DFT, Log-Gabor band-pass, spectral
derivatives, Riesz transform, and the depth ramp used to mask the
near-transducer region.

Conventions
-----------
* Axis 0 is depth (rows, y), axis 1 is lateral position (cols, x).
* Frequencies come from ``numpy.fft.fftfreq`` in cycles/pixel; angular
  frequency is ``2*pi*f``.
* First-derivative and Riesz multipliers zero the Nyquist bins of even-sized
  axes. Those bins have no odd-symmetric counterpart, so keeping them would
  leave a real input with a complex response; zeroing them keeps outputs
  real to machine precision and makes the Riesz energy identity exact.
* Odd-sized images are extended to the next even size by symmetric edge
  replication before filtering and cropped back afterwards (curbs ringing
  from the periodic wrap). Even sizes pass through untouched.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError
from .image import Image2D, from_array


@dataclass(frozen=True)
class FilterConfig:
    """Band-pass and phase-feature parameters.

    The Log-Gabor transfer function at scale ``s`` is
    ``G(w) = exp(-ln^2(w/w0) / (2 ln^2 sigma_on_f))`` with
    ``w0 = 2*pi / (min_wavelength * scale_multiplier**s)``.
    """

    num_scales: int = 3
    min_wavelength: float = 24.0
    scale_multiplier: float = 1.8
    sigma_on_f: float = 0.55
    ramp_power: float = 1.0
    lpe_mode: str = "corrected"   # corrected: |M1| - sqrt(M2^2 + M3^2); literal: sqrt(M2^2 + M2^3)
    lwpa_mode: str = "literal"    # literal: denominator sums M1^2 + M2^2 per scale

    def __post_init__(self):
        if self.num_scales < 1:
            raise ConfigError(f"num_scales must be >= 1, got {self.num_scales}")
        if self.min_wavelength < 2.0:
            raise ConfigError(f"min_wavelength below Nyquist limit of 2 px: {self.min_wavelength}")
        if self.scale_multiplier <= 1.0:
            raise ConfigError(f"scale_multiplier must exceed 1, got {self.scale_multiplier}")
        if not 0.0 < self.sigma_on_f < 1.0:
            raise ConfigError(f"sigma_on_f must lie in (0,1), got {self.sigma_on_f}")
        if self.ramp_power < 0.0:
            raise ConfigError(f"ramp_power must be >= 0, got {self.ramp_power}")
        if self.lpe_mode not in ("corrected", "literal"):
            raise ConfigError(f"lpe_mode must be corrected|literal, got {self.lpe_mode!r}")
        if self.lwpa_mode not in ("literal", "corrected"):
            raise ConfigError(f"lwpa_mode must be literal|corrected, got {self.lwpa_mode!r}")

    def wavelength(self, scale_index: int) -> float:
        """Center wavelength in pixels of the given scale."""
        if scale_index >= self.num_scales:
            raise ContractError(f"scale index {scale_index} >= num_scales {self.num_scales}")
        return self.min_wavelength * self.scale_multiplier**scale_index


@dataclass(frozen=True)
class ComplexField:
    """Frequency-domain workspace: a complex spectrum plus image metadata."""

    rows: int
    cols: int
    spacing_mm: tuple[float, float]
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        vals = np.ascontiguousarray(np.asarray(self.values, dtype=np.complex128))
        if vals.shape != (self.rows, self.cols):
            raise ContractError(f"spectrum shape {vals.shape} != ({self.rows},{self.cols})")
        if not np.all(np.isfinite(vals)):
            raise ContractError("spectrum contains NaN or Inf")
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)

    @property
    def real(self) -> np.ndarray:
        return self.values.real

    @property
    def imag(self) -> np.ndarray:
        return self.values.imag


def dft2_forward(image: Image2D) -> ComplexField:
    """Forward 2-D DFT of the image."""
    return ComplexField(
        rows=image.rows,
        cols=image.cols,
        spacing_mm=image.spacing_mm,
        values=np.fft.fft2(image.data),
    )


def dft2_inverse(fieldv: ComplexField) -> Image2D:
    """Inverse 2-D DFT, keeping the real part."""
    return from_array(np.fft.ifft2(fieldv.values).real, fieldv.spacing_mm)


# ---------------------------------------------------------------------------
# Frequency grids and multipliers
# ---------------------------------------------------------------------------

def _freq_grids(rows: int, cols: int) -> tuple[np.ndarray, np.ndarray]:
    """Cycle/pixel frequency grids (fy over rows, fx over cols)."""
    fy = np.fft.fftfreq(rows)[:, None]
    fx = np.fft.fftfreq(cols)[None, :]
    return fy, fx


def _nyquist_mask(rows: int, cols: int) -> np.ndarray:
    """Boolean mask of bins lying on an even-size Nyquist row or column."""
    mask = np.zeros((rows, cols), dtype=bool)
    if rows % 2 == 0:
        mask[rows // 2, :] = True
    if cols % 2 == 0:
        mask[:, cols // 2] = True
    return mask


def log_gabor_transfer(rows: int, cols: int, wavelength: float, sigma_on_f: float) -> np.ndarray:
    """Radial Log-Gabor transfer function with DC and Nyquist bins zeroed."""
    fy, fx = _freq_grids(rows, cols)
    radius = 2.0 * np.pi * np.hypot(fy, fx)
    w0 = 2.0 * np.pi / wavelength
    with np.errstate(divide="ignore"):
        g = np.exp(-np.log(radius / w0) ** 2 / (2.0 * np.log(sigma_on_f) ** 2))
    g[0, 0] = 0.0
    g[_nyquist_mask(rows, cols)] = 0.0
    return g


def riesz_multipliers(rows: int, cols: int) -> tuple[np.ndarray, np.ndarray]:
    """Riesz-transform multipliers (-i*fx/|f|, -i*fy/|f|), DC and Nyquist zeroed.

    The sign follows the classical Riesz kernel, under which a horizontal
    plane wave cos(k x) maps to sin(k x) in the x component.
    """
    fy, fx = _freq_grids(rows, cols)
    mag = np.hypot(fy, fx)
    mag[0, 0] = 1.0
    hx = -1j * (fx / mag) * np.ones((rows, cols))
    hy = -1j * (fy / mag) * np.ones((rows, cols))
    hx[0, 0] = 0.0
    hy[0, 0] = 0.0
    nyq = _nyquist_mask(rows, cols)
    hx[nyq] = 0.0
    hy[nyq] = 0.0
    return hx, hy


# ---------------------------------------------------------------------------
# Padding for odd sizes
# ---------------------------------------------------------------------------

def _even_pad(data: np.ndarray) -> tuple[np.ndarray, tuple[int, int]]:
    """Symmetric-replicate to the next even size; returns (padded, original shape)."""
    rows, cols = data.shape
    pr = rows % 2
    pc = cols % 2
    if pr or pc:
        data = np.pad(data, ((0, pr), (0, pc)), mode="symmetric")
    return data, (rows, cols)


def _apply_multiplier(data: np.ndarray, multiplier_fn) -> np.ndarray:
    """Filter via frequency-domain multiplication, padding odd sizes to even."""
    padded, (rows, cols) = _even_pad(data)
    spectrum = np.fft.fft2(padded)
    out = np.fft.ifft2(spectrum * multiplier_fn(*padded.shape)).real
    return out[:rows, :cols]


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------

def depth_ramp(rows: int, cols: int, ramp_power: float,
               spacing_mm: tuple[float, float] = (0.3, 0.3)) -> Image2D:
    """Monotone depth mask ``(r/(rows-1))**ramp_power``.

    Row 0 maps to 0 and the last row to 1; ``ramp_power == 0`` disables
    masking entirely (0**0 is taken as 1).
    """
    if rows < 2:
        raise ContractError(f"depth_ramp needs at least 2 rows, got {rows}")
    ramp = (np.arange(rows, dtype=np.float64) / (rows - 1)) ** ramp_power
    return from_array(np.repeat(ramp[:, None], cols, axis=1), spacing_mm)


def log_gabor_bandpass(image: Image2D, cfg: FilterConfig, scale_index: int
                       ) -> tuple[Image2D, ComplexField]:
    """Band-pass the image with a radial Log-Gabor filter.

    Returns the even (real inverse-transform) part together with the filtered
    spectrum it came from. The filter has zero DC response, so a constant
    image maps to zero.
    """
    wavelength = cfg.wavelength(scale_index)
    if wavelength < 2.0:
        raise ConfigError(f"scale {scale_index} wavelength {wavelength:.3f} px below Nyquist")
    padded, (rows, cols) = _even_pad(image.data)
    spectrum = np.fft.fft2(padded) * log_gabor_transfer(*padded.shape, wavelength, cfg.sigma_on_f)
    even = np.fft.ifft2(spectrum).real[:rows, :cols]
    return (
        from_array(even, image.spacing_mm),
        ComplexField(rows=padded.shape[0], cols=padded.shape[1],
                     spacing_mm=image.spacing_mm, values=spectrum),
    )


@dataclass(frozen=True)
class SpectralDerivatives:
    """First and second spectral derivatives of an image.

    ``gx`` differentiates along columns (lateral), ``gy`` along rows (depth).
    ``laplacian`` equals ``gxx + gyy`` by construction.
    """

    gx: np.ndarray
    gy: np.ndarray
    gxx: np.ndarray
    gxy: np.ndarray
    gyy: np.ndarray
    laplacian: np.ndarray


def spectral_derivatives(image: Image2D) -> SpectralDerivatives:
    """Gradient, Hessian, and Laplacian via frequency-domain multipliers.

    First derivatives use ``i*2*pi*f`` with even-size Nyquist bins zeroed;
    second derivatives use the exact ``-(2*pi*f)^2`` multipliers.
    """
    padded, (rows, cols) = _even_pad(image.data)
    prows, pcols = padded.shape
    spectrum = np.fft.fft2(padded)
    fy, fx = _freq_grids(prows, pcols)
    dy_mult = 1j * 2.0 * np.pi * fy
    dx_mult = 1j * 2.0 * np.pi * fx
    if prows % 2 == 0:
        dy_mult[prows // 2, 0] = 0.0
    if pcols % 2 == 0:
        dx_mult[0, pcols // 2] = 0.0

    def inv(mult):
        return np.fft.ifft2(spectrum * mult).real[:rows, :cols]

    wx2 = -((2.0 * np.pi * fx) ** 2)
    wy2 = -((2.0 * np.pi * fy) ** 2)
    gx = inv(dx_mult)
    gy = inv(dy_mult)
    gxx = inv(wx2 * np.ones((prows, pcols)))
    gyy = inv(wy2 * np.ones((prows, pcols)))
    gxy = inv(dx_mult * dy_mult)
    laplacian = gxx + gyy
    return SpectralDerivatives(gx=gx, gy=gy, gxx=gxx, gxy=gxy, gyy=gyy, laplacian=laplacian)


def riesz_components(even_band: Image2D) -> tuple[Image2D, Image2D]:
    """Odd (Riesz) components of a band-passed image.

    Returns ``(M2, M3)`` where M2 responds to lateral structure (x) and M3
    to depth structure (y). For zero-DC input the multipliers are unit
    magnitude away from the zeroed bins, so energy is preserved.
    """
    def mx(r, c):
        return riesz_multipliers(r, c)[0]

    def my(r, c):
        return riesz_multipliers(r, c)[1]

    m2 = _apply_multiplier(even_band.data, mx)
    m3 = _apply_multiplier(even_band.data, my)
    return from_array(m2, even_band.spacing_mm), from_array(m3, even_band.spacing_mm)
