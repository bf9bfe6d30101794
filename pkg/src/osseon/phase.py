"""Local-phase bone features.

The pipeline starts from a depth-masked, band-passed copy of the scan
(``us_db``), builds even/odd tensor responses from its Hessian, gradient and
Laplacian, reduces them to the scalar local phase tensor image (LPT), then
derives multi-scale monogenic components from the LPT to form local phase
energy (LPE), the local weighted mean phase angle (LwPA), and the combined
local phase image LP = LPT * LPE * LwPA (each factor rescaled to [0, 1]
before the product so their arbitrary native scales cannot dominate).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .image import Image2D, from_array, normalize01_array
from .spectral import (
    FilterConfig,
    depth_ramp,
    log_gabor_bandpass,
    riesz_components,
    spectral_derivatives,
)


@dataclass(frozen=True)
class TensorField:
    """Per-pixel symmetric 2x2 tensor stored as its three components.

    ``polarity`` carries the ridge polarity of the source image (positive on
    bright ridges), taken from the sign of its negated Laplacian; the scalar
    reduction uses it to keep bright-ridge responses positive.
    """

    rows: int
    cols: int
    spacing_mm: tuple[float, float]
    txx: np.ndarray = field(repr=False)
    txy: np.ndarray = field(repr=False)
    tyy: np.ndarray = field(repr=False)
    polarity: np.ndarray | None = field(default=None, repr=False)

    def frobenius(self) -> np.ndarray:
        """Per-pixel Frobenius norm (off-diagonal counted twice)."""
        return np.sqrt(self.txx**2 + 2.0 * self.txy**2 + self.tyy**2)

    def trace(self) -> np.ndarray:
        return self.txx + self.tyy


@dataclass(frozen=True)
class MonogenicStack:
    """Even and odd band responses per scale: M1 (even), M2/M3 (Riesz odd)."""

    num_scales: int
    m1: tuple[np.ndarray, ...]
    m2: tuple[np.ndarray, ...]
    m3: tuple[np.ndarray, ...]
    spacing_mm: tuple[float, float]

    def __post_init__(self):
        if not (len(self.m1) == len(self.m2) == len(self.m3) == self.num_scales):
            raise ContractError("monogenic stack scale counts disagree")
        shape = self.m1[0].shape
        for arrs in (self.m1, self.m2, self.m3):
            for a in arrs:
                if a.shape != shape:
                    raise ContractError("monogenic stack scales differ in shape")


@dataclass(frozen=True)
class PhaseImages:
    """Bundle of every phase-feature map derived from one scan."""

    us_db: Image2D
    t_even_scalar: Image2D
    t_odd_scalar: Image2D
    phi: Image2D
    lpt: Image2D
    lpe: Image2D
    lwpa: Image2D
    lp: Image2D


def compute_us_db(us: Image2D, cfg: FilterConfig) -> Image2D:
    """Depth-mask the scan and band-pass it at the coarsest scale.

    The depth ramp suppresses soft-tissue interfaces near the transducer;
    the Log-Gabor pass removes DC so a constant scan maps to zero.
    """
    ramp = depth_ramp(us.rows, us.cols, cfg.ramp_power, us.spacing_mm)
    masked = from_array(us.data * ramp.data, us.spacing_mm)
    even, _ = log_gabor_bandpass(masked, cfg, scale_index=0)
    return even


def compute_tensors(us_db: Image2D) -> tuple[TensorField, TensorField]:
    """Even and odd tensor responses of the band-passed scan.

    T_even = H H^T (the squared Hessian, positive semidefinite) and
    T_odd = -0.5 (g b^T + b g^T) with g the gradient and b the gradient of
    the Laplacian, all derivatives spectral.
    """
    d = spectral_derivatives(us_db)
    lap_img = from_array(d.laplacian, us_db.spacing_mm)
    d3 = spectral_derivatives(lap_img)

    # H H^T for symmetric H reduces to H^2.
    exx = d.gxx**2 + d.gxy**2
    exy = d.gxy * (d.gxx + d.gyy)
    eyy = d.gxy**2 + d.gyy**2

    oxx = -(d.gx * d3.gx)
    oxy = -0.5 * (d.gx * d3.gy + d3.gx * d.gy)
    oyy = -(d.gy * d3.gy)

    polarity = np.sign(-d.laplacian)
    t_even = TensorField(us_db.rows, us_db.cols, us_db.spacing_mm, exx, exy, eyy,
                         polarity=polarity)
    t_odd = TensorField(us_db.rows, us_db.cols, us_db.spacing_mm, oxx, oxy, oyy)
    return t_even, t_odd


def compute_lpt(t_even: TensorField, t_odd: TensorField
                ) -> tuple[Image2D, Image2D, Image2D, Image2D]:
    """Scalar local phase tensor image.

    Per pixel the even scalar is the signed Frobenius norm of T_even (sign
    from the ridge polarity so bright ridges score positive), the odd scalar
    is the Frobenius norm of T_odd, phi = atan2(odd, even), and
    lpt = hypot(even, odd) * cos(phi), which collapses to the even scalar
    identically; the stored lpt is rescaled to [0, 1].

    Returns (lpt, phi, even_scalar, odd_scalar).
    """
    spacing = t_even.spacing_mm
    polarity = t_even.polarity
    if polarity is None:
        polarity = np.ones((t_even.rows, t_even.cols))
    even = np.sign(t_even.trace() * polarity) * t_even.frobenius()
    odd = t_odd.frobenius()
    phi = np.arctan2(odd, even)  # atan2(0, 0) -> 0
    lpt_raw = np.hypot(even, odd) * np.cos(phi)
    lpt = normalize01_array(lpt_raw)
    return (
        from_array(lpt, spacing),
        from_array(phi, spacing),
        from_array(even, spacing),
        from_array(odd, spacing),
    )


def compute_monogenic(lpt: Image2D, cfg: FilterConfig) -> MonogenicStack:
    """Multi-scale monogenic decomposition of the LPT image."""
    m1s, m2s, m3s = [], [], []
    for s in range(cfg.num_scales):
        even, _ = log_gabor_bandpass(lpt, cfg, scale_index=s)
        m2, m3 = riesz_components(even)
        m1s.append(even.data)
        m2s.append(m2.data)
        m3s.append(m3.data)
    return MonogenicStack(
        num_scales=cfg.num_scales,
        m1=tuple(m1s),
        m2=tuple(m2s),
        m3=tuple(m3s),
        spacing_mm=lpt.spacing_mm,
    )


def compute_lpe(stack: MonogenicStack, mode: str = "corrected") -> Image2D:
    """Local phase energy: per scale, even magnitude minus odd magnitude.

    ``corrected`` (default) uses the quadrature norm sqrt(M2^2 + M3^2).
    ``literal`` keeps the printed sqrt(M2^2 + M2^3), clamping the radicand
    at zero so the map stays finite where M2 < -1.
    """
    total = np.zeros_like(stack.m1[0])
    for m1, m2, m3 in zip(stack.m1, stack.m2, stack.m3):
        if mode == "literal":
            odd_mag = np.sqrt(np.maximum(m2**2 + m2**3, 0.0))
        else:
            odd_mag = np.hypot(m2, m3)
        total += np.abs(m1) - odd_mag
    return from_array(total, stack.spacing_mm)


def compute_lwpa(stack: MonogenicStack, mode: str = "literal") -> Image2D:
    """Local weighted mean phase angle.

    ``literal`` (default) evaluates arctan(sum M1 / sqrt(sum M1^2 + sum M2^2))
    with per-scale squares inside the sums; ``corrected`` uses the quadrature
    form arctan(sum M1 / sqrt((sum M2)^2 + (sum M3)^2)). The denominator is
    guarded by 1e-12, and arctan keeps values inside (-pi/2, pi/2).
    """
    sum_m1 = np.zeros_like(stack.m1[0])
    sum_m1_sq = np.zeros_like(sum_m1)
    sum_m2 = np.zeros_like(sum_m1)
    sum_m2_sq = np.zeros_like(sum_m1)
    sum_m3 = np.zeros_like(sum_m1)
    for m1, m2, m3 in zip(stack.m1, stack.m2, stack.m3):
        sum_m1 += m1
        sum_m1_sq += m1**2
        sum_m2 += m2
        sum_m2_sq += m2**2
        sum_m3 += m3
    if mode == "corrected":
        denom = np.hypot(sum_m2, sum_m3)
    else:
        denom = np.sqrt(sum_m1_sq + sum_m2_sq)
    return from_array(np.arctan(sum_m1 / (denom + 1e-12)), stack.spacing_mm)


def compute_lp(lpt: Image2D, lpe: Image2D, lwpa: Image2D) -> Image2D:
    """Combined local phase image: product of the rescaled factor maps."""
    for other in (lpe, lwpa):
        if (other.rows, other.cols) != (lpt.rows, lpt.cols):
            raise ContractError("LP factors differ in dimensions")
    product = (
        normalize01_array(lpt.data)
        * normalize01_array(lpe.data)
        * normalize01_array(lwpa.data)
    )
    return from_array(normalize01_array(product), lpt.spacing_mm)


def compute_phase_images(us: Image2D, cfg: FilterConfig) -> PhaseImages:
    """Run the full phase-feature chain on one scan."""
    us_db = compute_us_db(us, cfg)
    t_even, t_odd = compute_tensors(us_db)
    lpt, phi, even_scalar, odd_scalar = compute_lpt(t_even, t_odd)
    stack = compute_monogenic(lpt, cfg)
    lpe = compute_lpe(stack, cfg.lpe_mode)
    lwpa = compute_lwpa(stack, cfg.lwpa_mode)
    lp = compute_lp(lpt, lpe, lwpa)
    return PhaseImages(
        us_db=us_db,
        t_even_scalar=even_scalar,
        t_odd_scalar=odd_scalar,
        phi=phi,
        lpt=lpt,
        lpe=lpe,
        lwpa=lwpa,
        lp=lp,
    )
