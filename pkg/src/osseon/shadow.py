"""Bone-shadow enhancement.

A random-walk confidence map models how far the ultrasound signal
plausibly penetrates: pixels form an 8-connected graph whose edge weights
decay with the intensity difference of depth-attenuated neighbors, the top
row is clamped to confidence 1 (transducer) and the bottom row to 0, and
interior confidences solve the resulting graph-Laplacian system. Combined
with a local visibility map, the confidence map yields the shadow-enhanced
image ``BSE = (CM - rho) / max(USA, eps)^delta + rho``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.ndimage as ndi
import scipy.sparse as sp

from .errors import ConfigError, ContractError, NumericError
from .image import Image2D, from_array, normalize01_array


@dataclass(frozen=True)
class ShadowConfig:
    """Parameters of the confidence-map and shadow-enhancement stage.

    ``alpha`` controls multiplicative depth attenuation, ``beta`` the
    sensitivity of edge weights to intensity differences, ``gamma`` an extra
    penalty on horizontal and diagonal edges (propagation is beam-directed),
    ``lambda_blend`` the share of the local-phase image in the guidance
    blend, and ``delta``/``rho``/``epsilon`` the attenuation exponent,
    echogenicity constant, and division guard of the enhancement formula.
    """

    alpha: float = 2.0
    beta: float = 90.0
    gamma: float = 0.05
    lambda_blend: float = 0.5
    delta: float = 1.0
    rho: float = 0.1
    epsilon: float = 1e-6
    usa_window: int = 11
    cg_tol: float = 1e-8
    cg_max_iter: int = 0  # 0 means 10 * rows * cols, resolved per image

    def __post_init__(self):
        if self.alpha < 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        if self.beta <= 0:
            raise ConfigError(f"beta must be > 0, got {self.beta}")
        if self.gamma < 0:
            raise ConfigError(f"gamma must be >= 0, got {self.gamma}")
        if not 0.0 <= self.lambda_blend <= 1.0:
            raise ConfigError(f"lambda_blend must lie in [0,1], got {self.lambda_blend}")
        if self.delta < 0:
            raise ConfigError(f"delta must be >= 0, got {self.delta}")
        if not 0.0 < self.rho < 1.0:
            raise ConfigError(f"rho must lie in (0,1), got {self.rho}")
        if self.epsilon <= 0:
            raise ConfigError(f"epsilon must be > 0, got {self.epsilon}")
        if self.usa_window < 1 or self.usa_window % 2 == 0:
            raise ConfigError(f"usa_window must be odd and positive, got {self.usa_window}")
        if self.cg_tol <= 0:
            raise ConfigError(f"cg_tol must be > 0, got {self.cg_tol}")
        if self.cg_max_iter < 0:
            raise ConfigError(f"cg_max_iter must be >= 0, got {self.cg_max_iter}")

    def max_iter_for(self, rows: int, cols: int) -> int:
        return self.cg_max_iter if self.cg_max_iter > 0 else 10 * rows * cols


@dataclass(frozen=True)
class ShadowImages:
    """Confidence map, visibility map, and shadow-enhanced image."""

    cm_lp: Image2D
    us_a: Image2D
    bse: Image2D       # rescaled to [0,1] for storage
    bse_raw: Image2D   # un-normalized enhancement values


def blend_guidance(us: Image2D, lp: Image2D, lambda_blend: float) -> Image2D:
    """Convex blend ``(1 - lambda) * us + lambda * lp`` of scan and LP image."""
    if (us.rows, us.cols) != (lp.rows, lp.cols):
        raise ContractError("guidance blend inputs differ in dimensions")
    blended = (1.0 - lambda_blend) * us.data + lambda_blend * lp.data
    return from_array(blended, us.spacing_mm)


# ---------------------------------------------------------------------------
# Random-walk confidence map
# ---------------------------------------------------------------------------

def _edge_weights(ghat: np.ndarray, beta: float, gamma: float):
    """Edges of the 8-connected pixel graph with their weights.

    Returns (i, j, w) index/weight arrays. Vertical edges carry
    ``exp(-beta |dg|)``; horizontal and diagonal edges are additionally
    scaled by ``exp(-gamma)``.
    """
    rows, cols = ghat.shape
    idx = np.arange(rows * cols).reshape(rows, cols)
    lateral_penalty = np.exp(-gamma)

    pairs = []
    # vertical
    pairs.append((idx[:-1, :], idx[1:, :], 1.0))
    # horizontal
    pairs.append((idx[:, :-1], idx[:, 1:], lateral_penalty))
    # diagonals
    pairs.append((idx[:-1, :-1], idx[1:, 1:], lateral_penalty))
    pairs.append((idx[:-1, 1:], idx[1:, :-1], lateral_penalty))

    flat = ghat.ravel()
    ii, jj, ww = [], [], []
    for a, b, scale in pairs:
        a = a.ravel()
        b = b.ravel()
        w = np.exp(-beta * np.abs(flat[a] - flat[b])) * scale
        ii.append(a)
        jj.append(b)
        ww.append(w)
    return np.concatenate(ii), np.concatenate(jj), np.concatenate(ww)


def _jacobi_pcg(a: sp.csr_matrix, b: np.ndarray, x0: np.ndarray,
                tol: float, max_iter: int) -> np.ndarray:
    """Conjugate gradient with diagonal preconditioning.

    Stops when the residual infinity norm drops to ``tol`` so the Laplacian
    equation holds at every interior node; raises on non-convergence with
    the final residual attached.
    """
    diag = a.diagonal()
    inv_diag = 1.0 / diag
    x = x0.copy()
    r = b - a @ x
    if np.max(np.abs(r)) <= tol:
        return x
    z = inv_diag * r
    p = z.copy()
    rz = float(r @ z)
    for _ in range(max_iter):
        ap = a @ p
        alpha = rz / float(p @ ap)
        x += alpha * p
        r -= alpha * ap
        if np.max(np.abs(r)) <= tol:
            return x
        z = inv_diag * r
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise NumericError(
        f"confidence-map CG did not reach tol {tol:g} within {max_iter} iterations "
        f"(residual {np.max(np.abs(r)):g})",
        residual=float(np.max(np.abs(r))),
    )


def confidence_map(g: Image2D, cfg: ShadowConfig) -> Image2D:
    """Random-walk confidence of the signal reaching each pixel.

    Top row is the source (confidence 1), bottom row the sink (0); interior
    values solve the weighted graph-Laplacian system. The solve warm-starts
    from the linear depth profile, which is already exact for uniform
    images, and the result is clamped to [0, 1].
    """
    rows, cols = g.rows, g.cols
    if rows < 2:
        raise ContractError("confidence map needs at least 2 rows")
    depth = (np.arange(rows, dtype=np.float64) / (rows - 1))[:, None]
    ghat = g.data * np.exp(-cfg.alpha * depth)

    ii, jj, ww = _edge_weights(ghat, cfg.beta, cfg.gamma)
    n = rows * cols
    w = sp.coo_matrix((np.concatenate([ww, ww]),
                       (np.concatenate([ii, jj]), np.concatenate([jj, ii]))),
                      shape=(n, n)).tocsr()
    degree = np.asarray(w.sum(axis=1)).ravel()
    lap = sp.diags(degree) - w

    values = np.zeros(n)
    values[:cols] = 1.0  # top row source
    interior = np.arange(cols, n - cols)
    if interior.size:
        boundary = np.concatenate([np.arange(cols), np.arange(n - cols, n)])
        lap_csr = lap.tocsr()
        a = lap_csr[interior][:, interior]
        b = -lap_csr[interior][:, boundary] @ values[boundary]
        x0 = 1.0 - (interior // cols) / (rows - 1)
        x = _jacobi_pcg(a.tocsr(), b, x0, cfg.cg_tol, cfg.max_iter_for(rows, cols))
        values[interior] = x
    out = np.clip(values.reshape(rows, cols), 0.0, 1.0)
    out[0, :] = 1.0
    out[-1, :] = 0.0
    return from_array(out, g.spacing_mm)


# ---------------------------------------------------------------------------
# Local visibility and shadow enhancement
# ---------------------------------------------------------------------------

#: Slack factor on the echogenicity constraint of the visibility map.
USA_MEAN_SLACK = 2.0


def compute_usa(g: Image2D, cfg: ShadowConfig) -> Image2D:
    """Local visibility map.

    Within each ``usa_window`` neighborhood the map takes the window maximum
    while the window mean stays below ``rho * USA_MEAN_SLACK`` (visibility is
    maximized where the surround is dark), otherwise the window mean.
    Borders replicate edge pixels; the result is floored at ``epsilon``.
    """
    size = cfg.usa_window
    local_max = ndi.maximum_filter(g.data, size=size, mode="nearest")
    local_mean = ndi.uniform_filter(g.data, size=size, mode="nearest")
    usa = np.where(local_mean < cfg.rho * USA_MEAN_SLACK, local_max, local_mean)
    return from_array(np.maximum(usa, cfg.epsilon), g.spacing_mm)


def compute_bse(cm_lp: Image2D, us_a: Image2D, cfg: ShadowConfig) -> tuple[Image2D, Image2D]:
    """Shadow-enhanced image; returns (raw values, [0,1]-rescaled copy)."""
    raw = (cm_lp.data - cfg.rho) / np.maximum(us_a.data, cfg.epsilon) ** cfg.delta + cfg.rho
    return (
        from_array(raw, cm_lp.spacing_mm),
        from_array(normalize01_array(raw), cm_lp.spacing_mm),
    )


def compute_shadow_images(us: Image2D, lp: Image2D, cfg: ShadowConfig) -> ShadowImages:
    """Run the full shadow-enhancement chain on one scan and its LP image."""
    guidance = blend_guidance(us, lp, cfg.lambda_blend)
    cm = confidence_map(guidance, cfg)
    usa = compute_usa(guidance, cfg)
    bse_raw, bse = compute_bse(cm, usa, cfg)
    return ShadowImages(cm_lp=cm, us_a=usa, bse=bse, bse_raw=bse_raw)
