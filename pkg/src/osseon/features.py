"""Feature-stack assembly and caching.

Training and inference consume a fixed 4-channel stack per scan, ordered
[B-mode, LPT, LP, BSE]. Stacks are cached on disk keyed by the SHA-256 of
the image bytes and both filter configurations, so a changed config can
never silently reuse stale features.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .image import Image2D, load_raw, save_raw
from .phase import PhaseImages, compute_phase_images
from .shadow import ShadowConfig, ShadowImages, compute_shadow_images
from .spectral import FilterConfig

#: channel order of the feature stack
STACK_CHANNELS = ("bmode", "lpt", "lp", "bse")


@dataclass(frozen=True)
class FeatureResult:
    """Phase and shadow maps of one scan plus the stacked training input."""

    phase: PhaseImages
    shadow: ShadowImages
    stack: np.ndarray  # (4, H, W) float32


def compute_feature_stack(us: Image2D, filter_cfg: FilterConfig,
                          shadow_cfg: ShadowConfig) -> FeatureResult:
    """Run the full enhancement chain and assemble the 4-channel stack."""
    phase = compute_phase_images(us, filter_cfg)
    shadow = compute_shadow_images(us, phase.lp, shadow_cfg)
    stack = np.stack([
        us.data,
        phase.lpt.data,
        phase.lp.data,
        shadow.bse.data,
    ]).astype(np.float32)
    return FeatureResult(phase=phase, shadow=shadow, stack=stack)


def _cache_key(us: Image2D, filter_cfg: FilterConfig, shadow_cfg: ShadowConfig) -> str:
    digest = hashlib.sha256()
    digest.update(us.data.tobytes())
    digest.update(repr(us.spacing_mm).encode())
    digest.update(repr(filter_cfg).encode())
    digest.update(repr(shadow_cfg).encode())
    return digest.hexdigest()


def cached_feature_stack(us: Image2D, filter_cfg: FilterConfig, shadow_cfg: ShadowConfig,
                         cache_dir: str | Path | None) -> np.ndarray:
    """Feature stack with an optional on-disk cache.

    Returns the (4, H, W) float32 stack, reading it from
    ``cache_dir/<key>.raw`` when present and writing it there after a miss.
    """
    if cache_dir is None:
        return compute_feature_stack(us, filter_cfg, shadow_cfg).stack
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    path = cache_dir / f"{_cache_key(us, filter_cfg, shadow_cfg)}.raw"
    if path.exists():
        return load_raw(path)
    stack = compute_feature_stack(us, filter_cfg, shadow_cfg).stack
    save_raw(stack, path)
    return stack
