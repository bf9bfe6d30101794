"""Two-phase joint training of the classification U-net and pre-enhancing net.

Phase 1 trains the U-net alone on raw B-mode input with segmentation plus
classification cross entropy. Phase 2 prepends the pre-enhancing net: it
consumes the 4-channel feature stack, its output becomes the U-net input,
and an L2 term anchoring the enhanced image to the B-mode channel joins the
loss; gradients flow through both networks. Batches come from seeded
shuffled epochs, so a (dataset, config, seed) triple fully determines the
trained weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, ContractError, TrainingDivergedError
from ..image import LabeledSample
from . import ops
from .model import CUNet, Model, PENet, Tensor, build_cunet, build_pe


@dataclass(frozen=True)
class TrainConfig:
    """Optimization schedule and loss weights.

    Defaults are desk scale (64x64 phantoms); the full-scale schedule uses
    30000 total iterations with a 10000-iteration first phase and batch 16.
    """

    total_iters: int = 2000
    phase1_iters: int = 700
    batch_size: int = 8
    lr: float = 0.0002
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    lambda_cls: float = 1.0
    lambda_pe: float = 1.0
    seed: int = 0
    head_channel_fraction: float = 0.5
    upsample: str = "nearest"

    def __post_init__(self):
        if self.total_iters < 1:
            raise ConfigError(f"total_iters must be >= 1, got {self.total_iters}")
        if not 0 <= self.phase1_iters <= self.total_iters:
            raise ConfigError(
                f"phase1_iters {self.phase1_iters} outside [0, total_iters={self.total_iters}]")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.lambda_cls < 0 or self.lambda_pe < 0:
            raise ConfigError("loss weights must be >= 0")
        if self.seed < 0:
            raise ConfigError(f"seed must be >= 0, got {self.seed}")


@dataclass
class OptimState:
    """ADAM moment accumulators, keyed by parameter name."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: list[Tensor], state: OptimState, cfg: TrainConfig) -> None:
    """One bias-corrected ADAM update over parameters carrying gradients."""
    state.t += 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    for p in params:
        if p.grad is None:
            continue
        g = p.grad
        m = state.m.get(p.name)
        if m is None:
            m = np.zeros_like(p.value)
            state.m[p.name] = m
            state.v[p.name] = np.zeros_like(p.value)
        v = state.v[p.name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.value -= cfg.lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)


@dataclass(frozen=True)
class LogRow:
    iteration: int
    seg_loss: float
    cls_loss: float
    pe_loss: float
    total_loss: float


@dataclass
class TrainResult:
    pe: PENet
    cunet: CUNet
    log: list[LogRow]
    pe_hash_init: str
    pe_hash_after_phase1: str
    pe_hash_final: str
    cunet_hash_final: str


class _EpochSampler:
    """Deterministic shuffled-epoch batch stream (remainders dropped)."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        if n < batch_size:
            raise ContractError(f"dataset of {n} samples smaller than batch {batch_size}")
        self.n = n
        self.batch_size = batch_size
        self.rng = rng
        self._order = rng.permutation(n)
        self._pos = 0

    def next_batch(self) -> np.ndarray:
        if self._pos + self.batch_size > self.n:
            self._order = self.rng.permutation(self.n)
            self._pos = 0
        idx = self._order[self._pos : self._pos + self.batch_size]
        self._pos += self.batch_size
        return idx


def _check_finite(value: float, iteration: int, name: str) -> None:
    if not np.isfinite(value):
        raise TrainingDivergedError(
            f"non-finite {name} at iteration {iteration}", iteration=iteration)


def train_two_phase(samples: list[LabeledSample], cfg: TrainConfig,
                    features: np.ndarray | None = None,
                    progress=None) -> TrainResult:
    """Train both networks on the given samples.

    ``features`` must hold the per-sample 4-channel stacks (B-mode, LPT, LP,
    BSE) as an (n, 4, H, W) array whenever ``phase1_iters < total_iters``;
    the pure U-net configuration (``phase1_iters == total_iters``) needs none.
    ``progress`` is an optional callable invoked with each LogRow.
    """
    if not samples:
        raise ContractError("training needs a nonempty dataset")
    needs_phase2 = cfg.phase1_iters < cfg.total_iters
    if needs_phase2 and features is None:
        raise ContractError("phase 2 requires precomputed feature stacks")
    if features is not None and features.shape[0] != len(samples):
        raise ContractError("feature stack count does not match sample count")

    x_bmode = np.stack([s.image.data for s in samples]).astype(np.float32)[:, None]
    y_mask = np.stack([s.gt_mask.data for s in samples]).astype(np.float32)[:, None]
    labels = np.asarray([s.class_id for s in samples], dtype=np.int64)
    stacks = None if features is None else np.asarray(features, dtype=np.float32)

    seeds = np.random.SeedSequence(cfg.seed).spawn(3)
    cunet = build_cunet(seed=seeds[0].generate_state(1)[0])
    pe = build_pe(seed=seeds[1].generate_state(1)[0])
    sampler = _EpochSampler(len(samples), cfg.batch_size,
                            np.random.default_rng(seeds[2]))

    adam_cunet = OptimState()
    adam_pe = OptimState()
    pe_hash_init = pe.state_hash()
    pe_hash_after_phase1 = pe_hash_init

    log: list[LogRow] = []
    for it in range(cfg.total_iters):
        if it == cfg.phase1_iters:
            pe_hash_after_phase1 = pe.state_hash()
        idx = sampler.next_batch()
        bmode = x_bmode[idx]
        mask = y_mask[idx]
        cls_target = labels[idx]

        if it < cfg.phase1_iters:
            seg, cls_probs = cunet.forward(bmode, training=True)
            seg_loss, dseg = ops.seg_bce(seg, mask)
            cls_loss, dcls = ops.cls_ce(cls_probs, cls_target)
            pe_loss = 0.0
            cunet.backward(dseg, cfg.lambda_cls * dcls)
            adam_step(cunet.parameters(), adam_cunet, cfg)
        else:
            stack = stacks[idx]
            enhanced = pe.forward(stack, training=True)
            seg, cls_probs = cunet.forward(enhanced, training=True)
            seg_loss, dseg = ops.seg_bce(seg, mask)
            cls_loss, dcls = ops.cls_ce(cls_probs, cls_target)
            pe_loss, dpe_out = ops.pe_l2(enhanced, bmode)
            d_enhanced = cunet.backward(dseg, cfg.lambda_cls * dcls)
            pe.backward(d_enhanced + cfg.lambda_pe * dpe_out)
            adam_step(cunet.parameters(), adam_cunet, cfg)
            adam_step(pe.parameters(), adam_pe, cfg)

        total = seg_loss + cfg.lambda_cls * cls_loss + cfg.lambda_pe * pe_loss
        _check_finite(total, it, "total loss")
        row = LogRow(iteration=it, seg_loss=seg_loss, cls_loss=cls_loss,
                     pe_loss=pe_loss, total_loss=total)
        log.append(row)
        if progress is not None:
            progress(row)

    if cfg.phase1_iters == cfg.total_iters:
        pe_hash_after_phase1 = pe.state_hash()
    return TrainResult(
        pe=pe,
        cunet=cunet,
        log=log,
        pe_hash_init=pe_hash_init,
        pe_hash_after_phase1=pe_hash_after_phase1,
        pe_hash_final=pe.state_hash(),
        cunet_hash_final=cunet.state_hash(),
    )


def write_loss_log(log: list[LogRow], path) -> None:
    """Loss log CSV: iter,seg_loss,cls_loss,pe_loss,total."""
    lines = ["iter,seg_loss,cls_loss,pe_loss,total"]
    for row in log:
        lines.append(f"{row.iteration},{row.seg_loss:.8g},{row.cls_loss:.8g},"
                     f"{row.pe_loss:.8g},{row.total_loss:.8g}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


__all__ = [
    "TrainConfig",
    "OptimState",
    "adam_step",
    "LogRow",
    "TrainResult",
    "train_two_phase",
    "write_loss_log",
    "Model",
]
