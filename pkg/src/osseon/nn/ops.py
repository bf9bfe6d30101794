"""Forward/backward primitives of the tensor engine.

Every op comes as a ``*_forward`` / ``*_backward`` pair over plain numpy
arrays in NCHW layout. Convolutions run as im2col + GEMM; every backward
has an analytic form and is validated against central finite differences
in float64 by the test suite. Ops preserve the input dtype so the same
code path serves float32 training and float64 gradient checks.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from ..errors import ContractError

#: probability clamp used by the cross-entropy losses
PROB_CLAMP = 1e-7


# ---------------------------------------------------------------------------
# im2col convolution core
# ---------------------------------------------------------------------------

def _im2col(x: np.ndarray, kh: int, kw: int, stride: int,
            pads: tuple[int, int, int, int]) -> tuple[np.ndarray, tuple[int, int]]:
    """Patch matrix of shape (N*OH*OW, C*kh*kw); returns (cols, (oh, ow))."""
    pt, pb, pl, pr = pads
    if pt or pb or pl or pr:
        x = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    n, c, hp, wp = x.shape
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    s0, s1, s2, s3 = x.strides
    view = np.lib.stride_tricks.as_strided(
        x,
        shape=(n, c, oh, ow, kh, kw),
        strides=(s0, s1, s2 * stride, s3 * stride, s2, s3),
        writeable=False,
    )
    cols = np.ascontiguousarray(view.transpose(0, 2, 3, 1, 4, 5))
    return cols.reshape(n * oh * ow, c * kh * kw), (oh, ow)


def _conv_core(x: np.ndarray, w: np.ndarray, b: np.ndarray | None, stride: int,
               pads: tuple[int, int, int, int]) -> np.ndarray:
    co, ci, kh, kw = w.shape
    if x.shape[1] != ci:
        raise ContractError(f"conv expects {ci} input channels, got {x.shape[1]}")
    cols, (oh, ow) = _im2col(x, kh, kw, stride, pads)
    y = cols @ w.reshape(co, -1).T
    if b is not None:
        y += b
    return np.ascontiguousarray(y.reshape(x.shape[0], oh, ow, co).transpose(0, 3, 1, 2))


def _conv_param_grads(x: np.ndarray, dy: np.ndarray, w_shape: tuple, stride: int,
                      pads: tuple[int, int, int, int]) -> tuple[np.ndarray, np.ndarray]:
    co, ci, kh, kw = w_shape
    cols, _ = _im2col(x, kh, kw, stride, pads)
    dy_flat = dy.transpose(0, 2, 3, 1).reshape(-1, co)
    dw = (dy_flat.T @ cols).reshape(co, ci, kh, kw)
    db = dy.sum(axis=(0, 2, 3))
    return dw, db


def _flip(w: np.ndarray) -> np.ndarray:
    """Channel-transposed, spatially flipped kernel for input gradients."""
    return np.ascontiguousarray(w.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])


# ---------------------------------------------------------------------------
# conv3x3 (stride 1, zero-pad 1) and conv1x1
# ---------------------------------------------------------------------------

def conv3x3_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Same-size 3x3 convolution with zero padding 1."""
    return _conv_core(x, w, b, 1, (1, 1, 1, 1))


def conv3x3_backward(dy: np.ndarray, x: np.ndarray, w: np.ndarray):
    dw, db = _conv_param_grads(x, dy, w.shape, 1, (1, 1, 1, 1))
    dx = _conv_core(dy, _flip(w), None, 1, (1, 1, 1, 1))
    return dx, dw, db


def conv1x1_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    return _conv_core(x, w, b, 1, (0, 0, 0, 0))


def conv1x1_backward(dy: np.ndarray, x: np.ndarray, w: np.ndarray):
    dw, db = _conv_param_grads(x, dy, w.shape, 1, (0, 0, 0, 0))
    dx = _conv_core(dy, _flip(w), None, 1, (0, 0, 0, 0))
    return dx, dw, db


# ---------------------------------------------------------------------------
# down_conv: 2x2 kernel, stride 2
# ---------------------------------------------------------------------------

def down_conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Strided 2x2 convolution halving the spatial dims (parameterized pooling)."""
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ContractError(f"down_conv needs even spatial dims, got {x.shape[2:]}")
    return _conv_core(x, w, b, 2, (0, 0, 0, 0))


def down_conv_backward(dy: np.ndarray, x: np.ndarray, w: np.ndarray):
    co, ci, _, _ = w.shape
    dw, db = _conv_param_grads(x, dy, w.shape, 2, (0, 0, 0, 0))
    n, _, oh, ow = dy.shape
    # stride-2 2x2 windows do not overlap, so col2im is a pure reshape
    dcols = dy.transpose(0, 2, 3, 1).reshape(-1, co) @ w.reshape(co, -1)
    dx = (
        dcols.reshape(n, oh, ow, ci, 2, 2)
        .transpose(0, 3, 1, 4, 2, 5)
        .reshape(n, ci, 2 * oh, 2 * ow)
    )
    return np.ascontiguousarray(dx), dw, db


# ---------------------------------------------------------------------------
# up_conv: nearest-neighbor 2x upsample then 2x2 convolution
# ---------------------------------------------------------------------------

def upsample2x_forward(x: np.ndarray) -> np.ndarray:
    return x.repeat(2, axis=2).repeat(2, axis=3)


def upsample2x_backward(dy: np.ndarray) -> np.ndarray:
    n, c, h2, w2 = dy.shape
    return dy.reshape(n, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5))


def up_conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray
                    ) -> tuple[np.ndarray, np.ndarray]:
    """Upsample 2x (nearest) then 2x2 conv, zero-padded bottom/right to keep
    the doubled size. Halves the channel count. Returns (y, upsampled)."""
    if x.shape[1] % 2:
        raise ContractError(f"up_conv needs even in_channels, got {x.shape[1]}")
    xu = upsample2x_forward(x)
    y = _conv_core(xu, w, b, 1, (0, 1, 0, 1))
    return y, xu


def up_conv_backward(dy: np.ndarray, xu: np.ndarray, w: np.ndarray):
    dw, db = _conv_param_grads(xu, dy, w.shape, 1, (0, 1, 0, 1))
    # full correlation gives the gradient of the padded upsampled input;
    # the last row/col belonged to the zero pad and is dropped
    dxp = _conv_core(dy, _flip(w), None, 1, (1, 1, 1, 1))
    dxu = dxp[:, :, : xu.shape[2], : xu.shape[3]]
    dx = upsample2x_backward(dxu)
    return dx, dw, db


def up_conv_transposed_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Transposed 2x2 stride-2 convolution (alternative upsampling path)."""
    if x.shape[1] % 2:
        raise ContractError(f"up_conv needs even in_channels, got {x.shape[1]}")
    co, ci, _, _ = w.shape
    n, _, h, wd = x.shape
    prod = x.transpose(0, 2, 3, 1).reshape(-1, ci) @ w.reshape(co, ci, 4).transpose(1, 0, 2).reshape(ci, co * 4)
    y = (
        prod.reshape(n, h, wd, co, 2, 2)
        .transpose(0, 3, 1, 4, 2, 5)
        .reshape(n, co, 2 * h, 2 * wd)
    )
    return np.ascontiguousarray(y + b[None, :, None, None])


def up_conv_transposed_backward(dy: np.ndarray, x: np.ndarray, w: np.ndarray):
    co, ci, _, _ = w.shape
    db = dy.sum(axis=(0, 2, 3))
    dx = _conv_core(dy, np.ascontiguousarray(w.transpose(1, 0, 2, 3)), None, 2, (0, 0, 0, 0))
    cols, _ = _im2col(dy, 2, 2, 2, (0, 0, 0, 0))
    x_flat = x.transpose(0, 2, 3, 1).reshape(-1, ci)
    dw = (cols.T @ x_flat).reshape(co, 2, 2, ci).transpose(0, 3, 1, 2)
    return dx, np.ascontiguousarray(dw), db


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

BN_EPS = 1e-5
BN_MOMENTUM = 0.9


def batch_norm_forward(x, gamma, beta, running_mean, running_var, training: bool):
    """Per-channel normalization over (N, H, W).

    Training mode normalizes with batch statistics and returns running stats
    decayed by ``BN_MOMENTUM``; eval mode normalizes with the running stats
    and returns them unchanged.
    """
    if training:
        if x.shape[0] * x.shape[2] * x.shape[3] < 2:
            raise ContractError("batch norm training mode needs >= 2 values per channel")
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        new_rm = BN_MOMENTUM * running_mean + (1.0 - BN_MOMENTUM) * mean
        new_rv = BN_MOMENTUM * running_var + (1.0 - BN_MOMENTUM) * var
    else:
        mean, var = running_mean, running_var
        new_rm, new_rv = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    y = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    return y, (xhat, inv_std, gamma, training), new_rm, new_rv


def batch_norm_backward(dy, cache):
    xhat, inv_std, gamma, training = cache
    dgamma = (dy * xhat).sum(axis=(0, 2, 3))
    dbeta = dy.sum(axis=(0, 2, 3))
    if training:
        m = dy.shape[0] * dy.shape[2] * dy.shape[3]
        dxhat = dy * gamma[None, :, None, None]
        dx = (inv_std[None, :, None, None] / m) * (
            m * dxhat
            - dxhat.sum(axis=(0, 2, 3), keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
        )
    else:
        dx = dy * (gamma * inv_std)[None, :, None, None]
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def relu_forward(x):
    return np.maximum(x, 0), x > 0


def relu_backward(dy, mask):
    return dy * mask


def sigmoid_forward(x):
    y = expit(x)
    return y, y


def sigmoid_backward(dy, y):
    return dy * y * (1.0 - y)


def softmax4_forward(logits):
    """Row-wise softmax of (N, 4) logit vectors."""
    if logits.ndim != 2 or logits.shape[1] != 4:
        raise ContractError(f"softmax4 expects (N, 4) logits, got {logits.shape}")
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)
    return p, p


def softmax4_backward(dy, p):
    return p * (dy - (dy * p).sum(axis=1, keepdims=True))


# ---------------------------------------------------------------------------
# dense, pooling, concatenation
# ---------------------------------------------------------------------------

def fc_forward(x, w, b):
    """Affine layer: (N, F) @ (out, F)^T + b."""
    return x @ w.T + b


def fc_backward(dy, x, w):
    return dy @ w, dy.T @ x, dy.sum(axis=0)


def global_avg_pool_forward(x):
    return x.mean(axis=(2, 3)), x.shape


def global_avg_pool_backward(dy, shape):
    n, c, h, w = shape
    return np.broadcast_to(dy[:, :, None, None] / (h * w), shape).copy()


def concat_channels_forward(a, b):
    return np.concatenate([a, b], axis=1)


def concat_channels_backward(dy, split: int):
    return dy[:, :split], dy[:, split:]


# ---------------------------------------------------------------------------
# losses (each returns (value, gradient))
# ---------------------------------------------------------------------------

def seg_bce(probmap: np.ndarray, gt_mask: np.ndarray) -> tuple[float, np.ndarray]:
    """Pixel-mean binary cross entropy on a sigmoid probability map."""
    if probmap.shape != gt_mask.shape:
        raise ContractError(f"probmap {probmap.shape} vs mask {gt_mask.shape}")
    p = np.clip(probmap, PROB_CLAMP, 1.0 - PROB_CLAMP)
    loss = float(-np.mean(gt_mask * np.log(p) + (1.0 - gt_mask) * np.log(1.0 - p)))
    grad = ((p - gt_mask) / (p * (1.0 - p))) / probmap.size
    return loss, grad.astype(probmap.dtype, copy=False)


def cls_ce(probs: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Batch-mean negative log likelihood of the true class."""
    n = probs.shape[0]
    if labels.shape != (n,):
        raise ContractError(f"labels shape {labels.shape} does not match batch {n}")
    picked = np.clip(probs[np.arange(n), labels], PROB_CLAMP, 1.0)
    loss = float(-np.mean(np.log(picked)))
    grad = np.zeros_like(probs)
    grad[np.arange(n), labels] = -1.0 / (picked * n)
    return loss, grad


def pe_l2(pe_out: np.ndarray, bmode: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared difference between the enhanced output and the B-mode input."""
    if pe_out.shape != bmode.shape:
        raise ContractError(f"pe output {pe_out.shape} vs bmode {bmode.shape}")
    diff = pe_out - bmode
    loss = float(np.mean(diff * diff))
    return loss, (2.0 * diff / diff.size).astype(pe_out.dtype, copy=False)
