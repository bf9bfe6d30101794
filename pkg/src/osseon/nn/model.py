"""Parameter containers, the two network architectures, and model files.

The pre-enhancing net maps the 4-channel feature stack (B-mode, LPT, LP,
BSE) to a single bone-enhanced image through a chain of 3x3 convolutions.
The classification U-net replaces pooling with strided 2x2 convolutions,
adds batch norm before every ReLU, and taps half of the bottleneck
channels for a global-average-pooled 4-way classification head.

Models serialize to a single file: the raw-container magic, a ``MODEL``
section tag, a version word, a text manifest (architecture id, structural
hyperparameters, and the canonical sorted tensor list), then each named
tensor as float32.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import ArchitectureMismatchError, ContractError, FormatError, PayloadLengthError
from ..image import RAW_MAGIC
from . import ops

MODEL_SECTION = b"MODEL"
MODEL_VERSION = 1


class Tensor:
    """Named value/gradient pair; the unit the optimizer works on."""

    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = value
        self.grad: np.ndarray | None = None


@dataclass(frozen=True)
class LayerSpec:
    """One entry of the architecture descriptor."""

    kind: str
    in_channels: int
    out_channels: int


def _he_conv(rng: np.random.Generator, co: int, ci: int, k: int, dtype) -> np.ndarray:
    fan_in = ci * k * k
    return (rng.standard_normal((co, ci, k, k)) * np.sqrt(2.0 / fan_in)).astype(dtype)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

class Conv:
    """Convolution layer; kind is conv3x3, conv1x1, down_conv, or up_conv."""

    def __init__(self, name: str, kind: str, ci: int, co: int,
                 rng: np.random.Generator, dtype, upsample: str = "nearest"):
        k = {"conv3x3": 3, "conv1x1": 1, "down_conv": 2, "up_conv": 2}[kind]
        self.kind = kind
        self.upsample = upsample
        self.w = Tensor(f"{name}.w", _he_conv(rng, co, ci, k, dtype))
        self.b = Tensor(f"{name}.b", np.zeros(co, dtype=dtype))
        self._cache = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        if self.kind == "conv3x3":
            y = ops.conv3x3_forward(x, self.w.value, self.b.value)
            self._cache = x
        elif self.kind == "conv1x1":
            y = ops.conv1x1_forward(x, self.w.value, self.b.value)
            self._cache = x
        elif self.kind == "down_conv":
            y = ops.down_conv_forward(x, self.w.value, self.b.value)
            self._cache = x
        elif self.kind == "up_conv" and self.upsample == "nearest":
            y, xu = ops.up_conv_forward(x, self.w.value, self.b.value)
            self._cache = xu
        else:
            y = ops.up_conv_transposed_forward(x, self.w.value, self.b.value)
            self._cache = x
        return y

    def backward(self, dy: np.ndarray) -> np.ndarray:
        x = self._cache
        if self.kind == "conv3x3":
            dx, dw, db = ops.conv3x3_backward(dy, x, self.w.value)
        elif self.kind == "conv1x1":
            dx, dw, db = ops.conv1x1_backward(dy, x, self.w.value)
        elif self.kind == "down_conv":
            dx, dw, db = ops.down_conv_backward(dy, x, self.w.value)
        elif self.kind == "up_conv" and self.upsample == "nearest":
            dx, dw, db = ops.up_conv_backward(dy, x, self.w.value)
        else:
            dx, dw, db = ops.up_conv_transposed_backward(dy, x, self.w.value)
        self.w.grad = dw
        self.b.grad = db
        return dx

    def params(self):
        return [self.w, self.b]


class BatchNorm:
    def __init__(self, name: str, channels: int, dtype):
        self.gamma = Tensor(f"{name}.gamma", np.ones(channels, dtype=dtype))
        self.beta = Tensor(f"{name}.beta", np.zeros(channels, dtype=dtype))
        self.running_mean = Tensor(f"{name}.running_mean", np.zeros(channels, dtype=dtype))
        self.running_var = Tensor(f"{name}.running_var", np.ones(channels, dtype=dtype))
        self._cache = None

    def forward(self, x: np.ndarray, training: bool) -> np.ndarray:
        y, cache, new_rm, new_rv = ops.batch_norm_forward(
            x, self.gamma.value, self.beta.value,
            self.running_mean.value, self.running_var.value, training,
        )
        if training:
            self.running_mean.value = new_rm.astype(x.dtype, copy=False)
            self.running_var.value = new_rv.astype(x.dtype, copy=False)
        self._cache = cache
        return y

    def backward(self, dy: np.ndarray) -> np.ndarray:
        dx, dgamma, dbeta = ops.batch_norm_backward(dy, self._cache)
        self.gamma.grad = dgamma
        self.beta.grad = dbeta
        return dx

    def params(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return [self.running_mean, self.running_var]


class FC:
    def __init__(self, name: str, fin: int, fout: int, rng: np.random.Generator, dtype):
        self.w = Tensor(f"{name}.w", (rng.standard_normal((fout, fin))
                                      * np.sqrt(2.0 / fin)).astype(dtype))
        self.b = Tensor(f"{name}.b", np.zeros(fout, dtype=dtype))
        self._cache = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._cache = x
        return ops.fc_forward(x, self.w.value, self.b.value)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        dx, dw, db = ops.fc_backward(dy, self._cache, self.w.value)
        self.w.grad = dw
        self.b.grad = db
        return dx

    def params(self):
        return [self.w, self.b]


# ---------------------------------------------------------------------------
# model base
# ---------------------------------------------------------------------------

class Model:
    """Named-parameter container shared by both architectures."""

    arch_id: str = ""

    def __init__(self):
        self._params: list[Tensor] = []
        self._buffers: list[Tensor] = []
        self.layer_specs: list[LayerSpec] = []

    def _register(self, layer):
        self._params.extend(layer.params())
        if hasattr(layer, "buffers"):
            self._buffers.extend(layer.buffers())
        return layer

    def parameters(self) -> list[Tensor]:
        """Trainable tensors in registration order."""
        return list(self._params)

    def named_tensors(self) -> dict[str, Tensor]:
        """All state (parameters and batch-norm running stats) by name."""
        out = {t.name: t for t in self._params + self._buffers}
        if len(out) != len(self._params) + len(self._buffers):
            raise ContractError("duplicate tensor names in model")
        return out

    def parameter_count(self, include_norm: bool = False) -> int:
        """Number of weight/bias parameters.

        Normalization scale/shift pairs are excluded by default so the count
        reflects the convolution/dense layer arithmetic alone.
        """
        total = 0
        for t in self._params:
            is_norm = t.name.endswith(".gamma") or t.name.endswith(".beta")
            if is_norm and not include_norm:
                continue
            total += t.value.size
        return total

    def state_hash(self) -> str:
        """SHA-256 over all named tensors in canonical sorted order."""
        digest = hashlib.sha256()
        tensors = self.named_tensors()
        for name in sorted(tensors):
            digest.update(name.encode())
            digest.update(np.ascontiguousarray(tensors[name].value, dtype=np.float32).tobytes())
        return digest.hexdigest()

    def manifest(self) -> dict[str, str]:
        raise NotImplementedError

    def cast(self, dtype) -> "Model":
        for t in self._params + self._buffers:
            t.value = t.value.astype(dtype)
        return self


class PENet(Model):
    """Pre-enhancing network: 7 conv3x3 layers with 32 maps (BN + ReLU each),
    a final conv3x3 to one map, then a sigmoid."""

    arch_id = "PE1"

    def __init__(self, in_channels: int = 4, features: int = 32, seed: int = 0,
                 dtype=np.float32):
        super().__init__()
        self.in_channels = in_channels
        self.features = features
        rng = np.random.default_rng(np.random.Philox(key=seed))
        self.convs: list[Conv] = []
        self.bns: list[BatchNorm] = []
        widths = [in_channels] + [features] * 7
        for i in range(7):
            self.convs.append(self._register(
                Conv(f"conv{i}", "conv3x3", widths[i], widths[i + 1], rng, dtype)))
            self.bns.append(self._register(BatchNorm(f"bn{i}", widths[i + 1], dtype)))
            self.layer_specs.append(LayerSpec("conv3x3", widths[i], widths[i + 1]))
            self.layer_specs.append(LayerSpec("bn", widths[i + 1], widths[i + 1]))
            self.layer_specs.append(LayerSpec("relu", widths[i + 1], widths[i + 1]))
        self.out_conv = self._register(Conv("conv7", "conv3x3", features, 1, rng, dtype))
        self.layer_specs.append(LayerSpec("conv3x3", features, 1))
        self.layer_specs.append(LayerSpec("sigmoid", 1, 1))
        self._relu_masks: list = []
        self._sig_cache = None

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        self._relu_masks = []
        h = x
        for conv, bn in zip(self.convs, self.bns):
            h = bn.forward(conv.forward(h), training)
            h, mask = ops.relu_forward(h)
            self._relu_masks.append(mask)
        h = self.out_conv.forward(h)
        y, self._sig_cache = ops.sigmoid_forward(h)
        return y

    def backward(self, dy: np.ndarray) -> np.ndarray:
        dh = ops.sigmoid_backward(dy, self._sig_cache)
        dh = self.out_conv.backward(dh)
        for conv, bn, mask in zip(reversed(self.convs), reversed(self.bns),
                                  reversed(self._relu_masks)):
            dh = ops.relu_backward(dh, mask)
            dh = bn.backward(dh)
            dh = conv.backward(dh)
        return dh

    def manifest(self) -> dict[str, str]:
        return {
            "arch": self.arch_id,
            "in_channels": str(self.in_channels),
            "features": str(self.features),
        }


class CUNet(Model):
    """Classification U-net.

    Contracting path: per level one conv3x3 + BN + ReLU, then a stride-2
    down-conv doubling the channels. The bottleneck feeds both the expansive
    path and the classification head (first ``head_channel_fraction`` of its
    channels, global-average-pooled, one FC layer, 4-way softmax). Expansive
    path: up-conv halving channels, concatenation with the matching
    contracting feature map, conv3x3 + BN + ReLU; a 1x1 convolution and a
    sigmoid emit the probability map.
    """

    arch_id = "CUNET1"

    def __init__(self, in_channels: int = 1, base_features: int = 16, depth: int = 4,
                 head_channel_fraction: float = 0.5, seed: int = 0,
                 dtype=np.float32, upsample: str = "nearest"):
        super().__init__()
        if upsample not in ("nearest", "transposed"):
            raise ContractError(f"unknown upsample mode {upsample!r}")
        self.in_channels = in_channels
        self.base_features = base_features
        self.depth = depth
        self.head_channel_fraction = head_channel_fraction
        self.upsample = upsample
        rng = np.random.default_rng(np.random.Philox(key=seed))

        self.enc_convs: list[Conv] = []
        self.enc_bns: list[BatchNorm] = []
        self.downs: list[Conv] = []
        ch = base_features
        cin = in_channels
        for lvl in range(depth):
            self.enc_convs.append(self._register(
                Conv(f"enc{lvl}.conv", "conv3x3", cin, ch, rng, dtype)))
            self.enc_bns.append(self._register(BatchNorm(f"enc{lvl}.bn", ch, dtype)))
            self.downs.append(self._register(
                Conv(f"down{lvl}", "down_conv", ch, 2 * ch, rng, dtype)))
            self.layer_specs += [
                LayerSpec("conv3x3_pad1", cin, ch),
                LayerSpec("bn", ch, ch),
                LayerSpec("relu", ch, ch),
                LayerSpec("down_conv2x2_s2", ch, 2 * ch),
            ]
            cin = 2 * ch
            ch = 2 * ch

        bottleneck = ch  # base * 2**depth
        self.head_channels = int(round(bottleneck * head_channel_fraction))
        self.head_fc = self._register(FC("head.fc", self.head_channels, 4, rng, dtype))
        self.layer_specs += [
            LayerSpec("fc", self.head_channels, 4),
            LayerSpec("softmax", 4, 4),
        ]

        self.ups: list[Conv] = []
        self.dec_convs: list[Conv] = []
        self.dec_bns: list[BatchNorm] = []
        for lvl in reversed(range(depth)):
            self.ups.append(self._register(
                Conv(f"dec{lvl}.up", "up_conv", ch, ch // 2, rng, dtype, upsample=upsample)))
            self.dec_convs.append(self._register(
                Conv(f"dec{lvl}.conv", "conv3x3", ch, ch // 2, rng, dtype)))
            self.dec_bns.append(self._register(BatchNorm(f"dec{lvl}.bn", ch // 2, dtype)))
            self.layer_specs += [
                LayerSpec("up_conv2x2", ch, ch // 2),
                LayerSpec("concat_skip", ch // 2, ch),
                LayerSpec("conv3x3_pad1", ch, ch // 2),
                LayerSpec("bn", ch // 2, ch // 2),
                LayerSpec("relu", ch // 2, ch // 2),
            ]
            ch //= 2
        self.out_conv = self._register(Conv("out", "conv1x1", ch, 1, rng, dtype))
        self.layer_specs += [LayerSpec("conv3x3_pad1", ch, 1), LayerSpec("sigmoid", 1, 1)]

        self._caches = None

    def min_input_size(self) -> int:
        return 2**self.depth * 4

    def forward(self, x: np.ndarray, training: bool = False
                ) -> tuple[np.ndarray, np.ndarray]:
        """Returns (probability map (N,1,H,W), class probabilities (N,4))."""
        h_, w_ = x.shape[2], x.shape[3]
        if h_ % (2**self.depth) or w_ % (2**self.depth):
            raise ContractError(
                f"input {h_}x{w_} not divisible by 2^depth = {2**self.depth}")
        enc_masks = []
        skips = []
        h = x
        for conv, bn, down in zip(self.enc_convs, self.enc_bns, self.downs):
            h = bn.forward(conv.forward(h), training)
            h, mask = ops.relu_forward(h)
            enc_masks.append(mask)
            skips.append(h)
            h = down.forward(h)

        pooled, pool_shape = ops.global_avg_pool_forward(h[:, : self.head_channels])
        logits = self.head_fc.forward(pooled)
        cls_probs, sm_cache = ops.softmax4_forward(logits)

        dec_masks = []
        for up, conv, bn, skip in zip(self.ups, self.dec_convs, self.dec_bns,
                                      reversed(skips)):
            h = up.forward(h)
            h = ops.concat_channels_forward(h, skip)
            h = bn.forward(conv.forward(h), training)
            h, mask = ops.relu_forward(h)
            dec_masks.append(mask)
        seg_logits = self.out_conv.forward(h)
        seg, sig_cache = ops.sigmoid_forward(seg_logits)
        self._caches = (enc_masks, dec_masks, sm_cache, sig_cache, pool_shape)
        return seg, cls_probs

    def backward(self, dseg: np.ndarray, dcls: np.ndarray) -> np.ndarray:
        """Backpropagate gradients of both outputs; returns the input gradient."""
        enc_masks, dec_masks, sm_cache, sig_cache, pool_shape = self._caches
        dh = ops.sigmoid_backward(dseg, sig_cache)
        dh = self.out_conv.backward(dh)
        dskips = []
        for up, conv, bn, mask in zip(reversed(self.ups), reversed(self.dec_convs),
                                      reversed(self.dec_bns), reversed(dec_masks)):
            dh = ops.relu_backward(dh, mask)
            dh = bn.backward(dh)
            dh = conv.backward(dh)
            # concat was [up_out, skip] with equal channel counts
            dh, dskip = ops.concat_channels_backward(dh, dh.shape[1] // 2)
            dskips.append(dskip)
            dh = up.backward(dh)

        dlogits = ops.softmax4_backward(dcls, sm_cache)
        dpooled = self.head_fc.backward(dlogits)
        dhead = ops.global_avg_pool_backward(dpooled, pool_shape)
        dh[:, : self.head_channels] += dhead

        # dskips were collected shallowest-first; the encoder unwinds deepest-first
        for down, conv, bn, mask, dskip in zip(reversed(self.downs),
                                               reversed(self.enc_convs),
                                               reversed(self.enc_bns),
                                               reversed(enc_masks),
                                               reversed(dskips)):
            dh = down.backward(dh)
            dh += dskip
            dh = ops.relu_backward(dh, mask)
            dh = bn.backward(dh)
            dh = conv.backward(dh)
        return dh

    def manifest(self) -> dict[str, str]:
        return {
            "arch": self.arch_id,
            "in_channels": str(self.in_channels),
            "base_features": str(self.base_features),
            "depth": str(self.depth),
            "head_channel_fraction": repr(self.head_channel_fraction),
            "upsample": self.upsample,
        }


def build_pe(in_channels: int = 4, seed: int = 0, dtype=np.float32) -> PENet:
    """Pre-enhancing net over the 4-channel feature stack."""
    return PENet(in_channels=in_channels, seed=seed, dtype=dtype)


def build_cunet(in_channels: int = 1, base_features: int = 16, depth: int = 4,
                head_channel_fraction: float = 0.5, seed: int = 0,
                dtype=np.float32, upsample: str = "nearest") -> CUNet:
    """Classification U-net with strided downsampling and a 4-way head."""
    return CUNet(in_channels=in_channels, base_features=base_features, depth=depth,
                 head_channel_fraction=head_channel_fraction, seed=seed, dtype=dtype,
                 upsample=upsample)


# ---------------------------------------------------------------------------
# model files
# ---------------------------------------------------------------------------

def save_model(model: Model, path: str | Path) -> None:
    """Write the architecture manifest and all named tensors as float32."""
    tensors = model.named_tensors()
    names = sorted(tensors)
    manifest = dict(model.manifest())
    manifest["tensors"] = ",".join(names)
    manifest_text = "".join(f"{k}={v}\n" for k, v in manifest.items()).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(RAW_MAGIC)
        fh.write(MODEL_SECTION)
        fh.write(struct.pack("<I", MODEL_VERSION))
        fh.write(struct.pack("<I", len(manifest_text)))
        fh.write(manifest_text)
        for name in names:
            arr = np.ascontiguousarray(tensors[name].value, dtype=np.float32)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def _parse_manifest(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition("=")
        out[key] = value
    return out


def load_model(path: str | Path, expect_arch: str | None = None) -> Model:
    """Rebuild a model from its file; optionally require an architecture id."""
    path = Path(path)
    buf = path.read_bytes()
    if buf[:5] != RAW_MAGIC:
        raise FormatError(f"{path}: missing {RAW_MAGIC!r} magic")
    if buf[5:10] != MODEL_SECTION:
        raise FormatError(f"{path}: not a model container (missing MODEL section)")
    (version,) = struct.unpack_from("<I", buf, 10)
    if version != MODEL_VERSION:
        raise FormatError(f"{path}: unsupported model version {version}")
    (mlen,) = struct.unpack_from("<I", buf, 14)
    pos = 18
    manifest = _parse_manifest(buf[pos : pos + mlen].decode("utf-8"))
    pos += mlen

    arch = manifest.get("arch")
    if expect_arch is not None and arch != expect_arch:
        raise ArchitectureMismatchError(
            f"{path}: holds architecture {arch!r}, expected {expect_arch!r}")
    if arch == "PE1":
        model: Model = PENet(in_channels=int(manifest["in_channels"]),
                             features=int(manifest["features"]))
    elif arch == "CUNET1":
        model = CUNet(in_channels=int(manifest["in_channels"]),
                      base_features=int(manifest["base_features"]),
                      depth=int(manifest["depth"]),
                      head_channel_fraction=float(manifest["head_channel_fraction"]),
                      upsample=manifest.get("upsample", "nearest"))
    else:
        raise ArchitectureMismatchError(f"{path}: unknown architecture id {arch!r}")

    tensors = model.named_tensors()
    expected = manifest["tensors"].split(",")
    if sorted(expected) != sorted(tensors):
        raise ArchitectureMismatchError(f"{path}: tensor list does not match {arch}")
    for name in expected:
        (nlen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        stored = buf[pos : pos + nlen].decode("utf-8")
        pos += nlen
        if stored != name:
            raise FormatError(f"{path}: tensor order mismatch ({stored!r} vs {name!r})")
        (rank,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        count = int(np.prod(dims))
        payload = buf[pos : pos + 4 * count]
        if len(payload) != 4 * count:
            raise PayloadLengthError(f"{path}: truncated tensor {name}")
        pos += 4 * count
        value = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
        if value.shape != tensors[name].value.shape:
            raise ArchitectureMismatchError(
                f"{path}: tensor {name} has shape {value.shape}, "
                f"architecture implies {tensors[name].value.shape}")
        tensors[name].value = value
    return model
