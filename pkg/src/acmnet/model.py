"""Shared encoder, appearance projector and rotation head.

Everything is plain numpy with hand-written backward passes. Forward
functions are pure: they never mutate ``ModelParams``. Training-mode batch
statistics are returned in the cache and folded into the running averages
by :func:`update_running_stats`.

Parameter names::

    enc.conv{i}.w   (C_out, C_in, 3, 3)     enc.conv{i}.b   (C_out,)
    proj.w          (D, F)                  proj.b          (D,)
    proj.bn.gamma   (D,)                    proj.bn.beta    (D,)
    head.w1         (H, F)                  head.b1         (H,)
    head.ln.gamma   (H,)                    head.ln.beta    (H,)
    head.w2         (K, H)                  head.b2         (K,)

Buffers: ``proj.bn.running_mean`` and ``proj.bn.running_var``.
"""

import dataclasses
import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from acmnet import _kernels
from acmnet.errors import FormatError, ParameterError

BN_EPS = 1e-5
LN_EPS = 1e-5
BN_MOMENTUM = 0.9
KERNEL = 3
STRIDE = 2
PAD = 1


@dataclass
class ModelConfig:
    image_size: int = 64
    encoder_channels: tuple = (16, 32, 64, 128)
    feature_dim: int = 128
    descriptor_dim: int = 64
    rotation_classes: int = 4
    head_hidden: int = 128
    in_channels: int = 3
    init_seed: int = 0
    backbone: str = "small_cnn"

    def __post_init__(self):
        self.encoder_channels = tuple(int(c) for c in self.encoder_channels)

    def validate(self):
        if self.backbone != "small_cnn":
            # "resnet50" is reserved as a preset name only
            raise ParameterError(f"backbone {self.backbone!r} is not implemented")
        if not self.encoder_channels or any(c < 1 for c in self.encoder_channels):
            raise ParameterError("encoder_channels must be a nonempty list of positive ints")
        stages = len(self.encoder_channels)
        if self.image_size < 2**stages or self.image_size % (2**stages):
            raise ParameterError(
                f"image_size {self.image_size} must be divisible by 2**{stages}"
            )
        if self.feature_dim != self.encoder_channels[-1]:
            raise ParameterError(
                f"feature_dim {self.feature_dim} must equal the last encoder width "
                f"{self.encoder_channels[-1]} (features are globally pooled)"
            )
        if self.descriptor_dim < 2:
            raise ParameterError("descriptor_dim must be >= 2")
        if self.rotation_classes < 2:
            raise ParameterError("rotation_classes must be >= 2")
        if self.head_hidden < 1 or self.in_channels < 1:
            raise ParameterError("head_hidden and in_channels must be positive")
        return self

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["encoder_channels"] = list(self.encoder_channels)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ParameterError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ModelParams:
    config: ModelConfig
    weights: dict
    buffers: dict = field(default_factory=dict)

    @property
    def dtype(self):
        return next(iter(self.weights.values())).dtype

    def copy(self):
        return ModelParams(
            config=dataclasses.replace(self.config),
            weights={k: v.copy() for k, v in self.weights.items()},
            buffers={k: v.copy() for k, v in self.buffers.items()},
        )

    def astype(self, dtype):
        return ModelParams(
            config=dataclasses.replace(self.config),
            weights={k: v.astype(dtype) for k, v in self.weights.items()},
            buffers={k: v.astype(dtype) for k, v in self.buffers.items()},
        )

    def parameter_count(self):
        return int(sum(v.size for v in self.weights.values()))

    def tensors(self):
        """All named tensors, weights then buffers, in insertion order."""
        out = dict(self.weights)
        out.update(self.buffers)
        return out


def init_params(config, dtype=np.float32):
    """He-uniform weights, zero biases, identity normalization."""
    config.validate()
    rng = np.random.default_rng(config.init_seed)
    w = {}

    def uniform(shape, fan_in):
        bound = np.sqrt(6.0 / fan_in)
        return rng.uniform(-bound, bound, size=shape).astype(dtype)

    c_in = config.in_channels
    for i, c_out in enumerate(config.encoder_channels):
        w[f"enc.conv{i}.w"] = uniform((c_out, c_in, KERNEL, KERNEL), c_in * KERNEL * KERNEL)
        w[f"enc.conv{i}.b"] = np.zeros(c_out, dtype=dtype)
        c_in = c_out
    f, d, h, k = (config.feature_dim, config.descriptor_dim, config.head_hidden,
                  config.rotation_classes)
    w["proj.w"] = uniform((d, f), f)
    w["proj.b"] = np.zeros(d, dtype=dtype)
    w["proj.bn.gamma"] = np.ones(d, dtype=dtype)
    w["proj.bn.beta"] = np.zeros(d, dtype=dtype)
    w["head.w1"] = uniform((h, f), f)
    w["head.b1"] = np.zeros(h, dtype=dtype)
    w["head.ln.gamma"] = np.ones(h, dtype=dtype)
    w["head.ln.beta"] = np.zeros(h, dtype=dtype)
    # plain fan-in bound for the logit layer (no ReLU after it)
    bound = 1.0 / np.sqrt(h)
    w["head.w2"] = rng.uniform(-bound, bound, size=(k, h)).astype(dtype)
    w["head.b2"] = np.zeros(k, dtype=dtype)
    buffers = {
        "proj.bn.running_mean": np.zeros(d, dtype=dtype),
        "proj.bn.running_var": np.ones(d, dtype=dtype),
    }
    return ModelParams(config=config, weights=w, buffers=buffers)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


def _conv_forward(x, w, b):
    n = x.shape[0]
    c_out = w.shape[0]
    oh = _kernels.conv_out_size(x.shape[2], KERNEL, STRIDE, PAD)
    ow = _kernels.conv_out_size(x.shape[3], KERNEL, STRIDE, PAD)
    cols = _kernels.im2col(np.ascontiguousarray(x), KERNEL, STRIDE, PAD)
    out = cols @ w.reshape(c_out, -1).T + b
    out = out.reshape(n, oh, ow, c_out).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), cols


def _conv_backward(dout, x_shape, cols, w, need_dx=True):
    c_out = w.shape[0]
    d2 = dout.transpose(0, 2, 3, 1).reshape(-1, c_out)
    dw = (d2.T @ cols).reshape(w.shape)
    db = d2.sum(axis=0)
    dx = None
    if need_dx:
        dcols = d2 @ w.reshape(c_out, -1)
        dx = _kernels.col2im(np.ascontiguousarray(dcols), x_shape, KERNEL, STRIDE, PAD)
    return dx, dw, db


def _check_images(params, images):
    cfg = params.config
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    expected = (cfg.in_channels, cfg.image_size, cfg.image_size)
    if images.ndim != 4 or images.shape[1:] != expected:
        raise ParameterError(
            f"expected images of shape (B, {expected[0]}, {expected[1]}, {expected[2]}), "
            f"got {images.shape}"
        )
    return images.astype(params.dtype, copy=False)


def _check_features(params, features, dim, what):
    features = np.asarray(features)
    if features.ndim == 1:
        features = features[None]
    if features.ndim != 2 or features.shape[1] != dim:
        raise ParameterError(f"{what} expects (B, {dim}) input, got {features.shape}")
    return features.astype(params.dtype, copy=False)


def encoder_forward(params, images, return_cache=False):
    """Images ``(B, C, S, S)`` in [0, 1] to pooled features ``(B, F)``."""
    x = _check_images(params, images)
    h = (x - 0.5) * 2.0
    layers = []
    for i in range(len(params.config.encoder_channels)):
        pre, cols = _conv_forward(h, params.weights[f"enc.conv{i}.w"], params.weights[f"enc.conv{i}.b"])
        layers.append((h.shape, cols, pre > 0))
        h = np.maximum(pre, 0)
    feats = h.mean(axis=(2, 3))
    if return_cache:
        return feats, {"layers": layers, "last_shape": h.shape}
    return feats


def encoder_backward(params, cache, dfeats, need_input_grad=False):
    """Returns ``(grads, dimages)``; ``dimages`` is None unless requested."""
    grads = {}
    n, c, hh, ww = cache["last_shape"]
    dh = np.broadcast_to(dfeats[:, :, None, None] / (hh * ww), (n, c, hh, ww))
    layers = cache["layers"]
    dx = None
    for i in reversed(range(len(layers))):
        x_shape, cols, mask = layers[i]
        dpre = dh * mask
        need_dx = i > 0 or need_input_grad
        dx, dw, db = _conv_backward(dpre, x_shape, cols, params.weights[f"enc.conv{i}.w"], need_dx)
        grads[f"enc.conv{i}.w"] = dw
        grads[f"enc.conv{i}.b"] = db
        dh = dx
    dimages = dx * 2.0 if need_input_grad else None
    return grads, dimages


def projector_forward(params, features, training=False, return_cache=False):
    """Linear, batch norm, ReLU. Output is not L2-normalized.

    ``training=True`` normalizes with batch statistics (biased variance);
    otherwise the running averages are used.
    """
    cfg = params.config
    f = _check_features(params, features, cfg.feature_dim, "projector")
    w = params.weights
    a = f @ w["proj.w"].T + w["proj.b"]
    if training:
        if a.shape[0] < 2:
            raise ParameterError("training-mode batch norm needs a batch of at least 2")
        mean = a.mean(axis=0)
        var = a.var(axis=0)
    else:
        mean = params.buffers["proj.bn.running_mean"]
        var = params.buffers["proj.bn.running_var"]
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    a_hat = (a - mean) * inv_std
    bn = a_hat * w["proj.bn.gamma"] + w["proj.bn.beta"]
    z = np.maximum(bn, 0)
    if return_cache:
        return z, {
            "f": f, "a_hat": a_hat, "inv_std": inv_std, "mask": bn > 0,
            "training": training, "batch_mean": mean, "batch_var": var,
        }
    return z


def projector_backward(params, cache, dz):
    w = params.weights
    dbn = dz * cache["mask"]
    a_hat, inv_std = cache["a_hat"], cache["inv_std"]
    grads = {
        "proj.bn.gamma": (dbn * a_hat).sum(axis=0),
        "proj.bn.beta": dbn.sum(axis=0),
    }
    da_hat = dbn * w["proj.bn.gamma"]
    if cache["training"]:
        m = da_hat.shape[0]
        da = inv_std / m * (
            m * da_hat - da_hat.sum(axis=0) - a_hat * (da_hat * a_hat).sum(axis=0)
        )
    else:
        da = da_hat * inv_std
    grads["proj.w"] = da.T @ cache["f"]
    grads["proj.b"] = da.sum(axis=0)
    dfeats = da @ w["proj.w"]
    return grads, dfeats


def update_running_stats(params, cache):
    """Fold a training-mode projector cache into the running averages (in place)."""
    if not cache["training"]:
        return
    b = params.buffers
    m = cache["f"].shape[0]
    unbiased = cache["batch_var"] * (m / (m - 1))
    b["proj.bn.running_mean"] = (
        BN_MOMENTUM * b["proj.bn.running_mean"] + (1 - BN_MOMENTUM) * cache["batch_mean"]
    ).astype(params.dtype)
    b["proj.bn.running_var"] = (
        BN_MOMENTUM * b["proj.bn.running_var"] + (1 - BN_MOMENTUM) * unbiased
    ).astype(params.dtype)


def rotation_head_forward(params, features, return_cache=False):
    """Linear, layer norm, ReLU, linear to ``K`` logits (softmax left to the loss)."""
    cfg = params.config
    f = _check_features(params, features, cfg.feature_dim, "rotation head")
    w = params.weights
    a = f @ w["head.w1"].T + w["head.b1"]
    mean = a.mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(a.var(axis=1, keepdims=True) + LN_EPS)
    a_hat = (a - mean) * inv_std
    ln = a_hat * w["head.ln.gamma"] + w["head.ln.beta"]
    h = np.maximum(ln, 0)
    logits = h @ w["head.w2"].T + w["head.b2"]
    if return_cache:
        return logits, {"f": f, "a_hat": a_hat, "inv_std": inv_std, "mask": ln > 0, "h": h}
    return logits


def rotation_head_backward(params, cache, dlogits):
    w = params.weights
    grads = {"head.w2": dlogits.T @ cache["h"], "head.b2": dlogits.sum(axis=0)}
    dln = (dlogits @ w["head.w2"]) * cache["mask"]
    a_hat, inv_std = cache["a_hat"], cache["inv_std"]
    grads["head.ln.gamma"] = (dln * a_hat).sum(axis=0)
    grads["head.ln.beta"] = dln.sum(axis=0)
    da_hat = dln * w["head.ln.gamma"]
    h = da_hat.shape[1]
    da = inv_std / h * (
        h * da_hat
        - da_hat.sum(axis=1, keepdims=True)
        - a_hat * (da_hat * a_hat).sum(axis=1, keepdims=True)
    )
    grads["head.w1"] = da.T @ cache["f"]
    grads["head.b1"] = da.sum(axis=0)
    return grads, da @ w["head.w1"]


def accumulate(into, grads, scale=1.0):
    """``into += scale * grads`` key-wise, creating missing keys."""
    for k, g in grads.items():
        if k in into:
            into[k] = into[k] + (g if scale == 1.0 else scale * g)
        else:
            into[k] = g.copy() if scale == 1.0 else scale * g
    return into


# ---------------------------------------------------------------------------
# "ACMN" tensor container
# ---------------------------------------------------------------------------
#
#   magic   b"ACMN"
#   version u16
#   header  u32 byte length + UTF-8 JSON
#   count   u32
#   per tensor: u16 name length, UTF-8 name, u8 ndim, ndim x u32 dims,
#               prod(dims) little-endian float32 values
#   crc32   u32 over every preceding byte
#
# All integers little-endian.

CHECKPOINT_MAGIC = b"ACMN"
CHECKPOINT_VERSION = 1


def write_container(path, header, tensors, magic=CHECKPOINT_MAGIC, version=CHECKPOINT_VERSION):
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [magic, struct.pack("<HI", version, len(blob)), blob, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if not np.all(np.isfinite(arr)):
            raise ParameterError(f"tensor {name!r} contains non-finite values")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    payload = b"".join(parts)
    with open(path, "wb") as fh:
        fh.write(payload + struct.pack("<I", zlib.crc32(payload)))


def read_container(path, magic=CHECKPOINT_MAGIC, version=CHECKPOINT_VERSION):
    """Returns ``(header, tensors)``; tensors are float32 arrays."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 14 or data[:4] != magic:
        raise FormatError(f"{path}: bad magic, not a {magic.decode()} file")
    (crc,) = struct.unpack("<I", data[-4:])
    payload = data[:-4]
    if zlib.crc32(payload) != crc:
        raise FormatError(f"{path}: checksum mismatch (truncated or corrupt)")
    ver, hlen = struct.unpack_from("<HI", payload, 4)
    if ver != version:
        raise FormatError(f"{path}: unsupported version {ver}")
    off = 10
    try:
        header = json.loads(payload[off : off + hlen].decode("utf-8"))
        off += hlen
        (count,) = struct.unpack_from("<I", payload, off)
        off += 4
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", payload, off)
            off += 2
            name = payload[off : off + nlen].decode("utf-8")
            off += nlen
            (ndim,) = struct.unpack_from("<B", payload, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", payload, off)
            off += 4 * ndim
            size = int(np.prod(shape, dtype=np.int64))
            arr = np.frombuffer(payload, dtype="<f4", count=size, offset=off).reshape(shape)
            off += 4 * size
            tensors[name] = arr.astype(np.float32)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: malformed body ({exc})") from exc
    if off != len(payload):
        raise FormatError(f"{path}: {len(payload) - off} trailing bytes")
    return header, tensors
