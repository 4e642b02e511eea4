"""Dual-stream 3D-conv network with a fusion stage, a BVP head and an SpO2 head.

Every parameter lives in ``ModelParams.tensors`` under a dotted name:

* ``{face,finger,shared}.block{i}.{weight,bias,gain}`` -- encoder blocks
* ``fusion.{weight,bias}`` -- 1x1x1 projection of concatenated features
* ``bvp.{weight,bias}`` -- per-frame linear read-out
* ``spo2.fc1.{weight,bias}``, ``spo2.fc2.{weight,bias}`` -- two-layer MLP

An encoder block is ``conv3d -> per-channel gain -> ELU -> 2x2 spatial mean``;
the last block skips the pooling. Temporal length is preserved throughout.
"""

from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from ..core import Rng
from ..errors import DimensionError, InputError
from .conv import (
    avg_pool_spatial,
    avg_pool_spatial_backward,
    conv3d_backward_cols,
    conv3d_forward_cols,
    elu,
    elu_grad,
)

SPO2_FLOOR = 80.0
SPO2_SPAN = 20.0


class Streams(str, enum.Enum):
    FACE = "face"
    FINGER = "finger"
    BOTH = "both"


class Heads(str, enum.Enum):
    BVP = "bvp"
    SPO2 = "spo2"
    BOTH = "both"


class FusionMode(str, enum.Enum):
    CONCAT_PROJECT = "concat_project"
    SUM = "sum"


@dataclass(frozen=True)
class ModelConfig:
    in_frames: int = 127
    in_size: int = 72
    encoder_channels: tuple = (16, 32, 32, 64)
    fusion_mode: FusionMode = FusionMode.CONCAT_PROJECT
    heads: Heads = Heads.BOTH
    streams: Streams = Streams.BOTH
    share_encoder: bool = False
    kernel: tuple = (3, 3, 3)
    spo2_hidden: int = 16
    dtype: str = "float64"

    def __post_init__(self):
        object.__setattr__(self, "encoder_channels", tuple(int(c) for c in self.encoder_channels))
        object.__setattr__(self, "kernel", tuple(int(k) for k in self.kernel))
        object.__setattr__(self, "fusion_mode", FusionMode(self.fusion_mode))
        object.__setattr__(self, "heads", Heads(self.heads))
        object.__setattr__(self, "streams", Streams(self.streams))
        if not self.encoder_channels or min(self.encoder_channels) < 1:
            raise InputError("encoder_channels must be a non-empty list of positive ints")
        if self.in_frames < 8:
            raise InputError("in_frames must be >= 8")
        if any(k % 2 == 0 for k in self.kernel):
            raise InputError("kernel sizes must be odd to preserve length")
        if self.dtype not in ("float64", "float32"):
            raise InputError("dtype must be float64 or float32")
        size = self.in_size
        for _ in self.encoder_channels[:-1]:
            size //= 2
        if size < 1:
            raise InputError(f"in_size {self.in_size} too small for {len(self.encoder_channels)} blocks")

    @property
    def feature_channels(self):
        return self.encoder_channels[-1]

    @property
    def padding(self):
        return tuple(k // 2 for k in self.kernel)

    @property
    def encoders(self):
        if self.share_encoder:
            return ("shared",)
        return {Streams.FACE: ("face",), Streams.FINGER: ("finger",), Streams.BOTH: ("face", "finger")}[self.streams]

    def encoder_for(self, stream):
        return "shared" if self.share_encoder else stream

    def to_dict(self):
        d = asdict(self)
        for k in ("fusion_mode", "heads", "streams"):
            d[k] = d[k].value
        d["encoder_channels"] = list(d["encoder_channels"])
        d["kernel"] = list(d["kernel"])
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(eq=False)
class ModelParams:
    tensors: dict
    seed: int
    config_hash: str = ""

    def copy(self):
        return ModelParams({k: v.copy() for k, v in self.tensors.items()}, self.seed, self.config_hash)

    def __getitem__(self, name):
        return self.tensors[name]

    def names(self):
        return list(self.tensors)

    def num_parameters(self):
        return int(sum(v.size for v in self.tensors.values()))


def param_shapes(config):
    """Ordered mapping ``name -> shape`` for every tensor of ``config``."""
    shapes = {}
    for enc in config.encoders:
        c_in = 3
        for i, c_out in enumerate(config.encoder_channels):
            shapes[f"{enc}.block{i}.weight"] = (c_out, c_in) + config.kernel
            shapes[f"{enc}.block{i}.bias"] = (c_out,)
            shapes[f"{enc}.block{i}.gain"] = (c_out,)
            c_in = c_out
    cf = config.feature_channels
    if config.streams is Streams.BOTH and config.fusion_mode is FusionMode.CONCAT_PROJECT:
        shapes["fusion.weight"] = (cf, 2 * cf)
        shapes["fusion.bias"] = (cf,)
    shapes["bvp.weight"] = (cf,)
    shapes["bvp.bias"] = (1,)
    shapes["spo2.fc1.weight"] = (config.spo2_hidden, cf)
    shapes["spo2.fc1.bias"] = (config.spo2_hidden,)
    shapes["spo2.fc2.weight"] = (config.spo2_hidden,)
    shapes["spo2.fc2.bias"] = (1,)
    return shapes


def fan_in(name, shape):
    if name.endswith(".bias") or name.endswith(".gain"):
        return None
    if len(shape) == 1:
        return shape[0]
    return int(np.prod(shape[1:]))


def init_params(config, seed):
    """Fan-in scaled uniform init: weights ~ U(-a, a), a = sqrt(3 / fan_in).

    That gives weight std ``1/sqrt(fan_in)``. Biases start at 0, gains at 1.
    """
    rng = Rng(seed)
    dtype = np.dtype(config.dtype)
    tensors = {}
    for name, shape in param_shapes(config).items():
        n = fan_in(name, shape)
        if name.endswith(".gain"):
            t = np.ones(shape)
        elif n is None:
            t = np.zeros(shape)
        else:
            a = np.sqrt(3.0 / n)
            t = rng.uniform(-a, a, int(np.prod(shape))).reshape(shape)
        tensors[name] = t.astype(dtype)
    return ModelParams(tensors, int(seed), config.hash())


# -- forward -----------------------------------------------------------------


def _to_channels_first(clip, config, what):
    clip = np.asarray(clip)
    expected = (config.in_frames, config.in_size, config.in_size, 3)
    if clip.shape != expected:
        raise DimensionError(f"{what} clip has shape {clip.shape}, config expects {expected}")
    return np.ascontiguousarray(clip.transpose(3, 0, 1, 2), dtype=config.dtype)


def encoder_forward(x, params, config, enc="face", cache=None):
    """Run one encoder on a channel-first clip ``[3, T, S, S]``.

    Returns the feature map ``[C_f, T, S', S']``. When ``cache`` is a list the
    intermediates needed by :func:`encoder_backward` are appended to it.
    """
    if x.ndim != 4 or x.shape[0] != 3:
        raise DimensionError(f"encoder input must be [3, T, H, W], got {x.shape}")
    nblocks = len(config.encoder_channels)
    pad = config.padding
    for i in range(nblocks):
        w = params[f"{enc}.block{i}.weight"]
        b = params[f"{enc}.block{i}.bias"]
        g = params[f"{enc}.block{i}.gain"]
        z, cols = conv3d_forward_cols(x, w, b, 1, pad)
        y = z * g[:, None, None, None]
        a = elu(y)
        pooled = i < nblocks - 1
        out = avg_pool_spatial(a) if pooled else a
        if cache is not None:
            cache.append({"cols": cols, "in_shape": x.shape, "z": z, "y": y, "a": a, "pooled": pooled})
        x = out
    return x


def encoder_backward(grad, cache, params, config, enc, grads, need_input=False):
    pad = config.padding
    for i in reversed(range(len(cache))):
        c = cache[i]
        if c["pooled"]:
            grad = avg_pool_spatial_backward(grad, c["a"].shape)
        gy = grad * elu_grad(c["y"], c["a"])
        g = params[f"{enc}.block{i}.gain"]
        grads[f"{enc}.block{i}.gain"] += np.einsum("cthw,cthw->c", gy, c["z"])
        gz = gy * g[:, None, None, None]
        gx, gw, gb = conv3d_backward_cols(
            gz, c["cols"], c["in_shape"], params[f"{enc}.block{i}.weight"], 1, pad,
            need_input=(i > 0 or need_input),
        )
        grads[f"{enc}.block{i}.weight"] += gw
        grads[f"{enc}.block{i}.bias"] += gb
        grad = gx
    return grad


def fuse(face_feat, finger_feat, params, mode):
    """Combine two feature maps of identical ``[C, T, H, W]`` shape."""
    if face_feat.shape != finger_feat.shape:
        raise DimensionError(
            f"feature maps differ: face {face_feat.shape} vs finger {finger_feat.shape}"
        )
    mode = FusionMode(mode)
    if mode is FusionMode.SUM:
        return face_feat + finger_feat
    stacked = np.concatenate([face_feat, finger_feat], axis=0)
    C = stacked.shape[0]
    P = params["fusion.weight"]
    out = P @ stacked.reshape(C, -1) + params["fusion.bias"][:, None]
    return out.reshape((P.shape[0],) + stacked.shape[1:])


def bvp_head_forward(feat, params):
    """Spatial mean per frame, then a shared linear map: one value per frame."""
    pooled = feat.mean(axis=(2, 3))  # [C, T]
    return params["bvp.weight"] @ pooled + params["bvp.bias"][0]


def spo2_logit(feat, params):
    g = feat.mean(axis=(1, 2, 3))
    h = np.tanh(params["spo2.fc1.weight"] @ g + params["spo2.fc1.bias"])
    return float(params["spo2.fc2.weight"] @ h + params["spo2.fc2.bias"][0]), g, h


def spo2_from_logit(o):
    # numerically safe logistic
    if o >= 0:
        s = 1.0 / (1.0 + np.exp(-o))
    else:
        e = np.exp(o)
        s = e / (1.0 + e)
    return SPO2_FLOOR + SPO2_SPAN * s, s


def spo2_head_forward(feat, params):
    """Global mean pool, tanh MLP, then ``80 + 20 * sigmoid(logit)`` percent."""
    return spo2_from_logit(spo2_logit(feat, params)[0])[0]


def _wants(config):
    return config.heads in (Heads.BVP, Heads.BOTH), config.heads in (Heads.SPO2, Heads.BOTH)


def forward(params, config, face_clip=None, finger_clip=None):
    """Full forward pass; returns ``(bvp, spo2, cache)``.

    Clips are ``[T-1, S, S, 3]`` (the preprocess layout). Streams not enabled
    by ``config.streams`` must be ``None`` or are ignored.
    """
    need_face = config.streams in (Streams.FACE, Streams.BOTH)
    need_finger = config.streams in (Streams.FINGER, Streams.BOTH)
    if need_face and face_clip is None:
        raise InputError(f"streams={config.streams.value} requires a face clip")
    if need_finger and finger_clip is None:
        raise InputError(f"streams={config.streams.value} requires a finger clip")
    cache = {}
    feats = {}
    for stream, clip, need in (("face", face_clip, need_face), ("finger", finger_clip, need_finger)):
        if not need:
            continue
        x = _to_channels_first(clip, config, stream)
        enc_cache = []
        feats[stream] = encoder_forward(x, params, config, config.encoder_for(stream), enc_cache)
        cache[stream] = enc_cache
    if config.streams is Streams.BOTH:
        feat = fuse(feats["face"], feats["finger"], params, config.fusion_mode)
        cache["feats"] = feats
    else:
        feat = feats["face" if need_face else "finger"]
    cache["feat"] = feat
    want_bvp, want_spo2 = _wants(config)
    bvp = bvp_head_forward(feat, params) if want_bvp else None
    spo2 = None
    if want_spo2:
        o, g, h = spo2_logit(feat, params)
        spo2, s = spo2_from_logit(o)
        cache["spo2"] = (g, h, s)
    return bvp, spo2, cache


def model_forward(face_clip, finger_clip, params, config):
    bvp, spo2, _ = forward(params, config, face_clip, finger_clip)
    return bvp, spo2


def zero_grads(params):
    return {k: np.zeros_like(v) for k, v in params.tensors.items()}


def backward(params, config, cache, grad_bvp=None, grad_spo2=None, grads=None):
    """Accumulate d(loss)/d(param) into ``grads`` given output gradients.

    ``grad_bvp`` is d(loss)/d(bvp) per frame, ``grad_spo2`` the scalar
    d(loss)/d(spo2). Either may be ``None`` (treated as zero).
    """
    if grads is None:
        grads = zero_grads(params)
    feat = cache["feat"]
    gfeat = np.zeros_like(feat)
    if grad_bvp is not None:
        grad_bvp = np.asarray(grad_bvp, dtype=feat.dtype)
        pooled = feat.mean(axis=(2, 3))
        grads["bvp.weight"] += pooled @ grad_bvp
        grads["bvp.bias"] += grad_bvp.sum()
        hw = feat.shape[2] * feat.shape[3]
        gfeat += (np.outer(params["bvp.weight"], grad_bvp) / hw)[:, :, None, None]
    if grad_spo2 is not None and "spo2" in cache:
        g, h, s = cache["spo2"]
        go = float(grad_spo2) * SPO2_SPAN * s * (1.0 - s)
        grads["spo2.fc2.weight"] += go * h
        grads["spo2.fc2.bias"] += go
        gu = go * params["spo2.fc2.weight"] * (1.0 - h * h)
        grads["spo2.fc1.weight"] += np.outer(gu, g)
        grads["spo2.fc1.bias"] += gu
        gg = params["spo2.fc1.weight"].T @ gu
        gfeat += (gg / feat[0].size)[:, None, None, None]

    if config.streams is Streams.BOTH:
        feats = cache["feats"]
        if config.fusion_mode is FusionMode.SUM:
            gstream = {"face": gfeat, "finger": gfeat}
        else:
            stacked = np.concatenate([feats["face"], feats["finger"]], axis=0)
            C2 = stacked.shape[0]
            gf = gfeat.reshape(gfeat.shape[0], -1)
            grads["fusion.weight"] += gf @ stacked.reshape(C2, -1).T
            grads["fusion.bias"] += gf.sum(axis=1)
            gs = (params["fusion.weight"].T @ gf).reshape(stacked.shape)
            half = C2 // 2
            gstream = {"face": gs[:half], "finger": gs[half:]}
    else:
        gstream = {("face" if "face" in cache else "finger"): gfeat}
    for stream, gs in gstream.items():
        encoder_backward(gs, cache[stream], params, config, config.encoder_for(stream), grads)
    return grads
