"""A small fully-differentiable dual-head model with hand-written backprop.

Topology: a shared convolutional extractor applied independently to the
eight slices of a bundle, element-wise mean pooling into one scan-level
feature, then two heads behind independent dropout: a 1-logit detection
head and an n-source classification head. All math is float64; gradients
are exact and checked against finite differences in the test suite.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import N_SOURCES
from .objective import (
    LossBreakdown,
    SourcePriors,
    bce,
    bce_grad,
    logit_adjusted_ce,
    logit_adjusted_ce_grad,
    standard_ce,
    standard_ce_grad,
)

CHECKPOINT_MAGIC = b"MSCK"
CHECKPOINT_VERSION = 1
N_SLICES = 8


@dataclass(frozen=True)
class ModelConfig:
    resolution: int = 64
    feature_dim: int = 128
    widths: tuple[int, ...] = (8, 16, 32)
    n_sources: int = N_SOURCES
    dropout: float = 0.3

    def __post_init__(self):
        stride = 2 ** len(self.widths)
        if self.resolution % stride != 0 or self.resolution < stride:
            raise ValueError(
                f"resolution {self.resolution} must be a positive multiple of {stride}"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")


@dataclass
class ModelParams:
    """All trainable tensors, in the fixed flattening order of tensors()."""

    conv_w: list[np.ndarray]
    conv_b: list[np.ndarray]
    proj_w: np.ndarray
    proj_b: np.ndarray
    covid_w: np.ndarray
    covid_b: np.ndarray
    src_w: np.ndarray
    src_b: np.ndarray
    config: ModelConfig = field(default_factory=ModelConfig)

    def tensors(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.conv_w, self.conv_b):
            out += [w, b]
        out += [self.proj_w, self.proj_b, self.covid_w, self.covid_b, self.src_w, self.src_b]
        return out

    @classmethod
    def from_tensors(cls, config: ModelConfig, tensors: list[np.ndarray]) -> "ModelParams":
        n = len(config.widths)
        conv_w = [tensors[2 * i] for i in range(n)]
        conv_b = [tensors[2 * i + 1] for i in range(n)]
        proj_w, proj_b, covid_w, covid_b, src_w, src_b = tensors[2 * n :]
        return cls(conv_w, conv_b, proj_w, proj_b, covid_w, covid_b, src_w, src_b, config)


@dataclass
class ScanOutput:
    covid_logit: float
    source_logits: np.ndarray
    pooled_feature: np.ndarray


@dataclass(frozen=True)
class AdamHyper:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 5e-4


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def init_like(cls, params: ModelParams) -> "AdamState":
        tensors = params.tensors()
        return cls(m=[np.zeros_like(t) for t in tensors], v=[np.zeros_like(t) for t in tensors])


def _glorot(rng: np.random.Generator, shape: tuple, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def init_params(config: ModelConfig, rng: np.random.Generator) -> ModelParams:
    """Uniform +-sqrt(6/(fan_in+fan_out)) weights, zero biases."""
    conv_w, conv_b = [], []
    c_in = 1
    for c_out in config.widths:
        conv_w.append(_glorot(rng, (c_out, c_in, 3, 3), c_in * 9, c_out * 9))
        conv_b.append(np.zeros(c_out))
        c_in = c_out
    d = config.feature_dim
    proj_w = _glorot(rng, (d, c_in), c_in, d)
    covid_w = _glorot(rng, (d,), d, 1)
    src_w = _glorot(rng, (config.n_sources, d), d, config.n_sources)
    return ModelParams(
        conv_w=conv_w,
        conv_b=conv_b,
        proj_w=proj_w,
        proj_b=np.zeros(d),
        covid_w=covid_w,
        covid_b=np.zeros(()),
        src_w=src_w,
        src_b=np.zeros(config.n_sources),
        config=config,
    )


def _im2col(x: np.ndarray) -> np.ndarray:
    """(N, C, H, W) -> (N, H*W, C*9) patches of the zero-padded input."""
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n, h * w, c * 9)


def _conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    n, _, h, width = x.shape
    c_out = w.shape[0]
    cols = _im2col(x)
    out = cols @ w.reshape(c_out, -1).T + b
    return out.transpose(0, 2, 1).reshape(n, c_out, h, width), cols


def _conv_backward_x(dout: np.ndarray, w: np.ndarray) -> np.ndarray:
    # Gradient of a same-padded stride-1 cross-correlation: correlate dout
    # with the channel-transposed, spatially flipped kernel.
    w_t = np.ascontiguousarray(w.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
    dx, _ = _conv_forward(dout, w_t, np.zeros(w_t.shape[0]))
    return dx


def _avgpool2(x: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    return x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def _avgpool2_back(dout: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(dout, 2, axis=2), 2, axis=3) / 4.0


def mean_pool(features: np.ndarray) -> np.ndarray:
    """Element-wise mean of exactly eight equal-length feature vectors."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] != N_SLICES:
        raise ValueError(f"expected {N_SLICES} feature vectors, got shape {features.shape}")
    return features.mean(axis=0)


def forward_batch(
    params: ModelParams,
    images: np.ndarray,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
    dropout_masks: tuple[np.ndarray, np.ndarray] | None = None,
):
    """Forward pass over a batch of bundles.

    images: (B, 8, R, R). Returns (covid_logits (B,), source_logits (B, S),
    pooled (B, D), cache) where cache carries everything backward needs,
    including the dropout masks sampled here.
    """
    cfg = params.config
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    b, n_slices, h, w = images.shape
    if n_slices != N_SLICES or h != cfg.resolution or w != cfg.resolution:
        raise ValueError(
            f"expected (B, {N_SLICES}, {cfg.resolution}, {cfg.resolution}) images, got {images.shape}"
        )
    x = images.reshape(b * N_SLICES, 1, h, w)
    cache: dict = {"layers": [], "batch": b}
    a = x
    for w_l, b_l in zip(params.conv_w, params.conv_b):
        z, cols = _conv_forward(a, w_l, b_l)
        r = np.maximum(z, 0.0)
        a = _avgpool2(r)
        cache["layers"].append({"cols": cols, "relu_mask": z > 0})
    cache["gap_shape"] = a.shape
    gap = a.mean(axis=(2, 3))
    feat = gap @ params.proj_w.T + params.proj_b
    pooled = feat.reshape(b, N_SLICES, cfg.feature_dim).mean(axis=1)

    if mode == "train" and cfg.dropout > 0.0:
        if dropout_masks is None:
            if rng is None:
                raise ValueError("train mode requires an rng (or explicit dropout masks)")
            keep = 1.0 - cfg.dropout
            u = rng.random((2, b, cfg.feature_dim))
            dropout_masks = ((u[0] < keep) / keep, (u[1] < keep) / keep)
    elif mode == "eval":
        dropout_masks = None
    m_c = dropout_masks[0] if dropout_masks is not None else np.ones_like(pooled)
    m_s = dropout_masks[1] if dropout_masks is not None else np.ones_like(pooled)

    hc = pooled * m_c
    hs = pooled * m_s
    covid_logits = hc @ params.covid_w + float(params.covid_b)
    source_logits = hs @ params.src_w.T + params.src_b
    cache.update({"gap": gap, "pooled": pooled, "m_c": m_c, "m_s": m_s, "hc": hc, "hs": hs})
    return covid_logits, source_logits, pooled, cache


def forward_scan(
    params: ModelParams,
    bundle_images: np.ndarray | list,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
) -> ScanOutput:
    """Forward a single bundle (list or array of 8 slices)."""
    images = np.stack(list(bundle_images)) if isinstance(bundle_images, list) else bundle_images
    z, s, pooled, _ = forward_batch(params, images[None] if images.ndim == 3 else images, mode, rng)
    return ScanOutput(covid_logit=float(z[0]), source_logits=s[0], pooled_feature=pooled[0])


@dataclass(frozen=True)
class LossSpec:
    """Which objective the batch optimizes: bce_only, mt_ce, or mt_la."""

    kind: str = "bce_only"
    gamma: float = 0.0
    priors: SourcePriors | None = None

    def __post_init__(self):
        if self.kind not in ("bce_only", "mt_ce", "mt_la"):
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if self.kind == "mt_la" and self.priors is None:
            raise ValueError("mt_la requires source priors")


def batch_loss(
    covid_logits: np.ndarray,
    source_logits: np.ndarray,
    labels: np.ndarray,
    sources: np.ndarray,
    spec: LossSpec,
) -> LossBreakdown:
    """Mean combined loss over the batch."""
    det = np.mean([bce(z, y) for z, y in zip(covid_logits, labels)])
    if spec.kind == "bce_only":
        src = 0.0
    elif spec.kind == "mt_ce":
        src = np.mean([standard_ce(f, d) for f, d in zip(source_logits, sources)])
    else:
        src = np.mean([logit_adjusted_ce(f, d, spec.priors) for f, d in zip(source_logits, sources)])
    gamma = 0.0 if spec.kind == "bce_only" else spec.gamma
    return LossBreakdown(float(det), float(src), gamma, float(det + gamma * src))


def backward(
    params: ModelParams,
    images: np.ndarray,
    labels: np.ndarray,
    sources: np.ndarray,
    spec: LossSpec,
    mode: str = "train",
    rng: np.random.Generator | None = None,
    scan_ids: list[str] | None = None,
    dropout_masks: tuple[np.ndarray, np.ndarray] | None = None,
) -> tuple[LossBreakdown, list[np.ndarray]]:
    """Loss and exact gradients of the mean combined objective.

    Dropout masks sampled in the forward pass are reused in the backward
    pass. Gradients are returned in ModelParams.tensors() order.
    """
    cfg = params.config
    labels = np.asarray(labels)
    sources = np.asarray(sources)
    b = len(labels)
    covid_logits, source_logits, _, cache = forward_batch(
        params, images, mode=mode, rng=rng, dropout_masks=dropout_masks
    )
    breakdown = batch_loss(covid_logits, source_logits, labels, sources, spec)
    if not np.isfinite(breakdown.total):
        offenders = [
            (scan_ids[i] if scan_ids else f"batch[{i}]")
            for i in range(b)
            if not np.isfinite(covid_logits[i]) or not np.all(np.isfinite(source_logits[i]))
        ]
        raise FloatingPointError(f"non-finite loss (scans: {offenders or 'unknown'})")

    dz = np.array([bce_grad(z, y) for z, y in zip(covid_logits, labels)]) / b
    gamma = 0.0 if spec.kind == "bce_only" else spec.gamma
    if gamma == 0.0:
        ds = np.zeros_like(source_logits)
    elif spec.kind == "mt_ce":
        ds = np.stack([standard_ce_grad(f, d) for f, d in zip(source_logits, sources)]) * (gamma / b)
    else:
        ds = np.stack(
            [logit_adjusted_ce_grad(f, d, spec.priors) for f, d in zip(source_logits, sources)]
        ) * (gamma / b)

    hc, hs, m_c, m_s = cache["hc"], cache["hs"], cache["m_c"], cache["m_s"]
    d_covid_w = hc.T @ dz
    d_covid_b = np.array(dz.sum())
    d_src_w = ds.T @ hs
    d_src_b = ds.sum(axis=0)
    d_pooled = dz[:, None] * params.covid_w[None, :] * m_c + (ds @ params.src_w) * m_s
    d_feat = np.repeat(d_pooled / N_SLICES, N_SLICES, axis=0)
    d_proj_w = d_feat.T @ cache["gap"]
    d_proj_b = d_feat.sum(axis=0)
    d_gap = d_feat @ params.proj_w

    n, c, gh, gw = cache["gap_shape"]
    d = np.broadcast_to(d_gap[:, :, None, None] / (gh * gw), cache["gap_shape"]).copy()
    d_conv_w: list[np.ndarray] = [None] * len(params.conv_w)
    d_conv_b: list[np.ndarray] = [None] * len(params.conv_w)
    for layer_idx in range(len(params.conv_w) - 1, -1, -1):
        layer = cache["layers"][layer_idx]
        d = _avgpool2_back(d)
        d = d * layer["relu_mask"]
        n_, c_out, h_, w_ = d.shape
        dflat = d.reshape(n_, c_out, h_ * w_).transpose(0, 2, 1)
        dw = np.tensordot(dflat, layer["cols"], axes=([0, 1], [0, 1]))
        d_conv_w[layer_idx] = dw.reshape(params.conv_w[layer_idx].shape)
        d_conv_b[layer_idx] = d.sum(axis=(0, 2, 3))
        if layer_idx > 0:
            d = _conv_backward_x(d, params.conv_w[layer_idx])

    grads: list[np.ndarray] = []
    for dw, db in zip(d_conv_w, d_conv_b):
        grads += [dw, db]
    grads += [d_proj_w, d_proj_b, d_covid_w, d_covid_b, d_src_w, d_src_b]
    return breakdown, grads


def adam_step(
    params: ModelParams,
    grads: list[np.ndarray],
    state: AdamState,
    hyper: AdamHyper,
    trainable: list[bool] | None = None,
) -> tuple[ModelParams, AdamState]:
    """Classical Adam with bias correction and coupled weight decay.

    Weight decay is added to the gradient before the moment updates. Frozen
    tensors (trainable[i] False) are left untouched, decay included.
    """
    tensors = params.tensors()
    t = state.t + 1
    new_p, new_m, new_v = [], [], []
    for i, (p, g) in enumerate(zip(tensors, grads)):
        if trainable is not None and not trainable[i]:
            new_p.append(p.copy())
            new_m.append(state.m[i].copy())
            new_v.append(state.v[i].copy())
            continue
        g = g + hyper.weight_decay * p
        m = hyper.beta1 * state.m[i] + (1.0 - hyper.beta1) * g
        v = hyper.beta2 * state.v[i] + (1.0 - hyper.beta2) * g * g
        m_hat = m / (1.0 - hyper.beta1**t)
        v_hat = v / (1.0 - hyper.beta2**t)
        new_p.append(p - hyper.lr * m_hat / (np.sqrt(v_hat) + hyper.eps))
        new_m.append(m)
        new_v.append(v)
    return (
        ModelParams.from_tensors(params.config, new_p),
        AdamState(m=new_m, v=new_v, t=t),
    )


@dataclass(frozen=True)
class AugmentConfig:
    flip_p: float = 0.5
    jitter_p: float = 0.5
    jitter_limit: float = 0.2
    cutout_p: float = 0.2
    cutout_max_holes: int = 8


def augment(slice_: np.ndarray, rng: np.random.Generator, config: AugmentConfig = AugmentConfig()) -> np.ndarray:
    """Train-time per-slice augmentation.

    Horizontal flip (p=0.5), joint brightness/contrast jitter in +-0.2
    (p=0.5, clamped to [0, 1]), and coarse dropout of up to 8 squares of
    side resolution/8 filled with 0 (p=0.2).
    """
    out = slice_.copy()
    if config.flip_p > 0 and rng.random() < config.flip_p:
        out = out[:, ::-1].copy()
    if config.jitter_p > 0 and rng.random() < config.jitter_p:
        brightness = rng.uniform(-config.jitter_limit, config.jitter_limit)
        contrast = rng.uniform(-config.jitter_limit, config.jitter_limit)
        out = np.clip(out * (1.0 + contrast) + brightness, 0.0, 1.0)
    if config.cutout_p > 0 and rng.random() < config.cutout_p:
        h, w = out.shape
        side = max(1, h // 8)
        n_holes = int(rng.integers(1, config.cutout_max_holes + 1))
        for _ in range(n_holes):
            y = int(rng.integers(0, h - side + 1))
            x = int(rng.integers(0, w - side + 1))
            out[y : y + side, x : x + side] = 0.0
    return out


def hflip(slice_: np.ndarray) -> np.ndarray:
    return slice_[:, ::-1].copy()


def save_checkpoint(params: ModelParams, path: str | Path) -> None:
    """MSCK | version | resolution | D | n_sources | widths | f64-LE tensors."""
    cfg = params.config
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IIIII", CHECKPOINT_VERSION, cfg.resolution, cfg.feature_dim, cfg.n_sources, len(cfg.widths)))
        fh.write(struct.pack(f"<{len(cfg.widths)}I", *cfg.widths))
        for tensor in params.tensors():
            fh.write(np.ascontiguousarray(tensor, dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> ModelParams:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"not a checkpoint file: {path}")
    version, resolution, d, n_sources, n_widths = struct.unpack("<IIIII", data[4:24])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    widths = struct.unpack(f"<{n_widths}I", data[24 : 24 + 4 * n_widths])
    cfg = ModelConfig(resolution=resolution, feature_dim=d, widths=tuple(widths), n_sources=n_sources)
    shapes = []
    c_in = 1
    for c_out in widths:
        shapes += [(c_out, c_in, 3, 3), (c_out,)]
        c_in = c_out
    shapes += [(d, c_in), (d,), (d,), (), (n_sources, d), (n_sources,)]
    offset = 24 + 4 * n_widths
    tensors = []
    for shape in shapes:
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(data):
            raise ValueError(f"corrupt checkpoint: {path}")
        tensors.append(np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(shape).copy())
        offset = end
    if offset != len(data):
        raise ValueError(f"corrupt checkpoint (trailing bytes): {path}")
    return ModelParams.from_tensors(cfg, tensors)
