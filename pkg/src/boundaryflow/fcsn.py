"""Fully convolutional Siamese encoder-decoder for two-frame boundary detection.

Both encoder branches and both decoder branches share one parameter set.
The encoder records its max-pooling indices; the decoder unpools with the
indices of its own branch, so the two predictions differ only through those
indices and the order in which the joint feature representation (JFR) is
presented (own frame first).
"""

from __future__ import annotations

import dataclasses
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import io as bfio
from .tensor import (DTYPE, LossWeights, ParamStore, PoolIndices, ShapeError, adam_step,
                     conv2d, conv2d_backward, deconv2d, deconv2d_backward, dropout_mask,
                     maxpool2x2, relu, softmax_channels, unpool2x2, gather2x2,
                     weighted_bce_loss)

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"FCSN"
CHECKPOINT_VERSION = 1


@dataclass
class FcsnConfig:
    """Architecture and training settings.

    The defaults describe the desk-scale network: VGG-style blocks, a 3x3
    "fc6" convolution producing the per-frame code, and a decoder made of a
    1x1 deconv, 5x5 deconvs with dropout and a 5x5 two-class head, at
    reduced widths.
    """

    in_channels: int = 3
    encoder_channels: Tuple[int, ...] = (16, 32, 64, 128)
    convs_per_block: Tuple[int, ...] = (2, 2, 2, 2)
    encoder_kernel: int = 3
    fc6_channels: int = 256
    fc6_kernel: int = 3
    decoder_channels: Tuple[int, ...] = (128, 64, 32, 16, 8)
    decoder_kernel: int = 5
    head_kernel: int = 5
    # initial logit offset of the boundary class; negative values start the
    # head near the background-heavy class prior
    boundary_prior: float = 0.0
    dropout: Tuple[float, ...] = (0.5, 0.5, 0.5, 0.5, 0.5)
    patch_size: Tuple[int, int] = (64, 64)
    lambda_boundary: float = 1.0
    lambda_background: float = 0.1
    lr: float = 1e-4
    batch_size: int = 1
    iterations: int = 2000
    seed: int = 0
    train_encoder: bool = True
    flip_augment: bool = True
    duplicate_frames: float = 0.0

    def __post_init__(self):
        for name in ("encoder_channels", "convs_per_block", "decoder_channels", "dropout",
                     "patch_size"):
            setattr(self, name, tuple(getattr(self, name)))
        self.validate()

    @property
    def n_pools(self) -> int:
        return len(self.encoder_channels)

    @property
    def jfr_channels(self) -> int:
        return 2 * self.fc6_channels

    @property
    def pool_factor(self) -> int:
        return 2 ** self.n_pools

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_boundary, self.lambda_background)

    def validate(self):
        p = self.n_pools
        if len(self.convs_per_block) != p:
            raise ValueError("convs_per_block needs one entry per encoder block")
        if len(self.decoder_channels) != p + 1:
            raise ValueError(
                f"decoder needs {p + 1} deconv layers for {p} pooling stages, "
                f"got {len(self.decoder_channels)}")
        for k in range(p):
            want = self.encoder_channels[p - 1 - k]
            if self.decoder_channels[k] != want:
                raise ValueError(
                    f"decoder layer {k} must output {want} channels to unpool with "
                    f"encoder block {p - 1 - k}, got {self.decoder_channels[k]}")
        if len(self.dropout) != len(self.decoder_channels):
            raise ValueError("one dropout rate per decoder layer required")
        if any(not 0 <= r < 1 for r in self.dropout):
            raise ValueError(f"dropout rates must lie in [0, 1): {self.dropout}")
        for k in (self.encoder_kernel, self.fc6_kernel, self.decoder_kernel, self.head_kernel):
            if k % 2 != 1:
                raise ValueError("all kernels must be odd so that padding preserves size")
        if self.lambda_boundary <= 0 or self.lambda_background <= 0:
            raise ValueError("loss weights must be positive")
        if not 0 <= self.duplicate_frames <= 1:
            raise ValueError("duplicate_frames is a probability")
        self.check_input_size(self.patch_size)
        # decoder output must come back to the input size
        h, w = self.patch_size
        for _ in range(p):
            h, w = h // 2, w // 2
        for _ in range(p):
            h, w = h * 2, w * 2
        if (h, w) != tuple(self.patch_size):
            raise ValueError("decoder does not restore the input size")

    def check_input_size(self, hw):
        f = self.pool_factor
        if hw[0] % f or hw[1] % f or hw[0] < f or hw[1] < f:
            raise ShapeError(
                f"input size {tuple(hw)} must be a positive multiple of {f} "
                f"({self.n_pools} pooling stages)")

    def shape_plan(self, hw=None) -> List[Tuple[str, Tuple[int, int, int]]]:
        """(layer name, (C, H, W) output) in forward order, without allocating."""
        h, w = hw or self.patch_size
        self.check_input_size((h, w))
        plan = []
        for b, (c, n) in enumerate(zip(self.encoder_channels, self.convs_per_block)):
            for i in range(n):
                plan.append((f"enc{b}_{i}", (c, h, w)))
            h, w = h // 2, w // 2
            plan.append((f"pool{b}", (c, h, w)))
        plan.append(("fc6", (self.fc6_channels, h, w)))
        plan.append(("jfr", (self.jfr_channels, h, w)))
        for k, c in enumerate(self.decoder_channels):
            plan.append((f"dec{k}", (c, h, w)))
            if k < self.n_pools:
                h, w = h * 2, w * 2
                plan.append((f"unpool{self.n_pools - 1 - k}", (c, h, w)))
        plan.append(("head", (2, h, w)))
        return plan

    # --- serialization -------------------------------------------------

    def to_dict(self) -> Dict[str, object]:
        return dataclasses.asdict(self)

    def to_kv(self) -> str:
        return bfio.format_kv(self.to_dict())

    @classmethod
    def from_kv(cls, text: str) -> "FcsnConfig":
        raw = bfio.parse_kv(text)
        return cls.from_strings(raw)

    @classmethod
    def from_strings(cls, raw: Dict[str, str]) -> "FcsnConfig":
        fields = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(raw) - set(fields))
        if unknown:
            raise ValueError(f"unknown config keys: {unknown}")
        kwargs = {}
        for name, text in raw.items():
            default = fields[name].default
            kwargs[name] = _parse_like(default, text, name)
        return cls(**kwargs)

    @classmethod
    def shallow(cls) -> "FcsnConfig":
        """One-pool desk network used for the trained acceptance model.

        Its receptive field matches 64x64 synthetic boundaries better than the
        four-block default, it accepts 8x8 inputs and it trains without
        dropout.
        """
        return cls(encoder_channels=(32,), convs_per_block=(2,), fc6_channels=128,
                   decoder_channels=(32, 32), dropout=(0.0, 0.0), boundary_prior=-3.0)

    @classmethod
    def full_scale(cls) -> "FcsnConfig":
        """VGG-16 through fc6 on 224x224 patches with the full-width decoder."""
        return cls(encoder_channels=(64, 128, 256, 512, 512),
                   convs_per_block=(2, 2, 3, 3, 3),
                   fc6_channels=4096,
                   decoder_channels=(512, 512, 256, 128, 64, 32),
                   dropout=(0.5,) * 6,
                   patch_size=(224, 224),
                   batch_size=8, iterations=30000, train_encoder=False)


def _parse_like(default, text, name):
    try:
        if isinstance(default, bool):
            if text.lower() not in ("true", "false", "1", "0"):
                raise ValueError(text)
            return text.lower() in ("true", "1")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            items = [s.strip() for s in text.split(",") if s.strip()]
            conv = float if isinstance(default[0], float) else int
            return tuple(conv(s) for s in items)
    except ValueError as exc:
        raise ValueError(f"config key {name!r}: cannot parse {text!r}") from exc
    return text


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def init_params(cfg: FcsnConfig, seed: int | None = None) -> Dict[str, np.ndarray]:
    """He fan-in initialization; biases are zero except the boundary prior."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    params = {}

    def conv(name, cin, cout, k):
        std = np.sqrt(2.0 / (cin * k * k))
        params[name + ".w"] = (rng.standard_normal((cout, cin, k, k)) * std).astype(DTYPE)
        params[name + ".b"] = np.zeros(cout, dtype=DTYPE)

    def deconv(name, cin, cout, k):
        std = np.sqrt(2.0 / (cin * k * k))
        params[name + ".w"] = (rng.standard_normal((cin, cout, k, k)) * std).astype(DTYPE)
        params[name + ".b"] = np.zeros(cout, dtype=DTYPE)

    cin = cfg.in_channels
    for b, (c, n) in enumerate(zip(cfg.encoder_channels, cfg.convs_per_block)):
        for i in range(n):
            conv(f"enc{b}_{i}", cin, c, cfg.encoder_kernel)
            cin = c
    conv("fc6", cin, cfg.fc6_channels, cfg.fc6_kernel)
    cin = cfg.jfr_channels
    for k, c in enumerate(cfg.decoder_channels):
        deconv(f"dec{k}", cin, c, 1 if k == 0 else cfg.decoder_kernel)
        cin = c
    deconv("head", cin, 2, cfg.head_kernel)
    params["head.w"] *= DTYPE(0.5)
    params["head.b"][1] = cfg.boundary_prior
    return params


def encoder_param_names(cfg: FcsnConfig) -> List[str]:
    names = []
    for b, n in enumerate(cfg.convs_per_block):
        for i in range(n):
            names += [f"enc{b}_{i}.w", f"enc{b}_{i}.b"]
    return names + ["fc6.w", "fc6.b"]


def decoder_param_names(cfg: FcsnConfig) -> List[str]:
    names = []
    for k in range(len(cfg.decoder_channels)):
        names += [f"dec{k}.w", f"dec{k}.b"]
    return names + ["head.w", "head.b"]


# ---------------------------------------------------------------------------
# caches
# ---------------------------------------------------------------------------


@dataclass
class EncoderCache:
    inputs: List[np.ndarray]      # input of every conv, forward order
    outputs: List[np.ndarray]     # post-ReLU output of every conv
    indices: List[PoolIndices]    # one per block


@dataclass
class DecoderCache:
    inputs: List[np.ndarray]      # input of every deconv (JFR view or unpooled map)
    outputs: List[np.ndarray]     # post-ReLU output of every deconv
    masks: List[Optional[np.ndarray]]
    head_input: np.ndarray = None
    logits: np.ndarray = None
    prob: np.ndarray = None       # (N, 1, H, W) boundary-class probability


@dataclass
class BranchCache:
    """Everything one Siamese branch produced during a forward pass."""

    encoder: EncoderCache
    decoder: DecoderCache
    indices: List[PoolIndices]
    own_first: bool               # True when the JFR view is (own, other)

    @property
    def boundary(self) -> np.ndarray:
        return self.decoder.prob[:, 0]


@dataclass
class PairOutput:
    pred_a: np.ndarray            # (N, H, W)
    pred_b: np.ndarray
    cache_a: BranchCache
    cache_b: BranchCache
    jfr: np.ndarray               # (N, 2C, h, w): features of A then B


def as_input(image) -> np.ndarray:
    """Accept (H, W, 3) uint8/float images or (N, C, H, W) float arrays."""
    x = np.asarray(image)
    if x.ndim == 3 and x.shape[2] in (1, 3):
        scale = 255.0 if x.dtype == np.uint8 else 1.0
        x = (x.astype(np.float32) / scale - 0.5).transpose(2, 0, 1)[None]
    elif x.ndim == 4:
        x = x.astype(np.float32, copy=False)
    else:
        raise ShapeError(f"cannot interpret image of shape {x.shape}")
    return np.ascontiguousarray(x, dtype=DTYPE)


def fuse(feat_a: np.ndarray, feat_b: np.ndarray) -> np.ndarray:
    """Channel concatenation, A first then B."""
    if feat_a.shape != feat_b.shape:
        raise ShapeError(f"cannot fuse features {feat_a.shape} and {feat_b.shape}")
    return np.concatenate([feat_a, feat_b], axis=1)


def swap_halves(x: np.ndarray) -> np.ndarray:
    """Exchange the two channel halves of a JFR-shaped tensor."""
    c = x.shape[1] // 2
    return np.concatenate([x[:, c:], x[:, :c]], axis=1)


class TrainingAborted(RuntimeError):
    """Raised when a step produces a non-finite loss; parameters are untouched."""


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------


class Fcsn:
    """Siamese network with a single shared parameter store."""

    def __init__(self, config: FcsnConfig | None = None,
                 store: ParamStore | None = None):
        self.config = config or FcsnConfig()
        self.store = store or ParamStore(init_params(self.config))
        self._rng = np.random.default_rng(self.config.seed + 1)
        missing = set(init_params_names(self.config)) - set(self.store.params)
        if missing:
            raise ValueError(f"parameter store lacks {sorted(missing)}")

    @property
    def params(self) -> Dict[str, np.ndarray]:
        return self.store.params

    def cast(self, dtype) -> "Fcsn":
        """Convert parameters and optimizer moments to ``dtype`` in place."""
        for d in (self.store.params, self.store.m, self.store.v):
            for k in d:
                d[k] = d[k].astype(dtype)
        return self

    # --- encoder -------------------------------------------------------

    def encode(self, image) -> Tuple[np.ndarray, List[PoolIndices], EncoderCache]:
        cfg, p = self.config, self.params
        x = as_input(image)
        cfg.check_input_size(x.shape[2:])
        pad = cfg.encoder_kernel // 2
        inputs, outputs, indices = [], [], []
        for b, n in enumerate(cfg.convs_per_block):
            for i in range(n):
                inputs.append(x)
                x = relu(conv2d(x, p[f"enc{b}_{i}.w"], p[f"enc{b}_{i}.b"], 1, pad))
                outputs.append(x)
            x, idx = maxpool2x2(x)
            indices.append(idx)
        inputs.append(x)
        x = relu(conv2d(x, p["fc6.w"], p["fc6.b"], 1, cfg.fc6_kernel // 2))
        outputs.append(x)
        return x, indices, EncoderCache(inputs, outputs, indices)

    # --- decoder -------------------------------------------------------

    def decode(self, jfr: np.ndarray, indices: Sequence[PoolIndices], mode: str = "eval",
               rng: np.random.Generator | None = None) -> Tuple[np.ndarray, DecoderCache]:
        """Decode a JFR view into the boundary probability map (N, H, W)."""
        cfg, p = self.config, self.params
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        if len(indices) != cfg.n_pools:
            raise ShapeError(f"expected {cfg.n_pools} pooling index sets, got {len(indices)}")
        if jfr.shape[1] != cfg.jfr_channels:
            raise ShapeError(f"JFR has {jfr.shape[1]} channels, config expects {cfg.jfr_channels}")
        rng = rng or self._rng
        d = jfr
        cache = DecoderCache([], [], [])
        for k in range(len(cfg.decoder_channels)):
            cache.inputs.append(d)
            kk = 1 if k == 0 else cfg.decoder_kernel
            r = relu(deconv2d(d, p[f"dec{k}.w"], p[f"dec{k}.b"], 1, kk // 2))
            cache.outputs.append(r)
            if mode == "train" and cfg.dropout[k] > 0:
                m = dropout_mask(r.shape, cfg.dropout[k], rng)
                d = r * m
            else:
                m = None
                d = r
            cache.masks.append(m)
            if k < cfg.n_pools:
                idx = indices[cfg.n_pools - 1 - k]
                if idx.pooled_shape[1:] != d.shape[1:]:
                    raise ShapeError(
                        f"pooling indices {idx.pooled_shape} do not fit decoder map {d.shape}")
                d = unpool2x2(d, idx)
        cache.head_input = d
        cache.logits = deconv2d(d, p["head.w"], p["head.b"], 1, cfg.head_kernel // 2)
        cache.prob = softmax_channels(cache.logits)[:, 1:2]
        return cache.prob[:, 0], cache

    # --- pair ----------------------------------------------------------

    def forward_pair(self, img_a, img_b, mode: str = "eval",
                     rng: np.random.Generator | None = None) -> PairOutput:
        xa, xb = as_input(img_a), as_input(img_b)
        if xa.shape != xb.shape:
            raise ShapeError(f"frame sizes differ: {xa.shape} vs {xb.shape}")
        fa, ia, ea = self.encode(xa)
        fb, ib, eb = self.encode(xb)
        jfr = fuse(fa, fb)
        pa, da = self.decode(jfr, ia, mode, rng)
        pb, db = self.decode(fuse(fb, fa), ib, mode, rng)
        return PairOutput(pa, pb, BranchCache(ea, da, ia, True), BranchCache(eb, db, ib, True), jfr)

    def predict(self, img_a, img_b) -> Tuple[np.ndarray, np.ndarray]:
        out = self.forward_pair(img_a, img_b)
        return out.pred_a[0], out.pred_b[0]

    # --- training ------------------------------------------------------

    def loss_and_grads(self, img_a, img_b, target, mode: str = "train",
                       rng: np.random.Generator | None = None
                       ) -> Tuple[float, Dict[str, np.ndarray]]:
        """One-side loss on branch A and gradients of every parameter."""
        cfg, p = self.config, self.params
        xa, xb = as_input(img_a), as_input(img_b)
        target = np.asarray(target, dtype=DTYPE).reshape(xa.shape[0], *xa.shape[2:])
        n = xa.shape[0]
        # both frames encoded in one batch; branches are independent rows
        feat, idx, enc = self.encode(np.concatenate([xa, xb]))
        fa, fb = feat[:n], feat[n:]
        ia = [PoolIndices(i.flat[:n], (n,) + i.input_shape[1:]) for i in idx]
        prob, dec = self.decode(fuse(fa, fb), ia, mode, rng)
        loss, dprob = weighted_bce_loss(prob, target, cfg.loss_weights)
        if not np.isfinite(loss):
            return loss, {}
        grads = {name: np.zeros_like(v) for name, v in p.items()}
        pr = dec.prob[:, 0]
        dz1 = (dprob * pr * (1 - pr))[:, None]
        dlogits = np.concatenate([-dz1, dz1], axis=1).astype(DTYPE)
        d, grads["head.w"], grads["head.b"] = deconv2d_backward(
            dlogits, dec.head_input, p["head.w"], 1, cfg.head_kernel // 2)
        for k in reversed(range(len(cfg.decoder_channels))):
            if k < cfg.n_pools:
                d = gather2x2(d, ia[cfg.n_pools - 1 - k])
            if dec.masks[k] is not None:
                d = d * dec.masks[k]
            d = np.where(dec.outputs[k] > 0, d, 0).astype(DTYPE)
            kk = 1 if k == 0 else cfg.decoder_kernel
            d, grads[f"dec{k}.w"], grads[f"dec{k}.b"] = deconv2d_backward(
                d, dec.inputs[k], p[f"dec{k}.w"], 1, kk // 2)
        if cfg.train_encoder:
            c = cfg.fc6_channels
            dfeat = np.concatenate([d[:, :c], d[:, c:]])
            self._encoder_backward(dfeat, enc, grads)
        return loss, grads

    def _encoder_backward(self, dfeat, enc: EncoderCache, grads):
        cfg, p = self.config, self.params
        d = np.where(enc.outputs[-1] > 0, dfeat, 0).astype(DTYPE)
        d, grads["fc6.w"], grads["fc6.b"] = conv2d_backward(
            d, enc.inputs[-1], p["fc6.w"], 1, cfg.fc6_kernel // 2)
        pad = cfg.encoder_kernel // 2
        layer = len(enc.inputs) - 2
        for b in reversed(range(cfg.n_pools)):
            d = unpool2x2(d, enc.indices[b])
            for i in reversed(range(cfg.convs_per_block[b])):
                d = np.where(enc.outputs[layer] > 0, d, 0).astype(DTYPE)
                d, grads[f"enc{b}_{i}.w"], grads[f"enc{b}_{i}.b"] = conv2d_backward(
                    d, enc.inputs[layer], p[f"enc{b}_{i}.w"], 1, pad)
                layer -= 1

    def train_step(self, img_a, img_b, target, rng: np.random.Generator | None = None) -> float:
        """Compute the one-side loss, then apply one Adam update."""
        loss, grads = self.loss_and_grads(img_a, img_b, target, "train", rng)
        if not np.isfinite(loss):
            raise TrainingAborted(f"non-finite loss at step {self.store.t + 1}")
        adam_step(self.store, grads, self.config.lr)
        return loss

    # --- checkpoints ---------------------------------------------------

    def save(self, path, include_optimizer: bool = True):
        save_checkpoint(self, path, include_optimizer)

    @classmethod
    def load(cls, path) -> "Fcsn":
        return load_checkpoint(path)


def init_params_names(cfg: FcsnConfig) -> List[str]:
    return encoder_param_names(cfg) + decoder_param_names(cfg)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainingLog:
    losses: List[float] = field(default_factory=list)

    def smoothed(self, window: int = 100) -> np.ndarray:
        x = np.asarray(self.losses, dtype=np.float64)
        if len(x) < window:
            window = max(1, len(x))
        kernel = np.ones(window) / window
        return np.convolve(x, kernel, mode="valid")


def train(net: Fcsn, dataset: Sequence, iterations: int | None = None,
          log_every: int = 0, callback=None) -> TrainingLog:
    """Train on ``dataset`` items exposing ``frame_a``, ``frame_b``, ``boundary_a``.

    Sampling, flips, dropout and frame duplication all draw from one
    generator seeded by the config, so a run is reproducible.
    """
    cfg = net.config
    if len(dataset) == 0:
        raise ValueError("training set is empty")
    iterations = cfg.iterations if iterations is None else iterations
    rng = np.random.default_rng([cfg.seed, net.store.t])
    history = TrainingLog()
    for it in range(iterations):
        pick = rng.integers(0, len(dataset), size=cfg.batch_size)
        xa, xb, ys = [], [], []
        for j in pick:
            item = dataset[int(j)]
            a, b, y = item.frame_a, item.frame_b, item.boundary_a
            if rng.random() < cfg.duplicate_frames:
                b = a
            if cfg.flip_augment and rng.random() < 0.5:
                a, b, y = a[:, ::-1], b[:, ::-1], y[:, ::-1]
            xa.append(as_input(np.ascontiguousarray(a)))
            xb.append(as_input(np.ascontiguousarray(b)))
            ys.append(np.asarray(y, dtype=DTYPE))
        loss = net.train_step(np.concatenate(xa), np.concatenate(xb), np.stack(ys), rng)
        history.losses.append(loss)
        if log_every and (it + 1) % log_every == 0:
            log.info("step %d loss %.5f", net.store.t, np.mean(history.losses[-log_every:]))
        if callback is not None:
            callback(net, loss)
    return history


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------


def checkpoint_bytes(net: Fcsn, include_optimizer: bool = True) -> bytes:
    """Serialize: magic, version, config blob, step, then named float32 records."""
    blob = net.config.to_kv().encode()
    records = [(k, v) for k, v in net.params.items()]
    if include_optimizer:
        records += [(f"adam.m.{k}", v) for k, v in net.store.m.items()]
        records += [(f"adam.v.{k}", v) for k, v in net.store.v.items()]
    out = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION),
           struct.pack("<I", len(blob)), blob,
           struct.pack("<QI", net.store.t, len(records))]
    for name, arr in records:
        nb = name.encode()
        out.append(struct.pack("<I", len(nb)) + nb)
        out.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


def save_checkpoint(net: Fcsn, path, include_optimizer: bool = True):
    bfio.atomic_write_bytes(path, checkpoint_bytes(net, include_optimizer))


def load_checkpoint(path) -> Fcsn:
    data = Path(path).read_bytes()
    return checkpoint_from_bytes(data, str(path))


def checkpoint_from_bytes(data: bytes, where: str = "<bytes>") -> Fcsn:
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{where}: not an FCSN checkpoint")
    pos = 4
    (version,) = struct.unpack_from("<I", data, pos)
    pos += 4
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{where}: checkpoint version {version}, "
                         f"this build reads version {CHECKPOINT_VERSION}")
    (blen,) = struct.unpack_from("<I", data, pos)
    pos += 4
    cfg = FcsnConfig.from_kv(data[pos:pos + blen].decode())
    pos += blen
    t, count = struct.unpack_from("<QI", data, pos)
    pos += 12
    params, m, v = {}, {}, {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos:pos + nlen].decode()
        pos += nlen
        (rank,) = struct.unpack_from("<I", data, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        size = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(shape)
        pos += 4 * size
        arr = arr.astype(DTYPE)
        if name.startswith("adam.m."):
            m[name[7:]] = arr
        elif name.startswith("adam.v."):
            v[name[7:]] = arr
        else:
            params[name] = arr
    if pos != len(data):
        raise ValueError(f"{where}: {len(data) - pos} trailing bytes")
    store = ParamStore(params, m, v, t)
    return Fcsn(cfg, store)
