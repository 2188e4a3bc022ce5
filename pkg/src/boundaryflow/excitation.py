"""Winner-take-all relevance propagation through the Siamese decoders.

A parent neuron n hands its probability mass to its children m in
proportion to ``max(w_mn, 0) * a_m``. Starting from boundary pixels in one
frame, mass flows down that frame's decoder to the joint feature code and
then up the other frame's decoder, giving an attention map over the other
frame. Every map is linear in the seed, so seeds are handled per pixel and
batched along the leading axis.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import numpy as np

from .fcsn import BranchCache, Fcsn, PairOutput, swap_halves
from .tensor import DTYPE, ShapeError, conv2d, deconv2d, gather2x2, unpool2x2

log = logging.getLogger(__name__)

SEED_CHUNK = 64


# ---------------------------------------------------------------------------
# single-layer rules
# ---------------------------------------------------------------------------


def _safe_ratio(p, z, stats=None, where=""):
    """p / z with zero where z == 0; dropped mass is tallied in ``stats``."""
    nz = z > 0
    out = np.divide(p, z, out=np.zeros(np.broadcast_shapes(p.shape, z.shape), dtype=p.dtype),
                    where=nz)
    if stats is not None:
        lost = float(np.sum(np.where(nz, 0, p), dtype=np.float64))
        if lost > 0:
            stats[where] = stats.get(where, 0.0) + lost
    return out


def propagate_dense(p_parent: np.ndarray, w: np.ndarray, a_child: np.ndarray,
                    stats: Dict[str, float] | None = None) -> np.ndarray:
    """Relevance rule for a fully connected layer.

    ``w`` is (parents, children); ``p_parent`` is (..., parents) and
    ``a_child`` is (children,). Returns (..., children).
    """
    wp = np.maximum(np.asarray(w, dtype=np.float64), 0)
    a = np.asarray(a_child, dtype=np.float64)
    z = wp @ a
    return a * (_safe_ratio(np.asarray(p_parent, dtype=np.float64), z, stats, "dense") @ wp)


def propagate_conv_down(p_out: np.ndarray, a_in: np.ndarray, w: np.ndarray, pad: int,
                        transposed: bool, stats=None, where="") -> np.ndarray:
    """Mass from a (de)convolution's outputs down to its inputs.

    Parents are output neurons, children are the inputs ``a_in``. Weights
    use the layer's own layout: (O, C, k, k) for a convolution and
    (I, O, k, k) when ``transposed``.
    """
    wp = np.maximum(w, 0).astype(DTYPE)
    fwd, adj = (deconv2d, conv2d) if transposed else (conv2d, deconv2d)
    z = fwd(a_in, wp, None, 1, pad)
    return a_in * adj(_safe_ratio(p_out, z, stats, where), wp, None, 1, pad)


def propagate_conv_up(p_in: np.ndarray, a_out: np.ndarray, w: np.ndarray, pad: int,
                      transposed: bool, stats=None, where="") -> np.ndarray:
    """Mass from a (de)convolution's inputs up to its outputs (reversed roles)."""
    wp = np.maximum(w, 0).astype(DTYPE)
    fwd, adj = (deconv2d, conv2d) if transposed else (conv2d, deconv2d)
    z = adj(a_out, wp, None, 1, pad)
    return a_out * fwd(_safe_ratio(p_in, z, stats, where), wp, None, 1, pad)


class _ConvRule:
    """Relevance rule with the denominator computed once and reused across seeds."""

    def __init__(self, w, pad, transposed, child, leg):
        self.wp = np.maximum(w, 0).astype(DTYPE)
        self.pad = pad
        self.child = child
        fwd, adj = (deconv2d, conv2d) if transposed else (conv2d, deconv2d)
        if leg == "down":
            self.z = fwd(child, self.wp, None, 1, pad)
            self.spread = adj
        else:
            self.z = adj(child, self.wp, None, 1, pad)
            self.spread = fwd

    def __call__(self, p, stats=None, where=""):
        r = _safe_ratio(p, self.z, stats, where)
        return self.child * self.spread(r, self.wp, None, 1, self.pad)


# ---------------------------------------------------------------------------
# seeds
# ---------------------------------------------------------------------------


@dataclass
class ExcitationSeed:
    """Uniform unit mass over a set of (x, y) pixels of one frame."""

    frame: int
    pixels: np.ndarray
    mass: np.ndarray = None

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.int64).reshape(-1, 2)
        if self.mass is None:
            n = len(self.pixels)
            self.mass = np.full(n, 1.0 / n) if n else np.zeros(0)
        if self.frame not in (0, 1):
            raise ValueError(f"frame must be 0 or 1, got {self.frame}")


def seed_maps(pixels: np.ndarray, shape: Tuple[int, int], mass=None) -> np.ndarray:
    """One (1, H, W) delta map per pixel, stacked to (S, 1, H, W)."""
    pixels = np.asarray(pixels, dtype=np.int64).reshape(-1, 2)
    h, w = shape
    if len(pixels) and (pixels[:, 0].min() < 0 or pixels[:, 0].max() >= w
                        or pixels[:, 1].min() < 0 or pixels[:, 1].max() >= h):
        raise ValueError("seed pixel outside the image")
    out = np.zeros((len(pixels), 1, h, w), dtype=DTYPE)
    m = np.ones(len(pixels)) if mass is None else np.asarray(mass)
    out[np.arange(len(pixels)), 0, pixels[:, 1], pixels[:, 0]] = m
    return out


# ---------------------------------------------------------------------------
# network-level propagation
# ---------------------------------------------------------------------------


def _check_cache(net: Fcsn, cache: BranchCache):
    cfg = net.config
    dec = cache.decoder
    n_dec = len(cfg.decoder_channels)
    if len(dec.inputs) != n_dec or len(dec.outputs) != n_dec or dec.prob is None:
        raise ShapeError("branch cache does not come from this network's decoder")
    if dec.inputs[0].shape[1] != cfg.jfr_channels:
        raise ShapeError(f"cached JFR view has {dec.inputs[0].shape[1]} channels, "
                         f"network expects {cfg.jfr_channels}")
    for k in range(n_dec):
        if dec.outputs[k].shape[1] != net.params[f"dec{k}.w"].shape[1]:
            raise ShapeError(f"cached decoder layer {k} does not match the weights")
    if dec.inputs[0].shape[0] != 1:
        raise ShapeError("excitation expects a forward pass over a single pair")


class Excitation:
    """Relevance propagation over one completed evaluation-mode forward pass."""

    def __init__(self, net: Fcsn, out: PairOutput, chunk: int = SEED_CHUNK):
        self.net = net
        self.out = out
        self.chunk = chunk
        self.caches = (out.cache_a, out.cache_b)
        for c in self.caches:
            _check_cache(net, c)
        self.stats: Dict[str, float] = {}
        self._down = [self._build(c, "down") for c in self.caches]
        self._up = [self._build(c, "up") for c in self.caches]
        self._passes: Dict[Tuple[int, str], SparsePass] = {}

    @property
    def shape(self) -> Tuple[int, int]:
        return self.out.pred_a.shape[1:]

    def _build(self, cache: BranchCache, leg: str):
        cfg, p = self.net.config, self.net.params
        dec = cache.decoder
        rules = []
        for k in range(len(cfg.decoder_channels)):
            kk = p[f"dec{k}.w"].shape[2]
            child = dec.inputs[k] if leg == "down" else dec.outputs[k]
            rules.append(_ConvRule(p[f"dec{k}.w"], kk // 2, True, child, leg))
        hw = p["head.w"][:, 1:2]
        child = dec.head_input if leg == "down" else dec.prob
        head = _ConvRule(hw, cfg.head_kernel // 2, True, child, leg)
        return rules, head

    # --- legs ----------------------------------------------------------

    def backward_to_jfr(self, seeds: np.ndarray, branch: int) -> np.ndarray:
        """(S, 1, H, W) pixel masses on ``branch``'s output -> (S, 2C, h, w).

        The result is indexed like the canonical JFR (frame-0 code first).
        """
        cfg = self.net.config
        cache = self.caches[branch]
        rules, head = self._down[branch]
        seeds = np.asarray(seeds, dtype=DTYPE)
        if seeds.shape[1:] != (1,) + tuple(self.shape):
            raise ShapeError(f"seed maps {seeds.shape} do not match output {self.shape}")
        r = head(seeds, self.stats, "head")
        for k in reversed(range(len(cfg.decoder_channels))):
            if k < cfg.n_pools:
                r = gather2x2(r, cache.indices[cfg.n_pools - 1 - k])
            # ReLU and evaluation-mode dropout pass mass unchanged
            r = rules[k](r, self.stats, f"dec{k}")
        return self._to_canonical(r, cache, branch)

    def forward_from_jfr(self, rel: np.ndarray, branch: int) -> np.ndarray:
        """Canonical JFR relevance (S, 2C, h, w) -> (S, H, W) attention on ``branch``."""
        cfg = self.net.config
        cache = self.caches[branch]
        rules, head = self._up[branch]
        r = self._from_canonical(np.asarray(rel, dtype=DTYPE), cache, branch)
        for k in range(len(cfg.decoder_channels)):
            r = rules[k](r, self.stats, f"dec{k}")
            if k < cfg.n_pools:
                r = unpool2x2(r, cache.indices[cfg.n_pools - 1 - k])
        return head(r, self.stats, "head")[:, 0]

    @staticmethod
    def _to_canonical(r, cache, branch):
        # an own-first view of branch 1 is (code_1, code_0); swapping is an involution
        return swap_halves(r) if branch == 1 and cache.own_first else r

    _from_canonical = _to_canonical

    def transfer(self, seeds: np.ndarray, source: int) -> np.ndarray:
        """Attention on the other frame for each seed map of frame ``source``."""
        outs = []
        for s in range(0, len(seeds), self.chunk):
            rel = self.backward_to_jfr(seeds[s:s + self.chunk], source)
            outs.append(self.forward_from_jfr(rel, 1 - source))
        if not outs:
            return np.zeros((0,) + tuple(self.shape), dtype=DTYPE)
        return np.concatenate(outs)

    def attention(self, seed: ExcitationSeed) -> np.ndarray:
        """AttentionMap over the other frame for one seed."""
        if len(seed.pixels) == 0:
            return np.zeros(self.shape, dtype=np.float64)
        maps = seed_maps(seed.pixels, self.shape, seed.mass)
        return self.transfer(maps, seed.frame).astype(np.float64).sum(axis=0)

    def _pass(self, branch: int, leg: str) -> "SparsePass":
        key = (branch, leg)
        if key not in self._passes:
            self._passes[key] = build_pass(self.net, self.caches[branch], leg)
        return self._passes[key]

    def jfr_vectors(self, pixels: np.ndarray, branch: int, leg: str) -> np.ndarray:
        """Flattened canonical JFR vectors for unit seeds at ``pixels`` of ``branch``."""
        pixels = np.asarray(pixels, dtype=np.int64).reshape(-1, 2)
        size = int(np.prod(self.out.jfr.shape[1:]))
        out = np.zeros((len(pixels), size), dtype=DTYPE)
        run = self._pass(branch, leg)
        for s in range(0, len(pixels), self.chunk):
            v = run(pixels[s:s + self.chunk])
            out[s:s + len(v)] = self._to_canonical(v, self.caches[branch], branch).reshape(
                len(v), -1)
        return out

    def pixel_attention(self, pixels: np.ndarray, source: int, read: np.ndarray) -> np.ndarray:
        """Attention from each source pixel (unit mass) read at ``read`` pixels of the other frame.

        Returns a (len(pixels), len(read)) float64 matrix. Both sides are
        reduced to JFR vectors, so the cost grows with the number of pixels
        rather than with their product.
        """
        down = self.jfr_vectors(pixels, source, "down").astype(np.float64)
        up = self.jfr_vectors(read, 1 - source, "read").astype(np.float64)
        return down @ up.T


# ---------------------------------------------------------------------------
# windowed adjoint passes
# ---------------------------------------------------------------------------


class _Stage:
    """One step of a pass towards the JFR: v <- post * conv(pre * v), or a 2x2 gather."""

    def __init__(self, kind, wp=None, pad=0, pre=None, post=None, mask=None):
        self.kind = kind
        self.wp = wp
        self.pad = pad
        self.pre = pre
        self.post = post
        self.mask = mask


def _window_view(full, margin, oy, ox, h, w):
    """Per-seed (h, w) windows of a zero-padded (C, H, W) array at offsets (oy, ox)."""
    view = np.lib.stride_tricks.sliding_window_view(full, (h, w), axis=(1, 2))
    return view[:, oy + margin, ox + margin].transpose(1, 0, 2, 3)


class _PaddedFactor:
    def __init__(self, arr, margin):
        self.margin = margin
        self.shape = arr.shape[2:]
        self.full = np.pad(arr[0], ((0, 0), (margin, margin), (margin, margin)))

    def window(self, oy, ox, h, w):
        return _window_view(self.full, self.margin, oy, ox, h, w)


class SparsePass:
    """Linear map from unit pixel seeds to a JFR-shaped tensor, run on local windows.

    A single-pixel seed only reaches a small neighbourhood at the fine
    decoder levels, so each seed is processed inside a window that grows
    with the kernels it crosses; once the window covers its level the pass
    continues on full maps.
    """

    def __init__(self, stages: List[_Stage], out_shape: Tuple[int, int]):
        self.stages = stages
        self.out_shape = out_shape

    def __call__(self, pixels: np.ndarray) -> np.ndarray:
        pixels = np.asarray(pixels, dtype=np.int64).reshape(-1, 2)
        s = len(pixels)
        oy, ox = pixels[:, 1].copy(), pixels[:, 0].copy()
        v = np.ones((s, 1, 1, 1), dtype=DTYPE)
        dense = False
        for st in self.stages:
            if st.kind == "conv":
                hh, ww = st.pre.shape
                if dense:
                    v = st.post.full[None, :, st.post.margin:st.post.margin + hh,
                                     st.post.margin:st.post.margin + ww] * conv2d(
                        v * st.pre.full[None, :, st.pre.margin:st.pre.margin + hh,
                                        st.pre.margin:st.pre.margin + ww], st.wp, None, 1, st.pad)
                    continue
                h, w = v.shape[2:]
                v = v * st.pre.window(oy, ox, h, w)
                r = st.pad
                v = np.pad(v, ((0, 0), (0, 0), (r, r), (r, r)))
                oy, ox = oy - r, ox - r
                v = conv2d(v, st.wp, None, 1, r)
                v = v * st.post.window(oy, ox, h + 2 * r, w + 2 * r)
                if h + 2 * r >= hh and w + 2 * r >= ww:
                    v = self._densify(v, oy, ox, (hh, ww))
                    dense = True
            else:
                if dense:
                    v = _block_sum(v * st.mask.full[None, :, st.mask.margin:st.mask.margin
                                                    + st.mask.shape[0], st.mask.margin:
                                                    st.mask.margin + st.mask.shape[1]])
                    continue
                h, w = v.shape[2:]
                ha, wa = h + 1 + (h + 1) % 2, w + 1 + (w + 1) % 2
                ny, nx = oy - oy % 2, ox - ox % 2
                buf = np.zeros(v.shape[:2] + (ha, wa), dtype=DTYPE)
                for sy in (0, 1):
                    for sx in (0, 1):
                        sel = (oy - ny == sy) & (ox - nx == sx)
                        if sel.any():
                            buf[sel, :, sy:sy + h, sx:sx + w] = v[sel]
                v = _block_sum(buf * st.mask.window(ny, nx, ha, wa))
                oy, ox = ny // 2, nx // 2
                hh, ww = st.mask.shape[0] // 2, st.mask.shape[1] // 2
                if v.shape[2] >= hh and v.shape[3] >= ww:
                    v = self._densify(v, oy, ox, (hh, ww))
                    dense = True
        if not dense:
            v = self._densify(v, oy, ox, self.out_shape)
        return v

    @staticmethod
    def _densify(v, oy, ox, shape):
        s, c, h, w = v.shape
        hh, ww = shape
        out = np.zeros((s, c, hh + 2 * h, ww + 2 * w), dtype=DTYPE)
        for k in range(s):
            out[k, :, oy[k] + h:oy[k] + 2 * h, ox[k] + w:ox[k] + 2 * w] = v[k]
        return np.ascontiguousarray(out[:, :, h:h + hh, w:w + ww])


def _block_sum(v):
    s, c, h, w = v.shape
    return v.reshape(s, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


def _inverse(z):
    return np.divide(1.0, z, out=np.zeros_like(z), where=z > 0).astype(DTYPE)


def _onehot(indices) -> np.ndarray:
    n, c, h, w = indices.input_shape
    m = np.zeros((1, c, h * w), dtype=DTYPE)
    np.put_along_axis(m, indices.flat[:1].reshape(1, c, -1), 1.0, axis=2)
    return m.reshape(1, c, h, w)


def build_pass(net: Fcsn, cache: BranchCache, leg: str) -> SparsePass:
    """Seeds-to-JFR map for one branch.

    ``leg="down"`` propagates seed mass to the JFR. ``leg="read"`` is the
    adjoint of the JFR-to-pixel attention map: the JFR vector whose inner
    product with a JFR relevance gives the attention read at the seed
    pixel.
    """
    cfg, p = net.config, net.params
    dec = cache.decoder

    def margin(shape):
        return max(shape) + 8

    def conv_stage(w, pad, a_in, a_out):
        wp = np.maximum(w, 0).astype(DTYPE)
        m = margin(a_in.shape[2:])
        if leg == "down":
            z = deconv2d(a_in, wp, None, 1, pad)
            pre, post = _inverse(z), a_in
        else:
            z = conv2d(a_out, wp, None, 1, pad)
            pre, post = a_out, _inverse(z)
        return _Stage("conv", wp, pad, _PaddedFactor(pre, m), _PaddedFactor(post, m))

    stages = [conv_stage(p["head.w"][:, 1:2], cfg.head_kernel // 2, dec.head_input, dec.prob)]
    for k in reversed(range(len(cfg.decoder_channels))):
        if k < cfg.n_pools:
            idx = cache.indices[cfg.n_pools - 1 - k]
            mask = _onehot(idx)
            stages.append(_Stage("gather", mask=_PaddedFactor(mask, margin(mask.shape[2:]))))
        w = p[f"dec{k}.w"]
        stages.append(conv_stage(w, w.shape[2] // 2, dec.inputs[k], dec.outputs[k]))
    return SparsePass(stages, tuple(dec.inputs[0].shape[2:]))


@dataclass
class PixelScores:
    """Directional pixel-to-pixel attention between two boundary pixel sets.

    ``forward[i, j]`` is the frame-1 attention at pixel j seeded at frame-0
    pixel i; ``backward[i, j]`` is the frame-0 attention at i seeded at j.
    """

    pixels_a: np.ndarray
    pixels_b: np.ndarray
    forward: np.ndarray
    backward: np.ndarray
    index_a: Dict[Tuple[int, int], int] = field(default_factory=dict)
    index_b: Dict[Tuple[int, int], int] = field(default_factory=dict)

    def __post_init__(self):
        self.index_a = {(int(x), int(y)): k for k, (x, y) in enumerate(self.pixels_a)}
        self.index_b = {(int(x), int(y)): k for k, (x, y) in enumerate(self.pixels_b)}

    def pair_matrix(self, chain_a: np.ndarray, chain_b: np.ndarray) -> np.ndarray:
        """s_ij for edgelet pixel chains, averaging both directions.

        An edgelet seed spreads unit mass uniformly over its pixels, so its
        map is the mean of the per-pixel maps.
        """
        ia = [self.index_a[(int(x), int(y))] for x, y in chain_a]
        ib = [self.index_b[(int(x), int(y))] for x, y in chain_b]
        s_ab = self.forward[np.ix_(ia, ib)].mean(axis=0, keepdims=True)
        s_ba = self.backward[np.ix_(ia, ib)].mean(axis=1, keepdims=True)
        return attention_score_pair(np.broadcast_to(s_ab, (len(ia), len(ib))),
                                    np.broadcast_to(s_ba, (len(ia), len(ib))))

    def pixel_matrix(self, chain_a: np.ndarray, chain_b: np.ndarray) -> np.ndarray:
        """Bidirectional per-pixel scores used to align two matched chains."""
        ia = [self.index_a[(int(x), int(y))] for x, y in chain_a]
        ib = [self.index_b[(int(x), int(y))] for x, y in chain_b]
        return attention_score_pair(self.forward[np.ix_(ia, ib)], self.backward[np.ix_(ia, ib)])


def attention_score_pair(s_forward: np.ndarray, s_backward: np.ndarray) -> np.ndarray:
    """Elementwise mean of the two directional reads."""
    s_forward = np.asarray(s_forward, dtype=np.float64)
    s_backward = np.asarray(s_backward, dtype=np.float64)
    if s_forward.shape != s_backward.shape:
        raise ValueError(f"directional scores differ in shape: {s_forward.shape} vs "
                         f"{s_backward.shape}")
    return 0.5 * (s_forward + s_backward)


def pixel_scores(exc: Excitation, pixels_a: np.ndarray, pixels_b: np.ndarray) -> PixelScores:
    fwd = exc.pixel_attention(pixels_a, 0, pixels_b)
    bwd = exc.pixel_attention(pixels_b, 1, pixels_a).T
    return PixelScores(np.asarray(pixels_a), np.asarray(pixels_b), fwd, bwd)


def relevance_to_pgm(rel: np.ndarray) -> np.ndarray:
    """Scale a nonnegative map to 16-bit integers for a debug image."""
    rel = np.asarray(rel, dtype=np.float64)
    top = rel.max(initial=0)
    if top <= 0:
        return np.zeros(rel.shape, dtype=np.int64)
    return np.rint(rel / top * 65535).astype(np.int64)
