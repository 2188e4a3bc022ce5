"""Overlay images: boundary pixels colored by flow direction, match lines."""

from __future__ import annotations

import numpy as np

from .evaluation import FlowField


def flow_colors(flow: np.ndarray, max_norm: float | None = None) -> np.ndarray:
    """Hue from direction, saturation from magnitude; returns uint8 RGB per vector."""
    flow = np.asarray(flow, dtype=np.float64).reshape(-1, 2)
    if len(flow) == 0:
        return np.zeros((0, 3), dtype=np.uint8)
    mag = np.hypot(flow[:, 0], flow[:, 1])
    top = max_norm or max(mag.max(), 1e-9)
    hue = (np.arctan2(-flow[:, 1], -flow[:, 0]) / np.pi + 1) / 2
    sat = np.clip(mag / top, 0, 1)
    h6 = hue * 6
    i = np.floor(h6).astype(int) % 6
    f = h6 - np.floor(h6)
    v = np.ones_like(hue)
    p, q, t = v * (1 - sat), v * (1 - sat * f), v * (1 - sat * (1 - f))
    table = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)]
    rgb = np.zeros((len(flow), 3))
    for k, (r, g, b) in enumerate(table):
        sel = i == k
        rgb[sel] = np.stack([r[sel], g[sel], b[sel]], 1)
    return np.rint(rgb * 255).astype(np.uint8)


def flow_overlay(image: np.ndarray, field: FlowField) -> np.ndarray:
    """Darkened image with each flow entry painted in its direction color."""
    out = (np.asarray(image, dtype=np.float64) * 0.4).astype(np.uint8)
    if len(field):
        out[field.points[:, 1], field.points[:, 0]] = flow_colors(field.flow)
    return out


def draw_line(img: np.ndarray, p0, p1, color):
    """Rasterize a segment in place with integer DDA."""
    x0, y0 = p0
    x1, y1 = p1
    n = int(max(abs(x1 - x0), abs(y1 - y0))) + 1
    xs = np.rint(np.linspace(x0, x1, n)).astype(int)
    ys = np.rint(np.linspace(y0, y1, n)).astype(int)
    ok = (xs >= 0) & (xs < img.shape[1]) & (ys >= 0) & (ys < img.shape[0])
    img[ys[ok], xs[ok]] = color


def match_canvas(img_a: np.ndarray, img_b: np.ndarray, field: FlowField,
                 every: int = 4) -> np.ndarray:
    """Frames side by side with every ``every``-th match drawn as a segment."""
    h, w = img_a.shape[:2]
    canvas = np.concatenate([img_a, img_b], axis=1).copy()
    colors = flow_colors(field.flow)
    for k in range(0, len(field), every):
        x, y = field.points[k]
        u, v = field.flow[k]
        draw_line(canvas, (x, y), (x + u + w, y + v), colors[k])
    return canvas
