"""Synthetic lumbar-spine phantoms with exact label masks.

A phantom is a curved vertical column of five bright vertebral bodies
(classes 1-5, L1..L5) interleaved with four dimmer disc bands (classes
6-9), top to bottom in the order 1, 6, 2, 7, 3, 8, 4, 9, 5.  Every row
band belongs to exactly one structure, so the column is 4-connected and
the anatomical order holds by construction.  Appearance (intensities,
noise, blur, curvature, spacing) is randomized per sample to mimic
scanner variability.  Unlabelled neighbours (a thoracic body above L1 and a
sacral wedge below L5, each joined to the column by an unlabelled disc band)
make the labelled region a strict sub-window of a longer bright column.
Dimmer off-column soft tissue (bowel loops, a fat band) adds clutter that a
full-frame segmenter has to reject.
"""
from __future__ import annotations

import math

import numpy as np
from scipy import ndimage

VERTEBRA_CLASSES = (1, 2, 3, 4, 5)
DISC_CLASSES = (6, 7, 8, 9)
ANATOMICAL_ORDER = (1, 6, 2, 7, 3, 8, 4, 9, 5)


def _row_bands(total: int, ratio: float) -> list[int]:
    """Integer heights for the 9 stacked structures summing to ``total``."""
    unit = total / (5 + 4 * ratio)
    heights = [max(3, int(round(unit if i % 2 == 0 else unit * ratio))) for i in range(9)]
    diff = total - sum(heights)
    vertebrae = [0, 2, 4, 6, 8]
    i = 0
    while diff:
        j = vertebrae[i % 5]
        step = 1 if diff > 0 else -1
        if step > 0 or heights[j] > 3:
            heights[j] += step
            diff -= step
        i += 1
    return heights


def _draw_span(labels, img, y0, y1, centre_fn, width_top, width_bottom, value, label, tex=None):
    h, w = labels.shape
    for y in range(max(y0, 0), min(y1, h)):
        t = (y - y0 + 0.5) / max(y1 - y0, 1)
        half = 0.5 * (width_top + (width_bottom - width_top) * t)
        cx = centre_fn(y)
        xl = int(math.floor(cx - half + 0.5))
        xr = int(math.floor(cx + half + 0.5))
        xl, xr = max(xl, 0), min(xr, w)
        if xr <= xl:
            continue
        if label is not None:
            labels[y, xl:xr] = label
        img[y, xl:xr] = value if tex is None else value * tex[y, xl:xr]


def _soft_tissue(img, rng, centre, vert_w, d_int, tex):
    """Unlabelled off-column tissue: bowel loops on one side, a fat band near the
    far edge.  Kept dimmer than the discs and clear of the column by a dark gap."""
    size = img.shape[0]
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cx = np.array([centre(y) for y in range(size)])[:, None]
    tissue = np.zeros_like(img)
    for _ in range(int(rng.integers(2, 5))):
        ex = rng.uniform(0.05, 0.3) * size
        ey = rng.uniform(0.1, 0.9) * size
        rx, ry = rng.uniform(0.04, 0.08, size=2) * size
        inside = ((xx - ex) / rx) ** 2 + ((yy - ey) / ry) ** 2 <= 1.0
        tissue[inside] = d_int * rng.uniform(0.55, 0.85)
    edge = rng.uniform(0.84, 0.9) * size + rng.uniform(0.01, 0.03) * size * np.sin(
        2 * math.pi * (yy / size * rng.uniform(0.5, 1.5) + rng.uniform()))
    band = (xx >= edge) & (xx < edge + rng.uniform(0.04, 0.07) * size)
    tissue[band] = d_int * rng.uniform(0.6, 0.85)
    clear = np.abs(xx - cx) < 0.5 * vert_w + max(2.0, 0.04 * size)
    tissue[clear] = 0.0
    img[:] = np.where(tissue > 0, tissue * tex, img)


def make_phantom(size: int, rng: np.random.Generator, distractors: bool = True):
    """One (image, mask) pair of side ``size``."""
    img = np.zeros((size, size))
    labels = np.zeros((size, size), dtype=np.uint8)

    col_frac = rng.uniform(0.5, 0.62)
    col_h = int(round(col_frac * size))
    ratio = rng.uniform(0.3, 0.45)
    heights = _row_bands(col_h, ratio)
    margin = size - col_h
    top = int(rng.integers(max(1, margin // 4), max(2, margin - margin // 4)))
    x0 = rng.uniform(0.4, 0.6) * size
    bow = rng.uniform(-0.06, 0.06) * size
    tilt = rng.uniform(-0.08, 0.08)
    vert_w = rng.uniform(0.13, 0.17) * size

    def centre(y):
        t = (y - top) / col_h
        return x0 + bow * math.sin(math.pi * t) + tilt * (y - top - col_h / 2)

    bg = rng.uniform(0.04, 0.15)
    v_int = rng.uniform(0.6, 0.9)
    d_int = v_int * rng.uniform(0.55, 0.75)
    tex = 1.0 + 0.06 * ndimage.gaussian_filter(rng.standard_normal((size, size)), 1.5)

    if distractors:
        _soft_tissue(img, rng, centre, vert_w, d_int, tex)
        # T12 above L1 and the sacrum below L5 join the column through
        # unlabelled T12/L1 and L5/S1 disc bands, as in real anatomy
        t12_disc, s1_disc = heights[1], heights[-2]
        t12_h = heights[0]
        _draw_span(labels, img, top - t12_disc, top, centre, vert_w * 0.97, vert_w * 0.97,
                   d_int * rng.uniform(0.93, 1.07), None, tex)
        _draw_span(labels, img, top - t12_disc - t12_h, top - t12_disc, centre, vert_w * 0.95, vert_w * 0.97,
                   v_int * rng.uniform(0.93, 1.07), None, tex)
        bottom = top + col_h
        s_h = int(round(heights[-1] * 1.2))
        _draw_span(labels, img, bottom, bottom + s1_disc, centre, vert_w, vert_w,
                   d_int * rng.uniform(0.93, 1.07), None, tex)
        _draw_span(labels, img, bottom + s1_disc, bottom + s1_disc + s_h, centre, vert_w * 1.05, vert_w * 0.6,
                   v_int * rng.uniform(0.75, 0.95), None, tex)

    y = top
    for cls, hgt in zip(ANATOMICAL_ORDER, heights):
        if cls in VERTEBRA_CLASSES:
            value = v_int * rng.uniform(0.93, 1.07)
            wt = vert_w * rng.uniform(0.94, 1.0)
            wb = vert_w * rng.uniform(1.0, 1.06)
        else:
            value = d_int * rng.uniform(0.93, 1.07)
            wt = wb = vert_w * rng.uniform(0.95, 1.02)
        _draw_span(labels, img, y, y + hgt, centre, wt, wb, value, cls, tex)
        y += hgt

    img = np.where(img > 0, img, bg)
    img = ndimage.gaussian_filter(img, rng.uniform(0.4, 0.9))
    noise = rng.uniform(0.015, 0.045)
    img = img + noise * rng.standard_normal(img.shape)
    return np.clip(img, 0.0, 1.0), labels


def generate_phantoms(count: int, size: int, seed: int, distractors: bool = True):
    """``count`` deterministic (image, mask) pairs of side ``size``."""
    if size < 64:
        raise ValueError(f"phantom size must be >= 64, got {size}")
    rng = np.random.default_rng(seed)
    seeds = rng.integers(0, 2**63 - 1, size=count)
    return [make_phantom(size, np.random.default_rng(int(s)), distractors) for s in seeds]
