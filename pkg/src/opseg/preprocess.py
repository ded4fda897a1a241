"""Slice selection, denoising, contrast enhancement and augmentation.

Images are 2-D float64 arrays in [0, 1]; label masks are 2-D uint8 arrays
of class indices.  All windowed filters use half-sample symmetric
("reflect") borders.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage


@dataclass
class Volume:
    subject_id: str
    scanner_id: str
    modality: str
    slices: list[np.ndarray]
    masks: list[np.ndarray] | None = None

    def __post_init__(self):
        if self.masks is not None:
            if len(self.masks) != len(self.slices):
                raise ValueError(f"volume {self.subject_id}: {len(self.slices)} slices but {len(self.masks)} masks")
            for i, (s, m) in enumerate(zip(self.slices, self.masks)):
                if s.shape != m.shape:
                    raise ValueError(f"volume {self.subject_id}: slice {i} shape {s.shape} != mask shape {m.shape}")


def remove_boundary_slices(vol: Volume, fraction: float = 0.2) -> Volume:
    if not 0.0 <= fraction < 0.5:
        raise ValueError(f"fraction must lie in [0, 0.5), got {fraction}")
    s = len(vol.slices)
    drop = math.floor(fraction * s)
    if s - 2 * drop < 1:
        raise ValueError(f"removing {drop} slices from each end of {s} leaves nothing")
    keep = slice(drop, s - drop)
    masks = None if vol.masks is None else vol.masks[keep]
    return replace(vol, slices=vol.slices[keep], masks=masks)


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = math.ceil(3 * sigma)
    r = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(r * r) / (2 * sigma * sigma))
    return k / k.sum()


def _filter_axis(img: np.ndarray, k: np.ndarray, axis: int) -> np.ndarray:
    radius = len(k) // 2
    pad = [(0, 0), (0, 0)]
    pad[axis] = (radius, radius)
    padded = np.pad(img, pad, mode="symmetric")
    n = img.shape[axis]
    out = np.zeros_like(img)
    for t, wt in enumerate(k):
        sl = [slice(None), slice(None)]
        sl[axis] = slice(t, t + n)
        out += wt * padded[tuple(sl)]
    return out


def gaussian_blur(img: np.ndarray, sigma: float = 0.8) -> np.ndarray:
    """Separable sampled-Gaussian blur, radius ceil(3 sigma).

    With symmetric borders and a symmetric kernel the total intensity is
    preserved exactly (up to rounding), provided the radius is smaller than
    the image.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    k = gaussian_kernel(sigma)
    if len(k) // 2 >= min(img.shape):
        # symmetric padding needs radius < extent
        raise ValueError(f"blur radius {len(k) // 2} too large for image {img.shape}")
    out = _filter_axis(_filter_axis(np.asarray(img, dtype=np.float64), k, 0), k, 1)
    return np.clip(out, 0.0, 1.0)


def median_blur(img: np.ndarray, k: int = 3) -> np.ndarray:
    if k < 1 or k % 2 == 0:
        raise ValueError(f"median kernel size must be an odd positive integer, got {k}")
    return ndimage.median_filter(np.asarray(img, dtype=np.float64), size=k, mode="reflect")


def _quantize(img: np.ndarray, bins: int) -> np.ndarray:
    return np.minimum((np.asarray(img) * bins).astype(np.int64), bins - 1).clip(0)


def _cdf_lut(hist: np.ndarray) -> np.ndarray:
    """Inclusive-CDF mapping bin -> [0, 1].

    A histogram concentrated in one bin is degenerate and maps to bin
    centres (identity up to quantization).
    """
    bins = len(hist)
    if np.count_nonzero(hist) <= 1:
        return (np.arange(bins) + 0.5) / bins
    return np.cumsum(hist) / hist.sum()


def hist_equalize(img: np.ndarray, bins: int = 256) -> np.ndarray:
    q = _quantize(img, bins)
    hist = np.bincount(q.ravel(), minlength=bins).astype(np.float64)
    return _cdf_lut(hist)[q]


def _tile_edges(n: int, tiles: int) -> np.ndarray:
    return np.linspace(0, n, tiles + 1).round().astype(np.int64)


def clahe(img: np.ndarray, tiles: int = 8, clip_limit: float = 2.0, bins: int = 256) -> np.ndarray:
    """Contrast-limited adaptive histogram equalization.

    Per tile: histogram, clip at ``clip_limit * tile_pixels / bins``,
    redistribute the clipped excess uniformly, map through the inclusive
    CDF.  Pixel values are bilinearly blended between the mappings of the
    surrounding tile centres (clamped at the image border).
    ``clip_limit=inf`` disables clipping.
    """
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    if tiles < 1:
        raise ValueError(f"tiles must be >= 1, got {tiles}")
    if clip_limit < 1:
        raise ValueError(f"clip_limit must be >= 1, got {clip_limit}")
    if h < tiles or w < tiles:
        raise ValueError(f"image {h}x{w} smaller than the {tiles}x{tiles} tile grid")
    q = _quantize(img, bins)
    ye, xe = _tile_edges(h, tiles), _tile_edges(w, tiles)
    lut = np.empty((tiles, tiles, bins))
    for ty in range(tiles):
        for tx in range(tiles):
            tile = q[ye[ty]:ye[ty + 1], xe[tx]:xe[tx + 1]]
            hist = np.bincount(tile.ravel(), minlength=bins).astype(np.float64)
            if math.isfinite(clip_limit) and np.count_nonzero(hist) > 1:
                limit = clip_limit * tile.size / bins
                excess = np.maximum(hist - limit, 0.0).sum()
                hist = np.minimum(hist, limit) + excess / bins
            lut[ty, tx] = _cdf_lut(hist)

    def interp_axis(edges, n):
        centres = (edges[:-1] + edges[1:] - 1) / 2.0
        pos = np.arange(n, dtype=np.float64)
        i1 = np.searchsorted(centres, pos, side="right")
        i0 = np.clip(i1 - 1, 0, tiles - 1)
        i1 = np.clip(i1, 0, tiles - 1)
        span = centres[i1] - centres[i0]
        wgt = np.where(span > 0, (pos - centres[i0]) / np.where(span > 0, span, 1.0), 0.0)
        return i0, i1, np.clip(wgt, 0.0, 1.0)

    y0, y1, wy = interp_axis(ye, h)
    x0, x1, wx = interp_axis(xe, w)
    Y0, X0 = y0[:, None], x0[None, :]
    Y1, X1 = y1[:, None], x1[None, :]
    WY, WX = wy[:, None], wx[None, :]
    top = (1 - WX) * lut[Y0, X0, q] + WX * lut[Y0, X1, q]
    bottom = (1 - WX) * lut[Y1, X0, q] + WX * lut[Y1, X1, q]
    return np.clip((1 - WY) * top + WY * bottom, 0.0, 1.0)


def preprocess_image(img: np.ndarray, sigma: float = 0.8, tiles: int = 8, clip_limit: float = 2.0) -> np.ndarray:
    return clahe(gaussian_blur(img, sigma), tiles=tiles, clip_limit=clip_limit)


def preprocess_volume(
    vol: Volume,
    slice_fraction: float = 0.2,
    sigma: float = 0.8,
    tiles: int = 8,
    clip_limit: float = 2.0,
) -> Volume:
    vol = remove_boundary_slices(vol, slice_fraction)
    return replace(vol, slices=[preprocess_image(s, sigma, tiles, clip_limit) for s in vol.slices])


# -- geometric augmentation ---------------------------------------------------------


@dataclass(frozen=True)
class AffineParams:
    translate_frac: tuple[float, float] = (0.0, 0.0)
    rotate_deg: float = 0.0
    shear_frac: tuple[float, float] = (0.0, 0.0)
    seed: int = 0

    def __post_init__(self):
        for name, pair in (("translate_frac", self.translate_frac), ("shear_frac", self.shear_frac)):
            if len(pair) != 2 or any(abs(v) > 0.1 for v in pair):
                raise ValueError(f"{name} components must lie in [-0.1, 0.1], got {pair}")
        if abs(self.rotate_deg) > 15:
            raise ValueError(f"rotate_deg must lie in [-15, 15], got {self.rotate_deg}")


def random_affine(rng: np.random.Generator) -> AffineParams:
    return AffineParams(
        translate_frac=tuple(rng.uniform(-0.1, 0.1, 2)),
        rotate_deg=float(rng.uniform(-15, 15)),
        shear_frac=tuple(rng.uniform(-0.1, 0.1, 2)),
        seed=int(rng.integers(2**31)),
    )


def _snap(v: float) -> float:
    r = round(v)
    return float(r) if abs(v - r) < 1e-12 else v


def _affine_matrix(rotate_deg: float, shear: tuple[float, float]) -> np.ndarray:
    # forward map in (x, y) order: rotation after shear
    t = math.radians(rotate_deg)
    c, s = _snap(math.cos(t)), _snap(math.sin(t))
    rot = np.array([[c, -s], [s, c]])
    sh = np.array([[1.0, shear[0]], [shear[1], 1.0]])
    return rot @ sh


def warp_pair(img: np.ndarray, mask: np.ndarray, rotate_deg: float, shear=(0.0, 0.0), translate_frac=(0.0, 0.0)):
    """Apply one affine transform about the frame centre to image and mask.

    Unlike ``augment_pair`` the rotation is unrestricted (used for exact
    90-degree permutation checks).
    """
    h, w = img.shape
    if mask.shape != img.shape:
        raise ValueError(f"image {img.shape} and mask {mask.shape} differ in shape")
    a = _affine_matrix(rotate_deg, shear)
    if np.allclose(a, np.eye(2)) and translate_frac == (0.0, 0.0):
        return img.copy(), mask.copy()
    inv = np.linalg.inv(a)
    centre = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
    shift = np.array([translate_frac[0] * w, translate_frac[1] * h])
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    dst = np.stack([xs.ravel(), ys.ravel()]) - (centre + shift)[:, None]
    src = inv @ dst + centre[:, None]
    coords = np.stack([src[1], src[0]])  # (row, col) for ndimage
    coords = np.where(np.abs(coords - np.round(coords)) < 1e-9, np.round(coords), coords)
    out_img = ndimage.map_coordinates(img, coords, order=1, mode="constant", cval=0.0).reshape(h, w)
    out_mask = ndimage.map_coordinates(mask, coords, order=0, mode="constant", cval=0).reshape(h, w)
    return np.clip(out_img, 0.0, 1.0), out_mask.astype(mask.dtype)


def augment_pair(img: np.ndarray, mask: np.ndarray, p: AffineParams):
    """Geometric augmentation shared by an image and its mask.

    Image sampled bilinearly, mask nearest-neighbour, out-of-frame pixels
    become 0 / background.
    """
    return warp_pair(img, mask, p.rotate_deg, p.shear_frac, p.translate_frac)
