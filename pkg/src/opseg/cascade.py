"""Two-stage ROI -> segmentation cascade.

An ROI provider proposes one lumbar box per slice; the slice is cropped,
resized to the network input, segmented, and the labels are pasted back
into a full-frame mask.  Boxes are half-open integer pixel ranges.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

logger = logging.getLogger(__name__)

ROI_COLUMNS = ("volume_id", "slice_index", "x_min", "y_min", "x_max", "y_max", "confidence")


class EmptyRoiError(ValueError):
    """Raised when a ground-truth ROI is requested from a mask with no foreground."""


@dataclass(frozen=True)
class BBox:
    x_min: int
    y_min: int
    x_max: int
    y_max: int
    confidence: float = 1.0

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate box {self.x_min},{self.y_min},{self.x_max},{self.y_max}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence must lie in [0, 1], got {self.confidence}")

    @property
    def width(self) -> int:
        return self.x_max - self.x_min

    @property
    def height(self) -> int:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return float(self.width * self.height)

    def inside(self, shape) -> bool:
        h, w = shape
        return self.x_min >= 0 and self.y_min >= 0 and self.x_max <= w and self.y_max <= h

    def slices(self):
        return slice(self.y_min, self.y_max), slice(self.x_min, self.x_max)


def tight_box(mask: np.ndarray) -> BBox:
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        raise EmptyRoiError("mask has no foreground pixels")
    return BBox(int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)


def _clamped_edges(lo, hi, limit):
    lo, hi = max(0, lo), min(limit, hi)
    if hi <= lo:
        # jitter collapsed the box; keep one pixel at the clamped position
        lo = min(lo, limit - 1)
        hi = lo + 1
    return lo, hi


def gt_roi(mask: np.ndarray, pad_frac: float = 0.0, jitter_frac: float = 0.0, seed: int = 0) -> BBox:
    """Tight foreground box, padded by ``pad_frac`` of its extent per side.

    With ``jitter_frac`` each edge then moves by an offset drawn uniformly
    from +-jitter_frac of the padded extent (truncated toward zero, so the
    bound holds in whole pixels).
    """
    if pad_frac < 0 or jitter_frac < 0:
        raise ValueError(f"pad_frac and jitter_frac must be >= 0, got {pad_frac}, {jitter_frac}")
    h, w = mask.shape
    t = tight_box(mask)
    px, py = int(round(pad_frac * t.width)), int(round(pad_frac * t.height))
    x0, x1 = t.x_min - px, t.x_max + px
    y0, y1 = t.y_min - py, t.y_max + py
    if jitter_frac > 0:
        rng = np.random.default_rng(seed)
        jx, jy = jitter_frac * (x1 - x0), jitter_frac * (y1 - y0)
        dx0, dy0, dx1, dy1 = (int(v) for v in rng.uniform(-1, 1, 4) * [jx, jy, jx, jy])
        x0, y0, x1, y1 = x0 + dx0, y0 + dy0, x1 + dx1, y1 + dy1
    x0, x1 = _clamped_edges(x0, x1, w)
    y0, y1 = _clamped_edges(y0, y1, h)
    return BBox(x0, y0, x1, y1, 1.0)


def heuristic_roi(img: np.ndarray, threshold_quantile: float = 0.85, min_frac: float = 0.005) -> BBox | None:
    """Box of the largest 4-connected component above an intensity quantile.

    Confidence is the component's share of all above-threshold pixels.
    Returns None when the component covers less than ``min_frac`` of the frame.
    """
    if not 0.0 < threshold_quantile < 1.0:
        raise ValueError(f"threshold_quantile must lie in (0, 1), got {threshold_quantile}")
    img = np.asarray(img, dtype=np.float64)
    thr = np.quantile(img, threshold_quantile)
    bright = img > thr
    if not bright.any() and img.max() > img.min():
        # the quantile sits on a bright plateau; keep the plateau itself
        bright = img >= thr
    total = int(bright.sum())
    if total == 0:
        return None
    labels, n = ndimage.label(bright)  # default structure is 4-connected
    sizes = np.bincount(labels.ravel(), minlength=n + 1)[1:]
    best = int(np.argmax(sizes)) + 1
    size = int(sizes[best - 1])
    if size < min_frac * img.size:
        return None
    box = tight_box(labels == best)
    return BBox(box.x_min, box.y_min, box.x_max, box.y_max, size / total)


def _sample_grid(n_out: int, n_in: int) -> np.ndarray:
    # pixel-centre alignment, clamped to the valid range
    return np.clip((np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5, 0.0, n_in - 1)


def _nearest_index(n_out: int, n_in: int) -> np.ndarray:
    return np.minimum(((np.arange(n_out) + 0.5) * (n_in / n_out)).astype(np.int64), n_in - 1)


def crop_resize(img: np.ndarray, box: BBox, out_size: int) -> np.ndarray:
    """Crop ``box`` and resize bilinearly to ``out_size`` x ``out_size``."""
    if not box.inside(img.shape):
        raise ValueError(f"box {box} outside image of shape {img.shape}")
    crop = np.asarray(img, dtype=np.float64)[box.slices()]
    if crop.shape == (out_size, out_size):
        return crop.copy()
    ys = _sample_grid(out_size, crop.shape[0])
    xs = _sample_grid(out_size, crop.shape[1])
    coords = np.meshgrid(ys, xs, indexing="ij")
    return ndimage.map_coordinates(crop, coords, order=1, mode="nearest")


def crop_resize_mask(mask: np.ndarray, box: BBox, out_size: int) -> np.ndarray:
    """Nearest-neighbour counterpart of ``crop_resize`` for label masks."""
    if not box.inside(mask.shape):
        raise ValueError(f"box {box} outside mask of shape {mask.shape}")
    crop = mask[box.slices()]
    return crop[np.ix_(_nearest_index(out_size, crop.shape[0]), _nearest_index(out_size, crop.shape[1]))]


def paste_back(small_mask: np.ndarray, box: BBox, full_shape) -> np.ndarray:
    if not box.inside(full_shape):
        raise ValueError(f"box {box} outside frame of shape {tuple(full_shape)}")
    out = np.zeros(full_shape, dtype=np.uint8)
    sh, sw = small_mask.shape
    out[box.slices()] = small_mask[np.ix_(_nearest_index(box.height, sh), _nearest_index(box.width, sw))]
    return out


# -- providers ----------------------------------------------------------------------------


@dataclass(frozen=True)
class GroundTruthRoi:
    pad_frac: float = 0.05
    jitter_frac: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.pad_frac < 0 or self.jitter_frac < 0:
            raise ValueError("pad_frac and jitter_frac must be >= 0")

    def propose(self, img, mask, volume_id: str, slice_index: int) -> BBox | None:
        if mask is None:
            raise ValueError(f"ground-truth ROI needs masks; volume {volume_id} has none")
        if not np.any(mask):
            return None
        seed = int(np.random.SeedSequence([self.seed, slice_index]).generate_state(1)[0])
        return gt_roi(mask, self.pad_frac, self.jitter_frac, seed)


@dataclass(frozen=True)
class IntensityHeuristicRoi:
    threshold_quantile: float = 0.85

    def propose(self, img, mask, volume_id: str, slice_index: int) -> BBox | None:
        return heuristic_roi(img, self.threshold_quantile)


@dataclass(frozen=True)
class FileRoi:
    boxes: dict

    @classmethod
    def from_csv(cls, path) -> "FileRoi":
        return cls(read_roi_csv(path))

    def propose(self, img, mask, volume_id: str, slice_index: int) -> BBox | None:
        return self.boxes.get((volume_id, slice_index))


def read_roi_csv(path) -> dict:
    boxes = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != ROI_COLUMNS:
            raise ValueError(f"{path}: expected header {','.join(ROI_COLUMNS)}")
        for line, row in enumerate(reader, start=2):
            try:
                key = (row["volume_id"], int(row["slice_index"]))
                boxes[key] = BBox(
                    int(row["x_min"]), int(row["y_min"]), int(row["x_max"]), int(row["y_max"]),
                    float(row["confidence"]),
                )
            except (TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{line}: {exc}") from None
    return boxes


def format_roi_csv(rows) -> str:
    """``rows`` are (volume_id, slice_index, BBox) triples."""
    lines = [",".join(ROI_COLUMNS)]
    for vid, idx, b in rows:
        lines.append(f"{vid},{idx},{b.x_min},{b.y_min},{b.x_max},{b.y_max},{b.confidence!r}")
    return "\n".join(lines) + "\n"


# -- pipeline -------------------------------------------------------------------------------


def segment_slice(net, img: np.ndarray, box: BBox | None, out_size: int) -> np.ndarray:
    from .segnet import predict_mask

    if box is None:
        return np.zeros(img.shape, dtype=np.uint8)
    small = predict_mask(net, crop_resize(img, box, out_size))
    return paste_back(small, box, img.shape)


def run_cascade(vol, provider, net, out_size: int, rois_out: list | None = None) -> list[np.ndarray]:
    """Full-frame masks for every slice of ``vol``.

    A slice whose provider or segmentation step fails becomes all
    background and a warning is logged.  Proposed boxes are appended to
    ``rois_out`` as (volume_id, slice_index, BBox) when it is given.
    """
    if net.input_size != out_size:
        raise ValueError(f"network input size {net.input_size} != cascade out_size {out_size}")
    out = []
    for i, img in enumerate(vol.slices):
        mask = None if vol.masks is None else vol.masks[i]
        try:
            box = provider.propose(img, mask, vol.subject_id, i)
            pred = segment_slice(net, img, box, out_size)
        except Exception as exc:  # noqa: BLE001 - a bad slice must not abort the volume
            logger.warning("volume %s slice %d: %s; emitting background", vol.subject_id, i, exc)
            box, pred = None, np.zeros(img.shape, dtype=np.uint8)
        if rois_out is not None and box is not None:
            rois_out.append((vol.subject_id, i, box))
        out.append(pred)
    return out


def run_full_frame(vol, net) -> list[np.ndarray]:
    """No-ROI baseline: the whole frame resized to the network input."""
    h, w = vol.slices[0].shape
    box = BBox(0, 0, w, h)
    return [segment_slice(net, img, box, net.input_size) for img in vol.slices]


def provider_from_spec(spec: str, pad_frac: float = 0.05, jitter_frac: float = 0.1, seed: int = 0,
                       threshold_quantile: float = 0.85):
    """Provider from a CLI-style tag: gt, gt-jitter, heuristic or file:PATH."""
    if spec == "gt":
        return GroundTruthRoi(pad_frac, 0.0, seed)
    if spec == "gt-jitter":
        return GroundTruthRoi(pad_frac, jitter_frac, seed)
    if spec == "heuristic":
        return IntensityHeuristicRoi(threshold_quantile)
    if spec.startswith("file:"):
        path = Path(spec[5:])
        if not path.is_file():
            raise FileNotFoundError(f"ROI file not found: {path}")
        return FileRoi.from_csv(path)
    raise ValueError(f"unknown ROI provider {spec!r}; expected gt, gt-jitter, heuristic or file:PATH")


def frame_box(shape) -> BBox:
    h, w = shape
    return BBox(0, 0, w, h)


def box_coverage(box: BBox | None, mask: np.ndarray) -> float:
    """Fraction of foreground pixels of ``mask`` inside ``box``."""
    fg = int(np.count_nonzero(mask))
    if fg == 0:
        return 1.0
    if box is None:
        return 0.0
    return int(np.count_nonzero(mask[box.slices()])) / fg
