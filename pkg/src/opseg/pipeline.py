"""Glue between datasets, the network and the cascade: build training pairs,
fit a network from a run config, evaluate volumes."""
from __future__ import annotations

import numpy as np

from .cascade import crop_resize, crop_resize_mask, frame_box, gt_roi, provider_from_spec, run_cascade, run_full_frame
from .metrics import MetricsReport, slice_report
from .preprocess import preprocess_volume
from .segnet import build_segnet, train


def prepare_volumes(volumes, pre) -> list:
    """Apply the preprocess section to every volume when it is enabled."""
    if not pre.enabled:
        return list(volumes)
    return [preprocess_volume(v, pre.slice_fraction, pre.sigma, pre.clahe_tiles, pre.clahe_clip) for v in volumes]


def roi_pairs(volumes, out_size: int, pad_frac: float) -> list[tuple[np.ndarray, np.ndarray]]:
    """Ground-truth ROI crops resized to the network input.

    Slices with no foreground carry nothing to learn inside an ROI and are skipped.
    """
    pairs = []
    for v in volumes:
        if v.masks is None:
            raise ValueError(f"volume {v.subject_id} has no masks to train on")
        for img, m in zip(v.slices, v.masks):
            if not np.any(m):
                continue
            box = gt_roi(m, pad_frac)
            pairs.append((crop_resize(img, box, out_size), crop_resize_mask(m, box, out_size)))
    return pairs


def frame_pairs(volumes, out_size: int) -> list[tuple[np.ndarray, np.ndarray]]:
    pairs = []
    for v in volumes:
        if v.masks is None:
            raise ValueError(f"volume {v.subject_id} has no masks to train on")
        for img, m in zip(v.slices, v.masks):
            box = frame_box(img.shape)
            pairs.append((crop_resize(img, box, out_size), crop_resize_mask(m, box, out_size)))
    return pairs


def training_pairs(volumes, cfg) -> list[tuple[np.ndarray, np.ndarray]]:
    if cfg.cascade.provider == "none":
        return frame_pairs(volumes, cfg.model.input_size)
    return roi_pairs(volumes, cfg.model.input_size, cfg.cascade.pad_frac)


def new_network(cfg):
    m = cfg.model
    return build_segnet(m.encoder(), m.decoder_blocks, m.q, m.dropout_rate, seed=cfg.train.seed)


def fit(volumes, cfg, on_epoch=None):
    """Train a fresh network on ``volumes``; returns (net, log rows)."""
    pairs = training_pairs(prepare_volumes(volumes, cfg.preprocess), cfg)
    if not pairs:
        raise ValueError("no training samples: every slice is empty")
    net = new_network(cfg)
    rows = train(net, pairs, cfg.train.train_config(), on_epoch=on_epoch)
    return net, rows


def predict_volumes(volumes, net, roi: str, cfg=None, seed: int = 0, rois_out=None) -> list[list[np.ndarray]]:
    """Full-frame predictions per volume.  ``roi`` is a provider tag or ``none``."""
    c = cfg.cascade if cfg is not None else None
    if roi == "none":
        return [run_full_frame(v, net) for v in volumes]
    kw = {} if c is None else {
        "pad_frac": c.pad_frac, "jitter_frac": c.jitter_frac, "threshold_quantile": c.threshold_quantile,
    }
    provider = provider_from_spec(roi, seed=seed, **kw)
    return [run_cascade(v, provider, net, net.input_size, rois_out) for v in volumes]


def evaluate(volumes, net, roi: str, cfg=None, seed: int = 0, rois_out=None) -> MetricsReport:
    """Slice-averaged metrics of full-frame predictions against the volume masks."""
    preds = predict_volumes(volumes, net, roi, cfg, seed, rois_out)
    flat_p = [p for vp in preds for p in vp]
    flat_g = []
    for v in volumes:
        if v.masks is None:
            raise ValueError(f"volume {v.subject_id} has no masks to evaluate against")
        flat_g.extend(v.masks)
    if not flat_g:
        raise ValueError("nothing to evaluate: no slices")
    return slice_report(flat_p, flat_g)
