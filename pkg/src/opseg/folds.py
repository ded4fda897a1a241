"""Subject-preserving K-fold splits and the cross-validation driver."""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .metrics import METRIC_NAMES, TABLE_COLUMNS, MetricsReport

logger = logging.getLogger(__name__)


class LeakageError(AssertionError):
    pass


@dataclass(frozen=True)
class FoldSpec:
    k: int
    assignment: dict[str, int]
    seed: int = 0

    def __post_init__(self):
        bad = {s: f for s, f in self.assignment.items() if not 0 <= f < self.k}
        if bad:
            raise ValueError(f"fold indices outside 0..{self.k - 1}: {bad}")

    def subjects(self, fold: int) -> list[str]:
        return sorted(s for s, f in self.assignment.items() if f == fold)

    def sizes(self) -> list[int]:
        return [len(self.subjects(f)) for f in range(self.k)]

    def to_dict(self) -> dict:
        return {"format": "opseg/1", "K": self.k, "seed": self.seed, "assignment": dict(self.assignment)}

    @classmethod
    def from_dict(cls, d: dict) -> "FoldSpec":
        return cls(int(d["K"]), {str(s): int(f) for s, f in d["assignment"].items()}, int(d.get("seed", 0)))


def make_folds(subjects, k: int, seed: int = 0) -> FoldSpec:
    """Seeded shuffle of the unique subjects, then round-robin fold assignment."""
    uniq = sorted(set(subjects))
    if k < 1:
        raise ValueError(f"K must be >= 1, got {k}")
    if k > len(uniq):
        raise ValueError(f"K={k} exceeds the number of subjects ({len(uniq)})")
    order = np.random.default_rng(seed).permutation(len(uniq))
    return FoldSpec(k, {uniq[i]: pos % k for pos, i in enumerate(order)}, seed)


def split(volumes, spec: FoldSpec, fold: int):
    """(train, eval) volume lists for ``fold``; audits subject disjointness."""
    missing = sorted({v.subject_id for v in volumes} - set(spec.assignment))
    if missing:
        raise ValueError(f"subjects missing from the fold assignment: {', '.join(missing)}")
    train = [v for v in volumes if spec.assignment[v.subject_id] != fold]
    held = [v for v in volumes if spec.assignment[v.subject_id] == fold]
    overlap = {v.subject_id for v in train} & {v.subject_id for v in held}
    if overlap:
        raise LeakageError(f"fold {fold}: subjects in both train and eval: {sorted(overlap)}")
    return train, held


def summarize(values) -> dict[str, float]:
    """Mean and population standard deviation."""
    a = np.asarray(list(values), dtype=np.float64)
    return {"mean": float(a.mean()), "std": float(a.std())}


def pm_text(mean: float, std: float) -> str:
    return f"{100 * mean:.2f}±{100 * std:.2f}"


@dataclass
class CrossvalResult:
    spec: FoldSpec
    reports: list[MetricsReport]
    leakage_checks: int
    summary: dict[str, dict[str, float]] = field(default_factory=dict)

    def __post_init__(self):
        if not self.summary:
            self.summary = {k: summarize(r.mean[k] for r in self.reports) for k in METRIC_NAMES}

    def to_dict(self) -> dict:
        return {
            "format": "opseg/1",
            "K": self.spec.k,
            "seed": self.spec.seed,
            "leakage_checks": self.leakage_checks,
            "folds": [r.mean for r in self.reports],
            "summary": {k: {**v, "text": pm_text(v["mean"], v["std"])} for k, v in self.summary.items()},
        }

    def summary_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TABLE_COLUMNS)
        w.writerow([pm_text(self.summary[k]["mean"], self.summary[k]["std"]) for k in METRIC_NAMES])
        return buf.getvalue()


def crossval(volumes, cfg, spec: FoldSpec, out_dir=None, on_fold=None) -> CrossvalResult:
    """Train on all folds but f and evaluate on f, for every f.

    Every fold must hold at least one evaluation volume; this is checked
    before any training starts.  With ``out_dir`` the fold file, per-fold
    reports/CSVs and the summary are written there.
    """
    from .io import atomic_write_text, write_json
    from .pipeline import evaluate, fit, prepare_volumes

    volumes = list(volumes)
    splits = [split(volumes, spec, f) for f in range(spec.k)]
    empty = [f for f, (_, held) in enumerate(splits) if not held]
    if empty:
        raise ValueError(f"folds with no evaluation volumes: {empty}")
    no_train = [f for f, (tr, _) in enumerate(splits) if not tr]
    if no_train:
        raise ValueError(f"folds with no training volumes: {no_train}")

    roi = cfg.cascade.provider
    reports, checks = [], 0
    for f, (train_vols, held) in enumerate(splits):
        train_ids = {v.subject_id for v in train_vols}
        if train_ids & {v.subject_id for v in held}:
            raise LeakageError(f"fold {f}: subject leakage")
        checks += 1
        logger.info("fold %d: %d train volumes, %d eval volumes", f, len(train_vols), len(held))
        net, _ = fit(train_vols, cfg)
        rep = evaluate(prepare_volumes(held, cfg.preprocess), net, roi, cfg, seed=cfg.train.seed)
        reports.append(rep)
        if on_fold is not None:
            on_fold(f, rep)
    result = CrossvalResult(spec, reports, checks)
    if out_dir is not None:
        out = Path(out_dir)
        write_json(out / "folds.json", spec.to_dict())
        for f, rep in enumerate(reports):
            write_json(out / f"fold_{f}_report.json", rep.to_dict())
            atomic_write_text(out / f"fold_{f}.csv", rep.to_csv())
        write_json(out / "summary.json", result.to_dict())
        atomic_write_text(out / "summary.csv", result.summary_csv())
    return result
