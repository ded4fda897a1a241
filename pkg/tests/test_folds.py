import csv
import json

import numpy as np
import pytest

from opseg.config import RunConfig
from opseg.folds import FoldSpec, LeakageError, crossval, make_folds, pm_text, split, summarize
from opseg.phantoms import generate_phantoms
from opseg.preprocess import Volume

TINY = {
    "model": {"input_size": 64, "decoder_blocks": 3, "block_layer_counts": [1, 1, 1], "growth_rate": 2,
              "initial_channels": 4, "dropout_rate": 0.0},
    "train": {"epochs": 1, "batch_size": 4},
    "cascade": {"provider": "gt"},
}


def subjects(n):
    return [f"subject_{i:03d}" for i in range(n)]


def phantom_volumes(n, seed=0, slices=1):
    pairs = generate_phantoms(n * slices, 64, seed)
    return [
        Volume(f"subject_{i:03d}", f"scanner_{i % 3:02d}", "T2",
               [p[0] for p in pairs[i * slices:(i + 1) * slices]],
               [p[1] for p in pairs[i * slices:(i + 1) * slices]])
        for i in range(n)
    ]


def test_thirty_subjects_ten_folds():
    spec = make_folds(subjects(30), 10, seed=3)
    assert spec.sizes() == [3] * 10
    assert sorted(s for f in range(10) for s in spec.subjects(f)) == subjects(30)


def test_leave_one_out():
    spec = make_folds(subjects(7), 7, seed=0)
    assert spec.sizes() == [1] * 7


def test_uneven_sizes_differ_by_at_most_one():
    spec = make_folds(subjects(23), 5, seed=9)
    assert max(spec.sizes()) - min(spec.sizes()) <= 1


def test_duplicate_subject_ids_collapse():
    spec = make_folds(["a", "b", "a", "c", "b", "d"], 2)
    assert sorted(spec.assignment) == ["a", "b", "c", "d"]


def test_seed_changes_assignment_and_is_reproducible():
    base = make_folds(subjects(30), 10, seed=0).assignment
    assert make_folds(subjects(30), 10, seed=0).assignment == base
    differing = sum(make_folds(subjects(30), 10, seed=s).assignment != base for s in range(1, 101))
    assert differing == 100


def test_k_too_large_rejected():
    with pytest.raises(ValueError, match="exceeds the number of subjects"):
        make_folds(subjects(4), 5)
    with pytest.raises(ValueError, match="K must be"):
        make_folds(subjects(4), 0)


def test_spec_dict_roundtrip():
    spec = make_folds(subjects(9), 3, seed=2)
    d = json.loads(json.dumps(spec.to_dict()))
    assert d["K"] == 3 and d["format"] == "opseg/1"
    assert FoldSpec.from_dict(d) == spec


def test_split_keeps_subjects_together():
    vols = [Volume(s, "x", "T2", [np.zeros((4, 4))]) for s in subjects(6) for _ in range(2)]
    spec = make_folds(subjects(6), 3, seed=1)
    for f in range(3):
        train, held = split(vols, spec, f)
        assert len(train) + len(held) == len(vols)
        assert not {v.subject_id for v in train} & {v.subject_id for v in held}
        assert {v.subject_id for v in held} == set(spec.subjects(f))


def test_split_rejects_unknown_subject():
    spec = make_folds(subjects(2), 2)
    with pytest.raises(ValueError, match="missing from the fold assignment"):
        split([Volume("stranger", "x", "T2", [np.zeros((4, 4))])], spec, 0)


def test_leakage_detected(monkeypatch):
    import opseg.folds as folds

    vols = phantom_volumes(4)
    spec = make_folds([v.subject_id for v in vols], 2)

    def leaky(volumes, spec, fold):
        return volumes, [v for v in volumes if spec.assignment[v.subject_id] == fold]

    monkeypatch.setattr(folds, "split", leaky)
    with pytest.raises(LeakageError):
        crossval(vols, RunConfig.from_dict(TINY), spec)


def test_summary_population_std():
    s = summarize([0.8, 0.9, 1.0])
    assert s["mean"] == pytest.approx(0.9)
    assert s["std"] == pytest.approx(np.sqrt(((0.1) ** 2 * 2) / 3))
    assert pm_text(0.9, 0.0816496) == "90.00±8.16"


def test_crossval_two_folds_end_to_end(tmp_path):
    vols = phantom_volumes(8)
    cfg = RunConfig.from_dict(TINY)
    spec = make_folds([v.subject_id for v in vols], 2, seed=5)
    seen = []
    res = crossval(vols, cfg, spec, out_dir=tmp_path, on_fold=lambda f, r: seen.append(f))
    assert seen == [0, 1] and res.leakage_checks == 2 and len(res.reports) == 2
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == ["fold_0.csv", "fold_0_report.json", "fold_1.csv", "fold_1_report.json",
                     "folds.json", "summary.csv", "summary.json"]
    # recompute the summary from the per-fold CSVs
    dscs = []
    for f in range(2):
        with open(tmp_path / f"fold_{f}.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0][-1] == "DSC"
        dscs.append(float(rows[1][-1]))
    summary = json.loads((tmp_path / "summary.json").read_text())["summary"]["dsc"]
    assert summary["mean"] == pytest.approx(np.mean(dscs), abs=1e-12)
    assert summary["std"] == pytest.approx(np.std(dscs), abs=1e-12)
    assert open(tmp_path / "summary.csv").read().splitlines()[1].split(",")[-1] == pm_text(
        np.mean(dscs), np.std(dscs))


def test_crossval_deterministic(tmp_path):
    vols = phantom_volumes(4, seed=1)
    cfg = RunConfig.from_dict(TINY)
    spec = make_folds([v.subject_id for v in vols], 2, seed=0)
    crossval(vols, cfg, spec, out_dir=tmp_path / "a")
    crossval(vols, cfg, spec, out_dir=tmp_path / "b")
    for name in ("summary.json", "summary.csv", "fold_0_report.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_crossval_rejects_empty_eval_fold():
    vols = phantom_volumes(2)
    spec = FoldSpec(3, {"subject_000": 0, "subject_001": 1})
    with pytest.raises(ValueError, match="no evaluation volumes"):
        crossval(vols, RunConfig.from_dict(TINY), spec)
