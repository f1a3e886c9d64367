"""Aggregate run records into CSV tables, a significance table and heatmap panels.

Runs are identified by a label (the run directory name by default). Tables:

    performance.csv   one row per (run, stage): ACC / AUC / TPR / TNR mean and SE
    attention.csv     one row per (run, stage): Dice / IoU mean and SE
    competitors.csv   competitor runs only, one row per classifier
    significance.csv  paired signed-rank tests on positive-class probabilities

Floats are written with a fixed format so identical inputs give identical bytes.
"""
from __future__ import annotations

import csv
import itertools
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .metrics import mean_se, significance_stars, wilcoxon_paired

FLOAT_FMT = "{:.6f}"
MISSING = "NA"
CLASS_METRICS = ("acc", "auc", "tpr", "tnr")
OVERLAP_METRICS = ("dice", "iou")


def fmt(value) -> str:
    if value is None:
        return MISSING
    if isinstance(value, float):
        return FLOAT_FMT.format(value)
    return str(value)


def write_csv(rows: Sequence[dict], path, columns: Sequence[str]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([fmt(r.get(c)) for c in columns])
    return path


def _stage_keys(records) -> list:
    return sorted({s["stage"] for r in records for s in r.stages})


def summary_rows(runs: Mapping[str, Sequence], metrics: Sequence[str]) -> list:
    """Mean and standard error over folds (and seeds) for every run and stage."""
    rows = []
    for label in sorted(runs):
        records = runs[label]
        for stage in _stage_keys(records):
            entries = [s for r in records for s in r.stages if s["stage"] == stage]
            row = {"run": label, "experiment": records[0].spec, "stage": stage, "view": entries[0].get("view", ""),
                   "n": len(entries)}
            if "classifier" in entries[0]:
                row["classifier"] = entries[0]["classifier"]
            for m in metrics:
                s = mean_se([e["metrics"].get(m) for e in entries])
                row[f"{m}_mean"], row[f"{m}_se"] = s.mean, s.se
            rows.append(row)
    return rows


def _metric_columns(metrics):
    return [f"{m}_{k}" for m in metrics for k in ("mean", "se")]


def performance_table(runs):
    cnn = {k: v for k, v in runs.items() if not any("classifier" in s for s in v[0].stages)}
    return summary_rows(cnn, CLASS_METRICS), ["run", "experiment", "stage", "view", "n", *_metric_columns(CLASS_METRICS)]


def attention_table(runs):
    cnn = {k: v for k, v in runs.items() if not any("classifier" in s for s in v[0].stages)}
    return summary_rows(cnn, OVERLAP_METRICS), ["run", "experiment", "stage", "view", "n", *_metric_columns(OVERLAP_METRICS)]


def competitor_table(runs):
    comp = {k: v for k, v in runs.items() if any("classifier" in s for s in v[0].stages)}
    return summary_rows(comp, CLASS_METRICS), ["run", "experiment", "classifier", "view", "n", *_metric_columns(CLASS_METRICS)]


def paired_probabilities(a_records, a_stage, b_records, b_stage):
    """Positive-class probabilities of two runs matched on (seed, fold, case id)."""
    def table(records, stage):
        out = {}
        for r in records:
            entry = next((s for s in r.stages if s["stage"] == stage), None)
            if entry is None:
                continue
            for cid, p in zip(r.test_ids, entry["probs"]):
                out[(r.seed, r.fold, cid)] = p
        return out

    ta, tb = table(a_records, a_stage), table(b_records, b_stage)
    keys = sorted(set(ta) & set(tb))
    return np.array([ta[k] for k in keys]), np.array([tb[k] for k in keys])


def _test_row(comparison, view, x, y):
    res = wilcoxon_paired(x, y) if len(x) else None
    return {
        "comparison": comparison,
        "view": view,
        "n_pairs": len(x),
        "statistic": None if res is None else float(res.statistic),
        "p_value": None if res is None else float(res.p_value),
        "method": "undefined" if res is None else res.method,
        "stars": significance_stars(None if res is None else res.p_value),
    }


def significance_table(runs: Mapping[str, Sequence]):
    """Within-run later stages against stage 0, then every pair of runs per shared stage."""
    rows = []
    labels = sorted(runs)
    for label in labels:
        stages = _stage_keys(runs[label])
        for st in stages:
            if st == 0 or 0 not in stages:
                continue
            view = next(s.get("view", "") for r in runs[label] for s in r.stages if s["stage"] == st)
            x, y = paired_probabilities(runs[label], st, runs[label], 0)
            rows.append(_test_row(f"{label}: stage {st} vs stage 0", view, x, y))
    for a, b in itertools.combinations(labels, 2):
        for st in sorted(set(_stage_keys(runs[a])) & set(_stage_keys(runs[b]))):
            if st == 0:
                continue
            view = next(s.get("view", "") for r in runs[a] for s in r.stages if s["stage"] == st)
            x, y = paired_probabilities(runs[a], st, runs[b], st)
            rows.append(_test_row(f"{a} vs {b}", view, x, y))
    cols = ["comparison", "view", "n_pairs", "statistic", "p_value", "method", "stars"]
    return rows, cols


# --------------------------------------------------------------------------- heatmap panels


def render_heatmap_panels(run_dir, out_dir, label: Optional[str] = None) -> list:
    """One PNG per sampled case and fold: the middle axial slice of every stage's heatmap.

    Low values are drawn blue and high values red.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .storage import read_volume

    run_dir, out_dir = Path(run_dir), Path(out_dir)
    label = label or run_dir.name
    written = []
    for fold_dir in sorted(run_dir.glob("fold*")):
        stage_dirs = sorted(fold_dir.glob("stage*"), key=lambda p: int(p.name[5:]))
        cases = sorted({p.name[:-4] for s in stage_dirs for p in (s / "heatmaps").glob("*.vol")})
        for case in cases:
            present = [s for s in stage_dirs if (s / "heatmaps" / f"{case}.vol").exists()]
            fig, axes = plt.subplots(1, len(present), figsize=(3 * len(present), 3), squeeze=False)
            for ax, sdir in zip(axes[0], present):
                vox = read_volume(sdir / "heatmaps" / f"{case}.vol").voxels
                ax.imshow(vox[:, :, vox.shape[2] // 2].T, cmap="jet", vmin=0.0, vmax=1.0, origin="lower")
                ax.set_title(sdir.name)
                ax.axis("off")
            fig.suptitle(f"{label} {fold_dir.name} {case}")
            out_dir.mkdir(parents=True, exist_ok=True)
            path = out_dir / f"{label}_{fold_dir.name}_{case}.png"
            fig.savefig(path, dpi=80, metadata={"Software": None})
            plt.close(fig)
            written.append(path)
    return written


def write_report(runs: Mapping[str, Sequence], out_dir) -> dict:
    out_dir = Path(out_dir)
    paths = {}
    for name, builder in (("performance", performance_table), ("attention", attention_table),
                          ("competitors", competitor_table), ("significance", significance_table)):
        rows, cols = builder(runs)
        paths[name] = write_csv(rows, out_dir / f"{name}.csv", cols)
    return paths
