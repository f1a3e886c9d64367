"""Ablation and competitor experiments over cross-validation folds.

The four ablations differ only in two switches:

==================  ======  ======  ==================================
name                gradual guided  later stages
==================  ======  ======  ==================================
doctor_in_the_loop  yes     yes     global image, cls + lambda * xai
xai_guide           no      yes     global image, cls + lambda * xai
gradual_learning    yes     no      masked view input, cls
segmentation        no      no      masked view input, cls
==================  ======  ======  ==================================

All four share stage 0 (global image, cls only), so with equal seeds and folds
that stage is trained once and reused through ``stage0_cache``.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .attribution import binarize, heatmap
from .curriculum import (
    StageHistory, StagePlan, TrainConfig, masked_input, predict_proba, run_curriculum, stage_arrays, train_stage,
)
from .errors import InvalidInputError, TrainingAbort
from .features import (
    CLASSIFIERS, extract_deep_features, extract_radiomics_features, fit_classifier,
)
from .metrics import auc, confusion_metrics, dice_iou
from .models import build_model, save_checkpoint
from .storage import write_volume
from .volumes import FoldSplit, LabeledVolume

log = logging.getLogger(__name__)

ABLATIONS = {
    "doctor_in_the_loop": (True, True),
    "xai_guide": (False, True),
    "gradual_learning": (True, False),
    "segmentation": (False, False),
}
COMPETITORS = ("deep_features", "radiomics_features")
SPEC_NAMES = tuple(ABLATIONS) + COMPETITORS


@dataclass
class ExperimentSpec:
    name: str
    gl_enabled: bool = True
    xai_enabled: bool = True
    classifier: Optional[str] = None
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0
    arch: object = "compact"
    threshold: float = 0.5
    heatmap_class: str = "predicted"
    heatmap_samples: int = 2

    def __post_init__(self):
        if self.name not in SPEC_NAMES:
            raise InvalidInputError(f"unknown experiment {self.name!r}; expected one of {SPEC_NAMES}")
        if self.name in ABLATIONS and (self.gl_enabled, self.xai_enabled) != ABLATIONS[self.name]:
            raise InvalidInputError(f"{self.name}: (gradual, guided) must be {ABLATIONS[self.name]}")
        if self.name in COMPETITORS and self.classifier not in CLASSIFIERS:
            raise InvalidInputError(f"{self.name} needs a classifier in {CLASSIFIERS}, got {self.classifier!r}")
        if self.heatmap_class not in ("predicted", "true"):
            raise InvalidInputError("heatmap_class must be 'predicted' or 'true'")

    @classmethod
    def named(cls, name: str, **kwargs) -> "ExperimentSpec":
        gl, xai = ABLATIONS.get(name, (False, False))
        kwargs.setdefault("gl_enabled", gl)
        kwargs.setdefault("xai_enabled", xai)
        return cls(name, **kwargs)

    @property
    def is_competitor(self) -> bool:
        return self.name in COMPETITORS

    @property
    def train_config(self) -> TrainConfig:
        return dataclasses.replace(self.train, rng_seed=self.seed)

    def plan(self, n_views: int) -> StagePlan:
        if self.is_competitor:
            return StagePlan.build(n_views, gradual=False, guided=False)
        return StagePlan.build(n_views, gradual=self.gl_enabled, guided=self.xai_enabled, lam=self.train.lam)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["train"] = dataclasses.asdict(self.train_config)
        return d


def table1_cells(spec: ExperimentSpec, view_names: Sequence[str] = ("Lungs", "Lesion")) -> list:
    """(input, loss) label pairs per stage, as they would appear in the ablation table."""
    cells = []
    for stage in spec.plan(len(view_names)).stages:
        inp = "Global Image" if stage.input_view is None else f"Masked {view_names[stage.input_view - 1]}"
        loss = "L_cls" if stage.loss_name == "cls" else "L_cls + lambda L_xai"
        cells.append((inp, loss))
    return cells


def build_masked_input(v: LabeledVolume, mask_index: int) -> np.ndarray:
    """Volume multiplied by expert mask ``mask_index`` (background zeroed)."""
    if not v.has_mask(mask_index):
        raise InvalidInputError(f"{v.id}: no mask with view_index {mask_index}")
    return masked_input(v, mask_index)


# --------------------------------------------------------------------------- records


@dataclass
class RunRecord:
    spec: str
    fold: int
    seed: int
    config_hash: str
    code_version: str
    test_ids: list
    labels: list
    stages: list

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        return cls(**{f.name: d[f.name] for f in dataclasses.fields(cls)})

    def stage(self, index: int) -> dict:
        return next(s for s in self.stages if s["stage"] == index)


def dataset_fingerprint(dataset: Sequence[LabeledVolume]) -> str:
    h = hashlib.sha256()
    for v in dataset:
        h.update(f"{v.id}:{v.label}:".encode())
        h.update(np.ascontiguousarray(v.volume).tobytes())
        for m in v.masks:
            h.update(np.packbits(m.voxels).tobytes())
    return h.hexdigest()


def config_hash(payload: dict) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True, default=str).encode()).hexdigest()[:16]


def _finite_views(dataset) -> int:
    views = {m.view_index for m in dataset[0].masks}
    return max(views) if views else 0


def check_compatibility(spec: ExperimentSpec, dataset: Sequence[LabeledVolume], folds: Sequence[FoldSplit]) -> int:
    """Validate before any training; returns the number of mask views."""
    if not dataset:
        raise InvalidInputError("empty dataset")
    n_views = _finite_views(dataset)
    if n_views < 1:
        raise InvalidInputError(f"{spec.name} needs at least one expert mask view")
    for v in dataset:
        missing = [i for i in range(1, n_views + 1) if not v.has_mask(i)]
        if missing:
            raise InvalidInputError(f"{spec.name}: case {v.id} lacks mask view(s) {missing}")
    ids = {v.id for v in dataset}
    for f in folds:
        fold_ids = set(f.train_ids) | set(f.val_ids) | set(f.test_ids)
        if fold_ids - ids:
            raise InvalidInputError(f"fold {f.fold_index} refers to unknown ids {sorted(fold_ids - ids)[:3]}")
        if not (f.train_ids and f.val_ids and f.test_ids):
            raise InvalidInputError(f"fold {f.fold_index}: train, validation and test partitions must be non-empty")
        if len({dataset_by_id(dataset)[i].label for i in f.train_ids}) < 2:
            raise InvalidInputError(f"fold {f.fold_index}: training partition has a single class")
    return n_views


def dataset_by_id(dataset) -> dict:
    return {v.id: v for v in dataset}


# --------------------------------------------------------------------------- evaluation


def view_name(cases, view: Optional[int]) -> str:
    if view is None:
        return "global"
    m = cases[0].mask(view)
    return m.name or f"view{view}"


def export_heatmaps(model, cases, stage, spec: ExperimentSpec, heatmap_dir: Path) -> list:
    """Write predicted-class heatmaps of the first ``heatmap_samples`` cases."""
    paths = []
    for v in cases[: spec.heatmap_samples]:
        h = heatmap(model, masked_input(v, stage.input_view), mode=spec.train.upsample)
        heatmap_dir.mkdir(parents=True, exist_ok=True)
        paths.append(write_volume(heatmap_dir / f"{v.id}.vol", h.voxels))
    return paths


def evaluate_stage(model, cases, stage, spec: ExperimentSpec, lesion_view: int) -> dict:
    x, y, _ = stage_arrays(cases, stage)
    probs = predict_proba(model, x)[:, 1]
    cm = confusion_metrics(probs, y, spec.threshold)
    dices, ious = [], []
    for v in cases:
        target = v.label if spec.heatmap_class == "true" else None
        h = heatmap(model, masked_input(v, stage.input_view), target_class=target, mode=spec.train.upsample)
        d, j = dice_iou(binarize(h, spec.threshold), v.mask(lesion_view).voxels)
        dices.append(d)
        ious.append(j)
    return {
        "probs": [float(p) for p in probs],
        "metrics": {
            "acc": cm.acc, "auc": auc(probs, y), "tpr": cm.tpr, "tnr": cm.tnr,
            "dice": float(np.mean(dices)), "iou": float(np.mean(ious)),
        },
    }


def _history_summary(h: StageHistory) -> dict:
    return {
        "epochs": len(h.records),
        "best_epoch": h.best_epoch,
        "best_val_loss": h.best_val_loss,
        "stop_reason": h.stop_reason,
    }


def stage0_config_hash(spec: ExperimentSpec, fold: FoldSplit, fingerprint: str) -> str:
    return config_hash({
        "arch": spec.arch, "seed": spec.seed, "train": dataclasses.asdict(spec.train_config),
        "fold": dataclasses.asdict(fold), "data": fingerprint,
    })


def run_fold(spec: ExperimentSpec, dataset, fold: FoldSplit, n_views: int, fingerprint: str,
             out_dir: Optional[Path] = None, stage0_cache: Optional[dict] = None) -> RunRecord:
    by_id = dataset_by_id(dataset)
    train = [by_id[i] for i in fold.train_ids]
    val = [by_id[i] for i in fold.val_ids]
    test = [by_id[i] for i in fold.test_ids]
    cfg = spec.train_config
    plan = spec.plan(n_views)
    fold_dir = None if out_dir is None else Path(out_dir) / f"fold{fold.fold_index}"
    key = stage0_config_hash(spec, fold, fingerprint)
    chash = config_hash({"spec": spec.to_dict(), "fold": dataclasses.asdict(fold), "data": fingerprint,
                         "version": __version__})
    labels = [by_id[i].label for i in fold.test_ids]

    if spec.is_competitor:
        return _run_competitor(spec, train, val, test, plan, cfg, n_views, fold, key, chash, labels,
                               fold_dir, stage0_cache)

    model = build_model(spec.arch, seed=spec.seed)
    stage_dirs = None if fold_dir is None else [fold_dir / f"stage{s.index}" for s in plan.stages]
    cached = None if stage0_cache is None else stage0_cache.get(key)
    result = run_curriculum(model, train, val, plan, cfg, stage_dirs=stage_dirs, stage0=cached)
    if stage0_cache is not None and key not in stage0_cache:
        stage0_cache[key] = (result.stage_models[0].clone(), result.histories[0])

    stages = []
    for stage, m, hist in zip(plan.stages, result.stage_models, result.histories):
        sdir = None if stage_dirs is None else stage_dirs[stage.index]
        if sdir is not None:
            save_checkpoint(m, sdir / "checkpoint")
            export_heatmaps(m, val, stage, spec, sdir / "heatmaps")
        ev = evaluate_stage(m, test, stage, spec, n_views)
        stages.append({
            "stage": stage.index,
            "input": stage.input_name,
            "loss": stage.loss_name,
            "guide_view": stage.guide_view,
            "input_view": stage.input_view,
            "view": view_name(test, stage.guide_view if stage.guide_view is not None else stage.input_view),
            "history": _history_summary(hist),
            **ev,
        })
    return RunRecord(spec.name, fold.fold_index, spec.seed, chash, __version__, list(fold.test_ids), labels, stages)


def _run_competitor(spec, train, val, test, plan, cfg, n_views, fold, key, chash, labels, fold_dir, stage0_cache):
    lesion = n_views
    if spec.name == "deep_features":
        cached = None if stage0_cache is None else stage0_cache.get(key)
        if cached is None:
            m0, h0 = train_stage(build_model(spec.arch, seed=spec.seed), train, val, plan.stages[0], cfg)
            if stage0_cache is not None:
                stage0_cache[key] = (m0.clone(), h0)
        else:
            m0 = cached[0]
        lesion_stage = plan.stages[lesion]
        model, _ = train_stage(m0.clone(), train, val, lesion_stage, cfg)

        def featurize(cases):
            return np.stack([extract_deep_features(model, masked_input(v, lesion), v.id).values for v in cases])
    else:
        def featurize(cases):
            return np.stack([extract_radiomics_features(v.volume, v.mask(lesion), id=v.id).values for v in cases])

    X_tr, y_tr = featurize(train), np.array([v.label for v in train])
    clf = fit_classifier(X_tr, y_tr, spec.classifier, seed=spec.seed, fold=fold.fold_index)
    probs = clf.predict_proba(featurize(test))[:, 1]
    y = np.array(labels)
    cm = confusion_metrics(probs, y, spec.threshold)
    stage = {
        "stage": lesion,
        "input": f"masked_view{lesion}",
        "view": view_name(test, lesion),
        "loss": spec.classifier,
        "classifier": spec.classifier,
        "provenance": clf.provenance,
        "probs": [float(p) for p in probs],
        "metrics": {"acc": cm.acc, "auc": auc(probs, y), "tpr": cm.tpr, "tnr": cm.tnr, "dice": None, "iou": None},
    }
    return RunRecord(spec.name, fold.fold_index, spec.seed, chash, __version__, list(fold.test_ids), labels, [stage])


def run_experiment(spec: ExperimentSpec, dataset: Sequence[LabeledVolume], folds: Sequence[FoldSplit],
                   out_dir=None, stage0_cache: Optional[dict] = None) -> list:
    """Train and evaluate ``spec`` on every fold; optionally persist each fold."""
    n_views = check_compatibility(spec, dataset, folds)
    fingerprint = dataset_fingerprint(dataset)
    records = []
    for fold in folds:
        log.info("%s seed %d fold %d", spec.name, spec.seed, fold.fold_index)
        try:
            rec = run_fold(spec, dataset, fold, n_views, fingerprint, out_dir, stage0_cache)
        except TrainingAbort as exc:
            exc.fold = fold.fold_index
            raise
        if out_dir is not None:
            fdir = Path(out_dir) / f"fold{fold.fold_index}"
            fdir.mkdir(parents=True, exist_ok=True)
            (fdir / "record.json").write_text(rec.to_json())
        records.append(rec)
    return records


def load_records(run_dir) -> list:
    from .storage import CorruptFileError

    run_dir = Path(run_dir)
    paths = sorted(run_dir.glob("fold*/record.json"))
    if not paths:
        raise CorruptFileError(f"{run_dir}: no fold records found")
    records = []
    for p in paths:
        try:
            records.append(RunRecord.from_dict(json.loads(p.read_text())))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise CorruptFileError(f"{p}: unreadable run record ({exc})") from exc
    return records
