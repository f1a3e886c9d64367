"""Staged training: classification warm start, then mask-guided refinement.

Stage 0 trains on the global image with cross-entropy only. Each later stage
either adds the heatmap-alignment term for one expert view, or swaps the input
for the masked view, depending on the plan. Gradual plans thread the model from
stage to stage; independent plans restart every later stage from stage 0.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import attribution
from .errors import InvalidInputError, TrainingAbort
from .losses import LossConfig, classification_loss, composite_loss, one_hot, xai_loss_batch
from .models import ModelState
from .volumes import LabeledVolume, shift_zero_fill, MAX_SHIFT

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 1e-5
    warmup_epochs: int = 50
    max_epochs: int = 300
    patience: int = 50
    batch_size: int = 8
    rng_seed: int = 0
    lam: float = 1.0
    min_delta: float = 1e-5
    augment: bool = True
    lr_ramp_epochs: int = 0
    normalize_grad: str = "full"
    upsample: str = "trilinear"
    optimizer: str = "adam"

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise InvalidInputError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.patience > self.max_epochs:
            raise InvalidInputError("patience must not exceed max_epochs")
        if self.warmup_epochs >= self.max_epochs:
            raise InvalidInputError("warmup_epochs must be smaller than max_epochs")
        if self.batch_size < 1:
            raise InvalidInputError("batch_size must be >= 1")
        if self.lam < 0:
            raise InvalidInputError("lambda must be non-negative")


@dataclass(frozen=True)
class Stage:
    """One row cell of the ablation table.

    ``input_view`` selects the masked input (``None`` for the global image);
    ``guide_view`` selects the mask the heatmap is aligned to (``None`` for
    classification only).
    """

    index: int
    input_view: Optional[int] = None
    guide_view: Optional[int] = None
    lam: float = 0.0

    @property
    def input_name(self) -> str:
        return "global" if self.input_view is None else f"masked_view{self.input_view}"

    @property
    def loss_name(self) -> str:
        return "cls" if self.guide_view is None or self.lam == 0 else "cls+lambda*xai"


@dataclass(frozen=True)
class StagePlan:
    stages: tuple
    gradual: bool = True

    def __post_init__(self):
        if not self.stages or self.stages[0].input_view is not None or self.stages[0].guide_view is not None:
            raise InvalidInputError("stage 0 must train on the global image with the classification loss only")
        views = [s.guide_view or s.input_view for s in self.stages[1:]]
        if any(v is None for v in views) or views != sorted(views):
            raise InvalidInputError("later stages must each use one view, ordered broad to fine")

    @classmethod
    def build(cls, n_views: int, *, gradual: bool = True, guided: bool = True, lam: float = 1.0) -> "StagePlan":
        stages = [Stage(0)]
        for i in range(1, n_views + 1):
            stages.append(Stage(i, guide_view=i, lam=lam) if guided else Stage(i, input_view=i))
        return cls(tuple(stages), gradual)


class EarlyStopper:
    """Patience rule with a warm-up floor.

    An epoch counts as an improvement when validation loss drops by more than
    ``min_delta`` below the best so far. Training stops once ``patience``
    epochs have passed since the later of the last improvement and the end of
    warm-up, so a flat curve stops at ``warmup + patience``.
    """

    def __init__(self, warmup: int, patience: int, max_epochs: int, min_delta: float = 1e-5):
        self.warmup = warmup
        self.patience = patience
        self.max_epochs = max_epochs
        self.min_delta = min_delta
        self.best = math.inf
        self.best_epoch = 0
        self.last_improvement = 0
        self.reason = None

    def update(self, epoch: int, val_loss: float) -> bool:
        """Feed epoch ``epoch`` (1-based); returns True when training should stop."""
        if val_loss < self.best - self.min_delta:
            self.last_improvement = epoch
        if val_loss < self.best:
            self.best = val_loss
            self.best_epoch = epoch
        if epoch >= self.max_epochs:
            self.reason = "max_epochs"
            return True
        if epoch - max(self.last_improvement, self.warmup) >= self.patience:
            self.reason = "early_stopping"
            return True
        return False


def stop_epoch(val_losses: Sequence[float], warmup: int, patience: int, max_epochs: int, min_delta: float = 1e-5) -> int:
    stopper = EarlyStopper(warmup, patience, max_epochs, min_delta)
    for epoch, v in enumerate(val_losses, start=1):
        if stopper.update(epoch, v):
            return epoch
    return len(val_losses)


@dataclass
class StageHistory:
    stage: int
    records: list = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = math.inf
    stop_reason: str = ""

    @property
    def val_losses(self) -> list:
        return [r["val_loss"] for r in self.records]


@dataclass
class TrainResult:
    model: ModelState
    stage_models: list
    histories: list
    initial_parameters: list
    plan: StagePlan


# --------------------------------------------------------------------------- data plumbing


def stage_arrays(cases: Sequence[LabeledVolume], stage: Stage):
    """Stack inputs, labels and guide masks for one stage."""
    for v in cases:
        for view in (stage.input_view, stage.guide_view):
            if view is not None and not v.has_mask(view):
                raise InvalidInputError(f"{v.id}: stage {stage.index} needs mask view {view}")
    x = np.stack([masked_input(v, stage.input_view) for v in cases]).astype(np.float32)
    y = np.array([v.label for v in cases], dtype=np.int64)
    m = None
    if stage.guide_view is not None:
        m = np.stack([v.mask(stage.guide_view).voxels for v in cases]).astype(np.float32)
    return x, y, m


def masked_input(v: LabeledVolume, view: Optional[int]) -> np.ndarray:
    if view is None:
        return v.volume
    return v.volume * v.mask(view).voxels.astype(v.volume.dtype)


def _augment_batch(rng: np.random.Generator, x: np.ndarray, m: Optional[np.ndarray]):
    x = x.copy()
    m = None if m is None else m.copy()
    for b in range(x.shape[0]):
        shift = rng.integers(-MAX_SHIFT, MAX_SHIFT + 1, size=2)
        flip = rng.random() < 0.5
        x[b] = shift_zero_fill(x[b], shift)
        if flip:
            x[b] = x[b][::-1]
        if m is not None:
            m[b] = shift_zero_fill(m[b], shift)
            if flip:
                m[b] = m[b][::-1]
    return x, m


def _dtype(model: ModelState):
    return next(model.net.parameters()).dtype


def stage_objective(model: ModelState, x, y, m, lam: float, cfg: TrainConfig, create_graph: bool = True):
    """Return ``(total, cls, xai_or_None, logits)`` for one batch."""
    dt = _dtype(model)
    xt = torch.from_numpy(x).to(dt)[:, None]
    yt = torch.from_numpy(y)
    n_classes = model.descriptor["num_classes"]
    if lam > 0 and m is not None:
        logits, h = attribution.compute_heatmaps(
            model, xt, yt, mode=cfg.upsample, normalize_grad=cfg.normalize_grad, create_graph=create_graph
        )
        xai = xai_loss_batch(h, torch.from_numpy(m).to(dt))
    else:
        logits = model.net(xt)
        xai = None
    cls = classification_loss(F.softmax(logits, dim=1), one_hot(yt, n_classes, dt))
    total = composite_loss(cls, xai, LossConfig(lam, n_classes)) if xai is not None else cls
    return total, cls, xai, logits


def evaluate_objective(model: ModelState, x, y, m, lam: float, cfg: TrainConfig) -> dict:
    """Sample-weighted validation losses of the active stage."""
    was = model.net.training
    model.net.eval()
    tot = cls_sum = xai_sum = 0.0
    try:
        for start in range(0, len(y), cfg.batch_size):
            sl = slice(start, start + cfg.batch_size)
            mb = None if m is None else m[sl]
            if lam > 0 and mb is not None:
                total, cls, xai, _ = stage_objective(model, x[sl], y[sl], mb, lam, cfg, create_graph=False)
            else:
                with torch.no_grad():
                    total, cls, xai, _ = stage_objective(model, x[sl], y[sl], None, 0.0, cfg)
            k = len(y[sl])
            tot += total.item() * k
            cls_sum += cls.item() * k
            xai_sum += (xai.item() if xai is not None else 0.0) * k
    finally:
        model.net.train(was)
    n = max(len(y), 1)
    out = {"val_loss": tot / n, "val_cls": cls_sum / n}
    if lam > 0 and m is not None:
        out["val_xai"] = xai_sum / n
    return out


def predict_proba(model: ModelState, x: np.ndarray, batch_size: int = 8) -> np.ndarray:
    """Softmax probabilities for a stack of input volumes."""
    was = model.net.training
    model.net.eval()
    out = []
    try:
        with torch.no_grad():
            for start in range(0, len(x), batch_size):
                xt = torch.from_numpy(np.ascontiguousarray(x[start:start + batch_size])).to(_dtype(model))[:, None]
                out.append(F.softmax(model.net(xt), dim=1).cpu().numpy())
    finally:
        model.net.train(was)
    return np.concatenate(out) if out else np.zeros((0, model.descriptor["num_classes"]))


# --------------------------------------------------------------------------- training


def _stage_seed(cfg: TrainConfig, stage: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([cfg.rng_seed, stage])


def train_stage(
    model: ModelState,
    train: Sequence[LabeledVolume],
    val: Sequence[LabeledVolume],
    stage: Stage,
    cfg: TrainConfig,
    log_path: Optional[Path] = None,
    on_epoch: Optional[Callable[[dict], None]] = None,
):
    """Optimise one stage in place and restore its best-validation checkpoint.

    Returns ``(model, history)``.
    """
    lam = stage.lam if stage.guide_view is not None else 0.0
    x_tr, y_tr, m_tr = stage_arrays(train, stage)
    x_va, y_va, m_va = stage_arrays(val, stage)
    seq = _stage_seed(cfg, stage.index)
    torch.manual_seed(int(seq.generate_state(1)[0]))
    rng = np.random.default_rng(seq)

    params = [p for p in model.net.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    stopper = EarlyStopper(cfg.warmup_epochs, cfg.patience, cfg.max_epochs, cfg.min_delta)
    history = StageHistory(stage.index)
    best_state = {k: v.detach().clone() for k, v in model.net.state_dict().items()}
    log_fh = open(log_path, "w") if log_path is not None else None
    model.net.train()
    try:
        for epoch in range(1, cfg.max_epochs + 1):
            if cfg.lr_ramp_epochs:
                scale = min(1.0, epoch / cfg.lr_ramp_epochs)
                for g in opt.param_groups:
                    g["lr"] = cfg.learning_rate * scale
            order = rng.permutation(len(y_tr))
            sums = {"L": 0.0, "L_cls": 0.0, "L_xai": 0.0}
            for b, start in enumerate(range(0, len(order), cfg.batch_size)):
                idx = np.sort(order[start:start + cfg.batch_size])
                xb, mb = x_tr[idx], None if m_tr is None else m_tr[idx]
                if cfg.augment:
                    xb, mb = _augment_batch(rng, xb, mb)
                total, cls, xai, _ = stage_objective(model, xb, y_tr[idx], mb, lam, cfg)
                if not torch.isfinite(total):
                    raise TrainingAbort("non-finite training loss", stage=stage.index, epoch=epoch, batch=b)
                opt.zero_grad(set_to_none=True)
                total.backward()
                opt.step()
                k = len(idx)
                sums["L"] += total.item() * k
                sums["L_cls"] += cls.item() * k
                if xai is not None:
                    sums["L_xai"] += xai.item() * k
            n = len(y_tr)
            rec = {"epoch": epoch, "stage": stage.index, "L_cls": sums["L_cls"] / n}
            if lam > 0:
                rec["lambda"] = lam
                rec["L_xai"] = sums["L_xai"] / n
            rec["L"] = sums["L"] / n
            val_metrics = evaluate_objective(model, x_va, y_va, m_va, lam, cfg)
            if not math.isfinite(val_metrics["val_loss"]):
                raise TrainingAbort("non-finite validation loss", stage=stage.index, epoch=epoch)
            rec.update(val_metrics)
            history.records.append(rec)
            if log_fh is not None:
                log_fh.write(json.dumps(rec, sort_keys=True) + "\n")
            if on_epoch is not None:
                on_epoch(rec)
            improved = rec["val_loss"] < stopper.best
            stop = stopper.update(epoch, rec["val_loss"])
            if improved:
                best_state = {k: v.detach().clone() for k, v in model.net.state_dict().items()}
            if stop:
                break
    finally:
        if log_fh is not None:
            log_fh.close()
    model.net.load_state_dict(best_state)
    history.best_epoch = stopper.best_epoch
    history.best_val_loss = stopper.best
    history.stop_reason = stopper.reason or "max_epochs"
    log.info("stage %d stopped at epoch %d (%s), best epoch %d val %.5f", stage.index, len(history.records),
             history.stop_reason, history.best_epoch, history.best_val_loss)
    return model, history


def run_curriculum(
    model: ModelState,
    train: Sequence[LabeledVolume],
    val: Sequence[LabeledVolume],
    plan: StagePlan,
    cfg: TrainConfig,
    stage_dirs: Optional[Sequence[Path]] = None,
    stage0: Optional[tuple] = None,
) -> TrainResult:
    """Run every stage of ``plan`` starting from ``model``.

    ``stage0`` may carry a precomputed ``(ModelState, StageHistory)`` for the
    shared classification-only stage; it must come from the same model seed,
    data and config.
    """
    initial, models, histories = [], [], []
    for stage in plan.stages:
        if stage.index == 0:
            current = model.clone()
        elif plan.gradual:
            current = models[-1].clone()
        else:
            current = models[0].clone()
        initial.append(current.flat_parameters().clone())
        log_path = None
        if stage_dirs is not None:
            Path(stage_dirs[stage.index]).mkdir(parents=True, exist_ok=True)
            log_path = Path(stage_dirs[stage.index]) / "epochs.jsonl"
        if stage.index == 0 and stage0 is not None:
            trained, hist = stage0[0].clone(), stage0[1]
            if log_path is not None:
                log_path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in hist.records))
        else:
            try:
                trained, hist = train_stage(current, train, val, stage, cfg, log_path)
            except TrainingAbort as exc:
                exc.stage = stage.index
                raise
            except InvalidInputError as exc:
                raise InvalidInputError(f"stage {stage.index}: {exc}") from exc
        models.append(trained)
        histories.append(hist)
    return TrainResult(models[-1], models, histories, initial, plan)


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
