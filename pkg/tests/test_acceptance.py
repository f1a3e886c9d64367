"""Acceptance checks, one per criterion.

Each check prints ``AC<n> PASS|FAIL <detail>``; the lines are repeated in the
pytest terminal summary. The two long training checks (AC3, AC4) share a
disk-cached grid run, see ``grid.py``.

Run alone with ``pytest tests/test_acceptance.py -v`` or ``python tests/test_acceptance.py``.
"""
from __future__ import annotations

import math
import time

import numpy as np
import pytest
import torch
import torch.nn.functional as F

import grid
from test_attribution import _autograd, _fd_grad, _xai_objective, rel_err, strided_toy
from test_metrics import brute_auc, enumerate_p
from test_volumes import brute_force_nearest

from maskguide.attribution import forward_with_capture, gradcam_heatmap, gradcam_weights
from maskguide.cli import main as cli_main
from maskguide.curriculum import StagePlan, TrainConfig, evaluate_objective, run_curriculum, stage_arrays, stop_epoch
from maskguide.experiments import ExperimentSpec, table1_cells
from maskguide.losses import LossConfig, classification_loss, composite_loss, xai_loss
from maskguide.metrics import auc, dice_iou, wilcoxon_paired
from maskguide.models import build_model, parameter_count
from maskguide.volumes import apply_window, generate_phantoms, resample_nearest, stratified_folds

RESULTS: dict = {}


def verdict(ac: str, ok: bool, detail: str) -> None:
    line = f"{ac} {'PASS' if ok else 'FAIL'} {detail}"
    RESULTS[ac] = line
    print(line)
    assert ok, line


# --------------------------------------------------------------------------- AC1


def test_ac1_loss_identities():
    t0 = time.perf_counter()
    perfect = float(classification_loss([0.0, 1.0], [0.0, 1.0]))
    uniform = float(classification_loss([0.5, 0.5], [1.0, 0.0]))
    m = (np.random.default_rng(0).random((4, 4, 4)) < 0.4).astype(np.float64)
    same = float(xai_loss(m, m))
    miss = float(xai_loss(np.zeros((4, 4, 4)), np.ones((4, 4, 4))))
    cls = classification_loss(torch.tensor([0.3, 0.7], dtype=torch.float64), torch.tensor([0.0, 1.0], dtype=torch.float64))
    comp = composite_loss(cls, torch.tensor(0.4, dtype=torch.float64), LossConfig(0.0))
    bitwise = comp.numpy().tobytes() == cls.numpy().tobytes()
    dt = time.perf_counter() - t0
    ok = perfect <= 1e-7 and abs(uniform - math.log(2)) <= 1e-9 and same == 0 and miss == 1 and bitwise and dt < 1
    verdict("AC1", ok, f"CE(one-hot)={perfect:.2e} CE(uniform)-ln2={uniform - math.log(2):.1e} "
                       f"xai(h=m)={same} xai(0,1)={miss} lambda0-bitwise={bitwise} {dt:.3f}s")


# --------------------------------------------------------------------------- AC2


def test_ac2_gradcam_correctness():
    t0 = time.perf_counter()
    errs = []
    for make in (lambda: build_model("toy", seed=3, dtype=torch.float64), lambda: strided_toy(4)):
        m = make()
        assert parameter_count(m) <= 1000
        rng = np.random.default_rng(11)
        x = torch.from_numpy(rng.random((2, 1, 6, 6, 4)))
        # channel weights against central differences through the feature-map override
        logits, A = forward_with_capture(m, x[:1])
        c = int(logits.argmax())
        alpha = gradcam_weights(logits[:, c], A, create_graph=False)[0]
        A0, h = A.detach(), 1e-6  # the map feeds a ReLU; a small step rarely straddles its kink
        fd = torch.zeros_like(alpha)
        for idx in np.ndindex(*A0.shape[1:]):
            e = torch.zeros_like(A0)
            e[(0,) + idx] = h
            fd[idx[0]] += (forward_with_capture(m, x[:1], override=A0 + e)[0][0, c]
                           - forward_with_capture(m, x[:1], override=A0 - e)[0][0, c]) / (2 * h)
        errs.append(rel_err(alpha, fd / np.prod(A0.shape[2:])))
        # parameter gradient of the alignment loss (second order through Grad-CAM)
        y = torch.tensor([0, 1])
        mask = torch.from_numpy((rng.random((2, 6, 6, 4)) < 0.3).astype(np.float64))
        f = lambda: _xai_objective(m, x, y, mask, "full")
        errs.append(rel_err(_autograd(m, f), _fd_grad(m, f)))
    A = torch.tensor([[[1.0, 2.0], [3.0, 4.0]], [[2.0, 1.0], [0.0, 6.0]]])[None, :, :, :, None]
    hand = gradcam_heatmap(torch.tensor([[1.0, -1.0]]), A)[0, :, :, 0].tolist() == [[0.0, 1.0], [3.0, 0.0]]
    dt = time.perf_counter() - t0
    ok = max(errs) < 1e-3 and hand and dt < 30
    verdict("AC2", ok, f"max relative error {max(errs):.2e} (alpha and grad L_xai, 2 toy models) "
                       f"2x2 example exact={hand} {dt:.1f}s")


# --------------------------------------------------------------------------- AC3 / AC4


@pytest.fixture(scope="module")
def ablation():
    return grid.ablation_grid()


def _stage_metric(records, stage, key):
    return np.array([r.stage(stage)["metrics"][key] for r in records], dtype=float)


@pytest.mark.slow
def test_ac3_attention_alignment(ablation):
    recs = ablation["records"]["doctor_in_the_loop"][0]
    dice = np.stack([_stage_metric(recs, s, "dice") for s in (0, 1, 2)], axis=1)  # folds x stages
    monotone = int(np.sum((dice[:, 1] >= dice[:, 0]) & (dice[:, 2] >= dice[:, 1])))
    gain = float(np.mean(dice[:, 2] - dice[:, 0]))
    seconds = ablation["seconds"]["doctor_in_the_loop"][0]
    ok = monotone >= 4 and gain >= 0.10 and seconds <= 1800
    means = " -> ".join(f"{v:.3f}" for v in dice.mean(axis=0))
    verdict("AC3", ok, f"mean Dice {means}; non-decreasing in {monotone}/5 folds; "
                       f"stage2-stage0 {gain:+.3f}; 5-fold run {seconds / 60:.1f} min")


@pytest.mark.slow
def test_ac4_ablation_ordering(ablation):
    names = grid.ORDER
    final = {n: float(np.mean([_stage_metric(ablation["records"][n][s], 2, "auc") for s in grid.SEEDS]))
             for n in names}
    margins = {n: final["doctor_in_the_loop"] - final[n] for n in names[1:]}
    snr = grid.high_snr_grid()
    floor = {n: float(np.mean(_stage_metric(snr["records"][n][0], 2, "auc"))) for n in names}
    ok = all(m >= 0 for m in margins.values()) and all(v > 0.5 for v in floor.values())
    verdict("AC4", ok, "final AUC " + " ".join(f"{n}={v:.3f}" for n, v in final.items())
            + "; high-SNR " + " ".join(f"{n}={v:.3f}" for n, v in floor.items()))


# --------------------------------------------------------------------------- AC5


def test_ac5_metric_oracles():
    rng = np.random.default_rng(2024)
    dice_ok = True
    for _ in range(1000):
        shape = tuple(rng.integers(1, 6, size=3))
        a, b = rng.random(shape) < rng.random(), rng.random(shape) < rng.random()
        d, j = dice_iou(a, b)
        dice_ok &= math.isclose(j, d / (2 - d), rel_tol=0, abs_tol=1e-15)
    auc_ok = True
    for _ in range(200):
        n = int(rng.integers(2, 40))
        y = rng.integers(0, 2, size=n)
        y[:2] = (0, 1)
        p = np.round(rng.random(n), 1)
        auc_ok &= auc(p, y) == brute_auc(p, y)
    wil_ok = True
    for n in range(1, 11):
        for _ in range(10):
            d = rng.integers(-3, 4, size=n).astype(float) if rng.random() < 0.4 else rng.normal(size=n)
            res = wilcoxon_paired(d, np.zeros(n))
            wil_ok &= (res is None) if not np.any(d) else abs(res.p_value - enumerate_p(d)) < 1e-12
    rate = np.mean([wilcoxon_paired(rng.random(50), rng.random(50)).p_value < 0.05 for _ in range(1000)])
    ok = dice_ok and auc_ok and wil_ok and 0.03 <= rate <= 0.07
    verdict("AC5", ok, f"IoU=D/(2-D) {dice_ok}; AUC brute force {auc_ok}; exact Wilcoxon n<=10 {wil_ok}; "
                       f"null rejection rate {rate:.3f}")


# --------------------------------------------------------------------------- AC6


def test_ac6_early_stopping():
    constant = stop_epoch([0.5] * 300, 50, 50, 300)
    improving = stop_epoch([1 - 1e-3 * e for e in range(300)], 50, 50, 300)
    cases = generate_phantoms(20, 0.3, grid=(24, 24, 12), rng_seed=6)
    train, val = cases[:12], cases[12:16]
    cfg = TrainConfig(max_epochs=4, warmup_epochs=1, patience=2, batch_size=4, learning_rate=5e-3)
    restored = []
    for gradual, guided in ((True, True), (False, True), (True, False), (False, False)):
        plan = StagePlan.build(2, gradual=gradual, guided=guided)
        res = run_curriculum(build_model("compact", seed=1), train, val, plan, cfg)
        for stage, model, hist in zip(plan.stages, res.stage_models, res.histories):
            x, y, m = stage_arrays(val, stage)
            lam = stage.lam if stage.guide_view is not None else 0.0
            final = evaluate_objective(model, x, y, m, lam, cfg)["val_loss"]
            restored.append(all(final <= v + 1e-6 for v in hist.val_losses))
    ok = constant == 100 and improving == 300 and all(restored)
    verdict("AC6", ok, f"constant stops at {constant}; improving runs to {improving}; "
                       f"best checkpoint restored in {sum(restored)}/{len(restored)} stages")


# --------------------------------------------------------------------------- AC7


TABLE1 = {
    "doctor_in_the_loop": ["L_cls", "L_cls + lambda L_xai", "L_cls + lambda L_xai"],
    "xai_guide": ["L_cls", "L_cls + lambda L_xai", "L_cls + lambda L_xai"],
    "gradual_learning": ["L_cls", "L_cls", "L_cls"],
    "segmentation": ["L_cls", "L_cls", "L_cls"],
}
TABLE1_INPUTS = {
    "doctor_in_the_loop": ["Global Image"] * 3,
    "xai_guide": ["Global Image"] * 3,
    "gradual_learning": ["Global Image", "Masked Lungs", "Masked Lesion"],
    "segmentation": ["Global Image", "Masked Lungs", "Masked Lesion"],
}


def test_ac7_table1_fidelity():
    cells_ok = all(
        table1_cells(ExperimentSpec.named(n)) == list(zip(TABLE1_INPUTS[n], TABLE1[n])) for n in TABLE1
    )
    cases = generate_phantoms(20, 0.3, grid=(24, 24, 12), rng_seed=6)
    train, val = cases[:12], cases[12:16]
    cfg = TrainConfig(max_epochs=2, warmup_epochs=1, patience=1, batch_size=4)
    threading = []
    for n in TABLE1:
        spec = ExperimentSpec.named(n, train=cfg)
        res = run_curriculum(build_model("compact", seed=2), train, val, spec.plan(2), cfg)
        init, best = res.initial_parameters, [m.flat_parameters() for m in res.stage_models]
        if spec.gl_enabled:
            ok = torch.equal(init[1], best[0]) and torch.equal(init[2], best[1]) and not torch.equal(init[2], best[0])
        else:
            ok = torch.equal(init[1], best[0]) and torch.equal(init[2], best[0]) and not torch.equal(init[2], best[1])
        threading.append(ok)
    verdict("AC7", cells_ok and all(threading),
            f"table cells match {cells_ok}; GL threads / non-GL restarts {sum(threading)}/4 specs")


# --------------------------------------------------------------------------- AC8


def test_ac8_determinism(tmp_path, monkeypatch):
    monkeypatch.setenv("MASKGUIDE_OUTPUT_ROOT", str(tmp_path))
    assert cli_main(["generate", "--n", "20", "--balance", "0.3", "--seed", "3", "--grid", "24", "24", "12",
                     "--out", "ph"]) == 0
    tiny = ["--max-epochs", "2", "--warmup", "1", "--patience", "1", "--batch-size", "4", "--seed", "5"]
    same = []
    for spec in ("doctor_in_the_loop", "gradual_learning"):
        for out in ("a", "b"):
            assert cli_main(["train", "--spec", spec, "--dataset", "ph", "--out", f"{spec}_{out}", *tiny]) == 0
        same.append((tmp_path / f"{spec}_a" / "metrics.csv").read_bytes()
                    == (tmp_path / f"{spec}_b" / "metrics.csv").read_bytes())
    for out in ("r1", "r2"):
        assert cli_main(["report", "doctor_in_the_loop_a", "gradual_learning_a", "--out", out, "--no-panels"]) == 0
    same.append(all((tmp_path / "r1" / f).read_bytes() == (tmp_path / "r2" / f).read_bytes()
                    for f in ("performance.csv", "attention.csv", "significance.csv")))
    verdict("AC8", all(same), f"bitwise-identical metric CSVs {sum(same)}/{len(same)}")


# --------------------------------------------------------------------------- AC9


def test_ac9_preprocessing():
    w = apply_window(np.array([-900.0, -300.0, 300.0]))
    window_ok = w.tolist() == [0.0, 0.5, 1.0]
    rng = np.random.default_rng(9)
    resample_ok = True
    for _ in range(25):
        vol = rng.normal(size=tuple(rng.integers(2, 6, size=3)))
        sp = tuple(rng.choice([0.5, 1.0, 1.5, 2.0], size=3))
        tg = tuple(rng.choice([0.7, 1.0, 2.0], size=3))
        if any(round(n * a / b) < 1 for n, a, b in zip(vol.shape, sp, tg)):
            continue  # below one output voxel the resampler keeps a single slice; the oracle has none
        resample_ok &= np.array_equal(resample_nearest(vol, sp, tg), brute_force_nearest(vol, sp, tg))
    folds_ok, checked = True, 0
    while checked < 100:
        n = int(rng.integers(10, 120))
        labels = list((rng.random(n) < rng.uniform(0.15, 0.6)).astype(int))
        if min(labels.count(0), labels.count(1)) < 5:
            continue
        checked += 1
        for f in stratified_folds(labels, 5, rng_seed=int(rng.integers(1 << 30))):
            for part in (f.train_ids, f.val_ids, f.test_ids):
                pos = sum(labels[i] for i in part)
                folds_ok &= abs(pos - sum(labels) * len(part) / n) <= 1 + 1e-9
                folds_ok &= abs((len(part) - pos) - (n - sum(labels)) * len(part) / n) <= 1 + 1e-9
    verdict("AC9", window_ok and resample_ok and folds_ok,
            f"window [-900,-300,300]->{w.tolist()}; NN resample oracle {resample_ok}; "
            f"+-1 stratification on {checked} label sets {folds_ok}")


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-v", "-s"]))
