"""Accuracy metrics, classification maps and the repetition harness."""

from __future__ import annotations

import dataclasses
import logging
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import ensemble
from .data import SceneFeatures, sample_unlabeled, split_dataset

logger = logging.getLogger(__name__)

# index 0 is background
DEFAULT_PALETTE = np.array([
    (0, 0, 0),
    (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200),
    (245, 130, 48), (145, 30, 180), (70, 240, 240), (240, 50, 230),
    (210, 245, 60), (250, 190, 190), (0, 128, 128), (230, 190, 255),
    (170, 110, 40), (255, 250, 200), (128, 0, 0), (170, 255, 195),
], dtype=np.uint8)


class InputError(ValueError):
    pass


def confusion(predictions, truths, k: int) -> np.ndarray:
    """k x k counts; entry (i, j) = true class i+1 predicted as class j+1."""
    pred = np.asarray(predictions, dtype=np.int64).reshape(-1)
    true = np.asarray(truths, dtype=np.int64).reshape(-1)
    if pred.shape != true.shape:
        raise InputError(f"{pred.size} predictions vs {true.size} truths")
    for name, arr in (("prediction", pred), ("truth", true)):
        if arr.size and (arr.min() < 1 or arr.max() > k):
            raise InputError(f"{name} label outside 1..{k}")
    mat = np.zeros((k, k), dtype=np.int64)
    np.add.at(mat, (true - 1, pred - 1), 1)
    return mat


@dataclass
class MetricsReport:
    oa: float
    kappa: float
    aa: float
    per_class: np.ndarray
    matrix: np.ndarray
    empty_classes: list = field(default_factory=list)
    runtime: Optional[float] = None


def metrics(matrix) -> MetricsReport:
    """OA, Cohen's kappa, AA and per-class producer accuracy."""
    mat = np.asarray(matrix, dtype=np.int64)
    total = mat.sum()
    if total <= 0:
        raise InputError("confusion matrix is empty")
    rows = mat.sum(axis=1)
    cols = mat.sum(axis=0)
    diag = np.diag(mat)
    oa = diag.sum() / total
    pe = float((rows * cols).sum()) / float(total) ** 2
    kappa = 1.0 if pe == 1.0 else (oa - pe) / (1.0 - pe)
    empty = [int(i) + 1 for i in np.flatnonzero(rows == 0)]
    if empty:
        warnings.warn(f"classes {empty} have no test samples; counted as accuracy 0", stacklevel=2)
    per_class = np.where(rows > 0, diag / np.where(rows > 0, rows, 1), 0.0)
    return MetricsReport(float(oa), float(kappa), float(per_class.mean()), per_class, mat, empty)


# --------------------------------------------------------------------------
# Maps
# --------------------------------------------------------------------------


def render_map(predictions, labelmap, path, palette=None, mask_background: bool = True) -> None:
    """Write a binary PPM (P6) with class c drawn in ``palette[c]``."""
    pred = np.asarray(predictions, dtype=np.int64)
    labelmap = np.asarray(labelmap)
    if pred.shape != labelmap.shape:
        raise InputError(f"prediction map {pred.shape} vs label map {labelmap.shape}")
    palette = DEFAULT_PALETTE if palette is None else np.asarray(palette, dtype=np.uint8)
    if pred.size and pred.max() >= len(palette):
        raise InputError(f"palette has {len(palette)} entries, class {pred.max()} requested")
    img = palette[pred]
    if mask_background:
        img[labelmap == 0] = 0
    rows, cols = pred.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{cols} {rows}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img, dtype=np.uint8).tobytes())


# --------------------------------------------------------------------------
# Experiments
# --------------------------------------------------------------------------


@dataclass
class RunResult:
    seed: int
    state: ensemble.EnsembleState
    history: ensemble.TrainHistory
    report: MetricsReport
    test_idx: np.ndarray
    predictions: np.ndarray


@dataclass
class AggregateReport:
    runs: list  # MetricsReport per repetition, in repetition order
    seeds: list
    mean: dict
    std: dict


def oa_of(params, features: SceneFeatures, indices, truths) -> float:
    pred = ensemble.predict_all(params, features, indices)
    return float(np.mean(pred == truths)) if len(truths) else 0.0


def run_once(config: ensemble.TrainConfig, features: SceneFeatures, labelmap, k: int,
             seed: int, eval_every: Optional[int] = None) -> RunResult:
    """split -> unlabeled pool -> train -> predict -> metrics with one seed."""
    config = dataclasses.replace(config, seed=seed)
    flat = np.asarray(labelmap).reshape(-1)
    split = split_dataset(labelmap, config.n_per_class, seed)
    lab = split.labeled_indices
    unl = sample_unlabeled(labelmap, config.n_unlabeled, seed) if config.n_unlabeled else []
    test, truth = split.test, flat[split.test]

    hook = None
    if eval_every:
        def hook(state):
            return (oa_of(state.student, features, test, truth),
                    oa_of(state.teacher, features, test, truth))

    start = time.perf_counter()
    state, history = ensemble.train(config, features, lab, flat[lab], unl, k=k,
                                    eval_hook=hook, eval_every=eval_every or 1)
    pred = ensemble.predict_all(state.teacher, features, test)
    report = metrics(confusion(pred, truth, k))
    report.runtime = time.perf_counter() - start
    return RunResult(seed, state, history, report, test, pred)


def aggregate(reports: list, seeds: list) -> AggregateReport:
    keys = ("oa", "kappa", "aa")
    mean, std = {}, {}
    R = len(reports)
    for key in keys:
        vals = np.array([getattr(r, key) for r in reports])
        mean[key] = float(vals.mean())
        std[key] = float(vals.std(ddof=1)) if R > 1 else 0.0
    pc = np.stack([r.per_class for r in reports])
    mean["per_class"] = pc.mean(axis=0)
    std["per_class"] = pc.std(axis=0, ddof=1) if R > 1 else np.zeros(pc.shape[1])
    return AggregateReport(list(reports), list(seeds), mean, std)


def repeat_experiment(config: ensemble.TrainConfig, features: SceneFeatures, labelmap, k: int,
                      R: int, base_seed: int, same_seed: bool = False,
                      on_run: Optional[Callable[[int, RunResult], None]] = None) -> AggregateReport:
    """R independent runs with seeds base_seed .. base_seed + R - 1.

    Each repetition draws a fresh split and unlabeled pool. ``same_seed``
    forces every repetition onto ``base_seed``.
    """
    if R < 1:
        raise InputError("R must be >= 1")
    reports, seeds = [], []
    for r in range(R):
        seed = base_seed if same_seed else base_seed + r
        try:
            result = run_once(config, features, labelmap, k, seed)
        except Exception as exc:
            exc.repetition = r
            logger.error("repetition %d (seed %d) failed: %s", r, seed, exc)
            raise
        if on_run is not None:
            on_run(r, result)
        reports.append(result.report)
        seeds.append(seed)
        logger.info("repetition %d seed %d: OA %.4f kappa %.4f AA %.4f", r, seed,
                    result.report.oa, result.report.kappa, result.report.aa)
    return aggregate(reports, seeds)


def metrics_csv(agg: AggregateReport) -> str:
    """One row per repetition, then mean and std rows. Runtimes are left out."""
    k = len(agg.runs[0].per_class)
    header = ["run", "seed", "OA", "kappa", "AA"] + [f"class_{c}" for c in range(1, k + 1)]
    lines = [",".join(header)]
    for i, (rep, seed) in enumerate(zip(agg.runs, agg.seeds)):
        vals = [rep.oa, rep.kappa, rep.aa, *rep.per_class]
        lines.append(",".join([str(i), str(seed)] + [repr(float(v)) for v in vals]))
    for label, src in (("mean", agg.mean), ("std", agg.std)):
        vals = [src["oa"], src["kappa"], src["aa"], *src["per_class"]]
        lines.append(",".join([label, ""] + [repr(float(v)) for v in vals]))
    return "\n".join(lines) + "\n"


def write_metrics(agg: AggregateReport, path) -> None:
    Path(path).write_text(metrics_csv(agg))
