"""End-to-end sweep: capture taps, score terms once, freeze for each p, evaluate."""

from __future__ import annotations

import csv
import hashlib
import logging
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from . import checkpoint
from .attribution import AttributionScore, Capture, PairSampling, capture_taps, decompose, score_terms
from .data import Dataset
from .linalg import svd
from .model import MatrixSelector, ModelConfig, TransformerModel, clone
from .pruner import P_GRID, EmptyPlanWarning, apply_freeze, make_freeze_plan
from .trainer import accuracy, preset

# Model and recipe used for the corruption-recovery experiment on INT-SUM-small.
SURROGATE_MODEL = ModelConfig(n_layers=1, n_heads=4, d_model=64, d_ff=256, seed=0)
SURROGATE_TRAIN = preset("scratch", early_stop_accuracy=1.0)

log = logging.getLogger(__name__)

REPORT_HEADER = ("task", "p", "accuracy", "base_accuracy", "n_frozen", "selector", "seed")


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage


@dataclass
class SweepRow:
    p: float
    accuracy: float
    n_frozen: int
    frozen: dict[str, tuple[int, ...]] = field(default_factory=dict)


@dataclass
class SweepReport:
    task: str
    fingerprint: str
    selector: str
    seed: int
    base_accuracy: float
    rows: list[SweepRow]
    scores: list[AttributionScore] = field(default_factory=list, repr=False)

    @property
    def best(self) -> SweepRow:
        return max(self.rows, key=lambda r: (r.accuracy, -r.p))

    def csv_rows(self) -> list[list[str]]:
        base = [self.task, "0.0", repr(self.base_accuracy), repr(self.base_accuracy), "0", self.selector, str(self.seed)]
        out = [base]
        for r in self.rows:
            out.append([self.task, repr(r.p), repr(r.accuracy), repr(self.base_accuracy), str(r.n_frozen), self.selector, str(self.seed)])
        return out

    def write(self, path) -> None:
        emit_report(self, path)


def emit_report(report: SweepReport, path) -> None:
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(REPORT_HEADER)
            w.writerows(report.csv_rows())
    except OSError as e:
        raise OSError(f"cannot write report {path}: {e}") from e


def fingerprint(model) -> str:
    return hashlib.sha256(checkpoint.dumps(model)).hexdigest()[:16]


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except Exception as e:  # noqa: BLE001 - re-raised with the stage tag
        raise StageError(name, e) from e


@dataclass
class Attribution:
    capture: Capture
    terms: dict
    scores: list[AttributionScore]


def attribute(
    model: TransformerModel,
    train_set: Dataset,
    selector: MatrixSelector,
    pairs: PairSampling,
) -> Attribution:
    names = selector.select(model)
    cap = capture_taps(model, train_set, names)
    terms = decompose(model, names)
    return Attribution(capture=cap, terms=terms, scores=score_terms(cap, pairs, terms))


def run_sweep(
    model: TransformerModel,
    train_set: Dataset,
    test_set: Dataset,
    selector: MatrixSelector | None = None,
    p_grid: Sequence[float] = P_GRID,
    pairs: PairSampling | None = None,
    task: str | None = None,
) -> SweepReport:
    """Score once on the training split, then freeze and evaluate each ``p``."""
    selector = selector or MatrixSelector("key")
    pairs = pairs or PairSampling()
    base_acc = _stage("eval-base", accuracy, model, test_set)
    attr = _stage("attribute", attribute, model, train_set, selector, pairs)
    rows = []
    for p in p_grid:
        if not 0.0 < p < 1.0:
            raise StageError("sweep", ValueError(f"p={p} outside (0, 1)"))
        with warnings.catch_warnings():
            # Small p leaving every matrix intact is a normal grid point here.
            warnings.simplefilter("ignore", EmptyPlanWarning)
            plan = _stage("plan", make_freeze_plan, attr.scores, p, attr.capture.mean_x)
        pruned = _stage("prune", apply_freeze, model, plan, attr.terms)
        acc = _stage("eval", accuracy, pruned, test_set)
        log.info("p=%.2f frozen=%d accuracy=%.4f", p, plan.n_frozen, acc)
        rows.append(SweepRow(p=p, accuracy=acc, n_frozen=plan.n_frozen, frozen=plan.frozen))
    return SweepReport(
        task=task or test_set.task,
        fingerprint=fingerprint(model),
        selector=str(selector),
        seed=pairs.seed,
        base_accuracy=base_acc,
        rows=rows,
        scores=attr.scores,
    )


def corrupt_model(model: TransformerModel, matrix: str, strength: float, seed: int = 0) -> TransformerModel:
    """Add ``strength * sigma_max * u v^T`` with seeded random unit ``u``, ``v``."""
    out = clone(model)
    layer = out.matrix(matrix)
    if strength == 0:
        return out
    w = layer.weight.detach().numpy()
    rng = np.random.default_rng(seed)
    u = rng.standard_normal(w.shape[0])
    v = rng.standard_normal(w.shape[1])
    u /= np.linalg.norm(u)
    v /= np.linalg.norm(v)
    sigma_c = strength * svd(w, name=matrix).sigma[0]
    with torch.no_grad():
        layer.weight += torch.as_tensor(sigma_c * np.outer(u, v))
    return out


def calibrate_corruption(
    model: TransformerModel,
    matrix: str,
    test_set: Dataset,
    min_drop: float = 0.30,
    seed: int = 0,
    hi: float = 64.0,
    steps: int = 12,
) -> tuple[float, float]:
    """Smallest strength (by bisection) dropping test accuracy by ``min_drop``.

    Returns ``(strength, corrupted_accuracy)``.
    """
    base = accuracy(model, test_set)

    def acc_at(s):
        return accuracy(corrupt_model(model, matrix, s, seed), test_set)

    hi_acc = acc_at(hi)
    if base - hi_acc < min_drop:
        raise ValueError(f"strength {hi} only drops accuracy from {base:.3f} to {hi_acc:.3f}")
    lo = 0.0
    for _ in range(steps):
        mid = 0.5 * (lo + hi)
        a = acc_at(mid)
        if base - a >= min_drop:
            hi, hi_acc = mid, a
        else:
            lo = mid
    return hi, hi_acc
