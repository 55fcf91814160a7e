"""Linear attribution scores for the rank-one terms of selected matrices.

For a pair of training examples ``(x, x')`` and a term ``E_i`` of matrix ``A``
the first-order estimate of the loss change from feeding ``E_i`` the activation
of ``x'`` instead of ``x`` is ``sum_t G_t . E_i (x'_t - x_t)``, with ``G`` the
clean-run gradient at the pre-bias output of ``A``. Because ``A x`` is the sum of
the ``E_i x``, that one gradient serves every term. A term's score is the max of
the estimate over sampled pairs.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .data import Dataset
from .linalg import RankOneTerm, ShapeError, apply_term, rank_one_terms, svd
from .model import MatrixSelector, TapRecord, TransformerModel, backward_with_taps

CSV_HEADER = ("matrix_name", "singular_index", "sigma", "delta_l", "n_pairs")


@dataclass(frozen=True)
class PairSampling:
    n_pairs: int = 256
    seed: int = 0
    mode: str = "uniform"

    def __post_init__(self):
        if self.n_pairs < 1:
            raise ValueError("n_pairs must be >= 1")
        if self.mode != "uniform":
            raise ValueError(f"unknown pair sampling mode {self.mode!r}")

    def sample(self, n_examples: int) -> tuple[np.ndarray, np.ndarray]:
        """Ordered pairs ``(i, j)`` of distinct example indices."""
        if n_examples < 2:
            raise ValueError("need at least two examples to draw distinct pairs")
        rng = np.random.default_rng(self.seed)
        i = rng.integers(0, n_examples, size=self.n_pairs)
        j = rng.integers(0, n_examples - 1, size=self.n_pairs)
        j = j + (j >= i)
        return i, j


@dataclass(frozen=True)
class AttributionScore:
    matrix: str
    index: int
    sigma: float
    score: float
    n_pairs: int


@dataclass
class Capture:
    """Batched taps (leading example axis) and the per-position mean input."""

    taps: dict[str, TapRecord]
    mean_x: dict[str, np.ndarray]
    n_examples: int
    loss: float

    def __len__(self) -> int:
        return self.n_examples * len(self.taps)

    @property
    def names(self) -> list[str]:
        return list(self.taps)

    def record(self, name: str, k: int) -> TapRecord:
        t = self.taps[name]
        return TapRecord(name=name, x=t.x[k], g=t.g[k])


def capture_taps(
    model: TransformerModel,
    dataset: Dataset,
    selector: MatrixSelector | Sequence[str],
    batch_size: int = 1024,
) -> Capture:
    if len(dataset) == 0:
        raise ValueError("cannot capture taps on an empty dataset")
    tokens, targets = dataset.tokens(), dataset.targets()
    xs: dict[str, list[np.ndarray]] = {}
    gs: dict[str, list[np.ndarray]] = {}
    sums: dict[str, np.ndarray] = {}
    total = 0.0
    for start in range(0, len(dataset), batch_size):
        sl = slice(start, start + batch_size)
        value, taps = backward_with_taps(model, tokens[sl], targets[sl], selector)
        total += value
        for name, t in taps.items():
            xs.setdefault(name, []).append(t.x)
            gs.setdefault(name, []).append(t.g)
            # Fixed-order accumulation keeps the mean bitwise reproducible.
            part = np.add.reduce(t.x, axis=0)
            sums[name] = part if name not in sums else sums[name] + part
    taps = {
        n: TapRecord(name=n, x=np.concatenate(xs[n]), g=np.concatenate(gs[n])) for n in xs
    }
    mean_x = {n: s / len(dataset) for n, s in sums.items()}
    return Capture(taps=taps, mean_x=mean_x, n_examples=len(dataset), loss=total)


def decompose(model: TransformerModel, names: Iterable[str]) -> dict[str, list[RankOneTerm]]:
    out = {}
    for name in names:
        weight = model.matrix(name).weight.detach().numpy()
        out[name] = rank_one_terms(svd(weight, name=name))
    return out


def delta_l_pair(tap_x: TapRecord, tap_xp: TapRecord, term: RankOneTerm) -> float:
    """First-order loss change from patching ``E_i x`` to ``E_i x'`` (clean run on x)."""
    if tap_x.name != tap_xp.name:
        raise ShapeError(f"pair mixes matrices {tap_x.name!r} and {tap_xp.name!r}")
    if tap_x.x.shape != tap_xp.x.shape:
        raise ShapeError(f"activation shapes differ: {tap_x.x.shape} vs {tap_xp.x.shape}")
    delta = apply_term(term, tap_xp.x - tap_x.x)
    if delta.shape != tap_x.g.shape:
        raise ShapeError(f"gradient shape {tap_x.g.shape} does not match term output {delta.shape}")
    return float(np.sum(tap_x.g * delta))


def pair_values(tap: TapRecord, terms: Sequence[RankOneTerm], i: np.ndarray, j: np.ndarray) -> np.ndarray:
    """``delta_l_pair`` for every (pair, term) at once, shape ``pairs x terms``.

    Works in the singular bases: ``G u_k`` and ``v_k . x`` per token, so no
    ``E_i`` is ever formed.
    """
    u = np.stack([t.u for t in terms], axis=1)
    v = np.stack([t.v for t in terms], axis=1)
    sigma = np.array([t.sigma for t in terms])
    gu = tap.g @ u
    xv = tap.x @ v
    return sigma * np.sum(gu[i] * (xv[j] - xv[i]), axis=1)


REDUCTIONS = {"max": np.max, "mean": np.mean}


def score_terms(
    capture: Capture,
    pairs: PairSampling,
    terms: dict[str, list[RankOneTerm]],
    reduce: str = "max",
) -> list[AttributionScore]:
    """Max over sampled pairs of the linear estimate, per (matrix, term).

    ``reduce="mean"`` averages over pairs instead; it is a diagnostic, not the
    pruning criterion.
    """
    if capture.n_examples == 0:
        raise ValueError("empty dataset")
    if reduce not in REDUCTIONS:
        raise ValueError(f"unknown reduction {reduce!r}")
    i, j = pairs.sample(capture.n_examples)
    scores = []
    for name, ts in terms.items():
        best = REDUCTIONS[reduce](pair_values(capture.taps[name], ts, i, j), axis=0)
        scores.extend(
            AttributionScore(name, t.index, t.sigma, float(s), pairs.n_pairs) for t, s in zip(ts, best)
        )
    return scores


def write_scores(scores: Iterable[AttributionScore], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for s in scores:
            w.writerow([s.matrix, s.index, repr(s.sigma), repr(s.score), s.n_pairs])


def read_scores(path: Path) -> list[AttributionScore]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if tuple(rows[0]) != CSV_HEADER:
        raise ValueError(f"{path}: unexpected header {rows[0]}")
    return [AttributionScore(r[0], int(r[1]), float(r[2]), float(r[3]), int(r[4])) for r in rows[1:]]
