"""Freeze the lowest-scoring rank-one terms into token-indexed biases.

Freezing term ``E_i`` of matrix ``A`` sets ``A' = A - E_i`` and adds
``E_i xbar_t`` to the bias at token position ``t``, where ``xbar`` is the mean
training activation entering ``A``. The term's contribution becomes a constant
per position instead of depending on the input.
"""

from __future__ import annotations

import hashlib
import json
import math
import warnings
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch

from .attribution import AttributionScore
from .linalg import RankOneTerm, ShapeError
from .model import PrunedModel, TransformerModel, clone

P_GRID = (0.01, 0.05, 0.10, 0.30)


class EmptyPlanWarning(UserWarning):
    pass


def n_to_freeze(p: float, r: int) -> int:
    # Guard against 0.3 * 10 = 2.9999999999999996 style round-off.
    return int(math.floor(p * r + 1e-9))


@dataclass(frozen=True)
class FreezePlan:
    p: float
    frozen: dict[str, tuple[int, ...]]
    mean_x: dict[str, np.ndarray] = field(repr=False)

    def __post_init__(self):
        for name, idx in self.frozen.items():
            if len(set(idx)) != len(idx):
                raise ValueError(f"{name}: duplicate frozen indices")
            if name not in self.mean_x:
                raise ValueError(f"{name}: no mean activation supplied")

    @property
    def n_frozen(self) -> int:
        return sum(len(v) for v in self.frozen.values())

    def is_empty(self) -> bool:
        return self.n_frozen == 0

    def to_json(self) -> str:
        def digest(a):
            return hashlib.sha256(np.ascontiguousarray(a, dtype="<f8").tobytes()).hexdigest()

        doc = {
            "p": self.p,
            "matrices": [
                {"name": n, "frozen": list(idx), "mean_x_sha256": digest(self.mean_x[n])}
                for n, idx in self.frozen.items()
            ],
        }
        return json.dumps(doc, indent=2)


def make_freeze_plan(
    scores: Iterable[AttributionScore],
    p: float,
    mean_x: Mapping[str, np.ndarray],
) -> FreezePlan:
    """Per matrix, pick the ``floor(p * r)`` terms with the lowest score.

    Ties go to the larger singular index (smaller sigma) first.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"p must lie in [0, 1), got {p}")
    by_matrix: dict[str, list[AttributionScore]] = defaultdict(list)
    for s in scores:
        by_matrix[s.matrix].append(s)
    frozen = {}
    for name, ss in by_matrix.items():
        indices = [s.index for s in ss]
        if sorted(indices) != list(range(len(ss))):
            raise ValueError(f"{name}: scores do not cover singular indices 0..{len(ss) - 1}")
        k = n_to_freeze(p, len(ss))
        if k == 0:
            continue
        ranked = sorted(ss, key=lambda s: (s.score, -s.index))
        frozen[name] = tuple(sorted(s.index for s in ranked[:k]))
    if p > 0 and not frozen:
        warnings.warn(f"p={p} freezes no term in any matrix", EmptyPlanWarning, stacklevel=2)
    return FreezePlan(p=p, frozen=frozen, mean_x={n: mean_x[n] for n in frozen})


def apply_freeze(
    model: TransformerModel,
    plan: FreezePlan,
    terms: Mapping[str, Sequence[RankOneTerm]],
) -> PrunedModel:
    """Return a pruned copy; ``model`` itself is left untouched."""
    if plan.is_empty():
        return PrunedModel(model=model)
    out = clone(model)
    affines = out.affines()
    deltas = {}
    for name, idx in plan.frozen.items():
        if not idx:
            continue
        if name not in affines:
            raise KeyError(f"plan names unknown matrix {name!r}")
        layer = affines[name]
        d_out, d_in = layer.weight.shape
        ts = terms[name]
        if max(idx) >= len(ts) or min(idx) < 0:
            raise IndexError(f"{name}: frozen index out of range 0..{len(ts) - 1}")
        xbar = np.asarray(plan.mean_x[name], dtype=np.float64)
        if xbar.ndim != 2 or xbar.shape[1] != d_in:
            raise ShapeError(f"{name}: mean activation shape {xbar.shape} does not match d_in={d_in}")
        removed = np.zeros((d_out, d_in))
        delta = np.zeros((xbar.shape[0], d_out))
        for i in idx:
            t = ts[i]
            removed += t.materialize()
            delta += (t.sigma * (xbar @ t.v))[:, None] * t.u
        with torch.no_grad():
            layer.weight -= torch.as_tensor(removed)
        deltas[name] = delta
    return PrunedModel(model=out, delta_bias=deltas)
