"""Eigenpruning for a toy decoder-only transformer.

Typical flow::

    train, test = split(gen_int_sum(19), 0.8, seed=0)
    model = train_model(init_model(ModelConfig()), train, preset("scratch")).model
    report = run_sweep(model, train, test)   # key matrices, p in {0.01, 0.05, 0.10, 0.30}
"""

from .attribution import AttributionScore, PairSampling, capture_taps, decompose, delta_l_pair, score_terms
from .data import Dataset, Example, build_vocab, gen_int_mult, gen_int_sum, load_task, split
from .harness import SweepReport, calibrate_corruption, corrupt_model, emit_report, run_sweep
from .linalg import RankOneTerm, SVDFactors, apply_term, rank_one_terms, svd
from .model import (
    MatrixSelector, ModelConfig, PrunedModel, TapRecord, TransformerModel, backward_with_taps, forward,
    forward_pruned, init_model, loss,
)
from .pruner import P_GRID, FreezePlan, apply_freeze, make_freeze_plan
from .trainer import TrainConfig, accuracy, preset
from .trainer import train as train_model

__all__ = [name for name in dir() if not name.startswith("_")]
