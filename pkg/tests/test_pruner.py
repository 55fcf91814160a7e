import numpy as np
import pytest
import torch

from eigenprune.attribution import AttributionScore, PairSampling, capture_taps, decompose, score_terms
from eigenprune.data import gen_int_sum, split
from eigenprune.linalg import ShapeError, frobenius
from eigenprune.model import MatrixSelector, forward, forward_pruned
from eigenprune.pruner import P_GRID, EmptyPlanWarning, FreezePlan, apply_freeze, make_freeze_plan, n_to_freeze


def flat_scores(name, values):
    return [AttributionScore(name, i, 1.0 / (i + 1), float(v), 1) for i, v in enumerate(values)]


@pytest.fixture
def data():
    tr, _ = split(gen_int_sum(19), 0.8, 0)
    return tr.subset(range(32))


@pytest.fixture
def pipeline(small_model, data):
    cap = capture_taps(small_model, data, MatrixSelector("key"))
    terms = decompose(small_model, cap.names)
    scores = score_terms(cap, PairSampling(64, 0), terms)
    return small_model, cap, terms, scores


def test_p_grid():
    assert P_GRID == (0.01, 0.05, 0.10, 0.30)


@pytest.mark.parametrize("p,r,k", [(0.05, 64, 3), (0.01, 64, 0), (0.10, 64, 6), (0.30, 64, 19), (0.3, 10, 3)])
def test_count_rule(p, r, k):
    assert n_to_freeze(p, r) == k
    plan = make_freeze_plan(flat_scores("m", np.arange(r)), p, {"m": np.zeros((4, 2))}) if k else None
    if plan:
        assert plan.frozen["m"] == tuple(range(k))


def test_lowest_scores_chosen():
    vals = [0.5, -2.0, 0.1, -1.0, 3.0, 0.0, 0.2, 0.3, 0.4, 0.6]
    plan = make_freeze_plan(flat_scores("m", vals), 0.3, {"m": np.zeros((4, 2))})
    assert plan.frozen["m"] == (1, 3, 5)


def test_ties_prefer_smallest_sigma():
    plan = make_freeze_plan(flat_scores("m", [0.0] * 20), 0.1, {"m": np.zeros((4, 2))})
    assert plan.frozen["m"] == (18, 19)


def test_per_matrix_fraction():
    scores = flat_scores("a", np.linspace(-1, 1, 20)) + flat_scores("b", np.linspace(5, 6, 20))
    plan = make_freeze_plan(scores, 0.1, {"a": np.zeros((4, 2)), "b": np.zeros((4, 2))})
    assert plan.frozen == {"a": (0, 1), "b": (0, 1)}


def test_empty_plan_warns():
    with pytest.warns(EmptyPlanWarning):
        plan = make_freeze_plan(flat_scores("m", range(16)), 0.01, {"m": np.zeros((4, 2))})
    assert plan.is_empty()


def test_incomplete_scores_rejected():
    with pytest.raises(ValueError, match="cover"):
        make_freeze_plan(flat_scores("m", range(5))[1:], 0.5, {"m": np.zeros((4, 2))})
    with pytest.raises(ValueError):
        make_freeze_plan(flat_scores("m", range(5)), 1.0, {"m": np.zeros((4, 2))})


def test_prefix_containment(pipeline):
    _, cap, _, scores = pipeline
    plans = [make_freeze_plan(scores, p, cap.mean_x) for p in (0.0625, 0.125, 0.3, 0.5)]
    for small, big in zip(plans, plans[1:]):
        for name, idx in small.frozen.items():
            assert set(idx) <= set(big.frozen[name])


def test_empty_plan_is_identity(pipeline, data):
    model, cap, terms, _ = pipeline
    plan = FreezePlan(0.0, {}, {})
    pruned = apply_freeze(model, plan, terms)
    assert torch.equal(forward_pruned(pruned, data.tokens()), forward(model, data.tokens()))


def test_surgery_is_exact_and_base_untouched(pipeline, data):
    model, cap, terms, scores = pipeline
    before = {k: v.clone() for k, v in model.state_dict().items()}
    logits = forward(model, data.tokens())
    plan = make_freeze_plan(scores, 0.3, cap.mean_x)
    pruned = apply_freeze(model, plan, terms)
    for name, idx in plan.frozen.items():
        a = model.matrix(name).weight.detach().numpy()
        a2 = pruned.model.matrix(name).weight.detach().numpy()
        assert frobenius(a - (a2 + sum(terms[name][i].materialize() for i in idx))) <= 1e-10 * frobenius(a)
        assert pruned.delta_bias[name].shape == (4, a.shape[0])
    for k, v in model.state_dict().items():
        assert torch.equal(v, before[k]), k
    assert torch.equal(forward(model, data.tokens()), logits)
    # matrices outside the plan are bitwise equal
    for name, layer in model.affines().items():
        if name not in plan.frozen:
            assert torch.equal(layer.weight, pruned.model.matrix(name).weight)


def test_single_example_mean_makes_any_plan_an_identity(small_model, data):
    one = data.subset([5])
    cap = capture_taps(small_model, one, MatrixSelector("key"))
    terms = decompose(small_model, cap.names)
    rng = np.random.default_rng(0)
    for p in (0.125, 0.5, 0.9):
        scores = [AttributionScore(n, t.index, t.sigma, float(rng.standard_normal()), 1)
                  for n, ts in terms.items() for t in ts]
        pruned = apply_freeze(small_model, make_freeze_plan(scores, p, cap.mean_x), terms)
        np.testing.assert_allclose(forward_pruned(pruned, one.tokens()).detach(),
                                   forward(small_model, one.tokens()).detach(), rtol=0, atol=1e-10)


def test_frozen_model_differs_on_other_inputs(pipeline, data):
    model, cap, terms, scores = pipeline
    pruned = apply_freeze(model, make_freeze_plan(scores, 0.5, cap.mean_x), terms)
    assert not torch.allclose(forward_pruned(pruned, data.tokens()), forward(model, data.tokens()), atol=1e-6)


def test_freeze_all_makes_layer_input_independent(pipeline, data):
    model, cap, terms, _ = pipeline
    name = "blocks.1.key"
    plan = FreezePlan(0.0, {name: tuple(range(16))}, cap.mean_x)
    pruned = apply_freeze(model, plan, terms)
    assert np.max(np.abs(pruned.model.matrix(name).weight.detach().numpy())) <= 1e-10
    a = model.matrix(name).weight.detach().numpy()
    b = model.matrix(name).bias.detach().numpy()
    expected = b + cap.mean_x[name] @ a.T
    seen = []

    def grab(x, z):
        seen.append(z.detach().numpy() + b)
        return z

    forward_pruned(pruned, data.tokens(), {name: grab})
    np.testing.assert_allclose(seen[0], np.broadcast_to(expected, seen[0].shape), rtol=0, atol=1e-10)


def test_bad_plans(pipeline):
    model, cap, terms, _ = pipeline
    with pytest.raises(IndexError):
        apply_freeze(model, FreezePlan(0.0, {"blocks.0.key": (16,)}, cap.mean_x), terms)
    with pytest.raises(ShapeError):
        apply_freeze(model, FreezePlan(0.0, {"blocks.0.key": (0,)}, {"blocks.0.key": np.zeros((4, 3))}), terms)
    with pytest.raises(ValueError):
        FreezePlan(0.0, {"blocks.0.key": (1, 1)}, cap.mean_x)


def test_plan_json(pipeline):
    import json

    _, cap, _, scores = pipeline
    plan = make_freeze_plan(scores, 0.25, cap.mean_x)
    doc = json.loads(plan.to_json())
    assert doc["p"] == 0.25
    assert [m["name"] for m in doc["matrices"]] == ["blocks.0.key", "blocks.1.key"]
    assert all(len(m["frozen"]) == 4 and len(m["mean_x_sha256"]) == 64 for m in doc["matrices"])
