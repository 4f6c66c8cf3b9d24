import math

import numpy as np
import pytest

from tempmix import InvalidInputError
from tempmix.analysis import (
    RaceTable,
    convergence_report,
    exact_single_sample_moments,
    grad_variance,
    per_domain_grads,
    race,
    race_table,
    variance_gap_curve,
    variance_rows_to_csv,
    windowed_norm_variance,
)
from tempmix.datagen import MultiDomainDataset, Split, SyntheticTaskSpec, make_homogeneous, make_synthetic
from tempmix.mixture import equivalent_weights, proportional_probs, temperature_probs, variance_factor
from tempmix.models import ModelSpec, SharedLinear
from tempmix.rng import make_rng
from tempmix.schedules import Static
from tempmix.trainer import OptimizerSpec, RunRecord, TrainConfig


def _two_scale_data():
    """Domain 1 gradients have squared norm 10, domain 2 squared norm 1 (model at zero, target 1)."""
    def block(n, x):
        return Split(np.tile(np.asarray(x, dtype=float), (n, 1)), np.ones(n))

    x1 = [math.sqrt(10) / 2, 0.0]
    x2 = [0.0, 0.5]
    return MultiDomainDataset("regression", ("a", "b"), (block(900, x1), block(100, x2)),
                              (block(1, x1), block(1, x2)))


def test_identical_gradients_give_exactly_zero_variance():
    data = make_homogeneous([900, 100], [0.3, -1.2, 2.0])
    m = SharedLinear(3, [0.1, 0.2, 0.3])
    stats = grad_variance(m, data, temperature_probs(data.catalog, 2), np.ones(2), 5000, 1, make_rng(0))
    assert stats.norm_var == 0.0
    assert stats.trace_var == 0.0


def test_weighted_homogeneous_variance_is_f_minus_one():
    data = make_homogeneous([900, 100], [1.0, 2.0])
    m = SharedLinear(2)
    cat = data.catalog
    g = per_domain_grads(m, data)[0][0]
    stats = grad_variance(m, data, proportional_probs(cat), equivalent_weights(cat, 2), 200_000, 1, make_rng(1))
    expected = (variance_factor(cat, 2) - 1) * float(g @ g)
    assert stats.norm_var == pytest.approx(expected, rel=0.02)
    assert stats.trace_var == pytest.approx(expected, rel=0.02)


def test_exact_moments_by_enumeration():
    data = make_synthetic(SyntheticTaskSpec(sizes=(6, 3), dim=2, valid_size=1), 0)
    m = SharedLinear(2, [0.5, -0.5])
    cat = data.catalog
    p, w = proportional_probs(cat), equivalent_weights(cat, 3)
    G = per_domain_grads(m, data)
    vals, probs = [], []
    for k, g in enumerate(G):
        for row in g:
            vals.append(w[k] * row)
            probs.append(p[k] / len(g))
    vals, probs = np.array(vals), np.array(probs)
    mean = probs @ vals
    norms = np.linalg.norm(vals, axis=1)
    ex = exact_single_sample_moments(m, data, p, w)
    np.testing.assert_allclose(ex["mean"], mean, rtol=1e-12)
    assert ex["trace_var"] == pytest.approx(probs @ ((vals - mean) ** 2).sum(axis=1), rel=1e-10)
    assert ex["norm_var"] == pytest.approx(probs @ norms**2 - (probs @ norms) ** 2, rel=1e-10)


def test_monte_carlo_mean_matches_population():
    data = make_synthetic(SyntheticTaskSpec(sizes=(200, 20), dim=3, domain_scale=0.5, valid_size=1), 0)
    m = SharedLinear(3)
    cat = data.catalog
    p, w = proportional_probs(cat), equivalent_weights(cat, 5)
    stats = grad_variance(m, data, p, w, 50_000, 1, make_rng(2))
    exact = exact_single_sample_moments(m, data, p, w)
    assert np.all(np.abs(stats.mean - exact["mean"]) <= 4 * stats.mean_se)
    assert stats.trace_var == pytest.approx(exact["trace_var"], rel=0.05)
    assert stats.norm_var == pytest.approx(exact["norm_var"], rel=0.05)


def test_minibatch_variance_shrinks_with_batch_size():
    data = make_synthetic(SyntheticTaskSpec(sizes=(300, 30), dim=2, valid_size=1), 0)
    m = SharedLinear(2)
    p, w = temperature_probs(data.catalog, 2), np.ones(2)
    one = grad_variance(m, data, p, w, 20_000, 1, make_rng(3))
    four = grad_variance(m, data, p, w, 20_000, 4, make_rng(3))
    assert four.trace_var == pytest.approx(one.trace_var / 4, rel=0.1)


def test_scalarization_can_have_lower_second_moment():
    # second-moment gap S - TS equals sum_i p(i;tau) (w_i - 1) m_i, m_i = E||g||^2 on domain i
    data = _two_scale_data()
    m = SharedLinear(2)
    cat = data.catalog
    G = per_domain_grads(m, data)
    assert float(G[0][0] @ G[0][0]) == pytest.approx(10.0)
    assert float(G[1][0] @ G[1][0]) == pytest.approx(1.0)
    s = exact_single_sample_moments(m, data, proportional_probs(cat), equivalent_weights(cat, 2))
    ts = exact_single_sample_moments(m, data, temperature_probs(cat, 2), np.ones(2))
    assert s["second_moment"] - ts["second_moment"] == pytest.approx(-0.875, abs=1e-12)
    assert s["norm_var"] < ts["norm_var"]


def test_equal_gradient_scales_favor_sampling():
    data = make_homogeneous([700, 200, 100], [1.0, 1.0])
    m = SharedLinear(2)
    cat = data.catalog
    for tau in (1.5, 2, 5):
        s = exact_single_sample_moments(m, data, proportional_probs(cat), equivalent_weights(cat, tau))
        ts = exact_single_sample_moments(m, data, temperature_probs(cat, tau), np.ones(3))
        assert s["norm_var"] >= ts["norm_var"]
        assert ts["norm_var"] == pytest.approx(0.0, abs=1e-9)


def test_variance_gap_curve_at_tau_one_is_zero():
    data = make_synthetic(SyntheticTaskSpec(sizes=(100, 10), dim=2, valid_size=1), 0)
    rows = variance_gap_curve(SharedLinear(2), data, [1.0], 2000, make_rng(4))
    assert rows[0].gap == 0.0
    assert rows[0].var_s == rows[0].var_ts


def test_variance_gap_curve_rejects_low_tau():
    data = make_homogeneous([10, 5], [1.0])
    with pytest.raises(InvalidInputError):
        variance_gap_curve(SharedLinear(1), data, [0.5], 100, make_rng(0))


def test_variance_gap_curve_is_seeded():
    data = make_homogeneous([100, 10], [1.0, 0.5])
    a = variance_rows_to_csv(variance_gap_curve(SharedLinear(2), data, [1, 3], 1000, make_rng(5)), "x")
    b = variance_rows_to_csv(variance_gap_curve(SharedLinear(2), data, [1, 3], 1000, make_rng(5)), "x")
    assert a == b
    assert a.splitlines()[:2] == ["# x", "tau,var_s,var_ts,gap,se_s,se_ts,trace_s,trace_ts"]


def test_grad_variance_needs_two_samples():
    data = make_homogeneous([10], [1.0])
    with pytest.raises(InvalidInputError):
        grad_variance(SharedLinear(1), data, [1.0], [1.0], 1, 1, make_rng(0))


def test_windowed_norm_variance():
    out = windowed_norm_variance([1, 3, 2, 2, 5, 5, 9], 2)
    np.testing.assert_allclose(out, [2.0, 0.0, 0.0])
    assert windowed_norm_variance([1.0], 2).size == 0


def _record(valid_rows, steps, diverged=False):
    rec = RunRecord(("hi", "lo"))
    rec.steps = list(steps)
    rec.valid_loss = [np.asarray(r, dtype=float) for r in valid_rows]
    rec.train_loss = rec.valid_loss
    rec.diverged = diverged
    return rec


def test_convergence_report():
    rec = _record([[5, 9], [2, 4], [1, 3], [1.5, 3.5]], [0, 10, 20, 30])
    rep = convergence_report(rec, [2.0, 3.0])
    assert rep.steps_to_threshold == [10, 20]
    np.testing.assert_allclose(rep.min_loss, [1, 3])
    assert rep.min_step == [20, 20]
    np.testing.assert_allclose(rep.overfit_gap, [0.5, 0.5])
    assert convergence_report(rec, 0.5).steps_to_threshold == [None, None]


def test_race_table_medians_and_wins():
    fast = [_record([[1, 1]], [0]), _record([[9, 9], [1, 1]], [0, 10])]
    slow = [_record([[9, 9], [1, 1]], [0, 20]), _record([[9, 9], [1, 1]], [0, 10])]
    dead = [_record([[9, 9]], [0], diverged=True), _record([[1, 1]], [0], diverged=True)]
    table = race_table(["fast", "slow", "dead"], [fast, slow, dead], [0, 1], [[2, 2], [2, 2]])
    np.testing.assert_allclose(table.median_steps()[:2], [[5, 5], [15, 15]])
    assert np.all(np.isinf(table.steps[2]))
    # seed 1 is a tie between fast and slow, so only seed 0 counts as a win
    assert table.wins().tolist() == [[1, 1], [0, 0], [0, 0]]
    csv_text = table.to_csv("c")
    assert csv_text.splitlines()[1] == "config,domain,median_steps,wins"
    assert "dead,hi,inf,0" in csv_text


def test_race_end_to_end():
    spec = SyntheticTaskSpec(sizes=(300, 30), dim=2, domain_scale=0.0, noise=0.1, valid_size=50)
    cat = spec.catalog()
    base = dict(model=ModelSpec(), data=spec, optimizer=OptimizerSpec("sgd", 0.05), batch_size=4, steps=100,
                eval_interval=10)
    cfgs = [TrainConfig(plan=Static(cat, 1), label="t1", **base), TrainConfig(plan=Static(cat, 5), label="t5", **base)]
    table = race(cfgs, lambda d: np.full(d.K, 0.05), [0, 1])
    assert isinstance(table, RaceTable)
    assert table.labels == ["t1", "t5"] and table.steps.shape == (2, 2, 2)
    with pytest.raises(InvalidInputError):
        race(cfgs, 0.05, [0])
