import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from crnas import attacks as at
from crnas import evaluation as ev
from crnas import genome as gn
from crnas.data import Dataset
from reference import REFERENCE_GROUPS, COEFFICIENT_MEANS, COEFFICIENT_ROWS, reference_matrix

CLEAN = at.AttackSpec("clean")


def class_images(labels):
    """Each image is filled with its class index scaled into [0, 1]."""
    return (labels.double() / 9).view(-1, 1, 1, 1).expand(-1, 3, 4, 4).clone()


def oracle(x):
    level = x.mean(dim=(1, 2, 3), keepdim=False)
    centres = torch.arange(10, dtype=x.dtype) / 9
    return -((level[:, None] - centres[None]) ** 2)


def constant(x):
    return torch.zeros(len(x), 10, dtype=x.dtype)


# robust accuracy


def test_perfect_model_scores_one(f64):
    labels = torch.arange(100) % 10
    data = Dataset(class_images(labels), labels, 10, "test")
    assert ev.robust_accuracy(oracle, None, CLEAN, data) == 1.0


def test_constant_model_is_chance(f64):
    labels = torch.arange(200) % 10
    data = Dataset(class_images(labels), labels, 10, "test")
    assert ev.robust_accuracy(constant, None, CLEAN, data) == pytest.approx(0.1)


def test_division(f64):
    labels = torch.tensor([0] * 262 + [1] * 238)
    data = Dataset(torch.zeros(500, 3, 2, 2), labels, 10, "test")
    assert ev.robust_accuracy(constant, None, CLEAN, data) == 0.524


def test_fidelity_bounds(f64):
    labels = torch.arange(10)
    data = Dataset(class_images(labels), labels, 10, "test")
    assert ev.robust_accuracy(constant, None, CLEAN, data, ev.FidelityLevel("low", 5)) == 0.2
    with pytest.raises(ValueError):
        ev.robust_accuracy(constant, None, CLEAN, data, ev.FidelityLevel("high", 11))
    with pytest.raises(ValueError):
        ev.robust_accuracy(constant, None, CLEAN, data.subset(0))
    with pytest.raises(ValueError):
        ev.check_levels(ev.FidelityLevel("low", 10), ev.FidelityLevel("high", 10))
    assert (ev.LOW.samples, ev.HIGH.samples) == (100, 5000)


# correlation


def test_identical_and_negated_columns():
    col = np.array([0.1, 0.4, 0.3, 0.9])
    corr = ev.correlation_matrix(np.stack([col, col, -col], axis=1))
    assert corr[0, 1] == pytest.approx(1.0)
    assert corr[0, 2] == pytest.approx(-1.0)


def test_zero_variance_is_flagged():
    acc = np.array([[0.5, 0.1], [0.5, 0.3], [0.5, 0.2]])
    corr = ev.correlation_matrix(acc)
    assert math.isnan(corr[0, 1]) and corr[0, 0] == 1.0
    assert ev.undefined_pairs(corr) == [(0, 1)]
    # undefined entries never merge
    assert ev.group_evaluations(corr, 0.1) == [[0], [1]]


def test_correlation_needs_two_rows():
    with pytest.raises(ValueError):
        ev.correlation_matrix(np.ones((1, 3)))
    with pytest.raises(ValueError):
        ev.correlation_matrix(np.random.default_rng(0).random((4, 3)), "kendall")


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 8), st.integers(2, 6), st.integers(0, 10_000), st.sampled_from(["pearson", "spearman"]))
def test_correlation_matrix_properties(rows, cols, seed, method):
    acc = np.random.default_rng(seed).random((rows, cols))
    corr = ev.correlation_matrix(acc, method)
    finite = np.nan_to_num(corr)
    assert np.allclose(finite, finite.T)
    assert np.all(np.diag(corr) == 1.0)
    assert np.all((finite >= -1) & (finite <= 1))


def test_pearson_matches_numpy(rng):
    acc = rng.random((6, 5))
    assert np.allclose(ev.correlation_matrix(acc), np.corrcoef(acc, rowvar=False), atol=1e-12)


# merging


def test_reference_matrix_gives_reference_groups():
    groups = ev.group_evaluations(reference_matrix(), 0.7)
    assert len(groups) == 8
    merged = [set(g) for g in groups if len(g) > 1]
    assert merged == REFERENCE_GROUPS
    assert [g[0] for g in groups if len(g) > 1] == [0, 1, 8]


def test_transitive_linkage_chains_further():
    groups = ev.group_evaluations(reference_matrix(), 0.7, linkage="transitive")
    assert [set(g) for g in groups if len(g) > 1] == [{0, 2, 3, 4}, {1, 5}, {8, 9, 11}]


def test_all_below_threshold_is_identity(rng):
    acc = rng.random((5, 12))
    corr = np.full((12, 12), 0.2)
    np.fill_diagonal(corr, 1.0)
    plan = ev.build_merge_plan(corr, 0.7, acc)
    assert plan.groups == [[i] for i in range(12)] and plan.coefficients == [1.0] * 12


def test_threshold_range():
    for tau in (0.0, 1.01, -0.5):
        with pytest.raises(ValueError):
            ev.group_evaluations(np.eye(3), tau)


def test_coefficient_arithmetic():
    rows = ev.coefficient_rows([[0, 1, 2]], np.array([[0.9, 0.6, 0.3]]))
    assert rows[0, 0] == pytest.approx(2.0)


def test_coefficient_average():
    got = ev.average_coefficients(COEFFICIENT_ROWS)
    assert got == pytest.approx(list(COEFFICIENT_MEANS), abs=0.005)


def test_zero_representative_accuracy_is_skipped():
    acc = np.array([[0.0, 0.2], [0.5, 0.5]])
    rows = ev.coefficient_rows([[0, 1]], acc)
    assert math.isnan(rows[0, 0]) and rows[1, 0] == 2.0
    assert ev.average_coefficients(rows) == [2.0]
    assert ev.average_coefficients(np.array([[np.nan]]), [3]) == [3.0]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.05, 1.0))
def test_plan_is_a_partition(seed, tau):
    acc = np.random.default_rng(seed).random((5, 12))
    plan = ev.build_merge_plan(ev.correlation_matrix(acc), tau, acc)
    assert sorted(i for g in plan.groups for i in g) == list(range(12))
    assert all(k >= 1.0 for k in plan.coefficients)
    assert all(k == 1.0 for g, k in zip(plan.groups, plan.coefficients) if len(g) == 1)


def test_plan_rejects_broken_partition():
    with pytest.raises(ValueError):
        ev.MergePlan([[0], [0, 1]], [1.0, 2.0], 0.7, ["a", "b"])
    with pytest.raises(ValueError):
        ev.MergePlan([[0, 1]], [0.5], 0.7, ["a", "b"])


def test_plan_save_load(tmp_path, rng):
    acc = rng.random((5, 12))
    plan = ev.build_merge_plan(reference_matrix(), 0.7, acc)
    plan.save(tmp_path / "plan.json")
    back = ev.MergePlan.load(tmp_path / "plan.json")
    assert back == plan


def test_matrix_csv_round_trip(tmp_path, rng):
    corr = ev.correlation_matrix(rng.random((5, 4)))
    corr[0, 1] = corr[1, 0] = np.nan
    ev.write_matrix_csv(tmp_path / "c.csv", corr, ["a", "b", "c", "d"])
    back, names = ev.read_matrix_csv(tmp_path / "c.csv")
    assert names == ["a", "b", "c", "d"]
    assert np.allclose(back, corr, atol=1e-6, equal_nan=True)


# comprehensive RA


def test_identity_plan_is_the_mean(rng):
    acc = rng.random(12)
    assert ev.comprehensive_ra(acc, ev.MergePlan.identity()) == pytest.approx(acc.mean())


def test_full_merge_case():
    acc = np.array([0.8, 0.6, 0.4])
    k = acc.sum() / acc[0]
    plan = ev.MergePlan([[0, 1, 2]], [k], 0.5, ["a", "b", "c"])
    assert ev.comprehensive_ra([0.8], plan) == pytest.approx(acc.mean())


def test_length_mismatch():
    with pytest.raises(ValueError):
        ev.comprehensive_ra([0.5, 0.5], ev.MergePlan.identity())


def reference_plan():
    groups = ev.group_evaluations(reference_matrix(), 0.7)
    k = {0: COEFFICIENT_MEANS[0], 1: COEFFICIENT_MEANS[1], 8: COEFFICIENT_MEANS[2]}
    return ev.MergePlan(groups, [k.get(g[0], 1.0) for g in groups], 0.7, list(at.KINDS))


def test_merged_ra_tracks_full_mean():
    rng = np.random.default_rng(11)
    plan = reference_plan()
    for _ in range(20):
        acc = np.zeros(12)
        for g, k in zip(plan.groups, plan.coefficients):
            rep = rng.uniform(0.3, 0.8)
            acc[g[0]] = rep
            if len(g) > 1:
                # members sharing the group's coefficient up to per-architecture noise
                share = rng.dirichlet(np.ones(len(g) - 1)) * (k - 1 + rng.uniform(-0.15, 0.15))
                acc[g[1:]] = rep * share
        merged = acc[plan.representatives]
        assert abs(ev.comprehensive_ra(merged, plan) - acc.mean()) < 0.02


# suite execution


def _count_runs(monkeypatch):
    calls = []
    real = ev.run_attack

    def counting(model, x, y, spec):
        calls.append(spec.kind)
        return real(model, x, y, spec)

    monkeypatch.setattr(ev, "run_attack", counting)
    return calls


def test_identity_plan_runs_twelve(monkeypatch, toy_model, toy_data):
    calls = _count_runs(monkeypatch)
    model, _ = toy_model
    report = ev.evaluate_suite(model, None, ev.MergePlan.identity(), toy_data[1], ev.FidelityLevel("t", 16))
    assert len(calls) == 12 and len(report.accuracies) == 12
    assert report.ra == pytest.approx(np.mean(report.accuracies))


def test_reference_plan_runs_eight(monkeypatch, toy_model, toy_data):
    calls = _count_runs(monkeypatch)
    model, _ = toy_model
    report = ev.evaluate_suite(model, None, reference_plan(), toy_data[1], ev.FidelityLevel("t", 16))
    assert len(calls) == 8
    assert report.names == [at.KINDS[i] for i in reference_plan().representatives]
    assert len(report.wall_times) == 8


def test_suite_is_deterministic(small_supernet, toy_data, rng):
    net, _ = small_supernet
    g = gn.random_genome(rng)
    fid = ev.FidelityLevel("t", 32)
    a = ev.evaluate_suite(net, g, reference_plan(), toy_data[1], fid)
    b = ev.evaluate_suite(net, g, reference_plan(), toy_data[1], fid)
    assert a.accuracies == b.accuracies and a.ra == b.ra


def test_suite_length_must_match_plan(toy_model, toy_data):
    with pytest.raises(ValueError):
        ev.evaluate_suite(toy_model[0], None, ev.MergePlan.identity(["a", "b"]), toy_data[1], None)


def test_supernet_needs_genome(small_supernet, toy_data):
    with pytest.raises(ValueError):
        ev.robust_accuracy(small_supernet[0], None, CLEAN, toy_data[1])


def test_sample_and_correlate_shapes(small_supernet, toy_data):
    suite = at.default_suite()[:4]
    genomes, acc, corr = ev.sample_and_correlate(small_supernet[0], 3, suite, toy_data[1], ev.FidelityLevel("t", 16))
    assert len(genomes) == 3 and acc.shape == (3, 4) and corr.shape == (4, 4)
    with pytest.raises(ValueError):
        ev.sample_and_correlate(small_supernet[0], 1, suite, toy_data[1], ev.FidelityLevel("t", 16))


def test_kendall_tau_extremes():
    assert ev.kendall_tau([1, 2, 3], [10, 20, 30]) == pytest.approx(1.0)
    assert ev.kendall_tau([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)
