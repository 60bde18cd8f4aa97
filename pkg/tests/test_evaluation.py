import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from cler import evaluation as ev
from cler.evaluation import AccuracyMatrix
from cler.model import ArchitectureConfig, SplitNetwork
from cler.stream import build_class_il_stream, make_synthetic_dataset


def _lower(rows):
    """Build a matrix from per-task histories: rows[i] lists a[i][i..T-1]."""
    t = len(rows)
    m = np.full((t, t), np.nan)
    for i, hist in enumerate(rows):
        m[i, i:] = hist
    return AccuracyMatrix(m)


def test_final_accuracy_examples():
    assert ev.final_average_accuracy(_lower([[5, 5, 10], [1, 20], [30]])) == 20.0
    assert ev.final_average_accuracy(np.full((4, 4), 50.0)) == 50.0


def test_final_accuracy_incomplete():
    m = AccuracyMatrix.empty(3)
    with pytest.raises(ValueError):
        ev.final_average_accuracy(m)


def test_forgetting_worked_example():
    m = _lower([[50, 40, 25], [60, 30], [70]])
    assert ev.final_average_adjusted_forgetting(m) == 50.0


def test_forgetting_peak_excludes_last_evaluation():
    # a rise on the final evaluation never counts as a peak
    m = _lower([[40, 80], [10]])
    assert ev.final_average_adjusted_forgetting(m) == 0.0
    m = _lower([[80, 40], [10]])
    assert ev.final_average_adjusted_forgetting(m) == 50.0


def test_forgetting_zero_peak_counts_as_zero():
    assert ev.final_average_adjusted_forgetting(_lower([[0, 0, 0], [50, 0], [1]])) == 50.0


def test_forgetting_needs_two_tasks():
    with pytest.raises(ValueError):
        ev.final_average_adjusted_forgetting(AccuracyMatrix([[10.0]]))


def test_matrix_validation():
    with pytest.raises(ValueError):
        AccuracyMatrix([[101.0]])
    with pytest.raises(ValueError):
        AccuracyMatrix(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        AccuracyMatrix([[1.0]], mode="domain_il")


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 9), st.integers(0, 2**31))
def test_forgetting_bounds_and_permutation(t, seed):
    rng = np.random.default_rng(seed)
    m = np.triu(rng.uniform(0, 100, (t, t)))
    m[np.tril_indices(t, -1)] = np.nan
    f = ev.final_average_adjusted_forgetting(m)
    assert 0.0 <= f <= 100.0
    perm = rng.permutation(t)
    shuffled = m.copy()
    shuffled[:, -1] = m[perm, -1]
    assert math.isclose(ev.final_average_accuracy(shuffled), ev.final_average_accuracy(m), rel_tol=1e-12)


def test_csv_and_nested_roundtrip():
    m = _lower([[50.5, 40.25, 25], [60, 30.125], [70]])
    back = AccuracyMatrix.from_csv(m.to_csv())
    assert np.array_equal(np.isnan(back.values), np.isnan(m.values))
    assert np.array_equal(np.nan_to_num(back.values), np.nan_to_num(m.values))
    lines = m.to_csv().splitlines()
    assert lines[0] == "after_task,task_0,task_1,task_2"
    assert lines[1] == "0,50.5,,"
    nested = m.to_nested()
    assert nested[1][0] is None
    assert np.array_equal(np.nan_to_num(AccuracyMatrix.from_nested(nested).values), np.nan_to_num(m.values))


def test_significance_examples():
    assert ev.significance([1, 2, 3], [1, 2, 3]) == 1.0
    assert ev.significance([5, 5], [5, 5]) == 1.0
    assert ev.significance([1, 2, 3], [101, 102, 103]) < 1e-4
    a, b = [1.0, 2.5, 3.0, 4.2], [2.0, 2.2, 5.1]
    assert ev.significance(a, b) == ev.significance(b, a)
    with pytest.raises(ValueError):
        ev.significance([1], [2, 3])


def test_significance_matches_textbook_pooled_t():
    a, b = np.array([1.0, 2.5, 3.0, 4.2]), np.array([2.0, 2.2, 5.1])
    na, nb = len(a), len(b)
    sp = ((na - 1) * a.var(ddof=1) + (nb - 1) * b.var(ddof=1)) / (na + nb - 2)
    t = (a.mean() - b.mean()) / math.sqrt(sp * (1 / na + 1 / nb))
    from scipy.stats import t as student
    assert math.isclose(ev.significance(a, b), 2 * student.sf(abs(t), na + nb - 2), rel_tol=1e-9)


@pytest.fixture(scope="module")
def five_class_stream():
    data = make_synthetic_dataset(10, 4, 8, seed=0, test_per_class=400)
    return build_class_il_stream(data, 2)


def test_task_il_dominates_class_il(five_class_stream):
    torch.manual_seed(0)
    net = SplitNetwork(ArchitectureConfig(num_classes=10, image_size=8, widths=(4, 4, 4)))
    for t in range(2):
        assert ev.task_il_accuracy(net, five_class_stream, t) >= ev.class_il_accuracy(net, five_class_stream, t)


def test_random_net_is_near_chance(five_class_stream):
    accs = []
    for seed in range(5):
        torch.manual_seed(seed)
        net = SplitNetwork(ArchitectureConfig(num_classes=10, image_size=8, widths=(8, 8, 8)))
        accs.append(ev.task_il_accuracy(net, five_class_stream, 0))
    assert abs(np.mean(accs) - 20.0) < 10.0


def test_single_class_task_is_perfect():
    data = make_synthetic_dataset(2, 3, 8, seed=0, test_per_class=5)
    stream = build_class_il_stream(data, 2)
    net = SplitNetwork(ArchitectureConfig(num_classes=2, image_size=8, widths=(4, 4, 4)))
    assert ev.task_il_accuracy(net, stream, 1) == 100.0


def test_eval_mode_restores_training_flag(tiny_net):
    tiny_net.train()
    with ev.eval_mode(tiny_net):
        assert not tiny_net.training
    assert tiny_net.training


def test_predict_respects_allowed_classes(tiny_net):
    preds = ev.predict(tiny_net, torch.rand(20, 3, 8, 8), allowed_classes=[2])
    assert set(preds.tolist()) == {2}
