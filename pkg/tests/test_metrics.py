import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rel2prompt import diff
from rel2prompt.diff import ParameterStore
from rel2prompt.errors import DegenerateLabels, DomainError, LengthMismatch
from rel2prompt.metrics import (METRICS_KEYS, MetricsLog, auroc, class_alpha, cross_entropy, focal_loss,
                                focal_loss_from_log_prob, mae)
from rel2prompt.optim import Adam, ReduceLROnPlateau, build_optimizer


def test_focal_loss_examples():
    assert focal_loss(0.9, 0.25, 2.0) == pytest.approx(0.25 * 0.01 * -math.log(0.9))
    assert focal_loss(0.9, 0.25, 2.0) == pytest.approx(2.634e-4, rel=1e-3)
    assert focal_loss(1.0, 0.8, 2.0) == 0.0
    assert focal_loss([0.5, 0.9], [0.8, 0.2], 0.0) == pytest.approx((0.8 * math.log(2) - 0.2 * math.log(0.9)) / 2)


def test_focal_loss_domain():
    with pytest.raises(DomainError):
        focal_loss(0.0, 0.5, 2.0)
    with pytest.raises(DomainError):
        focal_loss([0.5, 1.5], 0.5, 2.0)
    with pytest.raises(LengthMismatch):
        focal_loss([], 0.5, 2.0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(1e-6, 1.0), min_size=1, max_size=50))
def test_focal_loss_without_focusing_is_cross_entropy(p):
    assert abs(focal_loss(p, 1.0, 0.0) - cross_entropy(p)) <= 1e-12


def test_class_alpha():
    assert class_alpha(1, 0.8) == 0.8
    assert class_alpha(0, 0.8) == pytest.approx(0.2)


def test_differentiable_focal_loss_matches_and_has_gradient():
    log_p = diff.Value(np.array(math.log(0.7)), requires_grad=True)
    loss = focal_loss_from_log_prob(log_p, 0.8, 2.0)
    assert loss.item() == pytest.approx(focal_loss(0.7, 0.8, 2.0))
    diff.backward(loss)
    p = 0.7
    expected = 0.8 * (2.0 * (1 - p) * p * math.log(p) - (1 - p) ** 2)
    assert float(log_p.grad) == pytest.approx(expected)


def test_auroc_examples():
    assert auroc([0.9, 0.1], [1, 0]) == 1.0
    assert auroc([0.1, 0.9], [1, 0]) == 0.0
    assert auroc([0.3] * 6, [1, 0, 1, 0, 0, 1]) == 0.5
    assert auroc([0.2, 0.5, 0.5, 0.9], [0, 1, 0, 1]) == pytest.approx(0.875)


def test_auroc_errors():
    with pytest.raises(DegenerateLabels):
        auroc([0.1, 0.2], [1, 1])
    with pytest.raises(LengthMismatch):
        auroc([0.1, 0.2, 0.3], [1, 0])


def _pairwise_auroc(scores, labels):
    positives = [s for s, y in zip(scores, labels) if y == 1]
    negatives = [s for s, y in zip(scores, labels) if y == 0]
    credit = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in positives for n in negatives)
    return credit / (len(positives) * len(negatives))


labeled_scores = st.integers(2, 40).flatmap(lambda n: st.tuples(
    st.lists(st.integers(-20, 20), min_size=n, max_size=n),
    st.lists(st.integers(0, 1), min_size=n, max_size=n).filter(lambda ys: 0 < sum(ys) < len(ys))))


@settings(max_examples=300, deadline=None)
@given(labeled_scores)
def test_auroc_matches_pairwise_oracle(case):
    scores, labels = case
    assert auroc(scores, labels) == _pairwise_auroc(scores, labels)


@settings(max_examples=100, deadline=None)
@given(labeled_scores)
def test_auroc_ignores_monotone_transforms(case):
    scores, labels = case
    transformed = [s ** 3 + 2 * s - 7 for s in scores]
    assert auroc(transformed, labels) == auroc(scores, labels)


def test_mae():
    assert mae([1.0, 3.0], [2.0, 2.0]) == 1.0
    assert mae([4.0, 5.0], [4.0, 5.0]) == 0.0
    with pytest.raises(LengthMismatch):
        mae([1.0], [1.0, 2.0])
    with pytest.raises(LengthMismatch):
        mae([], [])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(-1e6, 1e6), st.floats(-1e6, 1e6)), min_size=1, max_size=30))
def test_mae_matches_loop(pairs):
    preds, targets = zip(*pairs)
    total = 0.0
    for p, t in pairs:
        total += abs(p - t)
    assert mae(preds, targets) == pytest.approx(total / len(pairs), rel=1e-12, abs=1e-9)


def test_metrics_log_writes_jsonl(tmp_path):
    path = str(tmp_path / 'metrics.jsonl')
    log = MetricsLog(path)
    log.append(0, 'val', 'auroc', 0.5, 0.7, 1e-3)
    log.append(20, 'val', 'auroc', 0.75, 0.6, 1e-3)
    log.append(20, 'test', 'auroc', 0.7, 0.6, 1e-3)
    rows = [json.loads(line) for line in open(path, encoding='utf-8')]
    assert [tuple(sorted(r)) for r in rows] == [tuple(sorted(METRICS_KEYS))] * 3
    assert rows[1] == {'step': 20, 'split': 'val', 'metric_name': 'auroc', 'value': 0.75, 'loss': 0.6,
                       'lr': 1e-3, 'wall_ms': 0}
    assert log.best('val')['step'] == 20
    assert log.best('val', higher_is_better=False)['step'] == 0
    assert log.best('train') is None
    assert list(log.to_frame().columns) == list(METRICS_KEYS)


def test_metrics_log_rejects_bad_rows():
    log = MetricsLog()
    log.append(5, 'val', 'mae', 1.0, 1.0, 1e-3)
    with pytest.raises(ValueError):
        log.append(4, 'val', 'mae', 1.0, 1.0, 1e-3)
    with pytest.raises(ValueError):
        log.append(6, 'val', 'mae', float('nan'), 1.0, 1e-3)


def test_metrics_log_starts_fresh(tmp_path):
    path = tmp_path / 'metrics.jsonl'
    path.write_text('stale\n')
    MetricsLog(str(path)).append(0, 'val', 'auroc', 0.5, 0.5, 0.1)
    assert path.read_text().count('\n') == 1


def _store_with_grad(grad):
    store = ParameterStore()
    param = store.create('w', (len(grad),), fill=1.0)
    param.grad = np.array(grad, dtype=float)
    return store


def test_adam_first_step_moves_by_lr():
    store = _store_with_grad([0.5, -2.0])
    Adam(store, lr=0.1).step()
    np.testing.assert_allclose(store['w'].data, [0.9, 1.1], rtol=1e-6)


def test_weight_decay_is_decoupled():
    store = _store_with_grad([0.0, 0.0])
    optimizer = build_optimizer(store, lr=0.1, weight_decay=0.5)
    assert optimizer.decoupled
    optimizer.step()
    np.testing.assert_allclose(store['w'].data, [0.95, 0.95])


def test_frozen_parameters_are_not_updated():
    store = _store_with_grad([1.0])
    store.create('v', (1,), fill=3.0).grad = np.array([1.0])
    store.freeze(['v'])
    Adam(store, lr=0.1).step()
    assert store['v'].data.tolist() == [3.0]
    assert store['w'].data[0] < 1.0


def test_plateau_scheduler_multiplies_by_factor():
    store = _store_with_grad([0.0])
    optimizer = Adam(store, lr=1.0)
    scheduler = ReduceLROnPlateau(optimizer, mode='max', patience=2, factor=0.5)
    assert scheduler.step(0.5) is False
    assert scheduler.step(0.4) is False
    assert scheduler.step(0.5) is True
    assert optimizer.lr == 0.5
    assert scheduler.step(0.6) is False
    assert optimizer.lr == 0.5


def test_plateau_min_mode():
    optimizer = Adam(ParameterStore(), lr=1.0)
    scheduler = ReduceLROnPlateau(optimizer, mode='min', patience=1, factor=0.8)
    scheduler.step(2.0)
    scheduler.step(1.0)
    assert optimizer.lr == 1.0
    scheduler.step(1.5)
    assert optimizer.lr == 0.8
    with pytest.raises(ValueError):
        ReduceLROnPlateau(optimizer, mode='sideways')
