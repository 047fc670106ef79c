import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rel2prompt import diff
from rel2prompt.diff import ParameterStore, Value, check_gradients, constant, load_checkpoint, save_checkpoint
from rel2prompt.errors import NonFiniteLoss, NonScalarLoss, SchemaMismatch, ShapeMismatch


def test_simple_gradients():
    x = Value(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    w = Value(np.array([0.5, 0.25, 2.0]), requires_grad=True)
    loss = (x * w).sum() + (x ** 2).mean()
    loss.backward()
    np.testing.assert_allclose(x.grad, w.data + 2.0 * x.data / 3.0)
    np.testing.assert_allclose(w.grad, x.data)


def test_reused_value_accumulates():
    x = Value(np.array([2.0, 3.0]), requires_grad=True)
    y = x * x + x
    diff.backward(y.sum())
    np.testing.assert_allclose(x.grad, 2.0 * x.data + 1.0)


def test_leaf_gradients_accumulate_across_calls():
    x = Value(np.array([1.0]), requires_grad=True)
    diff.backward((x * 3.0).sum())
    diff.backward((x * 3.0).sum())
    np.testing.assert_allclose(x.grad, [6.0])


def test_constants_receive_no_gradient():
    c = constant(np.ones(3))
    x = Value(np.arange(3.0), requires_grad=True)
    diff.backward((c * x).sum())
    assert c.grad is None
    np.testing.assert_allclose(x.grad, np.ones(3))


def test_loss_must_be_scalar_and_finite():
    x = Value(np.array([1.0, 2.0]), requires_grad=True)
    with pytest.raises(NonScalarLoss):
        diff.backward(x * 2.0)
    with pytest.raises(NonFiniteLoss):
        diff.backward(diff.log(x - 1.0).sum())


def test_shape_errors():
    with pytest.raises(ShapeMismatch):
        diff.matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(ShapeMismatch):
        diff.add(np.ones(3), np.ones(4))
    with pytest.raises(ShapeMismatch):
        diff.take(np.ones((2, 3)), [5])
    with pytest.raises(ShapeMismatch):
        diff.causal_attention(np.ones((3, 6)), np.ones((3, 6)), np.ones((3, 6)), heads=4)


def _composite_store():
    store = ParameterStore(seed=4)
    store.create('emb', (6, 4), std=0.5)
    store.create('wq', (4, 4), std=0.5)
    store.create('wk', (4, 4), std=0.5)
    store.create('wv', (4, 4), std=0.5)
    store.create('out', (4, 3), std=0.5)
    store.create('bias', (3,), fill=0.1)
    return store


def _composite_loss(store):
    rows = diff.take(store['emb'], [0, 3, 3, 5])
    extra = diff.reshape(store['emb'][1:3], (2, 4))
    x = diff.concat([rows, extra], axis=0)
    attended = diff.causal_attention(x @ store['wq'], x @ store['wk'], x @ store['wv'], heads=2)
    logits = attended @ store['out'] + store['bias']
    nll = -diff.log_softmax(logits)[np.arange(6), [0, 1, 2, 0, 1, 2]].mean()
    probs = diff.softmax(logits.T, axis=0)
    return nll + (probs * probs).sum() * 0.1 + diff.exp(store['bias'] / 4.0).sum() + (store['bias'] ** 2).sum()


def test_composite_gradients_match_finite_differences():
    store = _composite_store()
    assert check_gradients(lambda: _composite_loss(store), store, max_coords=30) < 1e-4


def test_frozen_parameters_get_no_gradient():
    store = _composite_store()
    store.freeze(['w'])
    assert store.is_frozen('wq') and not store.is_frozen('emb')
    diff.backward(_composite_loss(store))
    assert store['wq'].grad is None
    assert store['emb'].grad is not None
    assert store.trainable() == ['bias', 'emb', 'out']
    assert store.num_parameters(trainable_only=True) == 3 + 24 + 12


def test_causal_attention_ignores_the_future():
    rng = np.random.default_rng(0)
    q, k, v = (rng.normal(size=(5, 4)) for _ in range(3))
    full = diff.causal_attention(q, k, v, heads=2).data
    k2, v2 = k.copy(), v.copy()
    k2[3:] += 10.0
    v2[3:] -= 4.0
    changed = diff.causal_attention(q, k2, v2, heads=2).data
    np.testing.assert_array_equal(full[:3], changed[:3])


def test_initial_values_do_not_depend_on_creation_order():
    first = ParameterStore(seed=9)
    first.create('a', (3, 2), std=1.0)
    first.create('b', (4,), std=1.0)
    second = ParameterStore(seed=9)
    second.create('b', (4,), std=1.0)
    second.create('a', (3, 2), std=1.0)
    for name in ('a', 'b'):
        np.testing.assert_array_equal(first[name].data, second[name].data)
    assert not np.array_equal(ParameterStore(seed=10).create('a', (3, 2), std=1.0).data, first['a'].data)


def test_checkpoint_layout_and_round_trip(tmp_path):
    store = ParameterStore(seed=1)
    store.create('b.scale', (), fill=2.5)
    store.create('a.weight', (2, 3), std=1.0)
    path = str(tmp_path / 'checkpoint.bin')
    save_checkpoint(store, path)
    blob = open(path, 'rb').read()
    assert blob[:8] == b'R2PCKPT1'
    assert int.from_bytes(blob[8:12], 'little') == 2
    assert int.from_bytes(blob[12:16], 'little') == len('a.weight')
    assert blob[16:24] == b'a.weight'
    assert len(blob) == 12 + (4 + 8 + 4 + 16 + 48) + (4 + 7 + 4 + 8)
    arrays = load_checkpoint(path)
    assert list(arrays) == ['a.weight', 'b.scale']
    np.testing.assert_array_equal(arrays['a.weight'], store['a.weight'].data)
    assert arrays['b.scale'].shape == () and float(arrays['b.scale']) == 2.5

    again = ParameterStore(seed=2)
    again.create('a.weight', (2, 3), std=1.0)
    again.create('b.scale', (), fill=0.0)
    again.load_arrays(arrays)
    save_checkpoint(again, str(tmp_path / 'again.bin'))
    assert open(str(tmp_path / 'again.bin'), 'rb').read() == blob


def test_load_arrays_checks_shapes():
    store = ParameterStore()
    store.create('w', (2, 2))
    with pytest.raises(ShapeMismatch):
        store.load_arrays({'w': np.zeros((3, 2))})
    with pytest.raises(SchemaMismatch):
        store.load_arrays({'v': np.zeros(2)})
    store.load_arrays({'v': np.zeros(2)}, strict=False)


def test_corrupt_checkpoints_are_rejected(tmp_path):
    store = ParameterStore(seed=1)
    store.create('a.weight', (4, 4), std=1.0)
    path = str(tmp_path / 'ok.bin')
    save_checkpoint(store, path)
    blob = open(path, 'rb').read()
    for name, data in (('foreign.bin', b'PK\x03\x04' + blob[4:]), ('short.bin', blob[:40]), ('empty.bin', b'')):
        (tmp_path / name).write_bytes(data)
        with pytest.raises(SchemaMismatch):
            load_checkpoint(str(tmp_path / name))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 2 ** 16))
def test_matmul_chain_gradients(rows, cols, seed):
    store = ParameterStore(seed=seed)
    store.create('x', (rows, 3), std=1.0)
    store.create('w', (3, cols), std=1.0)

    def loss():
        return diff.log_softmax(store['x'] @ store['w']).sum() * -1.0
    assert check_gradients(loss, store) < 1e-4


def test_two_layer_perceptron_gradients():
    store = ParameterStore(seed=7)
    store.create('w1', (5, 8), std=0.7)
    store.create('b1', (8,), std=0.1)
    store.create('w2', (8, 1), std=0.7)
    x = constant(np.random.default_rng(3).normal(size=(10, 5)))
    y = constant(np.random.default_rng(4).normal(size=(10, 1)))

    def loss():
        hidden = diff.relu(x @ store['w1'] + store['b1'])
        return ((hidden @ store['w2'] - y) ** 2).mean()
    assert check_gradients(loss, store, h=1e-5) < 1e-4
