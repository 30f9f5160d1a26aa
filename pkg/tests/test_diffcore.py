import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stps import diffcore as dc

from conftest import probe

TOL = 1e-4


def P(x):
    return dc.parameter(np.array(x, dtype=float))


def check(build, *params, step=1e-5):
    return dc.grad_check(lambda: probe(build()), params, step)


# ---------------------------------------------------------------- matmul / transpose

def test_matmul_identity_and_zero():
    A = np.array([[1.0, 2], [3, 4]])
    np.testing.assert_array_equal(dc.matmul(P(A), P(np.eye(2))).value, A)
    np.testing.assert_array_equal(dc.matmul(P(A), P(np.zeros((2, 2)))).value, np.zeros((2, 2)))


def test_matmul_grad_of_sum_matches_finite_differences():
    A, B = P([[1.0, 2], [3, 4]]), P([[5.0], [6.0]])
    err = dc.grad_check(lambda: dc.sum_all(dc.matmul(A, B)), [A, B])
    assert err < 1e-6
    loss = dc.sum_all(dc.matmul(A, B))
    dc.backward(loss)
    np.testing.assert_allclose(A.grad, [[5, 6], [5, 6]])


@pytest.mark.parametrize("sa,sb", [((3, 2, 4), (4, 5)), ((4, 5), (3, 5, 2)), ((2, 3, 4), (2, 4, 2))])
def test_matmul_batched_grad(rng, sa, sb):
    a, b = P(rng.normal(size=sa)), P(rng.normal(size=sb))
    assert check(lambda: dc.matmul(a, b), a, b) < TOL


def test_matmul_shape_error_names_shapes():
    with pytest.raises(dc.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        dc.matmul(P(np.ones((2, 3))), P(np.ones((2, 3))))
    with pytest.raises(dc.ShapeError):
        dc.matmul(P(np.ones((2, 2, 3))), P(np.ones((3, 3, 1))))


def test_transpose(rng):
    np.testing.assert_array_equal(dc.transpose(P([[1, 2], [3, 4]])).value, [[1, 3], [2, 4]])
    A = P(rng.normal(size=(3, 5)))
    np.testing.assert_array_equal(dc.transpose(dc.transpose(A)).value, A.value)
    assert check(lambda: dc.transpose(A), A) < TOL
    with pytest.raises(dc.ShapeError):
        dc.transpose(P([1.0, 2.0]))


# ---------------------------------------------------------------- elementwise

def test_add_scale_blend():
    np.testing.assert_array_equal(dc.add(P([1, 2]), P([3, 4])).value, [4, 6])
    np.testing.assert_array_equal(dc.scale(P([1, 2]), 0).value, [0, 0])
    x, y, a = P([2.0]), P([4.0]), 0.5
    np.testing.assert_array_equal(dc.add(dc.scale(x, a), dc.scale(y, 1 - a)).value, [3.0])
    with pytest.raises(dc.ShapeError):
        dc.add(P([1, 2]), P([1, 2, 3]))
    with pytest.raises(ValueError):
        dc.scale(P([1.0]), float("nan"))


def test_add_scale_grads(rng):
    a, b = P(rng.normal(size=(2, 3))), P(rng.normal(size=(2, 3)))
    assert check(lambda: dc.add(dc.scale(a, 0.3), dc.sub(b, a)), a, b) < TOL


def test_concat_features():
    parts = [P([[1.0]]), P([[2.0]]), P([[3.0]])]
    np.testing.assert_array_equal(dc.concat_features(parts).value, [[1, 2, 3]])
    five = [P(np.zeros((4, 64))) for _ in range(5)]
    assert dc.concat_features(five).shape == (4, 320)
    with pytest.raises(dc.ShapeError):
        dc.concat_features([P(np.zeros((2, 1))), P(np.zeros((3, 1)))])


def test_concat_grad_split(rng):
    parts = [P(rng.normal(size=(3, w))) for w in (1, 2, 4)]
    assert check(lambda: dc.concat_features(parts), *parts) < TOL
    rows = [P(rng.normal(size=(2, r, 3))) for r in (2, 1)]
    assert check(lambda: dc.concat(rows, axis=-2), *rows) < TOL


def test_relu():
    np.testing.assert_array_equal(dc.relu(P([-1, 0, 2])).value, [0, 0, 2])
    x = np.random.default_rng(0).normal(size=20)
    np.testing.assert_array_equal(dc.relu(dc.relu(P(x))).value, dc.relu(P(x)).value)
    p = P([-1.0, 2.0])
    loss = dc.sum_all(dc.relu(p))
    dc.backward(loss)
    np.testing.assert_array_equal(p.grad, [0, 1])
    assert dc.grad_check(lambda: dc.sum_all(dc.relu(p)), [p]) < 1e-9


def test_relu_subgradient_at_zero_is_zero():
    p = P([0.0])
    dc.backward(dc.sum_all(dc.relu(p)))
    assert p.grad[0] == 0.0


def test_dropout_modes():
    x = P(np.arange(10.0))
    rng = np.random.default_rng(0)
    assert dc.dropout(x, 0.0, True, rng) is x
    assert dc.dropout(x, 0.15, False, rng) is x
    with pytest.raises(ValueError):
        dc.dropout(x, 1.0, True, rng)
    with pytest.raises(ValueError):
        dc.dropout(x, -0.1, True, rng)


def test_dropout_preserves_mean_and_stores_mask():
    x = P(np.full(100_000, 2.0))
    out = dc.dropout(x, 0.15, True, np.random.default_rng(7))
    assert abs(out.value.mean() - 2.0) / 2.0 < 0.01
    dropped = out.value == 0
    assert abs(dropped.mean() - 0.15) < 0.01
    dc.backward(dc.sum_all(out))
    np.testing.assert_array_equal(x.grad == 0, dropped)
    np.testing.assert_allclose(x.grad[~dropped], 1 / 0.85)


def test_embedding_lookup():
    bank = P([[1, 2], [3, 4], [5, 6]])
    np.testing.assert_array_equal(dc.embedding_lookup(bank, [2, 0]).value, [[5, 6], [1, 2]])
    out = dc.embedding_lookup(bank, [1, 1])
    dc.backward(dc.sum_all(out))
    np.testing.assert_array_equal(bank.grad, [[0, 0], [2, 2], [0, 0]])


def test_embedding_lookup_bounds():
    tod = P(np.zeros((288, 2)))
    assert dc.embedding_lookup(tod, [287]).shape == (1, 2)
    with pytest.raises(IndexError, match="288.*K=288"):
        dc.embedding_lookup(tod, [288])


def test_embedding_lookup_grad(rng):
    bank = P(rng.normal(size=(4, 3)))
    idx = np.array([[0, 3, 3], [1, 0, 2]])
    assert check(lambda: dc.embedding_lookup(bank, idx), bank) < TOL


def test_weighted_lookup_matches_gather_then_contract(rng):
    bank, w, b = P(rng.normal(size=(6, 3))), P(rng.normal(size=4)), P([0.3])
    idx = rng.integers(0, 6, size=(2, 5, 4))
    fused = dc.weighted_lookup(bank, idx, w, b).value
    gathered = bank.value[idx]  # (2, 5, 4, 3)
    reference = np.einsum("bnlc,l->bnc", gathered, w.value) + 0.3
    np.testing.assert_allclose(fused, reference, rtol=1e-12, atol=1e-12)
    assert check(lambda: dc.weighted_lookup(bank, idx, w, b), bank, w, b) < TOL


def test_gather_grad(rng):
    a = P(rng.normal(size=(4, 5)))
    assert check(lambda: dc.gather(dc.gather(a, [2, 0, 3], 0), [4, 1], 1), a) < TOL


def test_affine():
    x = P(np.random.default_rng(0).normal(size=(3, 2)))
    np.testing.assert_array_equal(dc.affine(x, P(np.eye(2)), P(np.zeros(2))).value, x.value)
    np.testing.assert_array_equal(dc.affine(P([1.0, 1.0]), P([[1.0], [1.0]]), P([0.5])).value, [2.5])
    with pytest.raises(dc.ShapeError):
        dc.affine(x, P(np.ones((3, 2))), P(np.zeros(2)))


def test_affine_grad(rng):
    x, W, b = P(rng.normal(size=(2, 3))), P(rng.normal(size=(3, 4))), P(rng.normal(size=4))
    assert check(lambda: dc.affine(x, W, b), x, W, b) < TOL
    xb = P(rng.normal(size=(2, 5, 3)))
    assert check(lambda: dc.affine(xb, W, b), xb, W, b) < TOL


# ---------------------------------------------------------------- residual block

def block(rng, p, h, q, skip=None):
    params = dict(w1=P(rng.normal(size=(p, h))), b1=P(rng.normal(size=h)),
                  w2=P(rng.normal(size=(h, q))), b2=P(rng.normal(size=q)))
    if skip or p != q:
        params.update(ws=P(rng.normal(size=(p, q))), bs=P(rng.normal(size=q)))
    return dc.BlockParams(**params)


def test_residual_identity_when_second_layer_zero(rng):
    bp = block(rng, 3, 4, 3)
    bp.w2.value[...] = 0
    bp.b2.value[...] = 0
    x = P(rng.normal(size=(5, 3)))
    np.testing.assert_array_equal(dc.residual_block(x, bp).value, x.value)


def test_residual_relu_zeroes_negative_inputs(rng):
    bp = dc.BlockParams(P(np.eye(3)), P(np.zeros(3)), P(rng.normal(size=(3, 3))), P(np.zeros(3)))
    x = P(-np.abs(rng.normal(size=(4, 3))) - 0.1)
    np.testing.assert_array_equal(dc.residual_block(x, bp).value, x.value)


def test_residual_order_matches_hand_composition(rng):
    bp = block(rng, 3, 5, 2)
    x = rng.normal(size=(4, 3))
    h = np.maximum(x @ bp.w1.value + bp.b1.value, 0)
    expected = h @ bp.w2.value + bp.b2.value + x @ bp.ws.value + bp.bs.value
    np.testing.assert_allclose(dc.residual_block(P(x), bp).value, expected, rtol=1e-12)


def test_residual_block_grad(rng):
    bp = block(rng, 3, 5, 2)
    x = P(rng.normal(size=(4, 3)))
    params = [x, bp.w1, bp.b1, bp.w2, bp.b2, bp.ws, bp.bs]
    coarse = check(lambda: dc.residual_block(x, bp), *params, step=1e-4)
    fine = check(lambda: dc.residual_block(x, bp), *params, step=1e-6)
    assert coarse < TOL and fine < TOL


def test_residual_block_width_change_needs_skip(rng):
    bp = block(rng, 3, 4, 3)
    bad = dc.BlockParams(bp.w1, bp.b1, P(np.ones((4, 2))), P(np.zeros(2)))
    with pytest.raises(dc.ShapeError):
        dc.residual_block(P(np.ones((1, 3))), bad)


# ---------------------------------------------------------------- backward

def test_backward_simple_and_fanout():
    x = P([1.0, 2.0, 3.0])
    dc.backward(dc.sum_all(x))
    np.testing.assert_array_equal(x.grad, [1, 1, 1])
    y = P([1.0, 2.0, 3.0])
    dc.backward(dc.sum_all(dc.add(y, y)))
    np.testing.assert_array_equal(y.grad, [2, 2, 2])


def test_k_fold_accumulation_equals_scaling(rng):
    v = rng.normal(size=4)
    a, b = P(v), P(v)
    dc.backward(dc.sum_all(dc.add(dc.add(a, a), a)))
    dc.backward(dc.sum_all(dc.scale(b, 3.0)))
    np.testing.assert_array_equal(a.grad, b.grad)


def test_backward_rejects_non_scalar():
    with pytest.raises(dc.ShapeError):
        dc.backward(dc.add(P([1.0, 2.0]), P([1.0, 2.0])))


def test_backward_populates_every_reachable_node(rng):
    x = P(rng.normal(size=(2, 3)))
    W = P(rng.normal(size=(3, 3)))
    h = dc.matmul(x, W)
    r = dc.relu(h)
    loss = dc.sum_all(r)
    dc.backward(loss, retain_intermediate=True)
    for node in (x, W, h, r, loss):
        assert node.grad is not None and node.grad.shape == node.shape
    assert loss.grad == 1.0


def test_grad_check_closed_form():
    p = P([1.0, 2.0])
    err = dc.grad_check(lambda: dc.sum_all(dc.square(p)), [p])
    assert err < 1e-8
    dc.backward(dc.sum_all(dc.square(p)))
    np.testing.assert_allclose(p.grad, [2, 4])


def test_grad_check_linear_is_exact(rng):
    p = P(rng.normal(size=5))
    assert check(lambda: dc.scale(p, 2.5), p) < 1e-9


# ---------------------------------------------------------------- AdamW

def store_with(values):
    s = dc.ParameterStore()
    for k, v in values.items():
        s.add(k, np.array(v, dtype=float))
    return s


def test_adamw_zero_grad_no_decay_is_noop():
    s = store_with({"a": [1.0, -2.0]})
    s["a"].grad = np.zeros(2)
    dc.adamw_step(s, weight_decay=0.0)
    np.testing.assert_array_equal(s["a"].value, [1.0, -2.0])
    assert s["a"].grad is None and s.entries["a"].step_count == 1


def test_adamw_first_step_hand_computed():
    s = store_with({"t": [1.0]})
    s["t"].grad = np.array([1.0])
    dc.adamw_step(s, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=1e-3)
    # decay: 1 * (1 - 1e-6); Adam: m_hat = v_hat = 1, step 1e-3 / (1 + 1e-8)
    expected = (1.0 - 1e-6) - 1e-3 / (1.0 + 1e-8)
    assert expected == pytest.approx(0.99899900001, abs=1e-14)
    assert s["t"].value[0] == pytest.approx(expected, abs=1e-15)


def test_adamw_lr_zero_changes_nothing(rng):
    s = store_with({"a": rng.normal(size=3)})
    before = s["a"].value.copy()
    s["a"].grad = rng.normal(size=3)
    dc.adamw_step(s, lr=0.0, weight_decay=0.5)
    np.testing.assert_array_equal(s["a"].value, before)


def test_adamw_pure_decay_is_exactly_multiplicative(rng):
    v = rng.normal(size=6)
    s = store_with({"a": v})
    s["a"].grad = np.zeros(6)
    dc.adamw_step(s, lr=1e-2, weight_decay=0.3)
    np.testing.assert_array_equal(s["a"].value, v * (1 - 1e-2 * 0.3))


def test_adamw_parameters_independent_of_names(rng):
    va, vb, ga, gb = (rng.normal(size=3) for _ in range(4))
    s1 = store_with({"a": va, "b": vb})
    s2 = store_with({"z": va, "c": vb})
    s1["a"].grad, s1["b"].grad = ga, gb
    s2["z"].grad, s2["c"].grad = ga, gb
    dc.adamw_step(s1)
    dc.adamw_step(s2)
    np.testing.assert_array_equal(s1["a"].value, s2["z"].value)
    np.testing.assert_array_equal(s1["b"].value, s2["c"].value)


def test_adamw_missing_grad_names_parameter():
    s = store_with({"alpha": [1.0], "beta": [2.0]})
    s["alpha"].grad = np.ones(1)
    with pytest.raises(ValueError, match="beta"):
        dc.adamw_step(s)


def test_store_rejects_duplicates_and_sorts_names():
    s = store_with({"b": [1.0], "a": [2.0]})
    assert s.names() == ["a", "b"]
    with pytest.raises(KeyError):
        s.add("a", [0.0])


# ---------------------------------------------------------------- properties

@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_matmul_affine_grads_property(p, q, r, seed):
    g = np.random.default_rng(seed)
    a, b, bias = P(g.normal(size=(p, q))), P(g.normal(size=(q, r))), P(g.normal(size=r))
    assert check(lambda: dc.affine(a, b, bias), a, b, bias) < TOL
    assert check(lambda: dc.matmul(a, b), a, b) < TOL


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_relu_grad_away_from_kink(seed):
    g = np.random.default_rng(seed)
    v = g.normal(size=6)
    v = np.where(np.abs(v) < 1e-3, 1e-3 * np.sign(v + 1e-12) + v, v)
    p = P(v)
    assert check(lambda: dc.relu(p), p) < TOL


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_ops_are_deterministic(seed):
    def run():
        g = np.random.default_rng(seed)
        x = P(g.normal(size=(3, 4)))
        out = dc.dropout(dc.relu(dc.matmul(x, P(g.normal(size=(4, 2))))), 0.3, True, g)
        dc.backward(dc.sum_all(out))
        return out.value.tobytes(), x.grad.tobytes()
    assert run() == run()
