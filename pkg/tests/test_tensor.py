import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from midout import tensor as T
from midout.gradcheck import PRIMITIVES, check_primitive
from midout.rng import GOLDEN, RngStream
from midout.tensor import Adam, ContractError, ParameterStore, Tape, Tensor, backward, grad_check


def _param(store, name, value):
    return store.add(name, np.asarray(value, dtype=np.float64))


# -- forward examples -------------------------------------------------------------

def test_softmax_symmetric():
    out = T.softmax(Tensor([0.0, 0.0]))
    assert np.allclose(out.data, [0.5, 0.5])


def test_matmul_identity():
    out = T.matmul(Tensor(np.eye(2)), Tensor([[3.0], [4.0]]))
    assert np.array_equal(out.data, [[3.0], [4.0]])


def test_weighted_sum_convex_combination():
    out = T.weighted_sum(Tensor([0.2689, 0.7311]), Tensor([[1.0], [2.0]]))
    assert out.data == pytest.approx([1.7311], abs=1e-4)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32), st.integers(1, 6), st.integers(1, 9))
def test_softmax_rows_sum_to_one(seed, rows, cols):
    x = RngStream(seed).normal_array(rows * cols, std=30.0).reshape(rows, cols)
    p = T.softmax(Tensor(x)).data
    assert (p >= 0).all()
    assert np.abs(p.sum(axis=-1) - 1.0).max() <= 1e-12


def test_log_softmax_matches_log_of_softmax():
    x = Tensor(RngStream(3).normal_array(12).reshape(3, 4))
    assert np.allclose(T.log_softmax(x).data, np.log(T.softmax(x).data))


def test_cross_entropy_value():
    logits = Tensor([[1.0, 2.0, 0.5]])
    expected = -math.log(math.exp(2.0) / (math.exp(1.0) + math.exp(2.0) + math.exp(0.5)))
    assert T.cross_entropy(logits, [1]).item() == pytest.approx(expected, rel=1e-12)


def test_bilinear_attention_matches_composition():
    rng = RngStream(5)
    q, w, m = (Tensor(rng.normal_array(n).reshape(s)) for n, s in ((6, (2, 3)), (12, (3, 4)), (40, (2, 5, 4))))
    alpha, ctx = T.bilinear_attention(q, w, m)
    ref_alpha = T.softmax(T.batched_dot(m, T.matmul(q, w)))
    assert np.allclose(alpha.data, ref_alpha.data, atol=1e-14)
    assert np.allclose(ctx.data, T.weighted_sum(ref_alpha, m).data, atol=1e-14)


@pytest.mark.parametrize("op,args", [
    (T.add, (np.zeros((2, 3)), np.zeros((3, 2)))),
    (T.mul, (np.zeros(2), np.zeros(3))),
    (T.matmul, (np.zeros((2, 3)), np.zeros((2, 3)))),
    (T.weighted_sum, (np.zeros(3), np.zeros((2, 1)))),
])
def test_shape_mismatch_is_contract_violation(op, args):
    with pytest.raises(ContractError, match=r"\("):
        op(*(Tensor(a) for a in args))


def test_softmax_empty_axis_rejected():
    with pytest.raises(ContractError):
        T.softmax(Tensor(np.zeros((2, 0))))


# -- backward ----------------------------------------------------------------------

def test_backward_square():
    store = ParameterStore()
    x = _param(store, "x", 3.0)
    with Tape() as tape:
        loss = T.mul(x, x)
    backward(loss, tape, store)
    assert x.grad == pytest.approx(6.0)


def test_backward_tanh_at_zero():
    store = ParameterStore()
    x = _param(store, "x", 0.0)
    with Tape() as tape:
        loss = T.tanh(x)
    backward(loss, tape, store)
    assert x.grad == pytest.approx(1.0)


def test_backward_rejects_non_scalar_loss():
    store = ParameterStore()
    x = _param(store, "x", [1.0, 2.0])
    with Tape() as tape:
        y = T.tanh(x)
    with pytest.raises(ContractError):
        backward(y, tape, store)


def test_backward_rejects_empty_tape():
    with pytest.raises(ContractError):
        backward(Tensor(1.0), Tape())


def test_unreachable_parameter_gets_zero_grad():
    store = ParameterStore()
    x = _param(store, "x", 2.0)
    unused = _param(store, "unused", [1.0, 2.0])
    with Tape() as tape:
        loss = T.mul(x, x)
    backward(loss, tape, store)
    assert np.array_equal(unused.grad, [0.0, 0.0])


def test_shared_input_gradients_accumulate():
    store = ParameterStore()
    x = _param(store, "x", 1.5)
    with Tape() as tape:
        loss = T.add(T.mul(x, x), T.tanh(x))
    backward(loss, tape, store)
    assert x.grad == pytest.approx(3.0 + 1 - math.tanh(1.5) ** 2)


def test_tape_records_topological_order():
    store = ParameterStore()
    x = _param(store, "x", [0.3, -0.2])
    with Tape() as tape:
        y = T.tanh(x)
        z = T.mean_squared(y, np.zeros(2))
    produced = set()
    for outputs, inputs, _ in tape.nodes:
        for t in inputs:
            assert t is x or not t.requires_grad or id(t) in produced
        produced.update(id(o) for o in outputs)
    assert tape.nodes[-1][0][0] is z


def test_no_recording_without_tape():
    store = ParameterStore()
    x = _param(store, "x", 1.0)
    T.tanh(x)
    assert T.active_tape() is None


# -- gradient checks ---------------------------------------------------------------

def test_grad_check_quadratic_exact():
    store = ParameterStore()
    x = _param(store, "x", [0.5, -1.0, 2.0])
    err = grad_check(lambda: T.mean_squared(x, np.array([1.0, 2.0, 3.0])), store, n_coords=20)
    assert err < 1e-8


def test_grad_check_reports_non_finite_loss():
    store = ParameterStore()
    x = _param(store, "x", [1.0])
    assert grad_check(lambda: T.scale(x, math.inf), store) == math.inf


@pytest.mark.parametrize("name", PRIMITIVES)
def test_primitive_gradients_on_many_random_shapes(name):
    # 100 random shapes/seeds per primitive, 20 coordinates each
    res = check_primitive(name, trials=100, n_coords=20, seed=2024)
    assert res.max_rel_error < 1e-4, res


# -- Adam ----------------------------------------------------------------------------

def test_adam_zero_gradient_is_fixed_point():
    store = ParameterStore()
    p = _param(store, "p", [0.3, -0.7])
    opt = Adam(store, lr=1e-4)
    for _ in range(3):
        p.grad = np.zeros(2)
        opt.step()
    assert np.array_equal(p.data, [0.3, -0.7])


def test_adam_first_step_moves_by_lr():
    store = ParameterStore()
    p = _param(store, "p", 1.0)
    opt = Adam(store, lr=1e-4)
    p.grad = np.array(1.0)
    opt.step()
    # m_hat = 1, v_hat = 1 -> step = lr / (1 + eps)
    assert 1.0 - p.data == pytest.approx(1e-4 / (1.0 + 1e-8), rel=1e-12)


def test_adam_counter_and_zeroed_grads():
    store = ParameterStore()
    p = _param(store, "p", 1.0)
    opt = Adam(store)
    assert opt.t == 0 and np.all(opt.m["p"] == 0) and np.all(opt.v["p"] == 0)
    for _ in range(2):
        p.grad = np.array(0.5)
        opt.step()
    assert opt.t == 2
    assert p.grad is None


def test_adam_missing_grad():
    store = ParameterStore()
    _param(store, "p", 1.0)
    with pytest.raises(ContractError):
        Adam(store).step()


def test_adam_matches_reference_update():
    rng = RngStream(9)
    store = ParameterStore()
    p = _param(store, "p", rng.normal_array(5))
    ref = p.data.copy()
    m = np.zeros(5)
    v = np.zeros(5)
    opt = Adam(store, lr=1e-3)
    for t in range(1, 6):
        g = rng.normal_array(5)
        p.grad = g.copy()
        opt.step()
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 1e-3 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    assert np.allclose(p.data, ref, rtol=1e-12, atol=1e-15)


# -- parameter store ------------------------------------------------------------------

def test_store_order_and_uniqueness():
    store = ParameterStore()
    for name in ("b", "a", "c"):
        store.add(name, [0.0])
    assert store.names() == ["a", "b", "c"]
    assert all(p.requires_grad for p in store.values())
    with pytest.raises(ContractError):
        store.add("a", [1.0])


def test_rerun_bit_identical_loss():
    def run():
        rng = RngStream(4)
        store = ParameterStore()
        w = _param(store, "w", rng.normal_array(12).reshape(3, 4))
        x = Tensor(rng.normal_array(8).reshape(2, 4))
        return T.cross_entropy(T.linear(x, w), [0, 2]).item()
    assert run() == run()


# -- RNG -------------------------------------------------------------------------------

def _splitmix_reference(seed: int, n: int) -> list[int]:
    mask = (1 << 64) - 1
    out = []
    for i in range(1, n + 1):
        z = (seed + i * GOLDEN) & mask
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & mask
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & mask
        out.append(z ^ (z >> 31))
    return out


def test_rng_matches_pure_python_splitmix64():
    words = RngStream(12345).next_u64(50)
    assert [int(w) for w in words] == _splitmix_reference(12345, 50)


def test_rng_uniform_uses_top_53_bits():
    u = RngStream(7).uniform_array(10)
    ref = [(w >> 11) * 2.0 ** -53 for w in _splitmix_reference(7, 10)]
    assert u.tolist() == ref


def test_rng_range_and_determinism():
    a = RngStream(99).uniform_array(1000)
    b = RngStream(99).uniform_array(1000)
    assert np.array_equal(a, b)
    assert (a >= 0).all() and (a < 1).all()


def test_rng_noise_bound():
    u = RngStream(1).uniform_array(10000, -0.0035, 0.0035)
    assert np.abs(u).max() < 0.0035


def test_rng_rejects_empty_interval():
    with pytest.raises(ValueError):
        RngStream(0).uniform(1.0, 1.0)


def test_rng_stream_advances_counter():
    r = RngStream(3)
    first = r.uniform()
    second = r.uniform()
    assert first != second and r.counter == 2


def test_rng_permutation_is_a_permutation():
    p = RngStream(8).permutation(50)
    assert sorted(p.tolist()) == list(range(50))


def test_rng_normal_moments():
    z = RngStream(10).normal_array(20000)
    assert abs(z.mean()) < 0.03 and abs(z.std() - 1.0) < 0.03
