import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from flair_lab import numkernel as nk
from flair_lab.errors import ContractError, DimensionError, TrainingAborted

from conftest import check_grads


def test_matmul_identity():
    v = np.array([[0.3], [-1.7]])
    out = nk.matmul(nk.const(np.eye(2)), nk.const(v))
    assert np.array_equal(out.value, v)


def test_relu_definition():
    assert np.array_equal(nk.relu(nk.const([-1.0, 2.0])).value, [0.0, 2.0])


def test_cross_entropy_uniform_logits():
    loss = nk.cross_entropy(nk.const([[0.0, 0.0]]), np.array([1]))
    assert float(loss.value) == pytest.approx(math.log(2), abs=1e-12)


def test_square_sum_gradient():
    w = nk.param([3.0], "w")
    nk.backward(nk.sum_(nk.mul(w, w)))
    assert w.grad.tolist() == [6.0]


def test_l1_gradient_is_sign():
    u = nk.param([1.0, -2.0], "u")
    nk.backward(nk.sum_(nk.l1_distance(u, nk.const([0.0, 0.0]))))
    assert u.grad.tolist() == [1.0, -1.0]


def test_backward_rejects_non_scalar_root():
    w = nk.param(np.ones(3), "w")
    with pytest.raises(ContractError):
        nk.backward(nk.square(w))


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
        nk.matmul(nk.const(np.ones((2, 3))), nk.const(np.ones((4, 5))))
    with pytest.raises(DimensionError, match=r"\(3,\).*\(4,\)"):
        nk.add(nk.const(np.ones(3)), nk.const(np.ones(4)))


def test_unreached_leaf_keeps_no_gradient():
    w = nk.param([1.0], "w")
    unused = nk.param([2.0], "unused")
    nk.backward(nk.sum_(nk.square(w)))
    assert unused.grad is None


def test_gradient_accumulates_over_shared_subgraph():
    w = nk.param([2.0], "w")
    y = nk.square(w)
    nk.backward(nk.sum_(nk.add(y, y)))
    assert w.grad.tolist() == [8.0]


UNARY = {
    "tanh": nk.tanh,
    "sigmoid": nk.sigmoid,
    "exp": nk.exp,
    "square": nk.square,
    "relu": nk.relu,
    "abs": nk.abs_,
    "softmax": lambda a: nk.softmax(a, axis=-1),
    "log_softmax": lambda a: nk.log_softmax(a, axis=-1),
    "logsumexp": lambda a: nk.logsumexp(a, axis=-1),
    "mean0": lambda a: nk.mean(a, axis=0),
    "sum1": lambda a: nk.sum_(a, axis=1),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_ops_match_finite_differences(name, rng):
    op = UNARY[name]
    for _ in range(5):
        x = rng.uniform(-2, 2, size=(3, 4))
        if name in ("relu", "abs"):
            x[np.abs(x) < 1e-3] = 0.5  # keep away from the kink
        p = nk.param(x, "x")
        weights = rng.normal(size=op(nk.const(x)).shape)
        errs = check_grads(lambda: nk.sum_(nk.mul(op(p), nk.const(weights))), [p])
        assert errs["x"] < 1e-4


def test_log_and_sqrt_match_finite_differences(rng):
    for op in (nk.log, nk.sqrt):
        p = nk.param(rng.uniform(0.5, 2.0, size=(2, 3)), "x")
        w = rng.normal(size=(2, 3))
        assert check_grads(lambda: nk.sum_(nk.mul(op(p), nk.const(w))), [p])["x"] < 1e-4


def test_binary_ops_with_broadcast_match_finite_differences(rng):
    a = nk.param(rng.uniform(-2, 2, size=(4, 3)), "a")
    b = nk.param(rng.uniform(-2, 2, size=(3,)), "b")
    m = nk.param(rng.uniform(-2, 2, size=(3, 2)), "m")

    def build():
        h = nk.sub(nk.mul(nk.add(a, b), a), nk.scale(b, 0.5))
        return nk.mean(nk.tanh(nk.matmul(h, m)))

    errs = check_grads(build, [a, b, m])
    assert max(errs.values()) < 1e-4


def test_distances_and_concat_match_finite_differences(rng):
    u = nk.param(rng.uniform(-2, 2, size=(5, 3)), "u")
    v = nk.param(rng.uniform(-2, 2, size=(5, 3)), "v")

    def build():
        both = nk.concat([u, v], axis=1)
        return nk.add(nk.add(nk.sum_(nk.l1_distance(u, v)), nk.sum_(nk.sq_euclidean(u, v))),
                      nk.add(nk.sum_(nk.euclidean(u, v)), nk.mean(nk.square(both))))

    assert max(check_grads(build, [u, v]).values()) < 1e-4


def test_mlp_cross_entropy_matches_finite_differences(rng):
    """Random two-layer network with a cross-entropy head, the standard FD oracle."""
    for _ in range(5):
        w0 = nk.param(rng.normal(size=(6, 5)), "w0")
        b0 = nk.param(rng.normal(size=5), "b0")
        w1 = nk.param(rng.normal(size=(5, 2)), "w1")
        x = rng.uniform(-2, 2, size=(8, 6))
        y = rng.integers(0, 2, size=8)

        def build():
            h = nk.tanh(nk.add(nk.matmul(nk.const(x), w0), b0))
            return nk.cross_entropy(nk.matmul(h, w1), y)

        assert max(check_grads(build, [w0, b0, w1]).values()) < 1e-4


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 6)),
              elements=st.floats(-50, 50)))
def test_softmax_rows_positive_and_normalised(x):
    s = nk.softmax(nk.const(x), axis=-1).value
    assert np.all(s > 0)
    assert np.allclose(s.sum(-1), 1.0, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-2, 2)))
def test_forward_is_deterministic(x):
    def run():
        return nk.logsumexp(nk.tanh(nk.const(x)), axis=1).value
    assert np.array_equal(run(), run())


def test_adam_first_step_moves_by_learning_rate():
    p = nk.param([1.0], "p")
    opt = nk.Adam([p], lr=0.1, beta1=0.9, beta2=0.999)
    p.grad = np.array([1.0])
    opt.step()
    # bias-corrected m/sqrt(v) is exactly 1 on the first step, eps aside
    assert p.value[0] == pytest.approx(0.9, abs=1e-6)


def test_adam_zero_gradient_leaves_params():
    p = nk.param([1.5, -2.0], "p")
    opt = nk.Adam([p], lr=0.1)
    p.grad = np.zeros(2)
    opt.step()
    assert p.value.tolist() == [1.5, -2.0]


def test_adam_is_deterministic():
    def run():
        p = nk.param([0.5, 0.2], "p")
        opt = nk.Adam([p], lr=0.05)
        for g in ([1.0, -2.0], [0.3, 0.1], [1.0, -2.0]):
            p.grad = np.array(g)
            opt.step()
        return p.value.copy(), opt.state_dict()["t"]
    (a, ta), (b, tb) = run(), run()
    assert np.array_equal(a, b) and ta == tb == 3


def test_adam_rejects_nan_gradient():
    p = nk.param([1.0], "p")
    opt = nk.Adam([p], lr=0.1)
    p.grad = np.array([np.nan])
    with pytest.raises(TrainingAborted):
        opt.step()
    assert p.value.tolist() == [1.0]
