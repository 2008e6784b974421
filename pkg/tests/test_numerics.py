import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from rgbd_curriculum.numerics import (
    ComputationTape,
    ContractError,
    DimensionError,
    NumericError,
    SeededRng,
    Tensor,
    analytic_gradients,
    apply_primitive,
    backward,
    finite_difference_check,
    get_dtype,
    no_tape,
    ops,
    precision,
    registered_kinds,
    sample_gaussian,
)


def leaf(arr, name):
    return Tensor(arr, requires_grad=True, name=name)


# -- forward examples --------------------------------------------------------------

def test_softmax_of_equal_logits_is_uniform():
    out = ops.softmax(Tensor([1.0, 1.0, 1.0, 1.0]))
    np.testing.assert_allclose(out.data, [0.25] * 4)


def test_gelu_zero_and_identity_matmul(rng):
    assert ops.gelu(Tensor([0.0])).data[0] == 0.0
    a = rng.normal(size=(3, 4))
    with precision("float64"):
        np.testing.assert_array_equal(ops.matmul(Tensor(a), Tensor(np.eye(4))).data, a)


def test_matmul_hand_case():
    out = ops.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0], [6.0]]))
    np.testing.assert_array_equal(out.data, [[17.0], [39.0]])


def test_shape_mismatch_names_op_and_shapes():
    with pytest.raises(DimensionError, match=r"add.*\(2,\).*\(3,\)"):
        ops.add(Tensor(np.zeros(2)), Tensor(np.zeros(3)))
    with pytest.raises(DimensionError, match="matmul"):
        ops.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_only_scalar_broadcasting_is_implicit():
    with pytest.raises(DimensionError):
        ops.mul(Tensor(np.ones((2, 3))), Tensor(np.ones(3)))
    np.testing.assert_array_equal((Tensor(np.ones(3)) * 2.0).data, [2.0, 2.0, 2.0])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_output_names_producing_op():
    with pytest.raises(NumericError, match="log"):
        ops.log(Tensor([0.0, 1.0]))
    with pytest.raises(NumericError, match="div"):
        ops.div(Tensor([1.0]), Tensor([0.0]))
    with pytest.raises(NumericError):
        Tensor([np.nan])


def test_unknown_primitive_rejected():
    with pytest.raises(ContractError):
        apply_primitive("conv3d", [Tensor([1.0])])


def test_spec_primitive_set_is_registered():
    required = {
        "add", "sub", "mul", "div", "scalar-mul", "matmul", "transpose", "reshape", "concat",
        "gather", "index-select", "sum", "mean", "exp", "log", "power", "sqrt", "softmax",
        "layer-norm", "gelu", "l2-normalize", "mse",
    }
    assert required <= set(registered_kinds())


def test_precision_is_process_wide_and_scoped():
    assert get_dtype() == np.float32
    with precision("float64"):
        assert Tensor([1.0]).data.dtype == np.float64
    assert Tensor([1.0]).data.dtype == np.float32


# -- backward ------------------------------------------------------------------------

def test_square_gradient(f64):
    x = leaf(3.0, "x")
    with ComputationTape() as tape:
        loss = x * x
    grads = backward(loss, tape)
    assert grads["x"] == pytest.approx(6.0)
    assert x.grad == pytest.approx(6.0)


@given(st.integers(0, 2**31 - 1))
def test_sum_of_softmax_has_zero_gradient(seed):
    with precision("float64"):
        v = leaf(np.random.default_rng(seed).normal(size=7), "v")
        with ComputationTape() as tape:
            loss = ops.sum(ops.softmax(v))
        g = backward(loss, tape)["v"]
    assert np.abs(g).max() < 1e-12


def test_two_layer_mlp_matches_finite_differences(f64, rng):
    params = {
        "w1": leaf(rng.normal(size=(5, 8)), "w1"),
        "b1": leaf(rng.normal(size=8), "b1"),
        "w2": leaf(rng.normal(size=(8, 3)), "w2"),
        "b2": leaf(rng.normal(size=3), "b2"),
    }
    x = Tensor(rng.normal(size=(4, 5)))
    y = Tensor(rng.normal(size=(4, 3)))

    def f(p):
        h = ops.gelu(ops.linear(x, p["w1"], p["b1"]))
        return ops.mse(ops.linear(h, p["w2"], p["b2"]), y)

    errs = finite_difference_check(f, params, eps=1e-6)
    assert max(errs.values()) < 1e-6


def test_non_scalar_loss_rejected(f64):
    x = leaf(np.ones(3), "x")
    with ComputationTape() as tape:
        y = x * 2.0
    with pytest.raises(ContractError):
        backward(y, tape)


def test_tape_is_consumed(f64):
    x = leaf(2.0, "x")
    with ComputationTape() as tape:
        loss = x * x
    backward(loss, tape)
    with pytest.raises(ContractError):
        backward(loss, tape)


def test_loss_from_other_tape_rejected(f64):
    x = leaf(2.0, "x")
    with ComputationTape():
        loss = x * x
    with ComputationTape() as other:
        _ = x * 3.0
    with pytest.raises(ContractError):
        backward(loss, other)


def test_reused_leaf_accumulates_within_one_pass(f64):
    x = leaf(np.array([1.0, 2.0]), "x")
    with ComputationTape() as tape:
        loss = ops.sum(ops.mul(x, x) + x)
    g = backward(loss, tape)["x"]
    np.testing.assert_allclose(g, [3.0, 5.0])


def test_zero_grad_between_passes_gives_identical_gradients(f64, rng):
    w = leaf(rng.normal(size=(3, 3)), "w")
    x = Tensor(rng.normal(size=(2, 3)))

    def run():
        with ComputationTape() as tape:
            loss = ops.mean(ops.exp(ops.matmul(x, w)))
        backward(loss, tape)
        return w.grad.copy()

    first = run()
    w.zero_grad()
    second = run()
    np.testing.assert_array_equal(first, second)


def test_no_tape_records_nothing(f64):
    x = leaf(2.0, "x")
    with ComputationTape() as tape:
        with no_tape():
            _ = x * x
        assert tape.nodes == []


def test_tape_is_topological(f64, rng):
    x = leaf(rng.normal(size=4), "x")
    with ComputationTape() as tape:
        _ = ops.sum(ops.exp(ops.scalar_mul(x, 2.0)))
    seen = {id(x)}
    for node in tape.nodes:
        assert all(id(t) in seen for t in node.inputs if t.requires_grad)
        seen.add(id(node.output))


# -- per-primitive gradient properties -------------------------------------------------

def _cases(r):
    pos = lambda *s: np.abs(r.normal(size=s)) + 0.5
    nrm = lambda *s: r.normal(size=s)
    perm = r.permutation(5)
    return {
        "add": ([nrm(3, 4), nrm(3, 4)], lambda a, b: ops.sum(ops.mul(ops.add(a, b), ops.add(a, b)))),
        "sub": ([nrm(3, 4), nrm(3, 4)], lambda a, b: ops.sum(ops.exp(ops.sub(a, b)))),
        "mul": ([nrm(3, 4), nrm(3, 4)], lambda a, b: ops.sum(ops.mul(a, b))),
        "div": ([nrm(3, 4), pos(3, 4)], lambda a, b: ops.sum(ops.div(a, b))),
        "scalar-mul": ([nrm(4)], lambda a: ops.sum(ops.exp(ops.scalar_mul(a, -1.7)))),
        "scalar-add": ([nrm(4)], lambda a: ops.sum(ops.exp(a + 0.3))),
        "broadcast": ([nrm(1, 4)], lambda a: ops.sum(ops.exp(ops.broadcast(a, (2, 3, 4))))),
        "matmul": ([nrm(2, 3, 4), nrm(4, 5)], lambda a, b: ops.sum(ops.exp(ops.matmul(a, b)))),
        "linear": ([nrm(2, 3, 4), nrm(4, 5), nrm(5)], lambda x, w, b: ops.sum(ops.exp(ops.linear(x, w, b)))),
        "transpose": ([nrm(2, 3, 4)], lambda a: ops.sum(ops.mul(ops.transpose(a, (2, 0, 1)), Tensor(np.arange(24.0).reshape(4, 2, 3))))),
        "reshape": ([nrm(2, 6)], lambda a: ops.sum(ops.exp(ops.reshape(a, (3, 4))))),
        "concat": ([nrm(2, 3), nrm(2, 2)], lambda a, b: ops.sum(ops.exp(ops.concat([a, b], axis=1)))),
        "index-select": ([nrm(5, 3)], lambda a: ops.sum(ops.exp(ops.index_select(a, [4, 0, 0, 2], axis=0)))),
        "gather": ([nrm(2, 5, 3)], lambda a: ops.sum(ops.exp(ops.gather(a, np.stack([perm[:3], perm[2:]]))))),
        "sum": ([nrm(3, 4)], lambda a: ops.sum(ops.exp(ops.sum(a, axis=1, keepdims=True)))),
        "mean": ([nrm(3, 4)], lambda a: ops.sum(ops.exp(ops.mean(a, axis=0)))),
        "exp": ([nrm(3)], lambda a: ops.sum(ops.exp(a))),
        "log": ([pos(3)], lambda a: ops.sum(ops.log(a))),
        "power": ([pos(3)], lambda a: ops.sum(ops.power(a, 2.5))),
        "sqrt": ([pos(3)], lambda a: ops.sum(ops.sqrt(a))),
        "relu": ([nrm(6) + np.sign(nrm(6)) * 0.2], lambda a: ops.sum(ops.mul(ops.relu(a), ops.relu(a)))),
        "gelu": ([nrm(6)], lambda a: ops.sum(ops.gelu(a))),
        "softmax": ([nrm(3, 4)], lambda a: ops.sum(ops.mul(ops.softmax(a, axis=-1), Tensor(np.arange(12.0).reshape(3, 4))))),
        "log-softmax": ([nrm(3, 4)], lambda a: ops.sum(ops.mul(ops.log_softmax(a, axis=0), Tensor(np.arange(12.0).reshape(3, 4))))),
        "layer-norm": ([nrm(2, 5), pos(5), nrm(5)], lambda x, g, b: ops.sum(ops.mul(ops.layer_norm(x, g, b), Tensor(np.arange(10.0).reshape(2, 5))))),
        "l2-normalize": ([nrm(3, 4)], lambda a: ops.sum(ops.mul(ops.l2_normalize(a), Tensor(np.arange(12.0).reshape(3, 4))))),
        "mse": ([nrm(3, 4), nrm(3, 4)], lambda a, b: ops.mse(a, b)),
    }


@given(st.integers(0, 2**31 - 1), st.sampled_from(sorted(_cases(np.random.default_rng(0)))))
def test_primitive_gradients_match_finite_differences(seed, kind):
    with precision("float64"):
        arrays, fn = _cases(np.random.default_rng(seed))[kind]
        params = {f"x{i}": leaf(a, f"x{i}") for i, a in enumerate(arrays)}
        errs = finite_difference_check(lambda p: fn(*p.values()), params, eps=1e-6)
    assert max(errs.values()) < 1e-6, (kind, errs)


def test_every_differentiable_primitive_has_a_gradient_case():
    assert set(_cases(np.random.default_rng(0))) == set(registered_kinds())


@given(st.integers(0, 2**31 - 1))
def test_primitives_are_pure(seed):
    r = np.random.default_rng(seed)
    a, b = Tensor(r.normal(size=(3, 4))), Tensor(r.normal(size=(4, 2)))
    first = ops.softmax(ops.matmul(a, b)).data.copy()
    second = ops.softmax(ops.matmul(a, b)).data
    np.testing.assert_array_equal(first, second)


@given(st.integers(0, 2**31 - 1), st.floats(1e-3, 1e3))
def test_l2_normalize_gives_unit_rows(seed, scale):
    x = np.random.default_rng(seed).normal(size=(6, 5)) * scale
    with precision("float64"):
        out = ops.l2_normalize(Tensor(x), axis=-1).data
    np.testing.assert_allclose(np.linalg.norm(out, axis=-1), 1.0, atol=1e-6)


# -- the finite-difference oracle itself --------------------------------------------------

def test_oracle_on_quadratic(f64):
    x = {"x": leaf(np.array([1.0]), "x")}
    errs = finite_difference_check(lambda p: ops.sum(ops.mul(p["x"], p["x"])), x, eps=1e-5)
    assert errs["x"] < 1e-8


def test_oracle_reports_corrupted_gradient(f64):
    x = {"x": leaf(np.array([1.0]), "x")}
    f = lambda p: ops.sum(ops.mul(p["x"], p["x"]))
    doubled = {k: 2 * g for k, g in analytic_gradients(f, x).items()}
    assert finite_difference_check(f, x, grads=doubled)["x"] == pytest.approx(0.5, abs=1e-6)


def test_oracle_rejects_nondeterministic_function(f64):
    gen = np.random.default_rng(0)
    x = {"x": leaf(np.array([1.0]), "x")}
    with pytest.raises(ContractError):
        finite_difference_check(lambda p: ops.sum(p["x"] * float(gen.normal())), x)


def test_oracle_rejects_nonpositive_eps(f64):
    x = {"x": leaf(np.array([1.0]), "x")}
    with pytest.raises(ContractError):
        finite_difference_check(lambda p: ops.sum(p["x"]), x, eps=0.0)


# -- rng ------------------------------------------------------------------------------------

def test_gaussian_is_deterministic_per_seed():
    a = sample_gaussian(SeededRng(7), (4, 5)).data
    b = sample_gaussian(SeededRng(7), (4, 5)).data
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, sample_gaussian(SeededRng(8), (4, 5)).data)


def test_gaussian_moments():
    x = sample_gaussian(SeededRng(0), (100_000,)).data.astype(np.float64)
    assert -0.02 < x.mean() < 0.02
    assert 0.98 < x.std() < 1.02


def test_gaussian_empty_shape():
    assert sample_gaussian(SeededRng(0), (0,)).shape == (0,)


def test_child_streams_differ_and_are_stable():
    root = SeededRng(3)
    a = root.child("noise").normal(2000)
    b = root.child("mask").normal(2000)
    np.testing.assert_array_equal(a, SeededRng(3).child("noise").normal(2000))
    # independent streams: correlation within a few standard errors of zero
    assert abs(np.corrcoef(a, b)[0, 1]) < 4 / math.sqrt(2000)
    assert not np.array_equal(root.child(1).uniform(5), root.child(2).uniform(5))
