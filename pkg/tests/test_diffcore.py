import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from mudar import diffcore as dc
from mudar.errors import ContractError, NumericDomainError

small = st.floats(-3, 3, allow_nan=False, width=64)


def check_grad(fn, params, tol=1e-4):
    leaves = {k: dc.as_array(v).clone().requires_grad_(True) for k, v in params.items()}
    analytic = dc.grad(fn(leaves), leaves)
    numeric = dc.finite_difference_grad(lambda p: float(fn(p)), leaves)
    assert dc.max_relative_error(analytic, numeric) <= tol


def test_softmax_symmetric_pair():
    assert dc.softmax(torch.tensor([0.0, 0.0])).tolist() == [0.5, 0.5]


def test_pairwise_single_pair():
    assert dc.pairwise_sq_dists([[0.0]], [[1.0]]).tolist() == [[1.0]]


def test_conv1d_sliding_dot():
    expected = oracles.sliding_dot([1, 2, 3, 4], [1, 1])
    assert expected == [3, 5, 7]
    assert dc.conv1d(torch.tensor([1.0, 2, 3, 4]), torch.tensor([1.0, 1])).tolist() == expected


def test_conv1d_batched_matches_oracle():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 3, 9))
    w = rng.normal(size=(4, 3, 3))
    out = dc.conv1d(x, w, torch.zeros(4)).numpy()
    for b in range(2):
        for o in range(4):
            ref = np.sum([oracles.sliding_dot(x[b, c], w[o, c]) for c in range(3)], axis=0)
            np.testing.assert_allclose(out[b, o], ref, atol=1e-12)


def test_grad_linear_and_quadratic():
    p = torch.zeros(3, dtype=torch.float64, requires_grad=True)
    assert dc.grad(dc.sum_(p), {"p": p})["p"].tolist() == [1.0, 1.0, 1.0]
    q = torch.tensor([1.0, 2.0], dtype=torch.float64, requires_grad=True)
    assert dc.grad(dc.sum_(dc.mul(q, q)), {"q": q})["q"].tolist() == [2.0, 4.0]


def test_grad_rejects_non_scalar():
    p = torch.ones(2, dtype=torch.float64, requires_grad=True)
    with pytest.raises(ContractError):
        dc.grad(p * 2, {"p": p})


def test_grad_unused_parameter_is_zero():
    p = torch.ones(2, dtype=torch.float64, requires_grad=True)
    q = torch.ones(3, dtype=torch.float64, requires_grad=True)
    g = dc.grad(dc.sum_(p), {"p": p, "q": q})
    assert g["q"].tolist() == [0.0, 0.0, 0.0]


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ContractError, match=r"\(2, 3\).*\(2, 3\)"):
        dc.matmul(torch.ones(2, 3), torch.ones(2, 3))
    with pytest.raises(ContractError):
        dc.add(torch.ones(2, 3), torch.ones(4))
    with pytest.raises(ContractError):
        dc.pairwise_sq_dists(torch.ones(2, 3), torch.ones(2, 2))


def test_non_finite_input_is_numeric_error():
    with pytest.raises(NumericDomainError):
        dc.exp(torch.tensor([float("nan")]))
    with pytest.raises(NumericDomainError):
        dc.matmul(torch.tensor([[float("inf")]]), torch.ones(1, 1))


def test_log_clamps_probabilities():
    assert float(dc.log(torch.tensor(0.0))) == pytest.approx(np.log(1e-12))
    assert float(dc.log(torch.tensor(2.0))) == 0.0


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (3, 5), elements=small))
def test_softmax_rows_are_distributions(x):
    p = dc.softmax(torch.from_numpy(x)).numpy()
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    assert (p > 0).all() and (p < 1).all()


@settings(max_examples=20, deadline=None)
@given(arrays(np.float64, (5, 3), elements=small))
def test_pairwise_self_distances(a):
    d = dc.pairwise_sq_dists(a, a).numpy()
    assert np.abs(np.diag(d)).max() <= 1e-12
    np.testing.assert_array_equal(d, d.T)


def test_batchnorm_train_standardises():
    rng = np.random.default_rng(1)
    x = torch.from_numpy(rng.normal(3.0, 2.0, size=(16, 4, 7)))
    y, rm, rv = dc.batchnorm(x, torch.ones(4), torch.zeros(4), torch.zeros(4), torch.ones(4), True, eps=0.0)
    assert y.mean(dim=(0, 2)).abs().max() <= 1e-6
    assert (y.var(dim=(0, 2), unbiased=False) - 1).abs().max() <= 1e-5
    # running statistics moved toward the batch values
    assert float(rm.min()) > 0.0


def test_batchnorm_eval_uses_running_stats():
    x = torch.tensor([[1.0, 2.0], [3.0, 4.0]], dtype=torch.float64)
    y, rm, rv = dc.batchnorm(
        x, torch.ones(2), torch.zeros(2), torch.tensor([1.0, 1.0]), torch.tensor([4.0, 4.0]), False, eps=0.0
    )
    assert y.tolist() == [[0.0, 0.5], [1.0, 1.5]]
    assert rm.tolist() == [1.0, 1.0]


def test_batchnorm_needs_two_values():
    with pytest.raises(ContractError):
        dc.batchnorm(torch.ones(1, 2), torch.ones(2), torch.zeros(2), torch.zeros(2), torch.ones(2), True)


def test_maxpool_drops_remainder():
    assert dc.maxpool1d(torch.tensor([[1.0, 3.0, 2.0, 0.0, 9.0]]), 2).tolist() == [[3.0, 2.0]]


# -- every primitive against central differences --------------------------------

rng = np.random.default_rng(7)


@pytest.mark.parametrize(
    "name,fn,params",
    [
        ("matmul", lambda p: dc.sum_(dc.matmul(p["a"], p["b"]) ** 2), {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(4, 2))}),
        ("add", lambda p: dc.sum_(dc.mul(dc.add(p["a"], p["b"]), p["a"])), {"a": rng.normal(size=(3,)), "b": rng.normal(size=(3,))}),
        ("sub", lambda p: dc.sum_(dc.sub(p["a"], p["b"]) ** 3), {"a": rng.normal(size=(4,)), "b": rng.normal(size=(4,))}),
        ("mean", lambda p: dc.mean(p["a"] ** 2), {"a": rng.normal(size=(2, 5))}),
        ("relu", lambda p: dc.sum_(dc.relu(p["a"]) * p["a"]), {"a": rng.normal(size=(6,)) + 0.3}),
        ("exp", lambda p: dc.sum_(dc.exp(p["a"])), {"a": rng.normal(size=(4,))}),
        ("log", lambda p: dc.sum_(dc.log(dc.softmax(p["a"]))), {"a": rng.normal(size=(2, 3))}),
        ("softmax", lambda p: dc.sum_(dc.softmax(p["a"]) * torch.arange(3.0, dtype=torch.float64)), {"a": rng.normal(size=(2, 3))}),
        ("conv1d", lambda p: dc.sum_(dc.conv1d(p["x"], p["w"], p["b"]) ** 2), {"x": rng.normal(size=(2, 2, 7)), "w": rng.normal(size=(3, 2, 3)), "b": rng.normal(size=(3,))}),
        ("maxpool1d", lambda p: dc.sum_(dc.maxpool1d(p["x"], 2) ** 2), {"x": rng.normal(size=(2, 8))}),
        ("batchnorm", lambda p: dc.sum_(dc.batchnorm(p["x"], p["g"], p["s"], torch.zeros(3), torch.ones(3), True)[0] ** 3), {"x": rng.normal(size=(5, 3)), "g": rng.normal(size=(3,)), "s": rng.normal(size=(3,))}),
        ("pairwise", lambda p: dc.sum_(dc.exp(-dc.pairwise_sq_dists(p["a"], p["b"]))), {"a": rng.normal(size=(3, 2)), "b": rng.normal(size=(4, 2))}),
    ],
)
def test_primitive_gradients(name, fn, params):
    check_grad(fn, params)
