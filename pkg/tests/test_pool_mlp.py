import numpy as np
import pytest

import semscene as ss
from semscene.errors import ContractViolation
from semscene.nnops import mlp2, mlp_hidden_size, pool
from semscene.optim import grad_check

from oracles import pool_loops


def test_avg_spatial_of_constant_volume():
    x = ss.Tensor(np.full((3, 4, 4, 4), 2.5))
    y = pool(x, "avg", "spatial")
    assert y.shape == (3,)
    assert np.allclose(y.data, 2.5)


def test_max_channel_picks_largest():
    x = np.zeros((3, 1, 1, 1))
    x[:, 0, 0, 0] = [1.0, 5.0, 3.0]
    y = pool(ss.Tensor(x), "max", "channel")
    assert y.shape == (1, 1, 1, 1)
    assert y.data[0, 0, 0, 0] == 5.0


@pytest.mark.parametrize("kind", ["avg", "max"])
@pytest.mark.parametrize("axes", ["spatial", "channel"])
def test_pool_matches_loop_oracle(rng, kind, axes):
    x = rng.normal(size=(3, 4, 4, 4))
    y = pool(ss.Tensor(x), kind, axes)
    expected = pool_loops(x, kind, axes)
    if kind == "max":
        assert np.array_equal(y.data, expected)
    else:
        # avg differs from the sequential-sum oracle only in summation order
        assert np.max(np.abs(y.data - expected)) < 1e-12


def test_max_grad_goes_to_first_argmax_scan_order():
    x = np.zeros((1, 2, 2))
    x[0] = [[7.0, 7.0], [0.0, 7.0]]  # three tied maxima
    t = ss.Tensor(x, requires_grad=True)
    ss.tensor_sum(pool(t, "max", "spatial")).backward()
    expected = np.zeros((1, 2, 2))
    expected[0, 0, 0] = 1.0  # first in row-major order
    assert np.array_equal(t.grad, expected)


def test_pool_grad_checks(rng):
    x = ss.Tensor(rng.normal(size=(3, 4, 4, 4)), requires_grad=True)
    for kind in ("avg", "max"):
        for axes in ("spatial", "channel"):
            def f():
                return ss.tensor_sum(ss.sigmoid(pool(x, kind, axes)))
            assert grad_check(f, [x], rng=rng) < 1e-6, (kind, axes)


def test_mlp_hidden_size_formula():
    assert mlp_hidden_size(8) == 1
    assert mlp_hidden_size(4) == 1   # floor clamps up to 1
    assert mlp_hidden_size(16) == 2
    assert mlp_hidden_size(64) == 8
    with pytest.raises(ContractViolation):
        mlp_hidden_size(0)


def test_mlp2_zero_weights_zero_output(rng):
    x = ss.Tensor(rng.normal(size=16))
    y = mlp2(x, ss.Tensor(np.zeros((2, 16))), ss.Tensor(np.zeros((16, 2))))
    assert np.array_equal(y.data, np.zeros(16))


def test_mlp2_matches_two_matmul_oracle(rng):
    c = 16
    x = rng.normal(size=c)
    wh = rng.normal(size=(2, c))
    wo = rng.normal(size=(c, 2))
    y = mlp2(ss.Tensor(x), ss.Tensor(wh), ss.Tensor(wo))
    expected = wo @ np.maximum(wh @ x, 0.0)
    assert np.max(np.abs(y.data - expected)) < 1e-12


def test_mlp2_rejects_misshaped_weights(rng):
    x = ss.Tensor(rng.normal(size=16))
    with pytest.raises(ContractViolation, match="w_hidden"):
        mlp2(x, ss.Tensor(np.zeros((3, 16))), ss.Tensor(np.zeros((16, 3))))


def test_mlp2_grad_check(rng):
    x = ss.Tensor(rng.normal(size=16), requires_grad=True)
    wh = ss.Tensor(rng.normal(size=(2, 16)), requires_grad=True)
    wo = ss.Tensor(rng.normal(size=(16, 2)), requires_grad=True)

    def f():
        return ss.tensor_sum(ss.sigmoid(mlp2(x, wh, wo)))

    assert grad_check(f, [x, wh, wo], rng=rng) < 1e-6
