import numpy as np
import pytest

import semscene as ss
from semscene.errors import ContractViolation, NumericalFailure
from semscene.optim import MomentumSgd, grad_check, sgd_step


def test_single_step_hand_values():
    # v1 = 0.9*0 + (0.1 + 5e-4*1.0) = 0.1005 ; w1 = 1.0 - 0.01*0.1005
    w = ss.Tensor(np.array([1.0]), requires_grad=True)
    w.grad = np.array([0.1])
    opt = MomentumSgd([(0.01, [w])], momentum=0.9, weight_decay=5e-4)
    opt.step()
    assert w.data[0] == pytest.approx(0.998995, abs=1e-15)
    assert opt._velocity[id(w)][0] == pytest.approx(0.1005, abs=1e-15)
    assert w.grad is None


def test_zero_momentum_zero_decay_is_plain_gd(rng):
    w = ss.Tensor(rng.normal(size=4), requires_grad=True)
    start = w.data.copy()
    g = rng.normal(size=4)
    w.grad = g.copy()
    opt = MomentumSgd([(0.5, [w])], momentum=0.0, weight_decay=0.0)
    opt.step()
    assert np.allclose(w.data, start - 0.5 * g)


def test_zero_grad_zero_decay_leaves_weights():
    w = ss.Tensor(np.array([3.0]), requires_grad=True)
    opt = MomentumSgd([(0.1, [w])], momentum=0.9, weight_decay=0.0)
    for _ in range(2):
        w.grad = np.array([0.0])
        opt.step()
    assert w.data[0] == 3.0
    assert opt._velocity[id(w)][0] == 0.0


def test_missing_grad_is_contract_violation():
    w = ss.Tensor(np.array([1.0]), requires_grad=True)
    opt = MomentumSgd([(0.1, [w])])
    with pytest.raises(ContractViolation):
        opt.step()


def test_sgd_step_rejects_foreign_params():
    w = ss.Tensor(np.array([1.0]), requires_grad=True)
    other = ss.Tensor(np.array([1.0]), requires_grad=True)
    opt = MomentumSgd([(0.1, [w])])
    with pytest.raises(ContractViolation):
        sgd_step([other], opt)


def test_invalid_hyperparameters():
    w = ss.Tensor(np.array([1.0]), requires_grad=True)
    with pytest.raises(ContractViolation):
        MomentumSgd([(0.1, [w])], momentum=1.0)
    with pytest.raises(ContractViolation):
        MomentumSgd([(0.1, [w])], weight_decay=-1e-3)


def test_quadratic_objective_decreases_monotonically():
    # 0.5 * w^2 with the default hyperparameters at lr 0.01.  Heavy-ball
    # iterates oscillate through zero around step ~23, so monotonicity is
    # checked on the horizon before the first crossing.
    w = ss.Tensor(np.array([1.0]), requires_grad=True)
    opt = MomentumSgd([(0.01, [w])], momentum=0.9, weight_decay=5e-4)
    values = []
    for _ in range(20):
        values.append(0.5 * float(w.data[0]) ** 2)
        w.grad = w.data.copy()  # d/dw 0.5 w^2 = w
        opt.step()
    values.append(0.5 * float(w.data[0]) ** 2)
    diffs = np.diff(values)
    assert np.all(diffs[1:] < 0.0)


def test_grad_check_quadratic(rng):
    x = ss.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    err = grad_check(lambda: ss.tensor_sum(x * x), [x], rng=rng)
    assert err < 1e-7


def test_grad_check_constant_function(rng):
    x = ss.Tensor(rng.normal(size=4), requires_grad=True)
    c = ss.Tensor(np.array(2.0))
    err = grad_check(lambda: ss.tensor_sum(x * 0.0) + c, [x], rng=rng)
    assert err == 0.0


def test_grad_check_through_conv_relu_chain(rng):
    from semscene.nnops import ConvSpec, conv
    x = ss.Tensor(rng.normal(size=(2, 6, 6)), requires_grad=True)
    w = ss.Tensor(rng.normal(size=(2, 2, 3, 3)) * 0.5, requires_grad=True)
    spec = ConvSpec(2, 2, (3, 3), padding=1)

    def f():
        return ss.tensor_sum(ss.relu(conv(x, w, None, spec)))

    assert grad_check(f, [x, w], rng=rng) < 1e-4


def test_grad_check_flags_wrong_gradient(rng):
    # Negative control: a deliberately broken backward rule must be caught.
    from semscene.tensor import make_op

    def bad_square(t):
        def backward(g):
            t.accumulate_grad(g * 3.0 * t.data)  # wrong: should be 2x
        return make_op(t.data ** 2, (t,), backward)

    x = ss.Tensor(rng.normal(size=4) + 2.0, requires_grad=True)
    err = grad_check(lambda: ss.tensor_sum(bad_square(x)), [x], rng=rng)
    assert err > 0.1


def test_grad_check_reports_nonfinite():
    x = ss.Tensor(np.array([1e308]), requires_grad=True)
    with pytest.raises(NumericalFailure):
        grad_check(lambda: ss.tensor_sum(x * x * x), [x])


def test_grad_check_restores_parameters(rng):
    x = ss.Tensor(rng.normal(size=8), requires_grad=True)
    before = x.data.copy()
    grad_check(lambda: ss.tensor_sum(x * x), [x], rng=rng)
    assert np.array_equal(x.data, before)
