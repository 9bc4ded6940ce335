"""Momentum SGD with coupled weight decay, and a finite-difference checker.

The update rule per parameter w with gradient g:

    g' = g + weight_decay * w
    v  = momentum * v + g'
    w  = w - lr * v

Learning rate is per parameter group (the 2D and 3D networks train at
different rates); momentum and weight decay are shared.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ContractViolation, NumericalFailure
from .tensor import Tensor, no_grad


class MomentumSgd:
    """Stateful momentum SGD.  ``groups`` maps a learning rate to its params."""

    def __init__(self, groups: Sequence[tuple[float, Sequence[Tensor]]],
                 momentum: float = 0.9, weight_decay: float = 5e-4):
        if not 0.0 <= momentum < 1.0:
            raise ContractViolation(f"momentum must be in [0, 1), got {momentum}")
        if weight_decay < 0.0:
            raise ContractViolation(f"weight_decay must be >= 0, got {weight_decay}")
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.groups = [(float(lr), list(params)) for lr, params in groups]
        self._velocity: dict[int, np.ndarray] = {}

    def parameters(self):
        for _, params in self.groups:
            yield from params

    def step(self) -> None:
        """Apply one update to every parameter, then clear all grads."""
        for lr, params in self.groups:
            for p in params:
                if p.grad is None:
                    raise ContractViolation(
                        "sgd step on a parameter with no populated gradient")
                g = p.grad + self.weight_decay * p.data
                v = self._velocity.get(id(p))
                if v is None:
                    v = np.zeros_like(p.data)
                    self._velocity[id(p)] = v
                v *= self.momentum
                v += g
                p.data -= lr * v
                p.grad = None


def sgd_step(params: Sequence[Tensor], state: MomentumSgd) -> None:
    """Update the given params with the optimizer's state (they must belong
    to it) and clear their grads."""
    owned = {id(p) for p in state.parameters()}
    for p in params:
        if id(p) not in owned:
            raise ContractViolation("sgd_step on a parameter unknown to the optimizer")
    state.step()


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor],
               epsilon: float | Sequence[float] = 1e-5, min_samples: int = 50,
               rng: np.random.Generator | None = None,
               skip_kinks: bool = True) -> float:
    """Compare the tape gradient of the scalar ``f()`` against central finite
    differences on sampled parameter coordinates.

    Returns max over sampled coordinates of
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.
    Coordinates where the two one-sided differences disagree strongly
    (an activation kink within epsilon of the evaluation point) are skipped
    when ``skip_kinks`` is set.

    ``epsilon`` may be a sequence of step sizes; a coordinate then scores its
    best agreement over the scales.  No single step resolves both very small
    gradients (which need a large step to beat evaluation roundoff) and
    kink-dense regions (which need a small one); a wrong analytic gradient
    disagrees at every scale, so the minimum keeps its bug-catching power.
    """
    epsilons = (tuple(float(e) for e in epsilon)
                if isinstance(epsilon, (tuple, list)) else (float(epsilon),))
    if any(e <= 0 for e in epsilons) or not epsilons:
        raise ContractViolation(f"epsilon values must be > 0, got {epsilon}")
    if rng is None:
        rng = np.random.default_rng(0)

    for p in params:
        p.grad = None
    out = f()
    if out.size != 1:
        raise ContractViolation("grad_check target must be scalar-valued")
    if not np.isfinite(out.data).all():
        raise NumericalFailure("grad_check: non-finite forward value")
    out.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy()
                for p in params]
    for p in params:
        p.grad = None

    coords = [(i, j) for i, p in enumerate(params) for j in range(p.data.size)]
    if len(coords) > min_samples:
        picked = rng.choice(len(coords), size=min_samples, replace=False)
        coords = [coords[k] for k in sorted(picked)]

    with no_grad():
        f0 = float(f().data.reshape(()))
        max_err = 0.0
        for i, j in coords:
            flat = params[i].data.reshape(-1)
            orig = flat[j]
            a = float(analytic[i].reshape(-1)[j])
            best = None
            for eps in epsilons:
                flat[j] = orig + eps
                f_plus = float(f().data.reshape(()))
                flat[j] = orig - eps
                f_minus = float(f().data.reshape(()))
                flat[j] = orig
                if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                    raise NumericalFailure(
                        f"grad_check: non-finite perturbed value at param {i}, "
                        f"coordinate {j}")
                d_plus = (f_plus - f0) / eps
                d_minus = (f0 - f_minus) / eps
                candidates = [(f_plus - f_minus) / (2.0 * eps)]
                if skip_kinks and abs(d_plus - d_minus) > 1e-4 * max(
                        abs(d_plus), abs(d_minus), 1e-8):
                    # A kink inside the probed interval: the central estimate
                    # averages the two regimes, but the tape legitimately
                    # returns a one-sided derivative, so match either side.
                    candidates += [d_plus, d_minus]
                err = min(abs(a - n) / max(abs(a), abs(n), 1e-8)
                          for n in candidates)
                best = err if best is None else min(best, err)
            if best is not None:
                max_err = max(max_err, best)
    return max_err
