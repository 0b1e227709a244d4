"""Finite-difference verification of the tape's gradients, per cell family.

For each random instance we build a model, run a squared-error loss against
a fixed random target, and compare every parameter and input gradient from
the reverse sweep against central differences.  The two routes share only
the forward computation, so agreement is evidence the backward rules are
right, not that the same code was run twice.
"""

from __future__ import annotations

import dataclasses
import time

import numpy as np

from .cells import CellConfig, Hallucinator
from .tensor import Tape, Tensor, add, finite_diff_grad, mul, relative_error, sub, tsum


@dataclasses.dataclass
class GradCheckResult:
    family: str
    layers: int
    instances: int
    max_rel_err: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= 1e-5


def _loss_value(model: Hallucinator, xs: list[Tensor], targets: list[np.ndarray]) -> float:
    ys = model.forward_steps(xs)
    total = 0.0
    for y, z in zip(ys, targets):
        total += float(np.sum((y.data - z) ** 2))
    return total


def check_instance(model: Hallucinator, rng: np.random.Generator,
                   t_len: int, h: float = 1e-6) -> float:
    """Max relative error across all parameter and input gradients for one
    random input/target draw."""
    c = model.config
    xs = [Tensor(rng.normal(size=(1, c.d_x)), requires_grad=True) for _ in range(t_len)]
    targets = [rng.normal(size=(1, c.output_dim)) for _ in range(t_len)]
    with Tape() as tape:
        ys = model.forward_steps(xs)
        loss = None
        for y, z in zip(ys, targets):
            diff = sub(y, Tensor(z))
            term = tsum(mul(diff, diff))
            loss = term if loss is None else add(loss, term)
    tape.backward(loss)
    worst = 0.0
    for leaf in model.tensors() + xs:
        def f(candidate: Tensor, _leaf=leaf) -> float:
            original = _leaf.data
            _leaf.data = candidate.data
            try:
                return _loss_value(model, xs, targets)
            finally:
                _leaf.data = original
        numeric = finite_diff_grad(f, leaf, h=h)
        computed = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        worst = max(worst, relative_error(computed, numeric))
    return worst


def check_family(family: str, layers: int, instances: int = 10, d_x: int = 5,
                 d_s: int = 4, t_len: int = 6, kernel: int = 3,
                 seed: int = 20240, h: float = 1e-6) -> GradCheckResult:
    config = CellConfig(family=family, d_x=d_x, d_s=d_s, layers=layers, kernel=kernel)
    rng = np.random.default_rng(seed)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(instances):
        model = Hallucinator.build(config, rng)
        worst = max(worst, check_instance(model, rng, t_len, h=h))
    return GradCheckResult(family=family, layers=layers, instances=instances,
                           max_rel_err=worst, seconds=time.perf_counter() - start)
