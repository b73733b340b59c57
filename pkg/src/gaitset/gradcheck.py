"""Finite-difference verification of every differentiable operation.

Each case draws a random instance of one operation, reduces its output to a
scalar with random weights, and compares reverse-mode gradients for all
inputs against central differences in double precision.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import network, setpool
from . import tensor as T
from .metric import batch_all_triplet
from .network import GaitSetModel, NetworkConfig
from .tensor import Tensor, parameters_grad_check

OP_TOLERANCE = 1e-4
GRAPH_TOLERANCE = 1e-3


def _leaf(arr) -> Tensor:
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=True)


def _away_from_zero(rng, shape, low=0.1):
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(low, 1.0, size=shape)


def _shape(rng, ndim, low=1, high=4):
    return tuple(int(v) for v in rng.integers(low, high + 1, size=ndim))


def _weighted(out: Tensor, rng) -> Callable[[Tensor], Tensor]:
    weights = Tensor(rng.standard_normal(out.shape))
    return lambda y: (y * weights).sum()


def _case(fn, leaves, rng):
    """Scalar closure ``w . fn(*leaves)`` plus the leaves it reads."""
    reduce = _weighted(fn(*leaves), rng)
    return (lambda: reduce(fn(*leaves))), leaves


# Each builder returns (loss closure, leaves) for one random instance.
def _binary(op):
    def build(rng):
        shape = _shape(rng, 3)
        b_shape = tuple(1 if rng.random() < 0.3 else s for s in shape)  # exercise broadcasting
        a = _leaf(rng.standard_normal(shape))
        b = _away_from_zero(rng, b_shape, 0.5) if op is T.div else rng.standard_normal(b_shape)
        return _case(op, [a, _leaf(b)], rng)

    return build


def _unary(op, sample=None):
    def build(rng):
        shape = _shape(rng, 3)
        x = sample(rng, shape) if sample else rng.standard_normal(shape)
        return _case(op, [_leaf(x)], rng)

    return build


def _reduce(op, needs_axis=False):
    def build(rng):
        shape = _shape(rng, 3, 2, 4)
        axis = int(rng.integers(3)) if needs_axis or rng.random() < 0.7 else None
        keep = bool(rng.random() < 0.5) and not needs_axis
        if needs_axis:
            return _case(lambda x: op(x, axis=axis), [_leaf(rng.standard_normal(shape))], rng)
        return _case(lambda x: op(x, axis=axis, keepdims=keep), [_leaf(rng.standard_normal(shape))], rng)

    return build


def _reshape(rng):
    shape = _shape(rng, 3)
    return _case(lambda x: T.reshape(x, (-1,)), [_leaf(rng.standard_normal(shape))], rng)


def _transpose(rng):
    axes = tuple(int(a) for a in rng.permutation(3))
    return _case(lambda x: T.transpose(x, axes), [_leaf(rng.standard_normal(_shape(rng, 3)))], rng)


def _broadcast(rng):
    shape = _shape(rng, 2)
    return _case(lambda x: T.broadcast_to(x, (3, *shape)), [_leaf(rng.standard_normal((1, *shape)))], rng)


def _getitem(rng):
    shape = _shape(rng, 2, 3, 5)
    if rng.random() < 0.5:
        index = (slice(1, None), slice(None, None, 2))
    else:
        index = (int(rng.integers(shape[0])), slice(None, -1))
    return _case(lambda x: T.getitem(x, index), [_leaf(rng.standard_normal(shape))], rng)


def _concat(rng):
    axis = int(rng.integers(2))
    shapes = [list(_shape(rng, 2)) for _ in range(3)]
    for s in shapes[1:]:
        s[1 - axis] = shapes[0][1 - axis]
    return _case(lambda *xs: T.concat(xs, axis=axis), [_leaf(rng.standard_normal(s)) for s in shapes], rng)


def _stack(rng):
    shape = _shape(rng, 2)
    axis = int(rng.integers(3))
    return _case(lambda *xs: T.stack(xs, axis=axis), [_leaf(rng.standard_normal(shape)) for _ in range(3)], rng)


def _conv2d(rng):
    n, c, o = (int(v) for v in rng.integers(1, 3, size=3))
    k = int(rng.choice([1, 3, 5]))
    h, w = _shape(rng, 2, 3, 5)
    x = _leaf(rng.standard_normal((n, c, h, w)))
    kernel = _leaf(rng.standard_normal((o, c, k, k)))
    return _case(T.conv2d, [x, kernel], rng)


def _max_pool(rng):
    n, c = _shape(rng, 2, 1, 2)
    h, w = (2 * int(v) for v in rng.integers(1, 4, size=2))
    return _case(T.max_pool2d, [_leaf(rng.standard_normal((n, c, h, w)))], rng)


def _affine(rng):
    d_in, d_out = _shape(rng, 2, 1, 4)
    if rng.random() < 0.5:
        x = _leaf(rng.standard_normal((*_shape(rng, 2), d_in)))
        weight = _leaf(rng.standard_normal((d_in, d_out)))
    else:
        g = int(rng.integers(1, 4))
        x = _leaf(rng.standard_normal((int(rng.integers(1, 3)), g, d_in)))
        weight = _leaf(rng.standard_normal((g, d_in, d_out)))
    return _case(T.affine, [x, weight], rng)


def _set_pool(strategy):
    def build(rng):
        n = int(rng.integers(1, 6))
        c = int(rng.integers(1, 4))
        h, w = _shape(rng, 2, 1, 3)
        x = _leaf(rng.standard_normal((n, c, h, w)))
        params = setpool.init_params(strategy, c, rng, dtype=np.float64)
        params = {k: _leaf(v.data) for k, v in params.items()}
        names = sorted(params)
        return _case(
            lambda x, *ws: setpool.set_pool(x, strategy, dict(zip(names, ws))), [x, *(params[k] for k in names)], rng
        )

    return build


def _hpm(rng):
    scales = int(rng.integers(1, 4))
    h = 2 ** (scales - 1) * int(rng.integers(1, 3))
    c, d = _shape(rng, 2, 1, 3)
    feature = _leaf(rng.standard_normal((c, h, int(rng.integers(1, 4)))))
    independent = rng.random() < 0.5
    weight = _leaf(rng.standard_normal(((2**scales - 1), c, d) if independent else (c, d)))
    return _case(lambda f, wt: network.hpm_forward(f, scales, wt), [feature, weight], rng)


def _triplet(rng):
    p, k = (int(v) for v in rng.integers(2, 4, size=2))
    strips, d = _shape(rng, 2, 1, 3)
    labels = np.repeat(np.arange(p), k)
    emb = _leaf(rng.standard_normal((p * k, strips, d)))
    return (lambda: batch_all_triplet(emb, labels, margin=0.5).total), [emb]


OPERATIONS: dict[str, Callable] = {
    "add": _binary(T.add),
    "sub": _binary(T.sub),
    "mul": _binary(T.mul),
    "div": _binary(T.div),
    "leaky_relu": _unary(lambda x: T.leaky_relu(x, 0.1), _away_from_zero),
    "relu": _unary(T.relu, _away_from_zero),
    "sqrt": _unary(T.sqrt, lambda rng, s: rng.uniform(0.2, 2.0, size=s)),
    "reshape": _reshape,
    "transpose": _transpose,
    "broadcast_to": _broadcast,
    "getitem": _getitem,
    "concat": _concat,
    "stack": _stack,
    "reduce_sum": _reduce(T.reduce_sum),
    "reduce_mean": _reduce(T.reduce_mean),
    "reduce_max": _reduce(T.reduce_max),
    "reduce_median": _reduce(T.reduce_median, needs_axis=True),
    "conv2d": _conv2d,
    "max_pool2d": _max_pool,
    "affine": _affine,
    **{f"set_pool.{s.value}": _set_pool(s) for s in setpool.SpStrategy},
    "hpm": _hpm,
    "batch_all_triplet": _triplet,
}


@dataclass
class CheckResult:
    name: str
    instances: int
    max_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def line(self) -> str:
        status = "ok" if self.passed else "FAIL"
        return f"{self.name:<24} instances={self.instances:<3} max_rel_error={self.max_error:.3e} tol={self.tolerance:g} {status}"


def check_operation(name: str, instances: int = 50, seed: int = 0, step: float = 1e-6) -> CheckResult:
    build = OPERATIONS[name]
    worst = 0.0
    for i in range(instances):
        rng = np.random.default_rng([seed, i, sum(name.encode())])
        loss, leaves = build(rng)
        worst = max(worst, parameters_grad_check(loss, leaves, step))
    return CheckResult(name, instances, worst, OP_TOLERANCE)


def check_full_graph(strategy="max", instances: int = 1, seed: int = 0, **overrides) -> CheckResult:
    """Gradient of a weighted embedding sum w.r.t. every parameter of the tiny network."""
    worst = 0.0
    for i in range(instances):
        rng = np.random.default_rng([seed, i, 0x6A])
        cfg = NetworkConfig.tiny(sp_strategy=strategy, **overrides)
        model = GaitSetModel.initialize(cfg, seed=int(rng.integers(1 << 31))).astype(np.float64)
        sets = [rng.random((int(rng.integers(1, 4)), cfg.input_height, cfg.input_width)) for _ in range(2)]
        weights = Tensor(rng.standard_normal((2, cfg.rows, cfg.embed_dim)))
        worst = max(worst, parameters_grad_check(lambda: (model.forward(sets) * weights).sum(), model.params.values()))
    return CheckResult(f"graph.{setpool.SpStrategy.parse(strategy).value}", instances, worst, GRAPH_TOLERANCE)


def run_suite(instances: int = 50, seed: int = 0, graph_strategies=None, report=None) -> list[CheckResult]:
    """Check every operation and the full tiny graph; ``report`` receives each result as it finishes."""
    strategies = graph_strategies if graph_strategies is not None else [s.value for s in setpool.SpStrategy]
    results = []
    for name in OPERATIONS:
        results.append(check_operation(name, instances, seed))
        if report:
            report(results[-1])
    for strategy in strategies:
        results.append(check_full_graph(strategy, seed=seed))
        if report:
            report(results[-1])
    return results
