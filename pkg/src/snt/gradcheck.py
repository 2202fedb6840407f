"""Central finite-difference verification of analytic gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def grad_check(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-3,
               samples: int = 12, seed: int = 0) -> float:
    """Max over sampled coordinates of |analytic - numeric| / max(1, |analytic|).

    ``loss_fn`` must rebuild the graph on every call and be deterministic
    (dropout in eval mode). Tensors should hold float64 data.
    """
    rng = np.random.default_rng(seed)
    for p in params:
        p.grad = None
    loss_fn().backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        n = flat.size
        picks = np.arange(n) if n <= samples else rng.choice(n, size=samples, replace=False)
        for i in picks:
            orig = flat[i]
            flat[i] = orig + eps
            fp = loss_fn().item()
            flat[i] = orig - eps
            fm = loss_fn().item()
            flat[i] = orig
            num = (fp - fm) / (2 * eps)
            a = ga.reshape(-1)[i]
            worst = max(worst, abs(a - num) / max(1.0, abs(a)))
    for p in params:
        p.grad = None
    return worst


# -- suite ------------------------------------------------------------------------------

import contextlib
import time
from dataclasses import dataclass
from typing import Iterator, Optional

from . import ops
from .tensor import Parameter, concat, linear, log, matmul, mean, mul, precision, relu, sigmoid, take_channels, total

PASS_TOLERANCE = 1e-3


@dataclass
class CheckResult:
    name: str
    error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error) and self.error < PASS_TOLERANCE)


@contextlib.contextmanager
def corrupted_backward(op: str, factor: float = 1.5) -> Iterator[None]:
    """Test hook: scale the backward of every node with ``op`` by ``factor``."""
    original = Tensor._make.__func__

    def make(cls, data, parents, backward, name):
        if name == op:
            inner = backward
            backward = lambda g: tuple(None if x is None else x * factor for x in inner(g))  # noqa: E731
        return original(cls, data, parents, backward, name)

    Tensor._make = classmethod(make)
    try:
        yield
    finally:
        Tensor._make = classmethod(original)


def _p(rng, *shape, name="p", positive=False):
    v = rng.normal(size=shape)
    return Parameter(name, np.abs(v) + 0.5 if positive else v)


def _project(out: Tensor, seed: int = 99) -> Tensor:
    r = np.random.default_rng(seed).normal(size=out.shape)
    return total(mul(out, Tensor(r)))


def _case(build):
    """Wrap ``build(rng) -> (loss_fn, params)`` into a named check."""
    def run(seed: int = 0, samples: int = 8) -> float:
        rng = np.random.default_rng(seed)
        loss_fn, params = build(rng)
        return grad_check(loss_fn, params, eps=1e-5, samples=samples, seed=seed)
    return run


def _unary(fn, shape=(2, 3, 4, 5), positive=False):
    def build(rng):
        x = _p(rng, *shape, positive=positive)
        return (lambda: _project(fn(x))), [x]
    return build


def _conv(stride=1, padding=1, dilation=1, k=3, bias=True):
    def build(rng):
        x, w = _p(rng, 2, 3, 7, 6), _p(rng, 4, 3, k, k)
        b = _p(rng, 4) if bias else None
        ps = [x, w] + ([b] if bias else [])
        return (lambda: _project(ops.conv2d(x, w, b, stride=stride, padding=padding, dilation=dilation))), ps
    return build


def _dconv(rng):
    x, w, b = _p(rng, 2, 3, 6, 5), _p(rng, 4, 3, 3, 3), _p(rng, 4)
    off = Parameter("off", rng.uniform(-1.5, 1.5, size=(2, 18, 6, 5)) + 0.13)
    mod = Parameter("mod", rng.uniform(0.1, 1.0, size=(2, 9, 6, 5)))
    return (lambda: _project(ops.deformable_conv2d(x, w, b, off, mod))), [x, w, b, off, mod]


def _bn(train):
    def build(rng):
        x, g, b = _p(rng, 3, 4, 3, 3), _p(rng, 4), _p(rng, 4)
        rm, rv = rng.normal(size=4), rng.uniform(0.5, 2.0, size=4)

        def loss():
            return _project(ops.batch_norm2d(x, g, b, rm.copy(), rv.copy(), train))
        return loss, [x, g, b]
    return build


def _dropout(rng):
    x = _p(rng, 2, 3, 4, 4)
    return (lambda: _project(ops.dropout(x, 0.5, True, np.random.default_rng(5)))), [x]


def _se(rng):
    x = _p(rng, 2, 8, 4, 4)
    ps = [_p(rng, 2, 8), _p(rng, 2), _p(rng, 8, 2), _p(rng, 8)]
    return (lambda: _project(ops.se_block(x, *ps))), [x] + ps


def _aspp(rng):
    x = _p(rng, 1, 4, 8, 8)
    branches = [(_p(rng, 2, 4, 1, 1), _p(rng, 2))] + [(_p(rng, 2, 4, 3, 3), _p(rng, 2)) for _ in range(3)]
    proj = (_p(rng, 5, 8, 1, 1), _p(rng, 5))
    ps = [x] + [t for pair in branches for t in pair] + list(proj)
    return (lambda: _project(ops.aspp(x, branches, proj, (1, 2, 3, 6)))), ps


def _ce(rng):
    x = _p(rng, 2, 5, 4, 4)
    t = rng.integers(0, 5, size=(2, 4, 4))
    t[0, 0, :2] = ops.IGNORE_INDEX
    return (lambda: ops.cross_entropy_spatial(x, t)), [x]


def _nll(rng):
    x = _p(rng, 2, 4, 3, 3)
    t = rng.integers(0, 4, size=(2, 3, 3))
    return (lambda: ops.nll_probs(ops.softmax_channels(x), t)), [x]


def _binary(fn, sa, sb):
    def build(rng):
        a, b = _p(rng, *sa), _p(rng, *sb)
        return (lambda: _project(fn(a, b))), [a, b]
    return build


def _block(kind):
    from . import blocks

    def build(rng):
        if kind == "residual":
            blk = blocks.ResidualBlock("r", 3, 4, 2, 1, rng)
            x = _p(rng, 3, 3, 8, 8)
            fn = lambda: _project(blk(x, True))  # noqa: E731
        elif kind == "routing":
            blk = blocks.RoutingBlock("n", 8, 3, rng)
            blk.mask_conv.weight.data = rng.normal(size=blk.mask_conv.weight.shape)
            x = _p(rng, 2, 8, 4, 4)
            fn = lambda: _project(concat([blk(x, True, np.random.default_rng(3)).mask] +  # noqa: E731
                                         blk(x, True, np.random.default_rng(3)).guided, axis=1))
        elif kind == "aggregation":
            blk = blocks.AggregationBlock("l", 8, 4, rng, branch_width=2)
            x, skip = _p(rng, 1, 8, 4, 4), _p(rng, 1, 4, 8, 8)
            fn = lambda: _project(blk(x, skip))  # noqa: E731
            return fn, [x, skip] + list(blk.params.values())
        else:
            blk = blocks.PredictionBlock("pred", 4, 8, 3, rng)
            for name in ("off1", "off2"):
                conv = getattr(blk, name)
                conv.weight.data = rng.normal(scale=0.3, size=conv.weight.shape)
            x = _p(rng, 3, 4, 5, 5)
            fn = lambda: _project(blk(x, True, np.random.default_rng(3)))  # noqa: E731
        return fn, [x] + list(blk.params.values())
    return build


def _model(rng):
    from .hierarchy import load_hierarchy
    from .model import ModelConfig, build_model
    spec = load_hierarchy("toy7")
    m = build_model(spec, ModelConfig(base_width=2, level_width=4, input_size=(16, 16)), rng)
    for name, p in m.params.items():
        if "mask_conv" in name or "offset" in name:
            p.data = rng.normal(scale=0.2, size=p.shape)
    x = rng.normal(size=(2, 3, 16, 16))
    labels = rng.integers(0, 7, size=(2, 16, 16))

    def loss():
        return m.total_loss(m(x, np.random.default_rng(4)), labels).total
    names = sorted(m.params)
    pick = [names[i] for i in np.random.default_rng(1).choice(len(names), size=10, replace=False)]
    return loss, [m.params[n] for n in pick]


CASES = {
    "add": _binary(lambda a, b: a + b, (2, 3, 4), (3, 1)),
    "mul": _binary(mul, (2, 3, 4), (1, 3, 4)),
    "matmul": _binary(matmul, (3, 4), (4, 5)),
    "linear": _binary(lambda a, b: linear(a, b), (3, 4), (5, 4)),
    "relu": _unary(relu),
    "sigmoid": _unary(sigmoid),
    "log": _unary(lambda x: log(x, floor=1e-7), positive=True),
    "mean": _unary(lambda x: mean(x, axis=(2, 3))),
    "concat": _binary(lambda a, b: concat([a, b], axis=1), (2, 3, 2, 2), (2, 1, 2, 2)),
    "take_channels": _unary(lambda x: take_channels(x, [2, 0, 2])),
    "softmax": _unary(ops.softmax_channels),
    "upsample": _unary(lambda x: ops.upsample_bilinear(x, 9, 7)),
    "conv2d": _conv(),
    "conv2d_1x1": _conv(padding=0, k=1),
    "conv2d_stride2": _conv(stride=2),
    "conv2d_dilated": _conv(padding=2, dilation=2, bias=False),
    "conv2d_atrous6": _conv(padding=6, dilation=6),
    "deformable_conv2d": _dconv,
    "batch_norm_train": _bn(True),
    "batch_norm_eval": _bn(False),
    "dropout": _dropout,
    "se_block": _se,
    "aspp": _aspp,
    "cross_entropy": _ce,
    "nll_probs": _nll,
    "block/residual": _block("residual"),
    "block/routing": _block("routing"),
    "block/aggregation": _block("aggregation"),
    "block/prediction": _block("prediction"),
    "model/toy7": _model,
}


def run_suite(names: Optional[Sequence[str]] = None, seed: int = 0) -> list:
    """Run the named checks (all by default) in float64."""
    names = list(CASES) if names is None or list(names) == ["all"] else list(names)
    unknown = [n for n in names if n not in CASES]
    if unknown:
        raise KeyError(f"unknown gradcheck cases {unknown}; available: {sorted(CASES)}")
    results = []
    with precision(np.float64):
        for n in names:
            t0 = time.perf_counter()
            err = _case(CASES[n])(seed)
            results.append(CheckResult(n, err, time.perf_counter() - t0))
    return results
