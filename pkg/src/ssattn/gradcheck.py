"""Finite-difference verification of every differentiable primitive and of one IRM block."""

from __future__ import annotations

import time
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from . import tensor as T
from .attention import AttentionBlockConfig, IRMBlock
from .tensor import Tensor

TOLERANCE = 1e-4
EPSILON = 1e-5


def _away_from_zero(rng, shape, margin=0.1):
    """Normal draws pushed off +-margin so kinks (abs, relu) are never straddled."""
    x = rng.normal(size=shape)
    return np.where(x >= 0, x + margin, x - margin)


def _weighted(f: Callable[[Tensor], Tensor], out_shape, rng) -> Callable[[Tensor], Tensor]:
    """Contract an op's output with fixed random weights to get a scalar."""
    w = rng.normal(size=out_shape)
    return lambda t: T.sum(f(t) * w)


def unary_check(op: Callable[[Tensor], Tensor], shape=(3, 4), positive=False, kinked=False):
    def run(rng):
        if positive:
            x = rng.uniform(0.5, 2.0, size=shape)
        elif kinked:
            x = _away_from_zero(rng, shape)
        else:
            x = rng.normal(size=shape)
        out_shape = op(Tensor(x)).shape
        return T.finite_difference_check(_weighted(op, out_shape, rng), x, EPSILON)
    return run


def binary_check(op, shape_a=(3, 4), shape_b=(3, 4), b_positive=False):
    """Checks both operands; returns the worse error."""
    def run(rng):
        a = rng.normal(size=shape_a)
        b = rng.uniform(0.5, 2.0, size=shape_b) if b_positive else rng.normal(size=shape_b)
        out_shape = op(Tensor(a), Tensor(b)).shape
        w = rng.normal(size=out_shape)
        ea = T.finite_difference_check(lambda t: T.sum(op(t, Tensor(b)) * w), a, EPSILON)
        eb = T.finite_difference_check(lambda t: T.sum(op(Tensor(a), t) * w), b, EPSILON)
        return max(ea, eb)
    return run


def _conv(rng):
    x, w, b = rng.normal(size=(2, 3, 5, 6)), rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)
    g = rng.normal(size=(2, 4, 5, 6))
    return max(
        T.finite_difference_check(lambda t: T.sum(T.conv2d(t, w, b) * g), x, EPSILON),
        T.finite_difference_check(lambda t: T.sum(T.conv2d(x, t, b) * g), w, EPSILON),
        T.finite_difference_check(lambda t: T.sum(T.conv2d(x, w, t) * g), b, EPSILON),
    )


def _grid_sample(rng):
    x = rng.normal(size=(2, 3, 5, 6))
    # keep every coordinate off pixel boundaries, where bilinear weights have kinks
    px = rng.integers(0, 5, size=(2, 4, 7)) + rng.uniform(0.1, 0.9, size=(2, 4, 7))
    py = rng.integers(0, 4, size=(2, 4, 7)) + rng.uniform(0.1, 0.9, size=(2, 4, 7))
    c = np.stack([px / 5 * 2 - 1, py / 4 * 2 - 1], axis=-1)
    g = rng.normal(size=(2, 3, 4, 7))
    return max(
        T.finite_difference_check(lambda t: T.sum(T.grid_sample_bilinear(t, c) * g), x, EPSILON),
        T.finite_difference_check(lambda t: T.sum(T.grid_sample_bilinear(x, t) * g), c, EPSILON),
    )


def block_check(kind: str, mixer: str = "ssa"):
    """Every parameter and the input of one IRM block with randomized weights."""
    def run(rng):
        cfg = AttentionBlockConfig(window_side=2, heads=2, mixer=mixer)
        blk = IRMBlock(rng, 4, cfg, kind)
        for p in blk.parameters():
            p.data = p.data + rng.normal(0.0, 0.3, size=p.shape)
        if kind == "ssa" and mixer == "ssa":
            # identity-initialized sampling lands exactly on pixel centres; shift off them
            blk.attn.offsets.bias_head.bias.data = blk.attn.offsets.bias_head.bias.data + 0.37
        sigma = np.exp(rng.normal(size=(2, 1, 4, 6)))
        x = rng.normal(size=(2, 4, 4, 6))
        g = rng.normal(size=x.shape)

        def value() -> float:
            return float(T.sum(blk(Tensor(x), sigma) * g).data)

        worst = T.finite_difference_check(lambda t: T.sum(blk(t, sigma) * g), x, EPSILON)
        blk.zero_grad()
        T.backward(T.sum(blk(Tensor(x), sigma) * g))
        for _, p in blk.named_parameters():
            analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
            worst = max(worst, T.relative_error(analytic, T.numeric_gradient(value, p.data, epsilon=EPSILON)))
        return worst
    return run


CHECKS: dict[str, Callable[[np.random.Generator], float]] = {
    "add": binary_check(T.add, (3, 4), (4,)),
    "sub": binary_check(T.sub, (3, 1), (3, 4)),
    "mul": binary_check(T.mul, (2, 3, 4), (3, 1)),
    "div": binary_check(T.div, (3, 4), (3, 4), b_positive=True),
    "scale": unary_check(lambda t: T.scale(t, -1.7)),
    "abs": unary_check(T.absolute, kinked=True),
    "exp": unary_check(T.exp),
    "ln": unary_check(T.ln, positive=True),
    "sqrt": unary_check(T.sqrt, positive=True),
    "rsqrt": unary_check(T.rsqrt, positive=True),
    "relu": unary_check(T.relu, kinked=True),
    "gelu": unary_check(T.gelu),
    "sigmoid": unary_check(T.sigmoid),
    "sum": unary_check(lambda t: T.sum(t, axis=1, keepdims=True), (2, 3, 4)),
    "mean": unary_check(lambda t: T.mean(t, axis=(0, 2)), (2, 3, 4)),
    "reshape": unary_check(lambda t: T.reshape(t, (4, 6)), (2, 3, 4)),
    "transpose": unary_check(lambda t: T.transpose(t, (2, 0, 1)), (2, 3, 4)),
    "getitem": unary_check(lambda t: t[:, 1:, ::2], (2, 3, 4)),
    "take": unary_check(lambda t: T.take(t, np.array([0, 2, 2, 1]), axis=1), (2, 3, 4)),
    "concat": unary_check(lambda t: T.concat([t, T.scale(t, 2.0)], axis=1), (2, 3, 4)),
    "pad_reflect": unary_check(lambda t: T.pad_reflect(t, (1, 2), (0, 3)), (2, 4, 5)),
    "upsample_nearest": unary_check(lambda t: T.upsample_nearest(t, 2), (1, 2, 3, 4)),
    "avg_pool": unary_check(lambda t: T.avg_pool(t, 2), (1, 2, 4, 6)),
    "global_avgpool": unary_check(T.global_avgpool, (2, 3, 4, 5)),
    "matmul": binary_check(T.matmul, (2, 3, 4), (4, 5)),
    "softmax": unary_check(lambda t: T.softmax(t, axis=-1), (3, 5)),
    "layer_norm": unary_check(lambda t: T.layer_norm(t, axis=1), (2, 4, 3)),
    "conv2d": _conv,
    "grid_sample": _grid_sample,
    "irm_block_ssa": block_check("ssa"),
    "irm_block_lr": block_check("lr"),
}


@dataclass
class CheckResult:
    op: str
    max_rel_error: float
    seconds: float
    passed: bool


def run_suite(only: list[str] | None = None, seed: int = 0, tolerance: float = TOLERANCE,
              checks: dict | None = None) -> list[CheckResult]:
    checks = CHECKS if checks is None else checks
    names = list(checks) if not only else only
    unknown = [n for n in names if n not in checks]
    if unknown:
        raise KeyError(f"unknown ops {unknown}; choose from {sorted(checks)}")
    results = []
    for i, name in enumerate(names):
        rng = np.random.default_rng([seed, i])
        start = time.perf_counter()
        err = float(checks[name](rng))
        results.append(CheckResult(name, err, time.perf_counter() - start,
                                   bool(np.isfinite(err) and err < tolerance)))
    return results


def format_table(results: list[CheckResult]) -> str:
    width = max([len(r.op) for r in results] + [2])
    lines = [f"{'op':<{width}}  {'max_rel_error':>13}  {'seconds':>8}  result"]
    for r in results:
        lines.append(f"{r.op:<{width}}  {r.max_rel_error:13.3e}  {r.seconds:8.3f}  "
                     f"{'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
