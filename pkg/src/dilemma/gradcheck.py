"""Central finite-difference verification of autodiff gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import ops
from .tensor import Tensor, no_grad, precision


def finite_diff_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5) -> float:
    """Worst error of the autodiff gradient of ``f`` at ``x``.

    Each coordinate is compared with ``(f(x + h e) - f(x - h e)) / 2h``; the
    largest absolute discrepancy is divided by the largest gradient magnitude
    (either route), so the result is scale-free. Runs in float64.
    """
    if h <= 0:
        raise ValueError("h must be > 0")
    with precision(np.float64):
        x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
        leaf = Tensor(x0.copy(), requires_grad=True)
        out = f(leaf)
        out.backward()
        analytic = np.zeros_like(x0) if leaf.grad is None else leaf.grad

        numeric = np.empty_like(x0)
        flat = x0.reshape(-1)
        num_flat = numeric.reshape(-1)
        with no_grad():
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = f(Tensor(x0.copy())).item()
                flat[i] = orig - h
                fm = f(Tensor(x0.copy())).item()
                flat[i] = orig
                num_flat[i] = (fp - fm) / (2 * h)

    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(analytic - numeric).max() / scale)


def _primitive_cases(rng: np.random.Generator) -> dict[str, tuple[Callable[[Tensor], Tensor], np.ndarray]]:
    b = Tensor(rng.standard_normal((7, 3)))
    gamma = Tensor(rng.standard_normal(8))
    beta = Tensor(rng.standard_normal(8))
    w = rng.standard_normal((4, 8))
    targets = rng.integers(0, 6, size=4)
    labels = rng.integers(0, 2, size=6).astype(np.float64)
    return {
        "matmul": (lambda a: ops.sum(ops.matmul(a, b) * ops.matmul(a, b)), rng.standard_normal((5, 7))),
        "row_softmax": (lambda a: ops.sum(ops.row_softmax(a, 0.5) * Tensor(w)), rng.standard_normal((4, 8))),
        "log_softmax": (lambda a: ops.sum(ops.log_softmax(a, 0.7) * Tensor(w)), rng.standard_normal((4, 8))),
        "layer_norm": (lambda a: ops.sum(ops.layer_norm(a, gamma, beta, 1e-6) * Tensor(w)), rng.standard_normal((4, 8))),
        "gelu": (lambda a: ops.sum(ops.gelu(a) * ops.gelu(a)), rng.standard_normal(10) * 2),
        "gelu_erf": (lambda a: ops.sum(ops.gelu(a, approximate=False) * Tensor(w[0])), rng.standard_normal(8) * 2),
        "sigmoid": (lambda a: ops.sum(ops.sigmoid(a) * Tensor(w[0])), rng.standard_normal(8) * 3),
        "l2_normalize": (lambda a: ops.sum(ops.l2_normalize(a) * Tensor(w)), rng.standard_normal((4, 8))),
        "bce_with_logits": (lambda a: ops.bce_with_logits(a, labels), rng.standard_normal(6) * 2),
        "cross_entropy": (lambda a: ops.cross_entropy(a, targets), rng.standard_normal((4, 6))),
        "batch_norm": (lambda a: ops.sum(ops.batch_norm(a, gamma, beta) * Tensor(w)), rng.standard_normal((4, 8))),
        "batch_norm_plain": (lambda a: ops.sum(ops.batch_norm(a) * Tensor(w) * Tensor(w)), rng.standard_normal((4, 8))),
        "attention_pipeline": (
            lambda a: ops.sum(ops.matmul(ops.softmax(ops.matmul(a, ops.transpose(a, (0, 2, 1)))), a) * Tensor(w[:3, :3])),
            rng.standard_normal((2, 3, 3)),
        ),
    }


def run_gradient_suite(seed: int = 0, h: float = 1e-5, include_union: bool = True) -> dict[str, float]:
    """Finite-difference check of every primitive plus the full union loss on a toy model."""
    from .train import toy_union_gradient_errors

    rng = np.random.default_rng(seed)
    with precision(np.float64):
        results = {name: finite_diff_check(f, x, h) for name, (f, x) in _primitive_cases(rng).items()}
        if include_union:
            for name, err in toy_union_gradient_errors(seed=seed, h=h).items():
                results[f"union/{name}"] = err
    return results
