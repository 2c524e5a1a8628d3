"""Shared verification utilities for the test suite."""
from __future__ import annotations

import numpy as np

from manidp import autograd as ag


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-3) -> float:
    """Max elementwise relative error with an absolute floor on the denominator.

    The floor keeps near-zero gradients (dead ReLU paths) from amplifying
    finite-difference noise into spurious failures.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def finite_difference_check(build_scalar, params, h: float = 1e-4) -> float:
    """Compare backward() gradients of a scalar graph against central differences.

    ``build_scalar`` re-runs the forward pass from the current parameter
    values; the numeric side only ever calls it forward, so it is independent
    of the adjoint code it verifies. Returns the worst relative error across
    all parameters.
    """
    for p in params:
        p.zero_grad()
    root = build_scalar()
    ag.backward(root)
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        numeric = ag.numeric_gradient(build_scalar, p, h=h)
        worst = max(worst, relative_error(analytic, numeric))
    return worst


def away_from_kinks(values: np.ndarray, margin: float = 5e-3) -> np.ndarray:
    """Nudge entries off the ReLU kink so central differences stay valid."""
    out = np.array(values, dtype=np.float64)
    near = np.abs(out) < margin
    out[near] += margin * np.where(out[near] >= 0, 1.0, -1.0)
    return out


def conv2d_loops(x: np.ndarray, w: np.ndarray, stride: int, padding: int) -> np.ndarray:
    """Direct six-nested-loop cross-correlation oracle."""
    b, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    oh = (h + 2 * padding - k) // stride + 1
    ow = (wd + 2 * padding - k) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((b, cout, oh, ow), dtype=np.float64)
    for bi in range(b):
        for co in range(cout):
            for y in range(oh):
                for xo in range(ow):
                    acc = 0.0
                    for ci in range(cin):
                        for i in range(k):
                            for j in range(k):
                                acc += xp[bi, ci, y * stride + i, xo * stride + j] * w[co, ci, i, j]
                    out[bi, co, y, xo] = acc
    return out


def matmul_loops(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Naive triple-loop oracle for linear()."""
    n, features = x.shape
    m = w.shape[0]
    out = np.zeros((n, m), dtype=np.float64)
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for kk in range(features):
                acc += x[i, kk] * w[j, kk]
            out[i, j] = acc + b[j]
    return out
