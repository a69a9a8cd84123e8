"""Shared test oracles: finite differences and a brute-force AP."""

from __future__ import annotations

import numpy as np


def numeric_gradient(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function, elementwise.

    ``f`` takes no arguments and reads ``x`` by reference; the array is
    perturbed in place and restored.
    """
    grad = np.zeros_like(x)
    flat_x = x.ravel()
    flat_g = grad.ravel()
    for i in range(flat_x.size):
        orig = flat_x[i]
        flat_x[i] = orig + h
        f_plus = f()
        flat_x[i] = orig - h
        f_minus = f()
        flat_x[i] = orig
        flat_g[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """max |a - b| / max(1, |b|), the gradient-check acceptance measure."""
    return float((np.abs(a - b) / np.maximum(1.0, np.abs(b))).max())


def brute_force_average_precision(scores, labels) -> float:
    """Independent AP oracle: walk the stable descending ranking one item
    at a time and collect precision at every positive. Correctly-rounded
    summation keeps the value independent of accumulation order."""
    import math

    items = sorted(
        range(len(scores)), key=lambda i: (-scores[i], i)
    )  # descending score, stable original order on ties
    total_pos = sum(labels)
    if total_pos == 0:
        raise ValueError("undefined without positives")
    seen_pos = 0
    terms = []
    for rank, idx in enumerate(items, start=1):
        if labels[idx] == 1:
            seen_pos += 1
            terms.append(seen_pos / rank)
    return math.fsum(terms) / total_pos


def linear_probe_accuracy(
    features: np.ndarray, labels: np.ndarray, seed: int = 0, train_fraction: float = 0.7
) -> float:
    """Held-out accuracy of a least-squares linear classifier on +-1 targets."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(labels))
    n_train = int(len(order) * train_fraction)
    train, test = order[:n_train], order[n_train:]
    x = np.concatenate([features, np.ones((len(features), 1))], axis=1)
    y = np.where(labels > 0, 1.0, -1.0)
    ridge = 1e-3 * np.eye(x.shape[1])
    w = np.linalg.solve(x[train].T @ x[train] + ridge, x[train].T @ y[train])
    pred = x[test] @ w > 0
    return float((pred == (y[test] > 0)).mean())
