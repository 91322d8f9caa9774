"""Reference implementations used only by the tests.

Each one is written from the definition with plain loops or plain numpy and
shares no code with the package.
"""

from __future__ import annotations

import itertools
from fractions import Fraction

import numpy as np


def numeric_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of a scalar numpy function."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g


def mmd_loop(X: np.ndarray, Y: np.ndarray, sigma: float) -> float:
    """Biased squared MMD by explicit double loops.

    Squared distances accumulate feature by feature and kernel values
    accumulate row-major, one at a time.
    """

    def block(A, B):
        total = 0.0
        for i in range(A.shape[0]):
            for j in range(B.shape[0]):
                d2 = 0.0
                for k in range(A.shape[1]):
                    d = A[i, k] - B[j, k]
                    d2 += d * d
                total += np.exp(-(d2 / (2.0 * sigma * sigma)))
        return total

    n, m = X.shape[0], Y.shape[0]
    return block(X, X) / float(n * n) - (2.0 * block(X, Y)) / float(n * m) + block(Y, Y) / float(m * m)


def median_distance(*sets) -> float:
    pooled = np.concatenate(sets)
    d = [np.linalg.norm(pooled[i] - pooled[j]) for i in range(len(pooled)) for j in range(i + 1, len(pooled))]
    return float(np.median(d)) if d else 1.0


def vqa_bruteforce(pred: str, answers) -> Fraction:
    """Average over every 9-annotator subset of min(matches / 3, 1), in exact arithmetic."""
    pred = pred.strip().lower()
    norm = [a.strip().lower() for a in answers]
    subsets = list(itertools.combinations(range(len(norm)), len(norm) - 1))
    total = Fraction(0)
    for sub in subsets:
        matches = sum(1 for i in sub if norm[i] == pred)
        total += min(Fraction(matches, 3), Fraction(1))
    return total / len(subsets)


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def gru_step(x, h, W, U, b):
    """W, U, b are dicts keyed by gate name 'z', 'r', 'h'."""
    z = sigmoid(W["z"] @ x + U["z"] @ h + b["z"])
    r = sigmoid(W["r"] @ x + U["r"] @ h + b["r"])
    cand = np.tanh(W["h"] @ x + U["h"] @ (r * h) + b["h"])
    return (1 - z) * h + z * cand


def log_softmax(x):
    m = x.max(axis=-1, keepdims=True)
    return x - m - np.log(np.exp(x - m).sum(axis=-1, keepdims=True))
