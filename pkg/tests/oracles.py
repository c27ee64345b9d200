"""Reference computations written independently of the production code paths.

Everything here uses scalar Python loops over plain nested lists so that a bug
in the vectorised implementation cannot hide in a shared helper.
"""

from __future__ import annotations

import math

import numpy as np


def unpack(values, dims):
    """Split a flat vector into [(W as list of rows, b as list)] per layer."""
    values = list(map(float, values))
    out = []
    pos = 0
    for n_in, n_out in zip(dims[:-1], dims[1:]):
        W = [[values[pos + i * n_out + j] for j in range(n_out)] for i in range(n_in)]
        pos += n_in * n_out
        b = values[pos : pos + n_out]
        pos += n_out
        out.append((W, b))
    assert pos == len(values)
    return out


def forward(values, dims, x_row):
    """Probabilities for a single input row: ReLU hidden layers, softmax output."""
    layers = unpack(values, dims)
    a = list(map(float, x_row))
    for li, (W, b) in enumerate(layers):
        z = [b[j] + sum(a[i] * W[i][j] for i in range(len(a))) for j in range(len(b))]
        if li == len(layers) - 1:
            m = max(z)
            e = [math.exp(v - m) for v in z]
            s = sum(e)
            a = [v / s for v in e]
        else:
            a = [v if v > 0 else 0.0 for v in z]
    return a


def mean_loss(values, dims, X, y):
    total = 0.0
    for row, label in zip(X, y):
        p = forward(values, dims, row)
        total += -math.log(max(p[int(label)], 1e-12))
    return total / len(y)


def finite_difference(f, values, delta=1e-5):
    """Central differences of scalar ``f`` at ``values`` (numpy vector)."""
    values = np.array(values, dtype=np.float64)
    grad = np.zeros_like(values)
    for i in range(values.size):
        plus = values.copy()
        minus = values.copy()
        plus[i] += delta
        minus[i] -= delta
        grad[i] = (f(plus) - f(minus)) / (2 * delta)
    return grad


def weighted_mean(models, weights):
    total = sum(weights)
    n = len(models[0])
    out = []
    for i in range(n):
        acc = 0.0
        for m, w in zip(models, weights):
            acc += (w / total) * float(m[i])
        out.append(acc)
    return out
