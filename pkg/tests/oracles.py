"""Independent reference formulas used by the tests (plain math, no package code)."""

import math

import numpy as np


def loss(name, z, y):
    if name == "logistic":
        return math.log1p(math.exp(-y * z)) if -y * z < 30 else -y * z
    if name == "square":
        return (z - y) ** 2
    if name == "robust":
        return math.log((y - z) ** 2 / 2 + 1)
    raise ValueError(name)


def reg(name, w):
    w = np.asarray(w, dtype=float)
    if name == "l2":
        return 0.5 * float(np.sum(w * w))
    if name == "rational":
        return float(np.sum(w * w / (1 + w * w)))
    return 0.0


def sample_objective(lossname, regname, lam, w, x, y):
    return loss(lossname, float(np.dot(w, x)), y) + lam * reg(regname, w)


def full_objective(lossname, regname, lam, w, X, y):
    return sum(loss(lossname, float(X[i] @ w), y[i]) for i in range(len(y))) / len(y) + lam * reg(regname, w)


def central_diff(f, w, h=1e-6):
    w = np.array(w, dtype=float)
    g = np.empty_like(w)
    for j in range(len(w)):
        wp, wm = w.copy(), w.copy()
        wp[j] += h
        wm[j] -= h
        g[j] = (f(wp) - f(wm)) / (2 * h)
    return g


def rel_error(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-8))
