"""Straight-line scalar re-implementations of every loss term.

Pure Python floats and loops, no arrays and no graphs, so the production
graph builders are checked against an independent arithmetic path.
"""

import math

VAR_EPS = 1e-7


def column_stds(rows):
    n = len(rows)
    c = len(rows[0])
    stds = []
    for j in range(c):
        mean = sum(rows[i][j] for i in range(n)) / n
        var = sum((rows[i][j] - mean) ** 2 for i in range(n)) / n
        stds.append(math.sqrt(var + VAR_EPS))
    return stds


def oracle_variance(rows, gamma, divisor_mode):
    n = len(rows)
    c = len(rows[0])
    total = sum(max(0.0, gamma - s) for s in column_stds(rows))
    if divisor_mode == "eq4":
        return total / c
    return total / (c * n)


def _row_normalize(rows, eps):
    out = []
    for row in rows:
        norm = math.sqrt(sum(v * v for v in row))
        out.append([v / (norm + eps) for v in row])
    return out


def _row_center(rows):
    out = []
    for row in rows:
        mean = sum(row) / len(row)
        out.append([v - mean for v in row])
    return out


def oracle_invariance(rows, onehot, eps, center_before_sim, divisor_mode):
    n = len(rows)
    x = _row_center(rows) if center_before_sim else rows
    x = _row_normalize(x, eps)
    total = 0.0
    for i in range(n):
        for j in range(n):
            target = sum(a * b for a, b in zip(onehot[i], onehot[j]))
            sim = sum(a * b for a, b in zip(x[i], x[j]))
            total += (target - sim) ** 2
    if divisor_mode == "eq5":
        return total / n
    return total / (n * n)


def oracle_covariance(rows):
    n = len(rows)
    c = len(rows[0])
    means = [sum(rows[i][j] for i in range(n)) / n for j in range(c)]
    total = 0.0
    for j in range(c):
        for k in range(c):
            if j == k:
                continue
            cov = sum((rows[i][j] - means[j]) * (rows[i][k] - means[k]) for i in range(n)) / n
            total += cov ** 2
    return total / c


def oracle_cross_entropy(logits, onehot):
    n = len(logits)
    total = 0.0
    for i in range(n):
        m = max(logits[i])
        lse = m + math.log(sum(math.exp(v - m) for v in logits[i]))
        picked = sum(y * v for y, v in zip(onehot[i], logits[i]))
        total += lse - picked
    return total / n


def oracle_local(rows, onehot, gamma, eps, variance_divisor, invariance_divisor,
                 center_before_sim):
    normalized = _row_normalize(rows, eps)
    v = oracle_variance(normalized, gamma, variance_divisor)
    i = oracle_invariance(normalized, onehot, eps, center_before_sim, invariance_divisor)
    c = oracle_covariance(normalized)
    return v, i, c, (v + i) + c


def oracle_module_total(local_total, ce, alpha):
    return local_total + alpha * ce
