"""Independent scalar re-implementations used as test oracles."""
import math

import numpy as np


def dot(a, b):
    return sum(x * y for x, y in zip(a, b))


def cos(a, b):
    return dot(a, b) / (math.sqrt(dot(a, a)) * math.sqrt(dot(b, b)))


def adapter(h_out, h_msa, w_down, w_up, parallel):
    d, r = len(w_down), len(w_down[0])
    src = h_msa if parallel else h_out
    hidden = [max(0.0, sum(src[j] * w_down[j][k] for j in range(d))) for k in range(r)]
    out = [h_out[j] + sum(hidden[k] * w_up[k][j] for k in range(r)) for j in range(d)]
    if parallel:
        out = [out[j] + h_msa[j] for j in range(d)]
    return out


def two_pass_mean(rows):
    n = len(rows)
    d = len(rows[0])
    first = [sum(r[j] for r in rows) / n for j in range(d)]
    return [first[j] + sum(r[j] - first[j] for r in rows) / n for j in range(d)]


def numeric_grad(f, x, eps=1e-5):
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        up = f()
        x[i] = old - eps
        down = f()
        x[i] = old
        g[i] = (up - down) / (2 * eps)
    return g
