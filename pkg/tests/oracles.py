"""Independent reference computations used to check the package.

Nothing here imports the code under test except for value types, so a bug
in an implementation cannot leak into its own expected values.
"""

import math

import numpy as np


def ramp(step, start, length):
    """Closed-form outgoing weight of a linear crossfade."""
    t = (step - start) / length
    return min(1.0, max(0.0, 1.0 - t))


def balanced_objects(text):
    """Spans of top-level ``{...}`` groups found by bracket counting (string-aware)."""
    spans = []
    depth = 0
    start = None
    in_str = False
    escape = False
    for i, ch in enumerate(text):
        if in_str:
            if escape:
                escape = False
            elif ch == "\\":
                escape = True
            elif ch == '"':
                in_str = False
            continue
        if ch == '"' and depth > 0:
            in_str = True
        elif ch == "{":
            if depth == 0:
                start = i
            depth += 1
        elif ch == "}" and depth > 0:
            depth -= 1
            if depth == 0:
                spans.append(text[start:i + 1])
    return spans


def softmax_ref(x, temperature=1.0):
    x = [v / temperature for v in x]
    m = max(x)
    e = [math.exp(v - m) for v in x]
    s = sum(e)
    return [v / s for v in e]


def toy_transition_matrix(model, seed, gamma, temperature):
    """Row i = next-token distribution after token i for one fixed condition."""
    v = model.vocab_size
    uncond = np.asarray(model.base, dtype=float)[:v]
    cond = np.asarray(model.table(seed), dtype=float)[:v]
    guided = uncond + gamma * (cond - uncond)
    rows = [softmax_ref(list(row), temperature) for row in guided]
    return np.array(rows)


def stationary_by_power(p, iters=20000, tol=1e-15):
    pi = np.full(p.shape[0], 1.0 / p.shape[0])
    for _ in range(iters):
        nxt = pi @ p
        if np.abs(nxt - pi).sum() < tol:
            return nxt
        pi = nxt
    return pi


def mat_mul(a, b):
    n, m, k = len(a), len(b[0]), len(b)
    return [[sum(a[i][t] * b[t][j] for t in range(k)) for j in range(m)] for i in range(n)]


def transpose(a):
    return [list(r) for r in zip(*a)]


def snf_one_iteration_two_views(w1, w2, k):
    """Hand-rolled single fusion round for two views, pure Python lists."""

    def full(w):
        n = len(w)
        out = []
        for i in range(n):
            off = sum(w[i][j] for j in range(n) if j != i)
            out.append([0.5 if i == j else 0.5 * w[i][j] / off for j in range(n)])
        return out

    def sparse(w):
        n = len(w)
        out = []
        for i in range(n):
            keep = sorted(range(n), key=lambda j: (-w[i][j], j))[:k]
            total = sum(w[i][j] for j in keep)
            out.append([w[i][j] / total if j in keep else 0.0 for j in range(n)])
        return out

    p1, p2 = full(w1), full(w2)
    s1, s2 = sparse(w1), sparse(w2)
    n1 = mat_mul(mat_mul(s1, p2), transpose(s1))
    n2 = mat_mul(mat_mul(s2, p1), transpose(s2))
    n1 = [[0.5 * (n1[i][j] + n1[j][i]) for j in range(len(n1))] for i in range(len(n1))]
    n2 = [[0.5 * (n2[i][j] + n2[j][i]) for j in range(len(n2))] for i in range(len(n2))]
    return [[0.5 * (n1[i][j] + n2[i][j]) for j in range(len(n1))] for i in range(len(n1))]


def welford(mats):
    """One-pass mean and population variance."""
    mean = np.zeros_like(np.asarray(mats[0], dtype=float))
    m2 = np.zeros_like(mean)
    for n, x in enumerate(mats, start=1):
        x = np.asarray(x, dtype=float)
        delta = x - mean
        mean = mean + delta / n
        m2 = m2 + delta * (x - mean)
    return mean, m2 / len(mats)


def frechet_ref(mu1, c1, mu2, c2):
    """Textbook form with scipy's general matrix square root."""
    from scipy import linalg

    covmean = linalg.sqrtm(np.asarray(c1) @ np.asarray(c2))
    covmean = np.real(covmean)
    d = np.asarray(mu1) - np.asarray(mu2)
    return float(d @ d + np.trace(c1) + np.trace(c2) - 2 * np.trace(covmean))


def fft_peak_hz(samples, sample_rate):
    spec = np.abs(np.fft.rfft(samples * np.hanning(len(samples))))
    freqs = np.fft.rfftfreq(len(samples), 1.0 / sample_rate)
    return freqs[int(np.argmax(spec))], freqs[1] - freqs[0]
