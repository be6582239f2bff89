"""Independent reference implementations used only by the tests.

Nothing here imports the package's kernels: the fusion forward pass is
re-derived with plain Python floats and ``math``, rankings come from a full
sort, and gradients from central differences.
"""

import math

import numpy as np


def naive_matmul(a, b):
    n, m = len(a), len(a[0])
    p = len(b[0])
    assert len(b) == m
    out = [[0.0] * p for _ in range(n)]
    for i in range(n):
        for j in range(p):
            s = 0.0
            for k in range(m):
                s += float(a[i][k]) * float(b[k][j])
            out[i][j] = s
    return out


def gelu_scalar(x):
    return 0.5 * x * (1.0 + math.erf(x / math.sqrt(2.0)))


def sigmoid_scalar(x):
    return 1.0 / (1.0 + math.exp(-x))


def _affine(W, b, x):
    return [sum(float(W[i][j]) * x[j] for j in range(len(x))) + float(b[i]) for i in range(len(W))]


def straight_line_fusion(tensors, n_experts, z_T, z_D):
    """Scalar-loop forward pass of the gated MoE fusion for one sample."""
    z_T = [float(v) for v in z_T]
    z_D = [float(v) for v in z_D]
    h_T = [gelu_scalar(v) for v in _affine(tensors["proj_T.W"], tensors["proj_T.b"], z_T)]
    h_D = [gelu_scalar(v) for v in _affine(tensors["proj_D.W"], tensors["proj_D.b"], z_D)]
    h_u = h_T + h_D

    q = [gelu_scalar(v) for v in _affine(tensors["gate.W1"], tensors["gate.b1"], h_u)]
    s = _affine(tensors["gate.W2"], tensors["gate.b2"], q)[0]
    lam = sigmoid_scalar(s)
    z_base = [lam * t + (1.0 - lam) * d for t, d in zip(z_T, z_D)]

    rq = [gelu_scalar(v) for v in _affine(tensors["router.W1"], tensors["router.b1"], h_u)]
    logits = _affine(tensors["router.W2"], tensors["router.b2"], rq)
    mx = max(logits)
    ex = [math.exp(v - mx) for v in logits]
    p = [v / sum(ex) for v in ex]

    h_res = None
    for k in range(n_experts):
        o = [gelu_scalar(v) for v in _affine(tensors[f"experts.{k}.W"], tensors[f"experts.{k}.b"], h_u)]
        h_res = [p[k] * v for v in o] if h_res is None else [a + p[k] * v for a, v in zip(h_res, o)]

    v = [a + b for a, b in zip(z_base, _affine(tensors["out.W"], tensors["out.b"], h_res))]
    norm = math.sqrt(sum(x * x for x in v))
    return [x / norm for x in v], lam, p


def full_sort_ranking(matrix, ids, query):
    """All ids ordered by (score desc, id asc) via Python's sort.

    Scores are exactly rounded dot products, so identical rows tie exactly.
    """
    q = [float(x) for x in query]
    scores = [math.fsum(float(a) * b for a, b in zip(row, q)) for row in matrix]
    order = sorted(range(len(ids)), key=lambda i: (-scores[i], ids[i]))
    return [ids[i] for i in order], [scores[i] for i in order]


def central_difference(f, x, h=1e-4):
    """Gradient of scalar ``f`` at array ``x`` (modified in place and restored)."""
    grad = np.zeros_like(x, dtype=np.float64)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + h
        fp = f()
        x[idx] = orig - h
        fm = f()
        x[idx] = orig
        grad[idx] = (fp - fm) / (2 * h)
    return grad


def max_relative_error(analytic, numeric, floor=1e-6):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(float(np.max(np.abs(numeric))), float(np.max(np.abs(analytic))), floor)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def min_scan_hits(ranks, k):
    """Accumulated hits by explicit per-dialogue scanning."""
    ranks = [list(r) for r in ranks]
    n_rounds = len(ranks[0])
    curve = []
    for n in range(n_rounds):
        hit = 0
        for row in ranks:
            best = row[0]
            for m in range(1, n + 1):
                if row[m] < best:
                    best = row[m]
            hit += best <= k
        curve.append(hit / len(ranks))
    return curve


def two_pass_ols(x, y):
    n = len(x)
    mx = sum(x) / n
    my = sum(y) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = sum((a - mx) ** 2 for a in x)
    syy = sum((b - my) ** 2 for b in y)
    return sxy / sxx, sxy / math.sqrt(sxx * syy)


def unit_rows(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)
