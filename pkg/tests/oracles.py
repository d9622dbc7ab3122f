"""Brute-force reference implementations used only by the tests.

Every oracle is a direct-definition loop with no code shared with the
production kernels, so agreement is evidence rather than tautology. All run
in float64 with sequential summation; size caps keep them honest about their
intended scale.
"""

import math

import mpmath
import numpy as np

_SIZE_CAP = 64  # max extent per axis accepted by any oracle


def _check_size(*dims):
    for d in dims:
        assert d <= _SIZE_CAP, f"oracle input too large: {d} > {_SIZE_CAP}"


def oracle_matmul(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    _check_size(m, k, n)
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for kk in range(k):
                acc += a[i, kk] * b[kk, j]
            out[i, j] = acc
    return out


def oracle_softmax(row, dps=50):
    """High-precision softmax of a 1-D sequence via mpmath."""
    with mpmath.workdps(dps):
        exps = [mpmath.e ** mpmath.mpf(float(v)) for v in row]
        total = mpmath.fsum(exps)
        return np.array([float(e / total) for e in exps])


def oracle_gelu(x, dps=50):
    """High-precision tanh-approximation GELU of a scalar."""
    with mpmath.workdps(dps):
        v = mpmath.mpf(float(x))
        inner = mpmath.sqrt(2 / mpmath.pi) * (v + mpmath.mpf("0.044715") * v ** 3)
        return float(mpmath.mpf("0.5") * v * (1 + mpmath.tanh(inner)))


def oracle_cross_entropy(logits, label, dps=50):
    with mpmath.workdps(dps):
        exps = [mpmath.e ** mpmath.mpf(float(v)) for v in logits]
        total = mpmath.fsum(exps)
        return float(-mpmath.log(exps[label] / total))


def oracle_max_pool(x, k, s):
    x = np.asarray(x, dtype=np.float64)
    h, w, c = x.shape
    _check_size(h, w, c)
    oh = (h - k) // s + 1
    ow = (w - k) // s + 1
    out = np.zeros((oh, ow, c))
    for i in range(oh):
        for j in range(ow):
            for ch in range(c):
                best = -math.inf
                for di in range(k):
                    for dj in range(k):
                        best = max(best, x[i * s + di, j * s + dj, ch])
                out[i, j, ch] = best
    return out


def oracle_acf(scores, k):
    """Stride-k per-channel window max over an (H, W, l) score grid."""
    return oracle_max_pool(scores, k, k)


def oracle_global_avg_pool(x):
    x = np.asarray(x, dtype=np.float64)
    h, w, c = x.shape
    _check_size(h, w, c)
    out = np.zeros(c)
    for ch in range(c):
        acc = 0.0
        for i in range(h):
            for j in range(w):
                acc += x[i, j, ch]
        out[ch] = acc / (h * w)
    return out


def oracle_masked_average(grid, mask):
    grid = np.asarray(grid, dtype=np.float64)
    h, w, c = grid.shape
    _check_size(h, w, c)
    out = np.zeros(c)
    count = 0
    for i in range(h):
        for j in range(w):
            if mask[i, j]:
                count += 1
    if count == 0:
        return out
    for ch in range(c):
        acc = 0.0
        for i in range(h):
            for j in range(w):
                if mask[i, j]:
                    acc += grid[i, j, ch]
        out[ch] = acc / count
    return out


def oracle_aggregate(grid, labels, num_objects):
    """Per-object masked means via independent loops over objects and cells."""
    grid = np.asarray(grid, dtype=np.float64)
    labels = np.asarray(labels)
    h, w, c = grid.shape
    _check_size(h, w, c, num_objects)
    rows = np.zeros((num_objects, c))
    present = np.zeros(num_objects, dtype=bool)
    for o in range(num_objects):
        mask = np.zeros((h, w), dtype=bool)
        for i in range(h):
            for j in range(w):
                mask[i, j] = labels[i, j] == o
        rows[o] = oracle_masked_average(grid, mask)
        present[o] = bool(mask.any())
    return rows, present


def oracle_conv2d(x, w, b, stride=1, pad=0):
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    h, wd, cin = x.shape
    k = w.shape[0]
    cout = w.shape[3]
    _check_size(h, wd, cin, k, cout)
    padded = np.zeros((h + 2 * pad, wd + 2 * pad, cin))
    padded[pad : pad + h, pad : pad + wd, :] = x
    oh = (h + 2 * pad - k) // stride + 1
    ow = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((oh, ow, cout))
    for i in range(oh):
        for j in range(ow):
            for co in range(cout):
                acc = float(b[co])
                for di in range(k):
                    for dj in range(k):
                        for ci in range(cin):
                            acc += padded[i * stride + di, j * stride + dj, ci] * w[di, dj, ci, co]
                out[i, j, co] = acc
    return out


def oracle_bilinear(x, out_h, out_w):
    """Per-pixel half-pixel-center blend with border clamping."""
    x = np.asarray(x, dtype=np.float64)
    h, w, c = x.shape
    _check_size(h, w, c, out_h, out_w)
    out = np.zeros((out_h, out_w, c))
    for i in range(out_h):
        sy = (i + 0.5) * (h / out_h) - 0.5
        y0 = math.floor(sy)
        ty = sy - y0
        y0c = min(max(y0, 0), h - 1)
        y1c = min(max(y0 + 1, 0), h - 1)
        for j in range(out_w):
            sx = (j + 0.5) * (w / out_w) - 0.5
            x0 = math.floor(sx)
            tx = sx - x0
            x0c = min(max(x0, 0), w - 1)
            x1c = min(max(x0 + 1, 0), w - 1)
            for ch in range(c):
                out[i, j, ch] = ((1 - ty) * (1 - tx) * x[y0c, x0c, ch]
                                 + (1 - ty) * tx * x[y0c, x1c, ch]
                                 + ty * (1 - tx) * x[y1c, x0c, ch]
                                 + ty * tx * x[y1c, x1c, ch])
    return out


def oracle_nearest_labels(labels, out_h, out_w):
    labels = np.asarray(labels)
    h, w = labels.shape
    _check_size(h, w, out_h, out_w)
    out = np.zeros((out_h, out_w), dtype=labels.dtype)
    for i in range(out_h):
        sy = (i + 0.5) * (h / out_h) - 0.5
        yi = min(max(math.floor(sy + 0.5), 0), h - 1)
        for j in range(out_w):
            sx = (j + 0.5) * (w / out_w) - 0.5
            xi = min(max(math.floor(sx + 0.5), 0), w - 1)
            out[i, j] = labels[yi, xi]
    return out


def oracle_attention(x, wq, wk, wv, dps=50):
    """Single-head scaled dot-product attention evaluated with mpmath."""
    x = np.asarray(x, dtype=np.float64)
    n, c = x.shape
    d = np.asarray(wq).shape[1]
    _check_size(n, c, d)
    with mpmath.workdps(dps):
        def mat(m):
            return [[mpmath.mpf(float(v)) for v in mrow] for mrow in np.asarray(m)]

        def mm(a, b):
            rows, inner, cols = len(a), len(b), len(b[0])
            return [[mpmath.fsum(a[i][kk] * b[kk][j] for kk in range(inner))
                     for j in range(cols)] for i in range(rows)]

        xm = mat(x)
        q = mm(xm, mat(wq))
        k = mm(xm, mat(wk))
        v = mm(xm, mat(wv))
        scale = 1 / mpmath.sqrt(d)
        scores = [[mpmath.fsum(q[i][m] * k[j][m] for m in range(d)) * scale
                   for j in range(n)] for i in range(n)]
        out = []
        for i in range(n):
            exps = [mpmath.e ** s for s in scores[i]]
            total = mpmath.fsum(exps)
            weights = [e / total for e in exps]
            out.append([mpmath.fsum(weights[j] * v[j][m] for j in range(n))
                        for m in range(d)])
        return np.array([[float(v) for v in mrow] for mrow in out])


def occupancy_histogram(labels, num_objects):
    """Fraction of cells per object id; the label-only classifier's feature."""
    labels = np.asarray(labels)
    out = np.zeros(num_objects)
    for o in range(num_objects):
        out[o] = float((labels == o).sum()) / labels.size
    return out


class HistogramClassifier:
    """Nearest-centroid classifier over object-occupancy histograms."""

    def __init__(self, num_classes, num_objects):
        self.num_classes = num_classes
        self.num_objects = num_objects
        self.centroids = np.zeros((num_classes, num_objects))

    def fit(self, label_maps, labels):
        counts = np.zeros(self.num_classes)
        for lm, y in zip(label_maps, labels):
            self.centroids[y] += occupancy_histogram(lm, self.num_objects)
            counts[y] += 1
        self.centroids /= np.maximum(counts[:, None], 1)
        return self

    def predict(self, label_map, restrict=None):
        hist = occupancy_histogram(label_map, self.num_objects)
        classes = list(restrict) if restrict is not None else range(self.num_classes)
        dists = [(float(((self.centroids[t] - hist) ** 2).sum()), t) for t in classes]
        return min(dists)[1]
