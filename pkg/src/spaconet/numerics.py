"""Dense-array kernels with a minimal reverse-mode tape.

Every learnable operation is expressed over `Node` objects so analytic
gradients can be checked against central finite differences (`grad_check`).
Training and tests run in float64; float32 is reserved for storage.

Accumulation-order contract: `matmul` and the masked/label reductions in the
aggregation module accumulate sequentially in row-major order so that
brute-force loop oracles can assert bitwise equality. Convolution, affine
layers and attention internals use BLAS and are held to 1e-9-style tolerances
instead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ArgumentError, ConfigError, DimensionError, NumericsError

FLOAT = np.float64
STORAGE = np.float32
LABEL = np.uint16

_GELU_A = math.sqrt(2.0 / math.pi)
_GELU_B = 0.044715


@dataclass(frozen=True)
class RngState:
    """Seed plus algorithm id; identical state yields identical streams."""

    seed: int
    algorithm: str = "pcg64"

    def generator(self, *stream: int) -> np.random.Generator:
        if self.algorithm != "pcg64":
            raise ConfigError(f"unsupported rng algorithm '{self.algorithm}'")
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence((self.seed, *stream))))


class Parameter:
    """Trainable value with a persistent gradient slot and a freeze flag."""

    __slots__ = ("value", "grad", "frozen", "name")

    def __init__(self, value, name: str = "", frozen: bool = False):
        self.value = np.array(value, dtype=FLOAT)
        self.grad = np.zeros_like(self.value)
        self.frozen = frozen
        self.name = name

    def zero_grad(self):
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Parameter({self.name or 'unnamed'}, shape={self.value.shape}, frozen={self.frozen})"


def zero_grads(params: Iterable[Parameter]):
    for p in params:
        p.zero_grad()


class Node:
    """One value in the computation tape.

    `parents` holds (parent, fn) pairs where fn maps the upstream gradient to
    this node's contribution to the parent's gradient.
    """

    __slots__ = ("value", "parents", "needs_grad", "param")

    def __init__(self, value, parents=(), needs_grad=False, param: Parameter | None = None):
        self.value = value
        self.parents = parents
        self.needs_grad = needs_grad
        self.param = param


_GRAD_ENABLED = True


class no_grad:
    """Context that makes parameter leaves inert, skipping tape construction."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev


def const(x) -> Node:
    return Node(np.asarray(x, dtype=FLOAT))


def leaf(p: Parameter) -> Node:
    if not _GRAD_ENABLED:
        return Node(p.value)
    return Node(p.value, needs_grad=True, param=p)


def _as_node(x) -> Node:
    return x if isinstance(x, Node) else const(x)


def _topo(root: Node) -> list[Node]:
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if parent.needs_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Node):
    """Accumulate gradients of a scalar `root` into every reachable Parameter."""
    if root.value.size != 1:
        raise DimensionError(f"backward expects a scalar root, got shape {root.value.shape}")
    grads = {id(root): np.ones_like(root.value)}
    for node in reversed(_topo(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.param is not None:
            node.param.grad += g.reshape(node.param.value.shape)
        for parent, fn in node.parents:
            if not parent.needs_grad:
                continue
            contrib = fn(g)
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + contrib
            else:
                grads[key] = contrib


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _binary(a, b, value, da, db) -> Node:
    a, b = _as_node(a), _as_node(b)
    parents = []
    if a.needs_grad:
        parents.append((a, da))
    if b.needs_grad:
        parents.append((b, db))
    return Node(value, tuple(parents), needs_grad=bool(parents))


def add(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    return _binary(a, b, a.value + b.value,
                   lambda g: _unbroadcast(g, a.value.shape),
                   lambda g: _unbroadcast(g, b.value.shape))


def sub(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    return _binary(a, b, a.value - b.value,
                   lambda g: _unbroadcast(g, a.value.shape),
                   lambda g: _unbroadcast(-g, b.value.shape))


def mul(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    return _binary(a, b, a.value * b.value,
                   lambda g: _unbroadcast(g * b.value, a.value.shape),
                   lambda g: _unbroadcast(g * a.value, b.value.shape))


def scale(a, s: float) -> Node:
    a = _as_node(a)
    return Node(a.value * s, ((a, lambda g: g * s),) if a.needs_grad else (),
                needs_grad=a.needs_grad)


def _seq_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # One rounded multiply plus one rounded add per k step, k ascending;
    # bitwise-identical to the naive triple loop.
    out = np.zeros((a.shape[0], b.shape[1]), dtype=FLOAT)
    for k in range(a.shape[1]):
        out += a[:, k : k + 1] * b[k : k + 1, :]
    return out


def matmul(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.value.shape[1] != b.value.shape[0]:
        raise DimensionError(
            f"matmul shapes incompatible: {a.value.shape} x {b.value.shape}")
    return _binary(a, b, _seq_matmul(a.value, b.value),
                   lambda g: g @ b.value.T,
                   lambda g: a.value.T @ g)


def matmul_fast(a, b) -> Node:
    """BLAS matrix product; for internal hot paths held to tolerance contracts."""
    a, b = _as_node(a), _as_node(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.value.shape[1] != b.value.shape[0]:
        raise DimensionError(
            f"matmul shapes incompatible: {a.value.shape} x {b.value.shape}")
    return _binary(a, b, a.value @ b.value,
                   lambda g: g @ b.value.T,
                   lambda g: a.value.T @ g)


def transpose(a) -> Node:
    a = _as_node(a)
    return Node(a.value.T, ((a, lambda g: g.T),) if a.needs_grad else (),
                needs_grad=a.needs_grad)


def affine(x, w, b) -> Node:
    """x @ w + b for row vectors or row-stacked matrices (BLAS path)."""
    x, w, b = _as_node(x), _as_node(w), _as_node(b)
    squeeze = x.value.ndim == 1
    xv = x.value[None, :] if squeeze else x.value
    if xv.shape[1] != w.value.shape[0]:
        raise DimensionError(
            f"affine shapes incompatible: {x.value.shape} x {w.value.shape}")
    out = xv @ w.value + b.value
    if squeeze:
        out = out[0]
    parents = []
    if x.needs_grad:
        parents.append((x, (lambda g: (g[None, :] @ w.value.T)[0]) if squeeze
                        else (lambda g: g @ w.value.T)))
    if w.needs_grad:
        parents.append((w, (lambda g: xv.T @ g[None, :]) if squeeze
                        else (lambda g: xv.T @ g)))
    if b.needs_grad:
        parents.append((b, (lambda g: g) if squeeze else (lambda g: g.sum(axis=0))))
    return Node(out, tuple(parents), needs_grad=bool(parents))


def relu(x) -> Node:
    x = _as_node(x)
    mask = x.value > 0
    return Node(np.where(mask, x.value, 0.0),
                ((x, lambda g: g * mask),) if x.needs_grad else (),
                needs_grad=x.needs_grad)


def sigmoid(x) -> Node:
    x = _as_node(x)
    s = 1.0 / (1.0 + np.exp(-x.value))
    return Node(s, ((x, lambda g: g * s * (1.0 - s)),) if x.needs_grad else (),
                needs_grad=x.needs_grad)


def gelu(x) -> Node:
    """Tanh-approximation GELU."""
    x = _as_node(x)
    v = x.value
    inner = _GELU_A * (v + _GELU_B * v ** 3)
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def grad(g):
        dinner = _GELU_A * (1.0 + 3.0 * _GELU_B * v ** 2)
        return g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t ** 2) * dinner)

    return Node(out, ((x, grad),) if x.needs_grad else (), needs_grad=x.needs_grad)


def activations(x, kind: str) -> Node:
    if kind == "relu":
        return relu(x)
    if kind == "gelu":
        return gelu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ArgumentError(f"unknown activation kind '{kind}'")


def softmax_lastdim(x) -> Node:
    """Max-shifted softmax over the last axis; rows sum to 1 within 1e-12."""
    x = _as_node(x)
    shifted = x.value - x.value.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def grad(g):
        return (g - (g * s).sum(axis=-1, keepdims=True)) * s

    return Node(s, ((x, grad),) if x.needs_grad else (), needs_grad=x.needs_grad)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Node:
    """Per-row normalization over the channel axis of an (n, c) array."""
    if eps <= 0:
        raise ArgumentError(f"layer_norm eps must be positive, got {eps}")
    x, gamma, beta = _as_node(x), _as_node(gamma), _as_node(beta)
    v = x.value
    if v.ndim != 2:
        raise DimensionError(f"layer_norm expects (n, c), got shape {v.shape}")
    n, c = v.shape
    mu = v.mean(axis=1, keepdims=True)
    xc = v - mu
    var = (xc ** 2).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.value + beta.value

    parents = []
    if x.needs_grad:
        def grad_x(g):
            gx = g * gamma.value
            return inv * (gx - gx.mean(axis=1, keepdims=True)
                          - xhat * (gx * xhat).mean(axis=1, keepdims=True))
        parents.append((x, grad_x))
    if gamma.needs_grad:
        parents.append((gamma, lambda g: (g * xhat).sum(axis=0)))
    if beta.needs_grad:
        parents.append((beta, lambda g: g.sum(axis=0)))
    return Node(out, tuple(parents), needs_grad=bool(parents))


def max_pool2d(x, k: int, s: int | None = None) -> Node:
    """Per-channel max over non-overlapping or strided k x k windows (HWC)."""
    x = _as_node(x)
    v = x.value
    if v.ndim != 3:
        raise DimensionError(f"max_pool2d expects (H, W, C), got shape {v.shape}")
    s = k if s is None else s
    h, w, c = v.shape
    if k > h or k > w:
        raise DimensionError(f"pool window {k} larger than input {h}x{w}")
    oh = (h - k) // s + 1
    ow = (w - k) // s + 1
    windows = np.empty((oh, ow, k * k, c), dtype=FLOAT)
    for ki in range(k):
        for kj in range(k):
            windows[:, :, ki * k + kj, :] = v[ki : ki + s * oh : s, kj : kj + s * ow : s, :]
    arg = windows.argmax(axis=2)  # first maximum in row-major window order
    out = np.take_along_axis(windows, arg[:, :, None, :], axis=2)[:, :, 0, :]

    def grad(g):
        dx = np.zeros_like(v)
        oi, oj, ch = np.meshgrid(np.arange(oh), np.arange(ow), np.arange(c), indexing="ij")
        rows = oi * s + arg // k
        cols = oj * s + arg % k
        np.add.at(dx, (rows.ravel(), cols.ravel(), ch.ravel()), g.ravel())
        return dx

    return Node(out, ((x, grad),) if x.needs_grad else (), needs_grad=x.needs_grad)


def global_avg_pool(x) -> Node:
    x = _as_node(x)
    v = x.value
    if v.ndim != 3:
        raise DimensionError(f"global_avg_pool expects (H, W, C), got shape {v.shape}")
    h, w, _ = v.shape
    out = v.mean(axis=(0, 1))

    def grad(g):
        return np.broadcast_to(g / (h * w), v.shape).copy()

    return Node(out, ((x, grad),) if x.needs_grad else (), needs_grad=x.needs_grad)


def global_max_pool(x) -> Node:
    x = _as_node(x)
    v = x.value
    if v.ndim != 3:
        raise DimensionError(f"global_max_pool expects (H, W, C), got shape {v.shape}")
    h, w, c = v.shape
    flat = v.reshape(h * w, c)
    arg = flat.argmax(axis=0)
    out = flat[arg, np.arange(c)]

    def grad(g):
        dx = np.zeros_like(flat)
        dx[arg, np.arange(c)] = g
        return dx.reshape(v.shape)

    return Node(out, ((x, grad),) if x.needs_grad else (), needs_grad=x.needs_grad)


def conv2d(x, w, b, stride: int = 1, pad: int = 0) -> Node:
    """Cross-correlation over an HWC map with a (k, k, Cin, Cout) kernel."""
    x, w, b = _as_node(x), _as_node(w), _as_node(b)
    v = x.value
    kv = w.value
    if v.ndim != 3 or kv.ndim != 4:
        raise DimensionError(f"conv2d expects (H,W,Cin) and (k,k,Cin,Cout), got {v.shape} and {kv.shape}")
    k = kv.shape[0]
    if kv.shape[1] != k or kv.shape[2] != v.shape[2]:
        raise DimensionError(f"kernel {kv.shape} incompatible with input {v.shape}")
    h, wd, cin = v.shape
    cout = kv.shape[3]
    ph, pw = h + 2 * pad, wd + 2 * pad
    if k > ph or k > pw:
        raise DimensionError(f"kernel size {k} exceeds padded input {ph}x{pw}")
    oh = (ph - k) // stride + 1
    ow = (pw - k) // stride + 1

    padded = np.pad(v, ((pad, pad), (pad, pad), (0, 0))) if pad else v
    cols = np.empty((oh, ow, k * k, cin), dtype=FLOAT)
    for ki in range(k):
        for kj in range(k):
            cols[:, :, ki * k + kj, :] = padded[ki : ki + stride * oh : stride,
                                                kj : kj + stride * ow : stride, :]
    cols2 = cols.reshape(oh * ow, k * k * cin)
    wmat = kv.reshape(k * k * cin, cout)
    out = (cols2 @ wmat + b.value).reshape(oh, ow, cout)

    parents = []
    if x.needs_grad:
        def grad_x(g):
            dcols = (g.reshape(oh * ow, cout) @ wmat.T).reshape(oh, ow, k * k, cin)
            dpad = np.zeros((ph, pw, cin), dtype=FLOAT)
            for ki in range(k):
                for kj in range(k):
                    dpad[ki : ki + stride * oh : stride,
                         kj : kj + stride * ow : stride, :] += dcols[:, :, ki * k + kj, :]
            return dpad[pad : pad + h, pad : pad + wd, :] if pad else dpad
        parents.append((x, grad_x))
    if w.needs_grad:
        parents.append((w, lambda g: (cols2.T @ g.reshape(oh * ow, cout)).reshape(kv.shape)))
    if b.needs_grad:
        parents.append((b, lambda g: g.reshape(oh * ow, cout).sum(axis=0)))
    return Node(out, tuple(parents), needs_grad=bool(parents))


def _resize_axis(n_in: int, n_out: int):
    # Half-pixel-center mapping with border clamping.
    dst = np.arange(n_out, dtype=FLOAT)
    src = (dst + 0.5) * (n_in / n_out) - 0.5
    lo = np.floor(src).astype(np.int64)
    t = src - lo
    return np.clip(lo, 0, n_in - 1), np.clip(lo + 1, 0, n_in - 1), t


def bilinear_resize(x, out_h: int, out_w: int) -> Node:
    x = _as_node(x)
    v = x.value
    if v.ndim != 3:
        raise DimensionError(f"bilinear_resize expects (H, W, C), got shape {v.shape}")
    h, w, c = v.shape
    if out_h < 1 or out_w < 1:
        raise ArgumentError(f"output size must be >= 1, got {out_h}x{out_w}")
    if (out_h, out_w) == (h, w):
        return Node(v.copy(), ((x, lambda g: g),) if x.needs_grad else (),
                    needs_grad=x.needs_grad)
    r0, r1, tr = _resize_axis(h, out_h)
    c0, c1, tc = _resize_axis(w, out_w)
    tr = tr[:, None, None]
    tc = tc[None, :, None]
    out = ((1 - tr) * (1 - tc) * v[np.ix_(r0, c0)]
           + (1 - tr) * tc * v[np.ix_(r0, c1)]
           + tr * (1 - tc) * v[np.ix_(r1, c0)]
           + tr * tc * v[np.ix_(r1, c1)])

    def grad(g):
        dx = np.zeros_like(v)
        oi, oj = np.meshgrid(np.arange(out_h), np.arange(out_w), indexing="ij")
        for rows, cols, wgt in ((r0[oi], c0[oj], (1 - tr) * (1 - tc)),
                                (r0[oi], c1[oj], (1 - tr) * tc),
                                (r1[oi], c0[oj], tr * (1 - tc)),
                                (r1[oi], c1[oj], tr * tc)):
            np.add.at(dx, (rows, cols), g * wgt)
        return dx

    return Node(out, ((x, grad),) if x.needs_grad else (), needs_grad=x.needs_grad)


def nearest_resize_labels(labels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbor resample of an integer grid; introduces no new labels."""
    if labels.ndim != 2:
        raise DimensionError(f"label map must be 2-D, got shape {labels.shape}")
    if out_h < 1 or out_w < 1:
        raise ArgumentError(f"output size must be >= 1, got {out_h}x{out_w}")
    h, w = labels.shape

    def axis_idx(n_in, n_out):
        src = (np.arange(n_out, dtype=FLOAT) + 0.5) * (n_in / n_out) - 0.5
        return np.clip(np.floor(src + 0.5).astype(np.int64), 0, n_in - 1)

    return labels[np.ix_(axis_idx(h, out_h), axis_idx(w, out_w))]


def dropout(x, rate: float, mode: str, rng) -> Node:
    """Inverted dropout; identity in eval mode."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if mode not in ("train", "eval"):
        raise ArgumentError(f"dropout mode must be 'train' or 'eval', got '{mode}'")
    x = _as_node(x)
    if mode == "eval" or rate == 0.0:
        return Node(x.value, ((x, lambda g: g),) if x.needs_grad else (),
                    needs_grad=x.needs_grad)
    gen = rng.generator() if isinstance(rng, RngState) else rng
    keep = gen.random(x.value.shape) >= rate
    factor = keep / (1.0 - rate)
    return Node(x.value * factor, ((x, lambda g: g * factor),) if x.needs_grad else (),
                needs_grad=x.needs_grad)


def maximum(a, b) -> Node:
    """Elementwise max; gradient follows the larger input, split 50/50 on ties."""
    a, b = _as_node(a), _as_node(b)
    if a.value.shape != b.value.shape:
        raise DimensionError(f"maximum shapes differ: {a.value.shape} vs {b.value.shape}")
    wa = (a.value > b.value).astype(FLOAT) + 0.5 * (a.value == b.value)
    return _binary(a, b, np.maximum(a.value, b.value),
                   lambda g: g * wa,
                   lambda g: g * (1.0 - wa))


def concat_rows(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    av = a.value if a.value.ndim == 2 else a.value[None, :]
    bv = b.value if b.value.ndim == 2 else b.value[None, :]
    if av.shape[1] != bv.shape[1]:
        raise DimensionError(f"row concat needs equal widths: {av.shape} vs {bv.shape}")
    n = av.shape[0]
    return _binary(a, b, np.vstack([av, bv]),
                   lambda g: g[:n].reshape(a.value.shape),
                   lambda g: g[n:].reshape(b.value.shape))


def concat_cols(nodes: Sequence[Node]) -> Node:
    nodes = [_as_node(n) for n in nodes]
    widths = [n.value.shape[1] for n in nodes]
    offsets = np.cumsum([0] + widths)
    out = np.hstack([n.value for n in nodes])
    parents = []
    for i, n in enumerate(nodes):
        if n.needs_grad:
            lo, hi = offsets[i], offsets[i + 1]
            parents.append((n, lambda g, lo=lo, hi=hi: g[:, lo:hi]))
    return Node(out, tuple(parents), needs_grad=bool(parents))


def row(x, i: int) -> Node:
    x = _as_node(x)
    if not 0 <= i < x.value.shape[0]:
        raise ArgumentError(f"row index {i} out of range for {x.value.shape[0]} rows")

    def grad(g):
        dx = np.zeros_like(x.value)
        dx[i] = g
        return dx

    return Node(x.value[i].copy(), ((x, grad),) if x.needs_grad else (),
                needs_grad=x.needs_grad)


def sum_all(x) -> Node:
    x = _as_node(x)
    return Node(np.asarray(x.value.sum()),
                ((x, lambda g: np.broadcast_to(g, x.value.shape).copy()),)
                if x.needs_grad else (),
                needs_grad=x.needs_grad)


def mean_of(nodes: Sequence[Node]) -> Node:
    """Sequential sum of scalar nodes divided by the count."""
    total = nodes[0]
    for n in nodes[1:]:
        total = add(total, n)
    return scale(total, 1.0 / len(nodes))


def grad_check(fn: Callable[[], Node], params: Sequence[Parameter],
               eps: float = 1e-5) -> dict[str, float]:
    """Max relative error between analytic and central-difference gradients.

    Relative error per element is |ga - gf| / max(|ga|, |gf|, 1e-8); the report
    maps each parameter name to the max over its elements.
    """
    zero_grads(params)
    out = fn()
    if not np.all(np.isfinite(out.value)):
        raise NumericsError("loss is not finite at the evaluation point")
    backward(out)
    analytic = {p.name: p.grad.copy() for p in params}

    report = {}
    with no_grad():
        for p in params:
            fd = np.zeros_like(p.value)
            flat = p.value.reshape(-1)
            fd_flat = fd.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                f_plus = float(fn().value)
                flat[i] = orig - eps
                f_minus = float(fn().value)
                flat[i] = orig
                if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                    raise NumericsError(f"non-finite loss while perturbing {p.name}[{i}]")
                fd_flat[i] = (f_plus - f_minus) / (2.0 * eps)
            ga = analytic[p.name]
            denom = np.maximum(np.maximum(np.abs(ga), np.abs(fd)), 1e-8)
            report[p.name] = float(np.max(np.abs(ga - fd) / denom)) if ga.size else 0.0
    return report
