"""Minimal reverse-mode automatic differentiation over 4-axis arrays.

Exactly the operator set the V-block network needs: strided/dilated
convolution, transposed convolution (the exact adjoint of the matching
strided convolution), batch normalization, ReLU, channel concatenation, the
fixed derivative stencil, and a few reductions.  Forward values are plain
numpy arrays; every op optionally registers a node whose backward closure
produces the parent gradients.

A graph is confined to one worker thread.  Evaluation without gradient
bookkeeping goes through :func:`no_grad`.  Convolutions are im2col-based
(with a pure-GEMM path for 1x1 kernels); small column tensors are cached
for backward reuse, large ones are rebuilt to bound the peak footprint.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from .grid import _stencil_matrix_1d

_node_ids = itertools.count()
_grad_enabled = True
_num_threads = 1
_pool = None


@contextmanager
def no_grad():
    """Disable tape construction inside the block (inference fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def set_num_threads(n: int) -> None:
    """Intra-op worker count for batch-axis parallelism (default 1).

    Per-sample work is independent, so results are bit-identical to the
    serial path; reductions that cross the batch axis always run serially.
    """
    global _num_threads, _pool
    if n < 1:
        raise ValueError("thread count must be >= 1")
    _num_threads = n
    if n > 1 and _pool is None:
        from concurrent.futures import ThreadPoolExecutor
        _pool = ThreadPoolExecutor(max_workers=8)


def get_num_threads() -> int:
    return _num_threads


_PARALLEL_MIN_BYTES = 1 << 20


def _run_batched(work, b: int, nbytes: int = 0) -> None:
    """Run work(lo, hi) over the batch axis, split across the worker pool.
    numpy releases the GIL inside the heavy kernels, so plain threads scale;
    small ops stay serial because dispatch would dominate."""
    n = min(_num_threads, b)
    if n <= 1 or b < 2 or nbytes < _PARALLEL_MIN_BYTES:
        work(0, b)
        return
    bounds = np.linspace(0, b, n + 1).astype(int)
    futs = [_pool.submit(work, bounds[i], bounds[i + 1]) for i in range(n - 1)]
    work(bounds[n - 1], bounds[n])
    for fu in futs:
        fu.result()


class DiffTensor:
    """A numeric array plus its position in the reverse-mode graph."""

    __slots__ = ("values", "requires_grad", "node_id", "parents", "backward_fn", "grad")

    def __init__(self, values, requires_grad=False, parents=(), backward_fn=None):
        self.values = np.asarray(values)
        self.requires_grad = requires_grad
        self.node_id = next(_node_ids)
        self.parents = parents
        self.backward_fn = backward_fn
        self.grad = None

    @property
    def shape(self):
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    def item(self) -> float:
        return float(self.values)

    def __repr__(self):
        return f"DiffTensor(shape={self.values.shape}, requires_grad={self.requires_grad})"


def tensor(values, requires_grad: bool = False) -> DiffTensor:
    return DiffTensor(np.asarray(values), requires_grad=requires_grad)


def _make(values, parents, backward_fn) -> DiffTensor:
    """Register a graph node unless gradients are globally disabled or no
    parent participates in differentiation."""
    if _grad_enabled and any(p.requires_grad for p in parents):
        return DiffTensor(values, requires_grad=True, parents=parents, backward_fn=backward_fn)
    return DiffTensor(values)


def backward(loss: DiffTensor, leaves=None, check_finite: bool = False):
    """Reverse sweep from a scalar; returns {tensor: gradient array}.

    Gradients accumulate for every reachable tensor with requires_grad; the
    optional `leaves` sequence guarantees an entry (zeros if unreached).
    """
    if loss.values.ndim != 0:
        raise ValueError(f"backward root must be scalar, got shape {loss.values.shape}")

    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.asarray(1.0, dtype=loss.values.dtype)}
    by_id = {id(loss): loss}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None or node.backward_fn is None:
            continue
        parent_grads = node.backward_fn(g)
        for p, pg in zip(node.parents, parent_grads):
            if not p.requires_grad or pg is None:
                continue
            if check_finite and not np.all(np.isfinite(pg)):
                raise FloatingPointError(f"non-finite gradient at node {p.node_id}")
            if id(p) in grads:
                # out-of-place: backward closures may hand the same array to
                # several parents, so stored gradients are never mutated
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg
                by_id[id(p)] = p
    result = {by_id[k]: v for k, v in grads.items()}
    if leaves is not None:
        for leaf in leaves:
            if leaf not in result:
                result[leaf] = np.zeros_like(leaf.values)
            leaf.grad = result[leaf]
    return result


# ---------------------------------------------------------------------------
# learnable-parameter containers

@dataclass
class ConvParams:
    """Convolution weights.  `kernel` is (c_out, c_in, k, k) for a plain
    convolution; a transposed op consumes the same layout as its adjoint,
    i.e. it maps c_out -> c_in channels."""

    kernel: DiffTensor
    bias: DiffTensor | None
    stride: int = 1
    dilation: int = 1
    padding: int = 0
    transposed: bool = False

    def __post_init__(self):
        k = self.kernel.shape[-1]
        if self.stride not in (1, 2):
            raise ValueError("stride must be 1 or 2")
        if self.dilation < 1:
            raise ValueError("dilation must be >= 1")
        if k % 2 != 1 or self.kernel.shape[-2] != k:
            raise ValueError("kernel must be square with odd size")


@dataclass
class BatchNormState:
    """Per-channel affine normalization with running statistics."""

    gamma: DiffTensor
    beta: DiffTensor
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1
    mode: str = "train"  # "train" | "eval"


def same_padding(kernel_size: int, dilation: int) -> int:
    """Zero padding that preserves shape at stride 1 and ceil-halves at stride 2."""
    return dilation * (kernel_size - 1) // 2


def conv_output_size(size: int, kernel_size: int, stride: int, dilation: int, padding: int) -> int:
    span = dilation * (kernel_size - 1) + 1
    return (size + 2 * padding - span) // stride + 1


# ---------------------------------------------------------------------------
# im2col / col2im kernels

def _im2col(xp: np.ndarray, k: int, stride: int, dilation: int, oh: int, ow: int) -> np.ndarray:
    """(b, c, Hp, Wp) -> (b, c*k*k, oh*ow) column tensor."""
    b, c = xp.shape[:2]
    cols = np.empty((b, c, k, k, oh, ow), dtype=xp.dtype)

    def work(lo, hi):
        for i in range(k):
            for j in range(k):
                ii, jj = i * dilation, j * dilation
                cols[lo:hi, :, i, j] = xp[lo:hi, :, ii: ii + stride * (oh - 1) + 1: stride,
                                          jj: jj + stride * (ow - 1) + 1: stride]

    _run_batched(work, b, cols.nbytes)
    return cols.reshape(b, c * k * k, oh * ow)


def _col2im(cols: np.ndarray, c: int, k: int, stride: int, dilation: int,
            oh: int, ow: int, hp: int, wp: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add columns back to (b, c, Hp, Wp)."""
    b = cols.shape[0]
    cols = cols.reshape(b, c, k, k, oh, ow)
    out = np.zeros((b, c, hp, wp), dtype=cols.dtype)

    def work(lo, hi):
        for i in range(k):
            for j in range(k):
                ii, jj = i * dilation, j * dilation
                out[lo:hi, :, ii: ii + stride * (oh - 1) + 1: stride,
                    jj: jj + stride * (ow - 1) + 1: stride] += cols[lo:hi, :, i, j]

    _run_batched(work, b, cols.nbytes)
    return out


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    b, c, h, w = x.shape
    out = np.zeros((b, c, h + 2 * p, w + 2 * p), dtype=x.dtype)

    def work(lo, hi):
        out[lo:hi, :, p: p + h, p: p + w] = x[lo:hi]

    _run_batched(work, b, out.nbytes)
    return out


def _matmul_batched(a2: np.ndarray, x3: np.ndarray, out3: np.ndarray) -> None:
    """out3[i] = a2 @ x3[i], split over the batch axis."""
    def work(lo, hi):
        np.matmul(a2, x3[lo:hi], out=out3[lo:hi])

    _run_batched(work, x3.shape[0], out3.nbytes + x3.nbytes)


def _unpad(xp: np.ndarray, p: int, h: int, w: int) -> np.ndarray:
    if p == 0:
        return xp
    return xp[:, :, p: p + h, p: p + w]


# ---------------------------------------------------------------------------
# operators

_COLS_CACHE_BYTES = 8 << 20  # keep forward columns for backward below this


def _conv1x1(x: DiffTensor, p: ConvParams) -> DiffTensor:
    """Pure channel mixing: no padding, no window extraction."""
    b, cin, h, w = x.shape
    cout = p.kernel.shape[0]
    w2 = p.kernel.values.reshape(cout, cin)
    xm = x.values.reshape(b, cin, h * w)
    out = np.empty((b, cout, h * w), dtype=x.values.dtype)
    _matmul_batched(w2, xm, out)
    out = out.reshape(b, cout, h, w)
    if p.bias is not None:
        out += p.bias.values[:, None, None]
    parents = (x, p.kernel) if p.bias is None else (x, p.kernel, p.bias)

    def backward_fn(g):
        g2 = g.reshape(b, cout, h * w)
        dx = None
        if x.requires_grad:
            dx = np.empty((b, cin, h * w), dtype=g.dtype)
            _matmul_batched(w2.T, g2, dx)
            dx = dx.reshape(x.shape)
        dw = np.matmul(g2, xm.transpose(0, 2, 1)).sum(axis=0).reshape(p.kernel.shape)
        if p.bias is None:
            return dx, dw
        return dx, dw, g.sum(axis=(0, 2, 3))

    return _make(out, parents, backward_fn)


def conv2d(x: DiffTensor, p: ConvParams) -> DiffTensor:
    """Strided/dilated cross-correlation with bias."""
    if p.transposed:
        raise ValueError("params are marked transposed; use conv_transpose2d")
    b, cin, h, w = x.shape
    cout, cin_k, k, _ = p.kernel.shape
    if cin_k != cin:
        raise ValueError(f"input has {cin} channels, kernel expects {cin_k}")
    if k == 1 and p.stride == 1 and p.padding == 0:
        return _conv1x1(x, p)
    oh = conv_output_size(h, k, p.stride, p.dilation, p.padding)
    ow = conv_output_size(w, k, p.stride, p.dilation, p.padding)
    if oh < 1 or ow < 1:
        raise ValueError("convolution output would be empty")

    xp = _pad(x.values, p.padding)
    cols = _im2col(xp, k, p.stride, p.dilation, oh, ow)
    w2 = p.kernel.values.reshape(cout, cin * k * k)
    out = np.empty((b, cout, oh * ow), dtype=x.values.dtype)
    _matmul_batched(w2, cols, out)
    out = out.reshape(b, cout, oh, ow)
    if p.bias is not None:
        out += p.bias.values[:, None, None]

    parents = (x, p.kernel) if p.bias is None else (x, p.kernel, p.bias)
    keep_cols = cols if cols.nbytes <= _COLS_CACHE_BYTES else None
    hp, wp = xp.shape[2], xp.shape[3]
    if keep_cols is None:
        keep_xp = xp  # rebuild columns from the padded input during backward
    else:
        keep_xp = None

    def backward_fn(g):
        g2 = np.ascontiguousarray(g.reshape(b, cout, oh * ow))
        cols_b = keep_cols if keep_cols is not None else _im2col(
            keep_xp, k, p.stride, p.dilation, oh, ow)
        dx = None
        if x.requires_grad:
            dcols = np.empty((b, cin * k * k, oh * ow), dtype=g2.dtype)
            _matmul_batched(w2.T, g2, dcols)
            dxp = _col2im(dcols, cin, k, p.stride, p.dilation, oh, ow, hp, wp)
            dx = _unpad(dxp, p.padding, h, w)
        dw = np.matmul(g2, cols_b.transpose(0, 2, 1)).sum(axis=0).reshape(p.kernel.shape)
        if p.bias is None:
            return dx, dw
        db = g.sum(axis=(0, 2, 3))
        return dx, dw, db

    return _make(out, parents, backward_fn)


def conv_transpose2d(x: DiffTensor, p: ConvParams,
                     output_hw: tuple[int, int] | None = None) -> DiffTensor:
    """Adjoint of the matching strided convolution, plus bias.

    With stride 2 the default output doubles the spatial size; `output_hw`
    pins the exact size when the downsampling chain started from an odd grid.
    """
    b, cin, h, w = x.shape
    c_from, cout, k, _ = p.kernel.shape
    if c_from != cin:
        raise ValueError(f"input has {cin} channels, kernel expects {c_from}")
    if output_hw is None:
        output_hw = (p.stride * h, p.stride * w) if p.stride == 2 else (h, w)
    H, W = output_hw
    if conv_output_size(H, k, p.stride, p.dilation, p.padding) != h or \
       conv_output_size(W, k, p.stride, p.dilation, p.padding) != w:
        raise ValueError(f"output size {output_hw} inconsistent with input {(h, w)}")
    hp, wp = H + 2 * p.padding, W + 2 * p.padding

    w2 = p.kernel.values.reshape(cin, cout * k * k)
    xm = x.values.reshape(b, cin, h * w)
    cols = np.empty((b, cout * k * k, h * w), dtype=x.values.dtype)
    _matmul_batched(w2.T, xm, cols)
    out = _unpad(_col2im(cols, cout, k, p.stride, p.dilation, h, w, hp, wp),
                 p.padding, H, W)
    if p.bias is not None:
        out += p.bias.values[:, None, None]

    parents = (x, p.kernel) if p.bias is None else (x, p.kernel, p.bias)

    def backward_fn(g):
        gp = _pad(g, p.padding)
        gcols = _im2col(gp, k, p.stride, p.dilation, h, w)
        dx = None
        if x.requires_grad:
            dx = np.empty((b, cin, h * w), dtype=g.dtype)
            _matmul_batched(w2, gcols, dx)
            dx = dx.reshape(b, cin, h, w)
        dw = np.matmul(xm, gcols.transpose(0, 2, 1)).sum(axis=0).reshape(p.kernel.shape)
        if p.bias is None:
            return dx, dw
        db = g.sum(axis=(0, 2, 3))
        return dx, dw, db

    return _make(out, parents, backward_fn)


def _channel_sums(g: np.ndarray, x: np.ndarray):
    """Per-channel (sum g, sum g*x) over (batch, h, w) in float64."""
    g2 = g.reshape(g.shape[0], g.shape[1], -1)
    x2 = x.reshape(g2.shape)
    sg = np.einsum("bcn->c", g2, dtype=np.float64)
    sgx = np.einsum("bcn,bcn->c", g2, x2, dtype=np.float64)
    return sg, sgx


def batch_norm(x: DiffTensor, s: BatchNormState) -> DiffTensor:
    """Per-channel normalization; batch statistics in train mode, running
    estimates in eval mode.  Running stats update as a side effect of train
    mode (momentum rule, unbiased variance)."""
    b, c, h, w = x.shape
    n = b * h * w
    dt = x.values.dtype

    if s.mode == "train":
        x2 = x.values.reshape(b, c, -1)
        sx = np.einsum("bcn->c", x2, dtype=np.float64)
        sxx = np.einsum("bcn,bcn->c", x2, x2, dtype=np.float64)
        mean = sx / n
        var = np.maximum(sxx / n - mean * mean, 0.0)
        if n > 1:
            s.running_mean[:] = (1 - s.momentum) * s.running_mean + s.momentum * mean
            s.running_var[:] = (1 - s.momentum) * s.running_var + s.momentum * var * n / (n - 1)
        inv = 1.0 / np.sqrt(var + s.eps)
    else:
        mean = s.running_mean
        inv = 1.0 / np.sqrt(s.running_var + s.eps)
    # out = x * (gamma*inv) + (beta - gamma*inv*mean), fused per channel
    a1 = (s.gamma.values * inv).astype(dt)[:, None, None]
    a0 = (s.beta.values - s.gamma.values * inv * mean).astype(dt)[:, None, None]
    out = np.empty_like(x.values)

    def fwd_work(lo, hi):
        np.multiply(x.values[lo:hi], a1, out=out[lo:hi])
        out[lo:hi] += a0

    _run_batched(fwd_work, b, out.nbytes)

    train = s.mode == "train"

    def backward_fn(g):
        sg, sgx = _channel_sums(g, x.values)
        # xhat-weighted sum: sum g*xhat = inv*(sum g*x - mean*sum g)
        sgxhat = inv * (sgx - mean * sg)
        dgamma = sgxhat.astype(dt)
        dbeta = sg.astype(dt)
        gi_scale = (s.gamma.values * inv).astype(dt)[:, None, None]
        dx = np.empty_like(g)
        if train:
            m1 = sg / n
            m2 = sgxhat / n
            # dx = gi_scale * (g - m1 - xhat*m2) with xhat = (x-mean)*inv
            cx = (-(s.gamma.values * inv) * inv * m2).astype(dt)[:, None, None]
            c0 = ((s.gamma.values * inv) * (-m1 + inv * mean * m2)).astype(dt)[:, None, None]

            def bwd_work(lo, hi):
                np.multiply(g[lo:hi], gi_scale, out=dx[lo:hi])
                dx[lo:hi] += x.values[lo:hi] * cx
                dx[lo:hi] += c0

        else:

            def bwd_work(lo, hi):
                np.multiply(g[lo:hi], gi_scale, out=dx[lo:hi])

        _run_batched(bwd_work, b, dx.nbytes)
        return dx, dgamma, dbeta

    return _make(out, (x, s.gamma, s.beta), backward_fn)


def relu(x: DiffTensor) -> DiffTensor:
    out = np.empty_like(x.values)
    b = x.shape[0] if x.values.ndim == 4 else 1

    def fwd_work(lo, hi):
        if x.values.ndim == 4:
            np.maximum(x.values[lo:hi], 0, out=out[lo:hi])
        else:
            np.maximum(x.values, 0, out=out)

    _run_batched(fwd_work, b, out.nbytes)

    def backward_fn(g):
        dx = np.empty_like(g)

        def bwd_work(lo, hi):
            if g.ndim == 4:
                np.multiply(g[lo:hi], x.values[lo:hi] > 0, out=dx[lo:hi])
            else:
                np.multiply(g, x.values > 0, out=dx)

        _run_batched(bwd_work, b, dx.nbytes)
        return (dx,)

    return _make(out, (x,), backward_fn)


def add(x: DiffTensor, y: DiffTensor) -> DiffTensor:
    if x.shape != y.shape:
        raise ValueError(f"add shapes differ: {x.shape} vs {y.shape}")
    return _make(x.values + y.values, (x, y), lambda g: (g, g))


def sub(x: DiffTensor, y: DiffTensor) -> DiffTensor:
    if x.shape != y.shape:
        raise ValueError(f"sub shapes differ: {x.shape} vs {y.shape}")
    return _make(x.values - y.values, (x, y), lambda g: (g, -g))


def scale(x: DiffTensor, alpha: float) -> DiffTensor:
    return _make(x.values * alpha, (x,), lambda g: (g * alpha,))


def concat_channels(xs) -> DiffTensor:
    xs = list(xs)
    ref = xs[0].shape
    for t in xs[1:]:
        if t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ValueError("concat requires matching (batch, h, w)")
    out = np.concatenate([t.values for t in xs], axis=1)
    splits = np.cumsum([t.shape[1] for t in xs])[:-1]

    def backward_fn(g):
        return tuple(np.split(g, splits, axis=1))

    return _make(out, tuple(xs), backward_fn)


_stencil_cache: dict = {}


def _stencil(m: int, h: float, dtype) -> np.ndarray:
    key = (m, h, np.dtype(dtype).str)
    if key not in _stencil_cache:
        _stencil_cache[key] = _stencil_matrix_1d(m, h).astype(dtype)
    return _stencil_cache[key]


def fixed_stencil_derivative(x: DiffTensor, axis: int, h: float) -> DiffTensor:
    """Apply the fixed (non-learnable) second-order derivative stencil along
    axis 2 (y) or axis 3 (x) of a (b, c, h, w) tensor."""
    if axis not in (2, 3):
        raise ValueError("axis must be 2 (rows/y) or 3 (cols/x)")
    m = x.shape[axis]
    S = _stencil(m, h, x.dtype)
    if axis == 3:
        out = x.values @ S.T
        backward_fn = lambda g: (g @ S,)
    else:
        out = np.einsum("ij,bcjw->bciw", S, x.values)
        backward_fn = lambda g: (np.einsum("ji,bcjw->bciw", S, g),)
    return _make(out, (x,), backward_fn)


def scalar_reduce(kind: str, x: DiffTensor) -> DiffTensor:
    """Full reduction to a scalar; accumulation always runs in float64."""
    if kind == "sum":
        out = np.asarray(x.values.sum(dtype=np.float64))

        def backward_fn(g):
            return (np.full_like(x.values, g),)

    elif kind == "l2norm":
        out = np.asarray(np.sqrt(np.sum(np.square(x.values, dtype=np.float64))))
        norm = float(out)

        def backward_fn(g):
            if norm == 0.0:
                return (np.zeros_like(x.values),)
            return ((float(g) / norm * x.values.astype(np.float64)).astype(x.values.dtype),)

    else:
        raise ValueError(f"unknown reduction {kind!r}")
    return _make(out, (x,), backward_fn)


def per_sample_l2(x: DiffTensor) -> DiffTensor:
    """L2 norm over (c, h, w) per batch element -> shape (b,), float64."""
    b = x.shape[0]
    sq = np.sum(np.square(x.values.reshape(b, -1), dtype=np.float64), axis=1)
    norms = np.sqrt(sq)

    def backward_fn(g):
        safe = np.where(norms > 0, norms, 1.0)
        coef = (g / safe).astype(x.values.dtype)
        return (x.values * coef[:, None, None, None],)

    return _make(norms, (x,), backward_fn)


def weighted_sum(v: DiffTensor, weights: np.ndarray) -> DiffTensor:
    """Dot product with a constant weight vector -> scalar (float64)."""
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != v.shape:
        raise ValueError("weight shape mismatch")
    out = np.asarray(np.dot(v.values.astype(np.float64), weights))

    def backward_fn(g):
        return ((float(g) * weights).astype(v.values.dtype),)

    return _make(out, (v,), backward_fn)
