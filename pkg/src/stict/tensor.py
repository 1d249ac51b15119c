"""Dense tensors with reverse-mode autodiff.

Layout convention for image-like data is batch x channel x height x width.
Float32 is the training precision; float64 is reserved for gradient
verification (`gradcheck` refuses anything else).

Every operation checks its output for NaN/Inf and raises `NonFiniteError`
immediately, so a diverging loss is caught at the op that produced it.
"""

import math
from contextlib import contextmanager

import numpy as np

LOG_EPS = 1e-7


class ShapeError(ValueError):
    pass


class NonFiniteError(ArithmeticError):
    pass


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph construction inside the block (teacher forwards, probing)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A numpy array plus the bookkeeping needed for reverse-mode backprop.

    Tensors are immutable once produced by an operation; only parameter
    tensors (requires_grad=True leaves) have their .data rebound by the
    optimizer, outside any graph.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if not np.isfinite(arr).all():
            raise NonFiniteError("tensor created with non-finite values")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    # -- graph traversal ---------------------------------------------------

    def backward(self):
        """Accumulate d(self)/d(leaf) into .grad of every reachable leaf.

        self must be scalar. Each marked parameter receives exactly one
        accumulated gradient, shape-equal to the parameter.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar, got shape {self.shape}")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return divide(self, other)

    def __neg__(self):
        return multiply(self, -1.0)

    def sum(self, axes=None):
        return reduce(self, "sum", axes)

    def mean(self, axes=None):
        return reduce(self, "mean", axes)


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float32
    return Tensor(np.asarray(x, dtype=dtype))


def _accumulate(t, g):
    t.grad = g if t.grad is None else t.grad + g


def _result(data, parents, backward):
    """Wrap an op output; attach the backward closure when grads are live."""
    if not np.isfinite(data).all():
        raise NonFiniteError("operation produced non-finite values")
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward = backward
    return out


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to `shape`."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_pair(a, b, op):
    """Equal shapes, a scalar operand, or b broadcastable into a's shape."""
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    if a.shape != b.shape:
        try:
            out_shape = np.broadcast_shapes(a.shape, b.shape)
        except ValueError:
            out_shape = None
        if out_shape is None or (out_shape != a.shape and out_shape != b.shape):
            raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not align")
    return a, b


# -- elementwise ops -------------------------------------------------------


def add(a, b):
    a, b = _check_pair(a, b, "add")

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), backward)


def subtract(a, b):
    a, b = _check_pair(a, b, "subtract")

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g, b.shape))

    return _result(a.data - b.data, (a, b), backward)


def multiply(a, b):
    a, b = _check_pair(a, b, "multiply")
    ad, bd = a.data, b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * bd, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * ad, b.shape))

    return _result(ad * bd, (a, b), backward)


def divide(a, b):
    a, b = _check_pair(a, b, "divide")
    ad, bd = a.data, b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g / bd, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g * ad / (bd * bd), b.shape))

    with np.errstate(divide="ignore", invalid="ignore"):
        out = ad / bd
    return _result(out, (a, b), backward)


def sigmoid(x):
    x = as_tensor(x)
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ex = np.exp(x.data[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward(g):
        _accumulate(x, g * out * (1.0 - out))

    return _result(out, (x,), backward)


def exponential(x):
    x = as_tensor(x)
    out = np.exp(x.data)

    def backward(g):
        _accumulate(x, g * out)

    return _result(out, (x,), backward)


def logarithm(x):
    """log(max(x, LOG_EPS)); gradient is zero where the floor is active."""
    x = as_tensor(x)
    clamped = np.maximum(x.data, LOG_EPS)
    live = x.data >= LOG_EPS

    def backward(g):
        _accumulate(x, g * live / clamped)

    return _result(np.log(clamped), (x,), backward)


def power(x, p):
    x = as_tensor(x)
    p = float(p)

    def backward(g):
        _accumulate(x, g * p * np.power(x.data, p - 1.0))

    return _result(np.power(x.data, p), (x,), backward)


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0

    def backward(g):
        _accumulate(x, g * mask)

    return _result(x.data * mask, (x,), backward)


def clamp(x, lo, hi):
    x = as_tensor(x)
    live = (x.data >= lo) & (x.data <= hi)

    def backward(g):
        _accumulate(x, g * live)

    return _result(np.clip(x.data, lo, hi), (x,), backward)


_ELEMENTWISE = {
    "add": add,
    "subtract": subtract,
    "multiply": multiply,
    "sigmoid": sigmoid,
    "exponential": exponential,
    "logarithm": logarithm,
    "power": power,
}


def elementwise(kind, a, b=None):
    """Dispatch by name; binary kinds take b, unary kinds forbid it."""
    if kind not in _ELEMENTWISE:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    fn = _ELEMENTWISE[kind]
    if kind in ("add", "subtract", "multiply", "power"):
        if b is None:
            raise ValueError(f"{kind} needs a second operand")
        return fn(a, b)
    if b is not None:
        raise ValueError(f"{kind} is unary")
    return fn(a)


# -- reductions ------------------------------------------------------------


def reduce(x, kind, axes=None):
    """Sum or mean over `axes` (all axes when None); reduced extents removed."""
    x = as_tensor(x)
    if kind not in ("sum", "mean"):
        raise ValueError(f"unknown reduce kind {kind!r}")
    if axes is None:
        axes = tuple(range(x.data.ndim))
    elif isinstance(axes, int):
        axes = (axes,)
    else:
        axes = tuple(axes)
    for ax in axes:
        if not -x.data.ndim <= ax < x.data.ndim:
            raise ShapeError(f"reduce: axis {ax} invalid for shape {x.shape}")
    axes = tuple(ax % x.data.ndim for ax in axes)
    count = int(np.prod([x.shape[ax] for ax in axes])) if axes else 1
    if count == 0:
        raise ShapeError("reduce over empty extent")
    out = x.data.sum(axis=axes)
    if kind == "mean":
        out = out / count

    def backward(g):
        ge = np.expand_dims(g, axes) if axes else g
        ge = np.broadcast_to(ge, x.shape).copy()
        if kind == "mean":
            ge /= count
        _accumulate(x, ge)

    return _result(out, (x,), backward)


# -- convolution -----------------------------------------------------------


def _im2col(xd, kh, kw, stride, padding, oh, ow):
    b, c, _, _ = xd.shape
    if padding:
        xd = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((b, c, kh, kw, oh, ow), dtype=xd.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xd[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
    return cols.reshape(b, c * kh * kw, oh * ow)


def _col2im(cols, xshape, kh, kw, stride, padding, oh, ow):
    b, c, h, w = xshape
    hp, wp = h + 2 * padding, w + 2 * padding
    gx = np.zeros((b, c, hp, wp), dtype=cols.dtype)
    cols6 = cols.reshape(b, c, kh, kw, oh, ow)
    for i in range(kh):
        for j in range(kw):
            gx[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += cols6[:, :, i, j]
    return gx[:, :, padding : padding + h, padding : padding + w]


def conv2d(x, kernel, stride=1, padding=0):
    """Cross-correlation of x (B,C,H,W) with kernel (OC,C,KH,KW)."""
    x = as_tensor(x)
    kernel = as_tensor(kernel)
    b, c, h, w = x.shape
    oc, kc, kh, kw = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel extent must be odd, got {kh}x{kw}")
    if kc != c:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {kc}")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"conv2d: non-positive output extent {oh}x{ow}")
    cols = _im2col(x.data, kh, kw, stride, padding, oh, ow)
    k2 = kernel.data.reshape(oc, c * kh * kw)
    out = np.matmul(k2, cols).reshape(b, oc, oh, ow)

    def backward(g):
        g2 = g.reshape(b, oc, oh * ow)
        if kernel.requires_grad:
            gk = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0)
            _accumulate(kernel, gk.reshape(kernel.shape))
        if x.requires_grad:
            gcols = np.matmul(k2.T, g2)
            _accumulate(x, _col2im(gcols, x.shape, kh, kw, stride, padding, oh, ow))

    return _result(out, (x, kernel), backward)


# -- resampling ------------------------------------------------------------


def _axis_matrix(n_in, n_out, mode, dtype):
    """Row-stochastic interpolation matrix mapping n_in samples to n_out."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    if mode == "nearest":
        src = np.minimum(np.arange(n_out) * n_in // n_out, n_in - 1)
        m[np.arange(n_out), src] = 1.0
    else:
        # half-pixel-center convention: src = (i + 0.5) * in/out - 0.5
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1.0)
        i0 = np.floor(src).astype(int)
        i1 = np.minimum(i0 + 1, n_in - 1)
        frac = src - i0
        rows = np.arange(n_out)
        m[rows, i0] += 1.0 - frac
        m[rows, i1] += frac
    return m


def resample(x, factor, mode="bilinear"):
    """Scale spatial extents by `factor` (floored, minimum 1)."""
    x = as_tensor(x)
    if mode not in ("nearest", "bilinear"):
        raise ValueError(f"unknown resample mode {mode!r}")
    if factor <= 0:
        raise ShapeError(f"resample: factor must be positive, got {factor}")
    b, c, h, w = x.shape
    oh = max(1, int(math.floor(h * factor + 1e-9)))
    ow = max(1, int(math.floor(w * factor + 1e-9)))
    return resample_to(x, (oh, ow), mode)


def resample_to(x, size, mode="bilinear"):
    """Resample to an explicit (height, width)."""
    x = as_tensor(x)
    oh, ow = size
    _, _, h, w = x.shape
    if (oh, ow) == (h, w):
        my = mx = None
    else:
        my = _axis_matrix(h, oh, mode, x.dtype)
        mx = _axis_matrix(w, ow, mode, x.dtype)
    out = x.data if my is None else np.matmul(np.matmul(my, x.data), mx.T)

    def backward(g):
        if my is None:
            _accumulate(x, g)
        else:
            _accumulate(x, np.matmul(np.matmul(my.T, g), mx))

    return _result(out, (x,), backward)


# -- gather / warp ---------------------------------------------------------


def spatial_gather(x, index):
    """out[b, :, p] = x[b, :, index[b, p]] over flattened spatial positions.

    index: integer array (B, H*W) of flat source positions; gradients
    scatter-add back through repeated indices.
    """
    x = as_tensor(x)
    b, c, h, w = x.shape
    index = np.asarray(index)
    if index.shape != (b, h * w):
        raise ShapeError(f"spatial_gather: index shape {index.shape} != {(b, h * w)}")
    xf = x.data.reshape(b, c, h * w)
    idx = index[:, None, :]
    out = np.take_along_axis(xf, np.broadcast_to(idx, (b, c, h * w)), axis=2)

    def backward(g):
        gf = np.zeros_like(xf)
        np.add.at(
            gf,
            (np.arange(b)[:, None, None], np.arange(c)[None, :, None], idx),
            g.reshape(b, c, h * w),
        )
        _accumulate(x, gf.reshape(x.shape))

    return _result(out.reshape(x.shape), (x,), backward)


def warp(x, flow):
    """Bilinear-sample x at p + flow(p); border-clamped, differentiable in x.

    flow is a constant (B,2,H,W) array of (u,v) pixel displacements, u along
    width and v along height.
    """
    x = as_tensor(x)
    flow = flow.data if isinstance(flow, Tensor) else np.asarray(flow)
    b, c, h, w = x.shape
    if flow.shape != (b, 2, h, w):
        raise ShapeError(f"warp: flow shape {flow.shape} != {(b, 2, h, w)}")
    if not np.isfinite(flow).all():
        raise NonFiniteError("warp: non-finite flow")
    flow = flow.astype(np.float64)  # coordinates always in double
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    px = np.clip(xx[None] + flow[:, 0], 0.0, w - 1.0)
    py = np.clip(yy[None] + flow[:, 1], 0.0, h - 1.0)
    x0 = np.floor(px).astype(int)
    y0 = np.floor(py).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (px - x0).astype(x.dtype)
    fy = (py - y0).astype(x.dtype)

    xf = x.data.reshape(b, c, h * w)
    corners = []
    for yi, xi, wgt in (
        (y0, x0, (1 - fy) * (1 - fx)),
        (y0, x1, (1 - fy) * fx),
        (y1, x0, fy * (1 - fx)),
        (y1, x1, fy * fx),
    ):
        corners.append(((yi * w + xi).reshape(b, 1, h * w), wgt.reshape(b, 1, h * w)))
    out = np.zeros_like(xf)
    for idx, wgt in corners:
        out += wgt * np.take_along_axis(xf, np.broadcast_to(idx, (b, c, h * w)), axis=2)

    def backward(g):
        gf = np.zeros_like(xf)
        g3 = g.reshape(b, c, h * w)
        bi = np.arange(b)[:, None, None]
        ci = np.arange(c)[None, :, None]
        for idx, wgt in corners:
            np.add.at(gf, (bi, ci, idx), g3 * wgt)
        _accumulate(x, gf.reshape(x.shape))

    return _result(out.reshape(x.shape), (x,), backward)


# -- batch normalization ---------------------------------------------------


def batchnorm_train(x, gamma, beta, eps=1e-5):
    """Normalize by batch statistics over (B, H, W) per channel.

    gamma, beta shaped (1, C, 1, 1). Returns (out, batch_mean, batch_var)
    with the statistics as plain arrays for running-average updates.
    """
    x, gamma = _check_pair(x, gamma, "batchnorm")
    beta = as_tensor(beta, like=x)
    axes = (0, 2, 3)
    n = x.shape[0] * x.shape[2] * x.shape[3]
    mean = x.data.mean(axis=axes, keepdims=True)
    var = x.data.var(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv_std
    out = gamma.data * xhat + beta.data

    def backward(g):
        if beta.requires_grad:
            _accumulate(beta, g.sum(axis=axes, keepdims=True))
        if gamma.requires_grad:
            _accumulate(gamma, (g * xhat).sum(axis=axes, keepdims=True))
        if x.requires_grad:
            gx = g * gamma.data
            t1 = gx.sum(axis=axes, keepdims=True)
            t2 = (gx * xhat).sum(axis=axes, keepdims=True)
            _accumulate(x, inv_std / n * (n * gx - t1 - xhat * t2))

    return _result(out, (x, gamma, beta), backward), mean, var


# -- gradient verification -------------------------------------------------


class GradCheckReport:
    """Per-parameter worst relative errors from a central-difference probe."""

    def __init__(self):
        self.entries = []  # (name, max_rel_err, n_failures)

    @property
    def passed(self):
        return all(n == 0 for _, _, n in self.entries)

    @property
    def max_rel_error(self):
        return max((e for _, e, _ in self.entries), default=0.0)

    def __str__(self):
        lines = []
        for name, err, fails in self.entries:
            mark = "ok" if fails == 0 else f"FAIL({fails} elems)"
            lines.append(f"  {name}: max rel err {err:.3e} {mark}")
        verdict = "PASS" if self.passed else "FAIL"
        return f"gradcheck {verdict} (worst {self.max_rel_error:.3e})\n" + "\n".join(lines)


def gradcheck(f, params, step=1e-4, rel_tol=1e-4, abs_floor=1e-7):
    """Compare reverse-mode gradients of the scalar f() against central
    differences (f(p+h) - f(p-h)) / 2h for every element of every parameter.

    Element passes when |analytic - numeric| <= max(abs_floor,
    rel_tol * max(|analytic|, |numeric|)). Requires double precision.
    """
    params = list(params)
    for p in params:
        if p.dtype != np.float64:
            raise TypeError("gradcheck requires float64 parameters")
        p.zero_grad()
    loss = f()
    if not np.isfinite(loss.data).all():
        raise NonFiniteError("gradcheck: non-finite loss at base point")
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    report = GradCheckReport()
    for p, ag in zip(params, analytic):
        flat = p.data.reshape(-1)
        aflat = ag.reshape(-1)
        worst = 0.0
        fails = 0
        for i in range(flat.size):
            orig = flat[i]
            with no_grad():
                flat[i] = orig + step
                fp = float(f().data)
                flat[i] = orig - step
                fm = float(f().data)
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NonFiniteError("gradcheck: non-finite loss during probing")
            num = (fp - fm) / (2.0 * step)
            diff = abs(aflat[i] - num)
            scale = max(abs(aflat[i]), abs(num))
            rel = diff / scale if scale > 0 else 0.0
            worst = max(worst, rel)
            if diff > max(abs_floor, rel_tol * scale):
                fails += 1
        report.entries.append((p.name or f"param{len(report.entries)}", worst, fails))
    return report
