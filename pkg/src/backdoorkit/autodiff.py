"""Dense float64 tensors with reverse-mode automatic differentiation.

A small tape-based engine: every operation returns a new Tensor that records
its parent tensors and a backward closure. Node ids increase monotonically as
ops execute, so the tape itself is a topological order and the backward sweep
(descending node id) is deterministic. All values are float64; every op
validates finiteness of its output.
"""

import itertools

import numpy as np


class AutodiffError(Exception):
    pass


class ShapeError(AutodiffError):
    pass


class NonFiniteError(AutodiffError):
    pass


_node_ids = itertools.count()


class Tensor:
    """Immutable-by-convention array node in the computation tape."""

    __slots__ = ("data", "grad", "op", "nid", "parents", "_backward")

    def __init__(self, data, op="leaf", parents=(), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.op = op
        self.nid = next(_node_ids)
        self.parents = parents
        self._backward = backward
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteError(f"op '{op}' (node {self.nid}) produced non-finite values")

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.data.shape}, nid={self.nid})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x, op="const")


def _sum_to_shape(g, shape):
    """Reduce a broadcast gradient back to the original operand shape."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")

    def backward(g, a=a, b=b):
        a.accumulate(_sum_to_shape(g, a.shape))
        b.accumulate(_sum_to_shape(g, b.shape))

    return Tensor(out, op="add", parents=(a, b), backward=backward)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data - b.data
    except ValueError:
        raise ShapeError(f"sub: incompatible shapes {a.shape} and {b.shape}")

    def backward(g, a=a, b=b):
        a.accumulate(_sum_to_shape(g, a.shape))
        b.accumulate(-_sum_to_shape(g, b.shape))

    return Tensor(out, op="sub", parents=(a, b), backward=backward)


def neg(a):
    a = _as_tensor(a)

    def backward(g, a=a):
        a.accumulate(-g)

    return Tensor(-a.data, op="neg", parents=(a,), backward=backward)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g, a=a, b=b):
        a.accumulate(_sum_to_shape(g * b.data, a.shape))
        b.accumulate(_sum_to_shape(g * a.data, b.shape))

    return Tensor(out, op="mul", parents=(a, b), backward=backward)


def mask_mul(a, mask):
    """Multiply by a constant mask; gradients flow only to `a`."""
    a = _as_tensor(a)
    m = np.asarray(mask, dtype=np.float64)
    try:
        out = a.data * m
    except ValueError:
        raise ShapeError(f"mask_mul: incompatible shapes {a.shape} and {m.shape}")

    def backward(g, a=a, m=m):
        a.accumulate(_sum_to_shape(g * m, a.shape))

    return Tensor(out, op="mask_mul", parents=(a,), backward=backward)


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim > 2 or b.data.ndim > 2:
        raise ShapeError("matmul: only 1-D/2-D operands supported")
    try:
        out = a.data @ b.data
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g, a=a, b=b):
        ad = np.atleast_2d(a.data)
        bd = b.data if b.data.ndim == 2 else b.data[:, None]
        gd = np.asarray(g)
        if a.data.ndim == 1 and b.data.ndim == 1:
            gd = np.atleast_2d(gd)
        elif a.data.ndim == 1:
            gd = gd[None, :]
        elif b.data.ndim == 1:
            gd = gd[:, None]
        ga = gd @ bd.T
        gb = ad.T @ gd
        a.accumulate(ga.reshape(a.shape))
        b.accumulate(gb.reshape(b.shape))

    return Tensor(out, op="matmul", parents=(a, b), backward=backward)


def relu(a):
    a = _as_tensor(a)
    # subgradient at exactly 0 is defined as 0
    active = a.data > 0

    def backward(g, a=a, active=active):
        a.accumulate(g * active)

    return Tensor(np.maximum(a.data, 0.0), op="relu", parents=(a,), backward=backward)


def tanh(a):
    a = _as_tensor(a)
    out = np.tanh(a.data)

    def backward(g, a=a, out=out):
        a.accumulate(g * (1.0 - out * out))

    return Tensor(out, op="tanh", parents=(a,), backward=backward)


def reshape(a, shape):
    a = _as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")

    def backward(g, a=a):
        a.accumulate(np.asarray(g).reshape(a.shape))

    return Tensor(out, op="reshape", parents=(a,), backward=backward)


def tsum(a):
    a = _as_tensor(a)

    def backward(g, a=a):
        a.accumulate(np.full(a.shape, float(g)))

    return Tensor(a.data.sum(), op="sum", parents=(a,), backward=backward)


def tmean(a):
    a = _as_tensor(a)
    n = a.size

    def backward(g, a=a, n=n):
        a.accumulate(np.full(a.shape, float(g) / n))

    return Tensor(a.data.mean(), op="mean", parents=(a,), backward=backward)


def take_last(a, indices):
    """Gather entries along the last axis; scatter-add on backward."""
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[-1]):
        raise ShapeError(f"take_last: index out of range for axis of size {a.shape[-1]}")
    out = a.data[..., idx]

    def backward(g, a=a, idx=idx):
        full = np.zeros_like(a.data)
        np.add.at(full, (..., idx), g)
        a.accumulate(full)

    return Tensor(out, op="take_last", parents=(a,), backward=backward)


def l2_norm(a):
    a = _as_tensor(a)
    norm = float(np.sqrt(np.sum(a.data * a.data)))

    def backward(g, a=a, norm=norm):
        denom = norm if norm > 1e-300 else 1e-300
        a.accumulate(float(g) * a.data / denom)

    return Tensor(norm, op="l2_norm", parents=(a,), backward=backward)


def hinge_above(a, threshold):
    """Soft L-infinity penalty: sum of max(x - threshold, 0) over all entries."""
    a = _as_tensor(a)
    t = float(threshold)
    over = a.data > t
    out = np.sum((a.data - t) * over)

    def backward(g, a=a, over=over):
        a.accumulate(float(g) * over)

    return Tensor(out, op="hinge_above", parents=(a,), backward=backward)


def conv2d(a, w, padding="same"):
    """2-D convolution, stride 1, NHWC input and (kh, kw, cin, cout) kernel."""
    a, w = _as_tensor(a), _as_tensor(w)
    if a.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: need NHWC input and 4-D kernel, got {a.shape}, {w.shape}")
    kh, kw, cin, cout = w.shape
    if a.shape[3] != cin:
        raise ShapeError(f"conv2d: input channels {a.shape[3]} != kernel channels {cin}")
    if padding != "same" or kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError("conv2d: only 'same' padding with odd kernels supported")
    ph, pw = kh // 2, kw // 2
    n, h, ww_, _ = a.shape
    xp = np.pad(a.data, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    # win: (n, h, w, cin, kh, kw) -> columns (n*h*w, kh*kw*cin)
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * h * ww_, kh * kw * cin)
    wmat = w.data.reshape(kh * kw * cin, cout)
    out = (cols @ wmat).reshape(n, h, ww_, cout)

    def backward(g, a=a, w=w, cols=cols, dims=(n, h, ww_, kh, kw, cin, cout, ph, pw)):
        n, h, ww_, kh, kw, cin, cout, ph, pw = dims
        gflat = np.ascontiguousarray(g).reshape(n * h * ww_, cout)
        gw = (cols.T @ gflat).reshape(kh, kw, cin, cout)
        # input gradient: one matmul per kernel offset keeps memory access
        # contiguous (much faster than slicing an im2col-shaped gradient)
        gxp = np.zeros((n, h + 2 * ph, ww_ + 2 * pw, cin))
        for i in range(kh):
            for j in range(kw):
                gxp[:, i:i + h, j:j + ww_, :] += (gflat @ w.data[i, j].T).reshape(n, h, ww_, cin)
        a.accumulate(gxp[:, ph:ph + h, pw:pw + ww_, :])
        w.accumulate(gw)

    return Tensor(out, op="conv2d", parents=(a, w), backward=backward)


def maxpool2(a):
    """2x2 max pooling, stride 2. Ties resolve to the first window position."""
    a = _as_tensor(a)
    if a.data.ndim != 4:
        raise ShapeError(f"maxpool2: need NHWC input, got {a.shape}")
    n, h, w, c = a.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2: H and W must be even, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    win = a.data.reshape(n, h2, 2, w2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h2, w2, c, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g, a=a, idx=idx, dims=(n, h2, w2, c)):
        n, h2, w2, c = dims
        gwin = np.zeros((n, h2, w2, c, 4))
        np.put_along_axis(gwin, idx[..., None], np.asarray(g)[..., None], axis=-1)
        ga = gwin.reshape(n, h2, w2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, h2 * 2, w2 * 2, c)
        a.accumulate(ga)

    return Tensor(out, op="maxpool2", parents=(a,), backward=backward)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy of softmax(logits) against integer labels."""
    logits = _as_tensor(logits)
    y = np.asarray(labels, dtype=np.intp)
    if logits.data.ndim != 2 or y.ndim != 1 or y.shape[0] != logits.shape[0]:
        raise ShapeError(f"softmax_cross_entropy: got logits {logits.shape}, labels {y.shape}")
    if y.size and (y.min() < 0 or y.max() >= logits.shape[1]):
        raise ShapeError("softmax_cross_entropy: label out of range")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    probs = ez / ez.sum(axis=1, keepdims=True)
    n = y.shape[0]
    loss = -np.mean(np.log(probs[np.arange(n), y]))

    def backward(g, logits=logits, probs=probs, y=y, n=n):
        gl = probs.copy()
        gl[np.arange(n), y] -= 1.0
        logits.accumulate(float(g) * gl / n)

    return Tensor(loss, op="softmax_cross_entropy", parents=(logits,), backward=backward)


def backward(loss):
    """Reverse sweep from a scalar loss; fills .grad on reachable tensors."""
    if loss.data.ndim != 0:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    seen = set()
    nodes = []
    stack = [loss]
    while stack:
        t = stack.pop()
        if t.nid in seen:
            continue
        seen.add(t.nid)
        nodes.append(t)
        stack.extend(t.parents)
    nodes.sort(key=lambda t: t.nid, reverse=True)
    loss.grad = np.ones_like(loss.data)
    for t in nodes:
        if t._backward is not None and t.grad is not None:
            t._backward(t.grad)


class Graph:
    """Named computation: `fn` maps a dict of leaf Tensors to a dict of output
    Tensors. The output named by `loss` must be scalar for gradients."""

    def __init__(self, fn, loss="loss"):
        self.fn = fn
        self.loss = loss

    def bind(self, inputs):
        leaves = {}
        for name, value in inputs.items():
            leaves[name] = value if isinstance(value, Tensor) else Tensor(value, op=f"leaf:{name}")
        outputs = self.fn(leaves)
        return leaves, outputs


def evaluate(graph, inputs):
    """Run the graph; returns named output arrays. Deterministic and pure."""
    _, outputs = graph.bind(inputs)
    return {name: t.data.copy() for name, t in outputs.items()}


def gradient(graph, inputs, wrt):
    """Gradients of the graph's scalar loss with respect to named leaves.

    Leaves not reached by the loss get zero gradients.
    """
    leaves, outputs = graph.bind(inputs)
    unknown = [name for name in wrt if name not in leaves]
    if unknown:
        raise ShapeError(f"gradient: unknown leaf names {unknown}")
    if graph.loss not in outputs:
        raise ShapeError(f"gradient: graph has no output named {graph.loss!r}")
    backward(outputs[graph.loss])
    grads = {}
    for name in wrt:
        t = leaves[name]
        grads[name] = t.grad.copy() if t.grad is not None else np.zeros_like(t.data)
    return grads


def gradient_check(graph, inputs, wrt=None, eps=1e-5):
    """Max relative error between analytic gradients and central differences."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    arrays = {k: np.asarray(v, dtype=np.float64) for k, v in inputs.items()}
    if wrt is None:
        wrt = list(arrays)
    analytic = gradient(graph, arrays, wrt)

    def loss_at(point):
        return float(evaluate(graph, point)[graph.loss])

    worst = 0.0
    for name in wrt:
        base = arrays[name]
        flat = base.reshape(-1)
        for i in range(flat.size):
            bumped = dict(arrays)
            plus = base.copy().reshape(-1)
            plus[i] += eps
            bumped[name] = plus.reshape(base.shape)
            up = loss_at(bumped)
            minus = base.copy().reshape(-1)
            minus[i] -= eps
            bumped[name] = minus.reshape(base.shape)
            down = loss_at(bumped)
            fd = (up - down) / (2 * eps)
            an = analytic[name].reshape(-1)[i]
            rel = abs(an - fd) / max(abs(an), abs(fd), 1e-12)
            worst = max(worst, rel)
    return worst


class AdamState:
    """Adam moments and step counter for a named parameter set."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.m = {}
        self.v = {}


def adam_step(params, grads, state):
    """One Adam update with bias correction; returns new parameter arrays.

    Moments live in `state` and are updated in place; `state.step` increments.
    """
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"adam_step: grad shape {g.shape} != param shape {p.shape} for {name!r}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"adam_step: non-finite gradient for {name!r}")
    state.step += 1
    t = state.step
    out = {}
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = state.beta1 * m + (1 - state.beta1) * g
        v = state.beta2 * v + (1 - state.beta2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        mhat = m / (1 - state.beta1 ** t)
        vhat = v / (1 - state.beta2 ** t)
        out[name] = p - state.lr * mhat / (np.sqrt(vhat) + state.eps)
    return out
