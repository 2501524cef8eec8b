"""Small reverse-mode autodiff engine on top of numpy arrays.

Only the coarse primitives the diffusion backbone needs are provided. Each op
computes its forward pass with vectorized numpy and, when any input requires a
gradient, records a closure that maps the output gradient to input gradients.
``Tensor.backward`` walks the recorded graph in reverse topological order.

Also here: a seedable PCG64-backed random source, a one-sided Jacobi SVD for
the attention rank analysis, and finite-difference gradient checking.
"""
from __future__ import annotations

import contextlib
import math

import numpy as np

from .errors import ArgumentError, ConfigurationError, DimensionError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """Dense array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(f"backward() without a seed gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topological_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data, parents, backward):
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------

def add(a, b):
    a = as_tensor(a)
    b = as_tensor(b, dtype=a.dtype)
    try:
        data = a.data + b.data
    except ValueError:
        raise DimensionError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(data, (a, b), backward)


def mul(a, b):
    a = as_tensor(a)
    b = as_tensor(b, dtype=a.dtype)
    try:
        data = a.data * b.data
    except ValueError:
        raise DimensionError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(data, (a, b), backward)


def reshape(x, shape):
    x = as_tensor(x)
    data = x.data.reshape(shape)
    return _result(data, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes):
    x = as_tensor(x)
    inv = np.argsort(axes)
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def concat(tensors, axis):
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise DimensionError(f"concat along axis {axis}: shapes {ref} and {t.shape} disagree")
    data = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors)))

    return _result(data, tensors, backward)


def slice_axis(x, axis, start, stop):
    """``x[..., start:stop, ...]`` along ``axis``."""
    x = as_tensor(x)
    ax = axis % x.ndim
    index = [slice(None)] * x.ndim
    index[ax] = slice(start, stop)
    index = tuple(index)

    def backward(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return _result(x.data[index], (x,), backward)


def sum_all(x):
    x = as_tensor(x)
    return _result(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean_all(x):
    x = as_tensor(x)
    n = x.data.size
    return _result(np.asarray(x.data.mean()), (x,), lambda g: (np.full(x.shape, g / n, dtype=x.dtype),))


def mse(pred, target):
    """Mean squared error against a constant target array."""
    pred = as_tensor(pred)
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise DimensionError(f"mse: prediction {pred.shape} vs target {target.shape}")
    diff = pred.data - target
    n = diff.size
    return _result(np.asarray(np.mean(diff * diff)), (pred,), lambda g: (g * 2.0 / n * diff,))


def embedding(table, ids):
    table = as_tensor(table)
    ids = np.asarray(ids)

    def backward(g):
        dt = np.zeros_like(table.data)
        np.add.at(dt, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (dt,)

    return _result(table.data[ids], (table,), backward)


# ---------------------------------------------------------------------------
# network primitives
# ---------------------------------------------------------------------------

def linear(x, W, b=None):
    """Affine map over the last axis: ``x @ W + b``."""
    x, W = as_tensor(x), as_tensor(W)
    if W.ndim != 2 or x.shape[-1] != W.shape[0]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {W.shape}")
    parents = [x, W]
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ W.data
    if b is not None:
        b = as_tensor(b)
        if b.shape != (W.shape[1],):
            raise DimensionError(f"linear: bias {b.shape} incompatible with weight {W.shape}")
        out += b.data
        parents.append(b)
    out = out.reshape(lead + (W.shape[1],))

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ W.data.T).reshape(x.shape) if x.requires_grad else None
        gW = x2.T @ g2 if W.requires_grad else None
        if b is None:
            return gx, gW
        return gx, gW, g2.sum(axis=0)

    return _result(out, parents, backward)


def softmax_rows(x):
    """Softmax over the last axis, stabilized by subtracting the row max."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (x,), backward)


LAYER_NORM_EPS = 1e-5


def layer_norm(x, gain, bias):
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise DimensionError(f"layer_norm: gain {gain.shape} / bias {bias.shape} vs input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        dxhat = g * gain.data
        gx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        axes = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _result(out, (x, gain, bias), backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x):
    """GELU, tanh approximation."""
    x = as_tensor(x)
    xd = x.data
    x2 = xd * xd
    u = x2 * 0.044715
    u += 1.0
    u *= xd
    u *= _GELU_C
    th = np.tanh(u, out=u)
    half = th + 1.0
    half *= 0.5
    out = xd * half

    def backward(g):
        du = x2 * (3 * 0.044715 * _GELU_C)
        du += _GELU_C
        sech2 = 1.0 - th * th
        sech2 *= 0.5
        sech2 *= xd
        sech2 *= du
        sech2 += half
        return (g * sech2,)

    return _result(out, (x,), backward)


def scaled_dot_product_attention(q, k, v, heads):
    """Multi-head attention on already projected ``[B, L, d]`` queries/keys/values.

    Returns ``(context [B, Lq, d], weights [B, heads, Lq, Lkv])``; the weights
    are a plain array (not differentiable), intended for capture.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    B, Lq, d = q.shape
    Lk = k.shape[1]
    if d % heads:
        raise ConfigurationError(f"width {d} is not divisible by {heads} heads")
    if k.shape != (B, Lk, d) or v.shape != (B, Lk, d):
        raise DimensionError(f"attention: q {q.shape}, k {k.shape}, v {v.shape}")
    dh = d // heads
    scale = 1.0 / math.sqrt(dh)
    qh = q.data.reshape(B, Lq, heads, dh).transpose(0, 2, 1, 3)
    kh = k.data.reshape(B, Lk, heads, dh).transpose(0, 2, 1, 3)
    vh = v.data.reshape(B, Lk, heads, dh).transpose(0, 2, 1, 3)
    s = (qh @ kh.transpose(0, 1, 3, 2)) * scale
    s -= s.max(axis=-1, keepdims=True)
    a = np.exp(s)
    a /= a.sum(axis=-1, keepdims=True)
    ctx = (a @ vh).transpose(0, 2, 1, 3).reshape(B, Lq, d)

    def backward(g):
        go = g.reshape(B, Lq, heads, dh).transpose(0, 2, 1, 3)
        da = go @ vh.transpose(0, 1, 3, 2)
        ds = a * (da - (da * a).sum(axis=-1, keepdims=True)) * scale
        gq = (ds @ kh).transpose(0, 2, 1, 3).reshape(B, Lq, d)
        gk = (ds.transpose(0, 1, 3, 2) @ qh).transpose(0, 2, 1, 3).reshape(B, Lk, d)
        gv = (a.transpose(0, 1, 3, 2) @ go).transpose(0, 2, 1, 3).reshape(B, Lk, d)
        return gq, gk, gv

    return _result(ctx, (q, k, v), backward), a


def multi_head_attention(q_src, kv_src, params, heads):
    """Project, attend, and re-project.

    ``params`` maps ``wq, bq, wk, bk, wv, bv, wo, bo`` to tensors. Inputs may be
    ``[L, d]`` or ``[B, L, d]``. Self-attention is the case ``q_src is kv_src``.
    Returns ``(out, attn)`` with ``attn`` shaped ``[heads, Lq, Lkv]`` (or with a
    leading batch axis for batched input).
    """
    q_src, kv_src = as_tensor(q_src), as_tensor(kv_src)
    d = q_src.shape[-1]
    if d % heads:
        raise ConfigurationError(f"width {d} is not divisible by {heads} heads")
    unbatched = q_src.ndim == 2
    if unbatched:
        q_src = reshape(q_src, (1,) + q_src.shape)
        kv_src = reshape(kv_src, (1,) + kv_src.shape)
    q = linear(q_src, params["wq"], params["bq"])
    k = linear(kv_src, params["wk"], params["bk"])
    v = linear(kv_src, params["wv"], params["bv"])
    ctx, attn = scaled_dot_product_attention(q, k, v, heads)
    out = linear(ctx, params["wo"], params["bo"])
    if unbatched:
        return reshape(out, out.shape[1:]), attn[0]
    return out, attn


# ---------------------------------------------------------------------------
# random source
# ---------------------------------------------------------------------------

class RngState:
    """Seeded PCG64 stream.

    ``position`` counts the scalar values drawn so far. Two states built from
    the same seed and asked for the same sequence of draws produce bitwise
    identical values.
    """

    def __init__(self, seed):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.PCG64(self.seed))
        self.position = 0

    def __repr__(self):
        return f"RngState(seed={self.seed}, position={self.position})"

    def normal(self, shape, dtype=np.float32):
        out = self._gen.standard_normal(shape)
        self.position += out.size
        return out.astype(dtype, copy=False)

    def uniform(self, shape):
        out = self._gen.random(shape)
        self.position += out.size
        return out

    def integers(self, low, high, shape):
        """Uniform integers in ``[low, high]`` inclusive."""
        out = self._gen.integers(low, high, size=shape, endpoint=True)
        self.position += out.size
        return out

    def truncated_normal(self, shape, std, dtype=np.float32):
        """Normal draws resampled until inside two standard deviations."""
        out = self._gen.standard_normal(shape)
        self.position += out.size
        bad = np.abs(out) > 2.0
        while bad.any():
            out[bad] = self._gen.standard_normal(int(bad.sum()))
            self.position += int(bad.sum())
            bad = np.abs(out) > 2.0
        return (out * std).astype(dtype, copy=False)

    def spawn(self, index):
        """Independent child stream keyed by ``(seed, index)``."""
        ss = np.random.SeedSequence([self.seed & 0xFFFFFFFF, self.seed >> 32, int(index)])
        return RngState(int(ss.generate_state(1, np.uint64)[0]))


def normal_draw(rng, shape, dtype=np.float32):
    return Tensor(rng.normal(shape, dtype=dtype))


# ---------------------------------------------------------------------------
# singular values
# ---------------------------------------------------------------------------

def svd_singular_values(M, k=None, tol=1e-15, max_sweeps=100):
    """Top-``k`` singular values of a 2-D matrix, descending.

    One-sided (Hestenes) Jacobi: columns are rotated pairwise until mutually
    orthogonal; the singular values are then the column norms.
    """
    A = np.array(M.data if isinstance(M, Tensor) else M, dtype=np.float64)
    if A.ndim != 2 or min(A.shape) < 1:
        raise DimensionError(f"svd needs a non-empty 2-D matrix, got shape {A.shape}")
    full = min(A.shape)
    if k is None:
        k = full
    if not 1 <= k <= full:
        raise ArgumentError(f"k={k} outside [1, {full}] for a {A.shape[0]}x{A.shape[1]} matrix")
    if A.shape[1] > A.shape[0]:
        A = A.T.copy()
    n = A.shape[1]
    for _ in range(max_sweeps):
        rotated = False
        for i in range(n - 1):
            for j in range(i + 1, n):
                ai, aj = A[:, i], A[:, j]
                alpha = ai @ ai
                beta = aj @ aj
                gamma = ai @ aj
                if gamma == 0.0 or abs(gamma) <= tol * math.sqrt(alpha * beta):
                    continue
                rotated = True
                diff = beta - alpha
                if abs(diff) > 1e150 * abs(gamma):
                    t = gamma / diff  # limit of the formula below as zeta -> inf
                else:
                    zeta = diff / (2.0 * gamma)
                    t = math.copysign(1.0, zeta) / (abs(zeta) + math.hypot(1.0, zeta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t
                new_i = c * ai - s * aj
                A[:, j] = s * ai + c * aj
                A[:, i] = new_i
        if not rotated:
            break
    sv = np.sqrt((A * A).sum(axis=0))
    return sorted(sv.tolist(), reverse=True)[:k]


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def numerical_gradient(f, x, eps=1e-6):
    """Central differences of scalar ``f()`` w.r.t. array ``x`` (perturbed in place)."""
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + eps
        fp = float(f())
        x[idx] = old - eps
        fm = float(f())
        x[idx] = old
        g[idx] = (fp - fm) / (2 * eps)
    return g


def relative_error(analytic, numeric, floor=1e-8):
    """``||a - n|| / max(||a||, ||n||, floor)``.

    The floor keeps gradients that are analytically zero (a key bias under
    softmax, for instance) from turning finite-difference noise into a large
    relative error.
    """
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / denom)


def gradcheck(fn, inputs, eps=1e-6):
    """Compare backprop gradients of scalar ``fn(*tensors)`` with central differences.

    ``inputs`` are float64 arrays. Returns the worst relative error over inputs.
    """
    tensors = [Tensor(x, requires_grad=True) for x in inputs]
    out = fn(*tensors)
    out.backward()
    worst = 0.0
    def value():
        with no_grad():
            return fn(*tensors).data

    for t in tensors:
        num = numerical_gradient(value, t.data, eps)
        ana = t.grad if t.grad is not None else np.zeros_like(t.data)
        worst = max(worst, relative_error(ana, num))
    return worst
