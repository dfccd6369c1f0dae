"""Reverse-mode automatic differentiation over numpy arrays.

A small tape-based engine: `Tensor` wraps an ndarray, ops build a graph,
`Tensor.backward()` fills the gradient slots of every reachable tensor
with ``requires_grad=True``. Heavy recurrent/convolutional kernels are
fused ops with hand-derived backward rules so the graph stays shallow.

Float64 is the default dtype; float32 is supported for training speed.
Binary ops refuse to mix the two so a float64 constant cannot silently
promote a float32 training graph.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterator

import numpy as np

_FLOAT_DTYPES = (np.float32, np.float64)

_grad_enabled = True


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph construction inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """An ndarray with an optional gradient slot and a backward edge."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    # -- autodiff ------------------------------------------------------------

    def backward(self) -> None:
        """Backpropagate from a scalar output through the recorded graph."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar output")
        topo: list[Tensor] = []
        seen: set[int] = set()

        def visit(node: Tensor) -> None:
            if id(node) in seen or not node.requires_grad:
                return
            seen.add(id(node))
            for p in node._parents:
                visit(p)
            topo.append(node)

        visit(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                node.grad = None  # interior grads are scratch; free eagerly

    # -- operator sugar --------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other, self.dtype)))

    def __rsub__(self, other):
        return add(_wrap(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)


def _wrap(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _check_dtypes(a: Tensor, b: Tensor) -> None:
    if a.dtype != b.dtype:
        raise TypeError(f"mixed dtypes in op: {a.dtype} vs {b.dtype}")


def _make(data: np.ndarray, parents: tuple[Tensor, ...],
          backward: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise / structural ops ---------------------------------------------


def add(a: Tensor, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _wrap(a, b.dtype)
    b = _wrap(b, a.dtype)
    _check_dtypes(a, b)
    out_data = a.data + b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, -g)

    return _make(-a.data, (a,), backward)


def mul(a: Tensor, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _wrap(a, b.dtype)
    b = _wrap(b, a.dtype)
    _check_dtypes(a, b)
    out_data = a.data * b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes(a, b)
    out_data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            _accumulate(a, _unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            _accumulate(b, _unbroadcast(gb, b.data.shape))

    return _make(out_data, (a, b), backward)


def transpose_last2(a: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, np.swapaxes(g, -1, -2))

    return _make(np.swapaxes(a.data, -1, -2), (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape

    def backward(g):
        _accumulate(a, g.reshape(old))

    return _make(a.data.reshape(shape), (a,), backward)


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.data.shape))
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.data.shape))

    return _make(out_data, (a,), backward)


def tensor_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else a.data.shape[axis]

    def backward(g):
        scaled = g / np.asarray(count, dtype=g.dtype)
        if axis is None:
            _accumulate(a, np.broadcast_to(scaled, a.data.shape))
            return
        if not keepdims:
            scaled = np.expand_dims(scaled, axis)
        _accumulate(a, np.broadcast_to(scaled, a.data.shape))

    return _make(out_data, (a,), backward)


def relu(a: Tensor) -> Tensor:
    out_data = np.maximum(a.data, 0)

    def backward(g):
        _accumulate(a, g * (a.data > 0))

    return _make(out_data, (a,), backward)


def _sigmoid_stable(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid_stable(a.data)

    def backward(g):
        _accumulate(a, g * y * (1.0 - y))

    return _make(y, (a,), backward)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)

    def backward(g):
        _accumulate(a, g * (1.0 - y * y))

    return _make(y, (a,), backward)


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)

    def backward(g):
        _accumulate(a, g * y)

    return _make(y, (a,), backward)


def log(a: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, g / a.data)

    return _make(np.log(a.data), (a,), backward)


def square(a: Tensor) -> Tensor:
    def backward(g):
        _accumulate(a, g * (2.0 * a.data))

    return _make(a.data * a.data, (a,), backward)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    out_data = np.clip(a.data, lo, hi)
    inside = (a.data >= lo) & (a.data <= hi)

    def backward(g):
        _accumulate(a, g * inside)

    return _make(out_data, (a,), backward)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis, shifted by the row max for stability."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        _accumulate(a, (g - dot) * y)

    return _make(y, (a,), backward)


# -- fused kernels -------------------------------------------------------------


def conv1d(x: Tensor, w: Tensor, b: Tensor | None, dilation: int) -> Tensor:
    """Causal dilated 1-d convolution in feature-first layout.

    x: (f_in, rows, L) activation planes, w: (f_out, f_in, k), b: (f_out,).
    Output position t sees taps x[t - (k-1-j)*dilation]; the left edge is
    zero-padded so the output length stays L.
    """
    if w.data.ndim != 3 or w.data.shape[2] < 1:
        raise ValueError("kernel must have shape (f_out, f_in, k) with k >= 1")
    if dilation < 1:
        raise ValueError("dilation must be a positive integer")
    _check_dtypes(x, w)
    f_out, f_in, k = w.data.shape
    if x.data.ndim != 3 or x.data.shape[0] != f_in:
        raise ValueError(
            f"input has {x.data.shape[0] if x.data.ndim == 3 else '?'} feature "
            f"planes, kernel expects {f_in}")
    _, rows, length = x.data.shape
    pad = (k - 1) * dilation
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, 0)))
    wd = w.data
    out = np.empty((f_out, rows, length), dtype=x.dtype)
    scratch = np.empty((rows, length), dtype=x.dtype)
    for o in range(f_out):
        acc = out[o]
        first = True
        for i in range(f_in):
            for j in range(k):
                seg = xp[i, :, j * dilation:j * dilation + length]
                if first:
                    np.multiply(seg, wd[o, i, j], out=acc)
                    first = False
                else:
                    np.multiply(seg, wd[o, i, j], out=scratch)
                    acc += scratch
        if b is not None:
            acc += b.data[o]

    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        if b is not None and b.requires_grad:
            _accumulate(b, g.sum(axis=(1, 2)))
        if w.requires_grad:
            dw = np.empty_like(wd)
            for o in range(f_out):
                go = g[o]
                for i in range(f_in):
                    for j in range(k):
                        seg = xp[i, :, j * dilation:j * dilation + length]
                        dw[o, i, j] = np.einsum("rl,rl->", go, seg)
            _accumulate(w, dw)
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            tmp = np.empty((rows, length), dtype=x.dtype)
            for i in range(f_in):
                for o in range(f_out):
                    for j in range(k):
                        np.multiply(g[o], wd[o, i, j], out=tmp)
                        dxp[i, :, j * dilation:j * dilation + length] += tmp
            _accumulate(x, dxp[:, :, pad:])

    return _make(out, parents, backward)


def gru(x_steps: np.ndarray, wz: Tensor, uz: Tensor, bz: Tensor,
        wr: Tensor, ur: Tensor, br: Tensor,
        wh: Tensor, uh: Tensor, bh: Tensor) -> Tensor:
    """Gated recurrent unit over a constant input sequence.

    x_steps: (L, N, D) ndarray (the input is data, never a graph node).
    Gate equations: z = sig(x W_z^T + h U_z^T + b_z), r likewise,
    cand = tanh(x W_h^T + (r*h) U_h^T + b_h), h' = z*h + (1-z)*cand.
    Returns the final hidden state (N, H).
    """
    if isinstance(x_steps, Tensor):
        if x_steps.requires_grad:
            raise NotImplementedError("gru does not propagate input gradients")
        x_steps = x_steps.data
    length, n, d = x_steps.shape
    if length < 1:
        raise ValueError("sequence length must be >= 1")
    hdim = wz.data.shape[0]
    if wz.data.shape[1] != d:
        raise ValueError(f"input feature dim {d} does not match W ({wz.data.shape})")
    dt = wz.dtype
    x2d = x_steps.reshape(length * n, d)
    # input projections for the whole sequence in one GEMM each
    xz = (x2d @ wz.data.T).reshape(length, n, hdim) + bz.data
    xr = (x2d @ wr.data.T).reshape(length, n, hdim) + br.data
    xh = (x2d @ wh.data.T).reshape(length, n, hdim) + bh.data

    hs = np.zeros((length + 1, n, hdim), dtype=dt)
    zs = np.empty((length, n, hdim), dtype=dt)
    rs = np.empty((length, n, hdim), dtype=dt)
    cs = np.empty((length, n, hdim), dtype=dt)
    rh = np.empty((length, n, hdim), dtype=dt)
    h = hs[0]
    for t in range(length):
        z = _sigmoid_stable(xz[t] + h @ uz.data.T)
        r = _sigmoid_stable(xr[t] + h @ ur.data.T)
        rht = r * h
        c = np.tanh(xh[t] + rht @ uh.data.T)
        h = z * h + (1.0 - z) * c
        zs[t], rs[t], cs[t], rh[t] = z, r, c, rht
        hs[t + 1] = h

    params = (wz, uz, bz, wr, ur, br, wh, uh, bh)

    def backward(g):
        dh = np.asarray(g, dtype=dt).copy()
        daz = np.empty((length, n, hdim), dtype=dt)
        dar = np.empty((length, n, hdim), dtype=dt)
        dac = np.empty((length, n, hdim), dtype=dt)
        for t in range(length - 1, -1, -1):
            z, r, c, hprev = zs[t], rs[t], cs[t], hs[t]
            dz = dh * (hprev - c) * z * (1.0 - z)
            dc = dh * (1.0 - z) * (1.0 - c * c)
            dhprev = dh * z
            d_rh = dc @ uh.data
            dr = d_rh * hprev * r * (1.0 - r)
            dhprev += d_rh * r
            dhprev += dr @ ur.data
            dhprev += dz @ uz.data
            daz[t], dar[t], dac[t] = dz, dr, dc
            dh = dhprev
        def flat(a):
            return a.reshape(length * n, hdim)

        if wz.requires_grad or wr.requires_grad or wh.requires_grad:
            _accumulate(wz, flat(daz).T @ x2d)
            _accumulate(wr, flat(dar).T @ x2d)
            _accumulate(wh, flat(dac).T @ x2d)
        if uz.requires_grad or ur.requires_grad or uh.requires_grad:
            hprev_flat = hs[:length].reshape(length * n, hdim)
            _accumulate(uz, flat(daz).T @ hprev_flat)
            _accumulate(ur, flat(dar).T @ hprev_flat)
            _accumulate(uh, flat(dac).T @ flat(rh))
        if bz.requires_grad or br.requires_grad or bh.requires_grad:
            _accumulate(bz, flat(daz).sum(axis=0))
            _accumulate(br, flat(dar).sum(axis=0))
            _accumulate(bh, flat(dac).sum(axis=0))

    return _make(hs[length].copy(), params, backward)


# -- parameter collections ------------------------------------------------------


class ParamSet:
    """Ordered, uniquely named collection of parameter tensors."""

    def __init__(self):
        self._tensors: dict[str, Tensor] = {}

    def add(self, name: str, data, trainable: bool = True) -> Tensor:
        if name in self._tensors:
            raise ValueError(f"duplicate parameter name: {name}")
        t = Tensor(np.asarray(data), requires_grad=trainable)
        self._tensors[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> list[str]:
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def trainable_items(self):
        return [(n, t) for n, t in self._tensors.items() if t.requires_grad]

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.grad = None

    def freeze(self) -> None:
        for t in self._tensors.values():
            t.requires_grad = False

    def copy(self) -> "ParamSet":
        dup = ParamSet()
        for n, t in self._tensors.items():
            dup.add(n, t.data.copy(), trainable=t.requires_grad)
        return dup

    def n_scalars(self) -> int:
        return sum(t.data.size for t in self._tensors.values())


# -- spec-level numeric surface ------------------------------------------------


def dilated_conv1d(x, w, dilation: int = 1, bias: float = 0.0) -> np.ndarray:
    """Causal dilated convolution of a single sequence by a 1-d kernel.

    y[t] = bias + sum_j w[j] * x[t - (k-1-j)*dilation], out-of-range x = 0.
    """
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 1 or w.size < 1:
        raise ValueError("kernel must be a non-empty 1-d array")
    if dilation < 1:
        raise ValueError("dilation must be a positive integer")
    xt = Tensor(x.reshape(1, 1, -1))
    wt = Tensor(w.reshape(1, 1, -1))
    bt = Tensor(np.array([bias], dtype=np.float64))
    return conv1d(xt, wt, bt, dilation).data.reshape(-1)


def dense(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map x -> x @ w^T + b for x of shape (..., d_in)."""
    if x.data.shape[-1] != w.data.shape[-1]:
        raise ValueError(
            f"dense shape mismatch: input {x.data.shape} vs weight {w.data.shape}")
    out = matmul(x, transpose_last2(w))
    if b is not None:
        out = add(out, b)
    return out


def gru_seq(x, params: ParamSet, prefix: str = "gru") -> Tensor:
    """Run a GRU over a (D, L) series; returns the final hidden state (H,)."""
    x = np.asarray(x)
    if x.ndim != 2:
        raise ValueError("gru_seq expects a (channels, length) array")
    steps = np.ascontiguousarray(x.T, dtype=params[f"{prefix}.Wz"].dtype)[:, None, :]
    h = gru(steps,
            params[f"{prefix}.Wz"], params[f"{prefix}.Uz"], params[f"{prefix}.bz"],
            params[f"{prefix}.Wr"], params[f"{prefix}.Ur"], params[f"{prefix}.br"],
            params[f"{prefix}.Wh"], params[f"{prefix}.Uh"], params[f"{prefix}.bh"])
    return reshape(h, (h.data.shape[-1],))


def bce_l2_loss(p_hat: Tensor, y, params: ParamSet | None = None,
                lam: float = 0.0, pos_weight: float = 1.0,
                clamp_eps: float = 1e-12) -> Tensor:
    """Mean binary cross-entropy plus (lam/2) * squared-l2 of trainable params.

    Probabilities are clamped away from {0, 1} before the logs. The clamp
    floor is widened in float32 where 1 - 1e-12 rounds to 1.
    """
    n = p_hat.data.size
    if n == 0:
        raise ValueError("loss undefined for an empty batch")
    if lam < 0:
        raise ValueError("lam must be >= 0")
    dt = p_hat.dtype
    eps = max(clamp_eps, 1e-7) if dt == np.float32 else clamp_eps
    y = np.asarray(y, dtype=dt).reshape(p_hat.data.shape)
    pc = clamp(p_hat, eps, 1.0 - eps)
    pos = mul(log(pc), y * pos_weight)
    negt = mul(log(add(_wrap(np.asarray(1.0, dtype=dt), dt), neg(pc))), 1.0 - y)
    loss = neg(tensor_mean(add(pos, negt)))
    if params is not None and lam > 0.0:
        reg = None
        for _, t in params.trainable_items():
            term = tensor_sum(square(t))
            reg = term if reg is None else add(reg, term)
        if reg is not None:
            loss = add(loss, mul(reg, 0.5 * lam))
    return loss


def grad_check(f: Callable[[], Tensor], params: ParamSet, eps: float = 1e-6,
               max_coords_per_tensor: int | None = None,
               rng: np.random.Generator | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    f must rebuild the scalar loss from the current parameter values on
    every call. Relative error per coordinate is
    |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    params.zero_grad()
    out = f()
    out.backward()
    analytic = {
        name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
        for name, t in params.trainable_items()
    }
    if rng is None:
        rng = np.random.default_rng(0)
    worst = 0.0
    for name, t in params.trainable_items():
        flat = t.data.reshape(-1)
        size = flat.size
        if max_coords_per_tensor is not None and size > max_coords_per_tensor:
            coords = rng.choice(size, size=max_coords_per_tensor, replace=False)
        else:
            coords = range(size)
        ana = analytic[name].reshape(-1)
        for idx in coords:
            orig = flat[idx]
            flat[idx] = orig + eps
            f_plus = f().item()
            flat[idx] = orig - eps
            f_minus = f().item()
            flat[idx] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            err = abs(ana[idx] - numeric) / max(1e-8, abs(ana[idx]) + abs(numeric))
            worst = max(worst, err)
    return worst


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...],
                   fan_in: int, fan_out: int, dtype=np.float64) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)
