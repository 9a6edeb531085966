"""A small dense-tensor graph with reverse-mode gradients, Adam and checkpoints.

Tensors wrap numpy arrays. Every op returns a new :class:`Tensor` that remembers
its parents and a closure propagating the output gradient back to them; only
tensors that (transitively) require gradients are recorded.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

PROB_FLOOR = 1e-12


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data)
        if self.data.dtype.kind != "f":
            self.data = self.data.astype(np.float32)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def numpy(self):
        return self.data

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self):
        """Fill ``.grad`` of every gradient-requiring leaf reachable from this scalar."""
        if self.data.size != 1:
            raise ShapeError(f"backward needs a scalar output, got shape {self.shape}")
        if not self.requires_grad:
            raise ValueError("output does not depend on any tensor that requires gradients")
        order, seen, stack = [], set(), [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                # interior gradients are not needed once propagated
                node.grad = None
                node._parents = ()
                node._backward = None


def tensor(data, requires_grad=False, dtype=np.float32):
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=requires_grad)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _make(data, parents, backward):
    parents = tuple(p for p in parents if p.requires_grad)
    if not parents:
        return Tensor(data)
    return Tensor(data, True, parents, backward)


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# -- primitives ---------------------------------------------------------------

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("add", a, b)
    out = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))
    return _make(out, (a, b), backward)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("mul", a, b)
    out = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))
    return _make(out, (a, b), backward)


def scale(a, c: float):
    a = _as_tensor(a)
    out = a.data * a.data.dtype.type(c)
    return _make(out, (a,), lambda g: a._accumulate(g * a.data.dtype.type(c)))


def matmul(a, b):
    """Batched matrix product over the last two axes, with broadcasting of the rest."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))
    return _make(out, (a, b), backward)


def linear(x, w, b=None):
    """``x @ w + b`` over the last axis of ``x``; ``w`` is ``(in, out)``."""
    x, w = _as_tensor(x), _as_tensor(w)
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {w.shape}")
    if b is not None and (b.ndim != 1 or b.shape[0] != w.shape[1]):
        raise ShapeError(f"linear: bias {b.shape} does not match weight {w.shape}")
    x2 = x.data.reshape(-1, w.shape[0])
    out = x2 @ w.data
    if b is not None:
        out += b.data
    out = out.reshape(*x.shape[:-1], w.shape[1])

    def backward(g):
        g2 = g.reshape(-1, w.shape[1])
        if x.requires_grad:
            x._accumulate((g2 @ w.data.T).reshape(x.shape))
        if w.requires_grad:
            w._accumulate(x2.T @ g2)
        if b is not None and b.requires_grad:
            b._accumulate(g2.sum(axis=0))
    return _make(out, (x, w) if b is None else (x, w, b), backward)


def relu(a):
    a = _as_tensor(a)
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: a._accumulate(g * mask))


def identity(a):
    return _as_tensor(a)


def concat(tensors, axis=-1):
    ts = [_as_tensor(t) for t in tensors]
    nd = ts[0].ndim
    ax = axis % nd
    for t in ts[1:]:
        if t.ndim != nd or any(t.shape[i] != ts[0].shape[i] for i in range(nd) if i != ax):
            raise ShapeError(f"concat along axis {axis}: shapes {ts[0].shape} and {t.shape} differ")
    out = np.concatenate([t.data for t in ts], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def backward(g):
        for t, lo, hi in zip(ts, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                idx = [slice(None)] * nd
                idx[ax] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])
    return _make(out, ts, backward)


def mean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size // max(out.size, 1)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g / count, a.shape))
    return _make(out, (a,), backward)


def total(a):
    a = _as_tensor(a)
    return _make(a.data.sum(), (a,), lambda g: a._accumulate(np.broadcast_to(g, a.shape)))


def reshape(a, shape):
    a = _as_tensor(a)
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda g: a._accumulate(g.reshape(a.shape)))


def transpose(a, axes):
    a = _as_tensor(a)
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), lambda g: a._accumulate(g.transpose(inv)))


def expand(a, shape):
    """Broadcast ``a`` to ``shape`` (numpy rules); the gradient sums back."""
    a = _as_tensor(a)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError(f"expand: cannot broadcast {a.shape} to {tuple(shape)}") from None
    return _make(out, (a,), lambda g: a._accumulate(_unbroadcast(g, a.shape)))


def softmax(a, axis=-1):
    a = _as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        a._accumulate(p * (g - (g * p).sum(axis=axis, keepdims=True)))
    return _make(p, (a,), backward)


def layer_norm(x, gain=None, shift=None, eps=1e-5):
    """Normalize over the last axis, then apply the optional affine gain/shift."""
    x = _as_tensor(x)
    d = x.shape[-1]
    for name, p in (("gain", gain), ("shift", shift)):
        if p is not None and p.shape != (d,):
            raise ShapeError(f"layer_norm: {name} {p.shape} does not match feature width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat
    if gain is not None:
        out = out * gain.data
    if shift is not None:
        out = out + shift.data
    parents = tuple(p for p in (x, gain, shift) if p is not None)

    def backward(g):
        if gain is not None and gain.requires_grad:
            gain._accumulate((g * xhat).reshape(-1, d).sum(axis=0))
        if shift is not None and shift.requires_grad:
            shift._accumulate(g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gh = g * gain.data if gain is not None else g
            x._accumulate(inv * (gh - gh.mean(axis=-1, keepdims=True)
                                 - xhat * (gh * xhat).mean(axis=-1, keepdims=True)))
    return _make(out, parents, backward)


def cross_entropy(probs, target):
    """Mean over frames (and any batch axes) of ``-log p[target]``.

    ``probs`` is ``(..., T, M)`` with rows summing to one; ``target`` is a one-hot
    code of length ``M``, or ``(B, M)`` one-hot rows for a ``(B, T, M)`` batch.
    """
    probs = _as_tensor(probs)
    target = np.asarray(target)
    m = probs.shape[-1]
    if target.shape[-1] != m:
        raise ShapeError(f"cross_entropy: target has {target.shape[-1]} classes, predictions {m}")
    if not np.allclose(probs.data.sum(axis=-1), 1.0, atol=1e-5):
        raise ValueError("cross_entropy: prediction rows must sum to 1")
    if target.ndim == 1:
        onehot = target
    else:
        if target.ndim != probs.ndim - 1 or target.shape[:-1] != probs.shape[:-2]:
            raise ShapeError(f"cross_entropy: target {target.shape} does not match {probs.shape}")
        onehot = np.expand_dims(target, -2)
    onehot = np.broadcast_to(onehot.astype(probs.data.dtype), probs.shape)
    p_t = (probs.data * onehot).sum(axis=-1)
    n_rows = p_t.size
    floored = np.maximum(p_t, PROB_FLOOR)
    loss = -np.log(floored).mean()

    def backward(g):
        coef = np.where(p_t >= PROB_FLOOR, -1.0 / floored, 0.0) / n_rows
        probs._accumulate(g * onehot * coef[..., None].astype(probs.data.dtype))
    return _make(np.asarray(loss, dtype=probs.data.dtype), (probs,), backward)


# -- parameters and optimization ---------------------------------------------

class ParamStore:
    """Named trainable tensors plus their Adam state."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}
        self.adam_m: dict[str, np.ndarray] = {}
        self.adam_v: dict[str, np.ndarray] = {}
        self.adam_t: dict[str, int] = {}

    def add(self, name: str, value) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=self.dtype), requires_grad=True)
        self.params[name] = t
        return t

    def __getitem__(self, name) -> Tensor:
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def items(self):
        return self.params.items()

    def n_values(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.params.items()}

    def astype(self, dtype) -> "ParamStore":
        out = ParamStore(dtype)
        for k, t in self.params.items():
            out.add(k, t.data)
        return out


def adam_step(store: ParamStore, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8):
    """One bias-corrected Adam update of every parameter; gradients are cleared."""
    missing = [k for k, t in store.items() if t.grad is None]
    if missing:
        raise ValueError(f"adam_step: no gradient for {', '.join(missing[:5])}"
                         + (" ..." if len(missing) > 5 else ""))
    for k, t in store.items():
        g = t.grad
        m = store.adam_m.get(k)
        if m is None:
            m = store.adam_m[k] = np.zeros_like(t.data)
            store.adam_v[k] = np.zeros_like(t.data)
        v = store.adam_v[k]
        step = store.adam_t.get(k, 0) + 1
        store.adam_t[k] = step
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** step)
        v_hat = v / (1 - beta2 ** step)
        t.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(t.data.dtype)
        t.grad = None


# -- checkpoints --------------------------------------------------------------

MAGIC = b"ADHC"
FORMAT_VERSION = 1


def _write_blocks(path, blocks: dict[str, np.ndarray]):
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(blocks)))
        for name, arr in blocks.items():
            raw = name.encode("utf-8")
            arr = np.asarray(arr, dtype="<f4")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes(order="C"))


def _read_blocks(path) -> dict[str, np.ndarray]:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read checkpoint {path}: {exc}") from exc
    if buf[:4] != MAGIC:
        raise ValueError(f"{path} is not a checkpoint file")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    blocks = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", buf, off)
            off += 4
            name = buf[off:off + n].decode("utf-8")
            off += n
            (nd,) = struct.unpack_from("<I", buf, off)
            off += 4
            shape = struct.unpack_from(f"<{nd}I", buf, off)
            off += 4 * nd
            size = int(np.prod(shape, dtype=np.int64))
            arr = np.frombuffer(buf, dtype="<f4", count=size, offset=off).reshape(shape)
            off += 4 * size
            blocks[name] = arr.copy()
    except (struct.error, ValueError) as exc:
        raise ValueError(f"{path}: truncated or corrupt checkpoint") from exc
    return blocks


def adam_state_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".adam")


def save_checkpoint(store: ParamStore, path, with_optimizer: bool = True):
    _write_blocks(path, {k: t.data for k, t in store.items()})
    if with_optimizer:
        state = {}
        for k in store.params:
            if k in store.adam_m:
                state[f"m:{k}"] = store.adam_m[k]
                state[f"v:{k}"] = store.adam_v[k]
                state[f"t:{k}"] = np.array([store.adam_t[k]], dtype=np.float32)
        _write_blocks(adam_state_path(path), state)


def load_checkpoint(path, store: ParamStore | None = None, with_optimizer: bool = True) -> ParamStore:
    """Load parameters (and Adam state when present) into ``store`` or a new one.

    When ``store`` is given, names and shapes must match it exactly.
    """
    blocks = _read_blocks(path)
    if store is None:
        store = ParamStore()
        for k, arr in blocks.items():
            store.add(k, arr)
    else:
        if set(blocks) != set(store.params):
            extra = sorted(set(blocks) ^ set(store.params))[:5]
            raise ValueError(f"checkpoint {path} does not match the model parameters ({extra})")
        for k, arr in blocks.items():
            if arr.shape != store[k].shape:
                raise ValueError(f"checkpoint {path}: {k} has shape {arr.shape}, "
                                 f"model expects {store[k].shape}")
            store[k].data = arr.astype(store.dtype)
    state_path = adam_state_path(path)
    if with_optimizer and state_path.exists():
        state = _read_blocks(state_path)
        for k in store.params:
            if f"m:{k}" in state:
                store.adam_m[k] = state[f"m:{k}"].astype(store.dtype)
                store.adam_v[k] = state[f"v:{k}"].astype(store.dtype)
                store.adam_t[k] = int(state[f"t:{k}"][0])
    return store
