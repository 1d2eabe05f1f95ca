"""Dense reverse-mode automatic differentiation on float64 numpy arrays.

Operations executed inside an active :class:`Tape` are recorded whenever at
least one input is tracked (a leaf with ``requires_grad`` or an output of an
earlier recorded op).  ``Tape.backward`` walks the recorded nodes in reverse
and returns gradients for every leaf that took part.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DEBUG = bool(os.environ.get("FBM_DEBUG"))

_TAPES: list["Tape"] = []


class ContractViolation(ValueError):
    """Raised when an operation's preconditions are not met."""


class Tensor:
    __slots__ = ("data", "requires_grad", "node_id", "_tape", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if DEBUG and not np.all(np.isfinite(arr)):
            raise ContractViolation("non-finite values in tensor")
        self.data = arr
        self.requires_grad = requires_grad
        self.node_id: int | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return slice_(self, idx)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Parameter(Tensor):
    """A named leaf tensor owned by a model."""

    __slots__ = ("name", "trainable")

    def __init__(self, data, name: str, trainable: bool = True):
        super().__init__(data, requires_grad=trainable)
        self.name = name
        self.trainable = trainable

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, trainable={self.trainable})"


@dataclass
class Node:
    kind: str
    inputs: tuple
    backward: Callable | None
    out_shape: tuple


@dataclass
class Tape:
    """Append-only record of executed operations.

    Leaves are registered lazily the first time they are consumed by a
    recorded op, so every tracked tensor owns a node id on this tape.
    """

    nodes: list[Node] = field(default_factory=list)
    _leaves: dict = field(default_factory=dict)

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def tracks(self, t) -> bool:
        if not isinstance(t, Tensor):
            return False
        return t._tape is self or t.requires_grad

    def _node_of(self, t: Tensor) -> int:
        if t._tape is self:
            return t.node_id
        key = id(t)
        if key not in self._leaves:
            self.nodes.append(Node("leaf", (t,), None, t.shape))
            self._leaves[key] = len(self.nodes) - 1
        return self._leaves[key]

    def record(self, kind, inputs, out: Tensor, backward) -> None:
        ids = tuple(self._node_of(x) if self.tracks(x) else None for x in inputs)
        self.nodes.append(Node(kind, ids, backward, out.shape))
        out._tape = self
        out.node_id = len(self.nodes) - 1

    def backward(self, loss: Tensor, wrt: Iterable[Tensor] | None = None) -> dict:
        """Gradients of a scalar ``loss`` for every tracked leaf.

        Returns a dict keyed by leaf tensor.  Leaves listed in ``wrt`` that
        did not influence the loss get zero gradients.
        """
        if loss.data.size != 1:
            raise ContractViolation(f"loss must be scalar, got shape {loss.shape}")
        if loss._tape is not self:
            raise ContractViolation("loss was not produced on this tape")
        grads: list = [None] * len(self.nodes)
        grads[loss.node_id] = np.ones(loss.shape)
        for i in range(loss.node_id, -1, -1):
            node = self.nodes[i]
            g = grads[i]
            if g is None or node.backward is None:
                continue
            in_grads = node.backward(g)
            for nid, gi in zip(node.inputs, in_grads):
                if nid is None or gi is None:
                    continue
                if grads[nid] is None:
                    grads[nid] = np.array(gi, dtype=np.float64, copy=True)
                else:
                    grads[nid] = grads[nid] + gi
        out = {}
        for key, nid in self._leaves.items():
            leaf = self.nodes[nid].inputs[0]
            g = grads[nid]
            out[leaf] = np.zeros(leaf.shape) if g is None else g
        for t in wrt or ():
            if t not in out:
                out[t] = np.zeros(t.shape)
        return out


def backward(tape: Tape, loss: Tensor, wrt=None) -> dict:
    return tape.backward(loss, wrt)


def no_tape():
    """Context in which nothing is recorded (used for target networks)."""
    return _Silence()


class _Silence:
    def __enter__(self):
        _TAPES.append(None)

    def __exit__(self, *exc):
        _TAPES.pop()
        return False


def _active() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(kind, data, inputs, backward) -> Tensor:
    out = Tensor(data)
    tape = _active()
    if tape is not None and any(tape.tracks(x) for x in inputs):
        tape.record(kind, inputs, out, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(kind, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ContractViolation(f"{kind}: shape mismatch {a.shape} vs {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a.data, b.data)
    sa, sb = a.shape, b.shape
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a.data, b.data)
    sa, sb = a.shape, b.shape
    return _emit("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a.data, b.data)
    ad, bd = a.data, b.data
    return _emit("mul", ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def square(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _emit("square", xd * xd, (x,), lambda g: (2.0 * xd * g,))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _emit("tanh", y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = _sig(x.data)
    return _emit("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _emit("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------- reductions


def sum_(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    y = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _emit("sum", y, (x,), bw)


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    y = x.data.mean(axis=axis, keepdims=keepdims)
    n = x.data.size / max(y.size, 1)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape),)

    return _emit("mean", y, (x,), bw)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 1 or bd.ndim < 1 or ad.shape[-1] != bd.shape[-2 if bd.ndim > 1 else 0]:
        raise ContractViolation(f"matmul: shape mismatch {ad.shape} @ {bd.shape}")
    if ad.ndim != 2 or bd.ndim != 2:
        raise ContractViolation(f"matmul expects 2-d operands, got {ad.shape} @ {bd.shape}")
    return _emit("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def linear(x, W, b=None) -> Tensor:
    """``x @ W + b`` as one node."""
    x, W = as_tensor(x), as_tensor(W)
    xd, Wd = x.data, W.data
    if xd.shape[-1] != Wd.shape[0]:
        raise ContractViolation(f"linear: shape mismatch {xd.shape} @ {Wd.shape}")
    y = xd @ Wd
    if b is None:
        return _emit("linear", y, (x, W), lambda g: (g @ Wd.T, xd.T @ g))
    b = as_tensor(b)
    return _emit("linear", y + b.data, (x, W, b),
                 lambda g: (g @ Wd.T, xd.T @ g, g.sum(axis=0)))


def transpose(x) -> Tensor:
    x = as_tensor(x)
    return _emit("transpose", x.data.T, (x,), lambda g: (g.T,))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _emit("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    ax = axis % xs[0].ndim
    for x in xs[1:]:
        if x.ndim != xs[0].ndim or any(
            x.shape[i] != xs[0].shape[i] for i in range(x.ndim) if i != ax
        ):
            raise ContractViolation(
                "concat: shape mismatch " + " vs ".join(str(t.shape) for t in xs))
    sizes = np.cumsum([x.shape[ax] for x in xs])[:-1]
    return _emit("concat", np.concatenate([x.data for x in xs], axis=ax), tuple(xs),
                 lambda g: tuple(np.split(g, sizes, axis=ax)))


def slice_(x, idx) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    basic = all(isinstance(i, (slice, int, type(Ellipsis)))
                for i in (idx if isinstance(idx, tuple) else (idx,)))

    def bw(g):
        out = np.zeros(shape)
        if basic:
            out[idx] = g  # basic indexing never repeats an element
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _emit("slice", x.data[idx], (x,), bw)


def stack(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    return _emit("stack", np.stack([x.data for x in xs], axis=axis), tuple(xs),
                 lambda g: tuple(np.moveaxis(g, axis, 0)))


def gru_scan(xp, h0, Wh_zr, Wh_n, mask=None) -> Tensor:
    """Final hidden state of a GRU run over pre-projected inputs.

    ``xp`` is ``(B, L, 3H)`` holding ``x @ Wx + b`` split as (z, r, n)
    gate blocks.  Where the optional ``(B, L)`` ``mask`` is false the step
    is skipped and the hidden state carried over unchanged.  One node; the
    backward pass is BPTT over all L steps.
    """
    xp, h0, Wh_zr, Wh_n = (as_tensor(t) for t in (xp, h0, Wh_zr, Wh_n))
    X, Wzr, Wn = xp.data, Wh_zr.data, Wh_n.data
    B, L, H3 = X.shape
    H = H3 // 3
    if h0.shape != (B, H) or Wzr.shape != (H, 2 * H) or Wn.shape != (H, H):
        raise ContractViolation(f"gru_scan: shape mismatch xp {X.shape} h0 {h0.shape}")
    M = np.ones((B, L)) if mask is None else np.asarray(mask, dtype=np.float64)
    if M.shape != (B, L):
        raise ContractViolation(f"gru_scan: mask shape {M.shape} != {(B, L)}")
    hs, zs, rs, ns = [h0.data], [], [], []
    h = h0.data
    for t in range(L):
        hzr = h @ Wzr
        z = _sig(X[:, t, :H] + hzr[:, :H])
        r = _sig(X[:, t, H:2 * H] + hzr[:, H:])
        n = np.tanh(X[:, t, 2 * H:] + (r * h) @ Wn)
        m = M[:, t:t + 1]
        h = m * ((1.0 - z) * n + z * h) + (1.0 - m) * h
        hs.append(h)
        zs.append(z)
        rs.append(r)
        ns.append(n)

    def bw(g):
        gX = np.zeros_like(X)
        gWzr = np.zeros_like(Wzr)
        gWn = np.zeros_like(Wn)
        dh = g
        for t in range(L - 1, -1, -1):
            hp, z, r, n = hs[t], zs[t], rs[t], ns[t]
            m = M[:, t:t + 1]
            carry = dh * (1.0 - m)
            dh = dh * m
            da_n = dh * (1.0 - z) * (1.0 - n * n)
            da_z = dh * (hp - n) * z * (1.0 - z)
            gWn += (r * hp).T @ da_n
            drh = da_n @ Wn.T
            da_r = drh * hp * r * (1.0 - r)
            gX[:, t, :H] = da_z
            gX[:, t, H:2 * H] = da_r
            gX[:, t, 2 * H:] = da_n
            dzr = np.concatenate([da_z, da_r], axis=1)
            gWzr += hp.T @ dzr
            dh = carry + dh * z + drh * r + dzr @ Wzr.T
        return gX, dh, gWzr, gWn

    return _emit("gru_scan", h, (xp, h0, Wh_zr, Wh_n), bw)


def _sig(x):
    # tanh form cannot overflow
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# ---------------------------------------------------------------- normalisations


def l2_normalize(x, target_norm: float, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Project ``x`` onto the sphere of radius ``target_norm`` along ``axis``."""
    x = as_tensor(x)
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=axis, keepdims=True)) + eps
    u = xd / norm
    y = target_norm * u

    def bw(g):
        return ((target_norm / norm) * (g - u * (g * u).sum(axis=axis, keepdims=True)),)

    return _emit("l2_normalize", y, (x,), bw)


def rms_norm(x, gain, eps: float = 1e-6) -> Tensor:
    """Bias-free RMS normalisation over the last axis with a learned gain."""
    x, gain = as_tensor(x), as_tensor(gain)
    xd, gd = x.data, gain.data
    d = xd.shape[-1]
    s = np.sqrt((xd * xd).mean(axis=-1, keepdims=True) + eps)
    n = xd / s
    y = n * gd

    def bw(g):
        gn = g * gd
        gx = gn / s - xd * (gn * xd).sum(axis=-1, keepdims=True) / (d * s ** 3)
        return gx, _unbroadcast(g * n, gd.shape)

    return _emit("rms_norm", y, (x, gain), bw)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    xd, gd = x.data, gain.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    n = xc * inv
    y = n * gd + bias.data

    def bw(g):
        gn = g * gd
        gx = inv * (gn - gn.mean(axis=-1, keepdims=True)
                    - n * (gn * n).mean(axis=-1, keepdims=True))
        return gx, _unbroadcast(g * n, gd.shape), _unbroadcast(g, bias.shape)

    return _emit("layer_norm", y, (x, gain, bias), bw)


# ---------------------------------------------------------------- optimisation


def adam_step(params, grads, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8, step=1, state=None):
    """One bias-corrected Adam update applied in place.

    ``state`` maps each parameter to its ``(m, v)`` moments and is updated;
    pass the same dict on every call.  ``step`` counts from 1.
    """
    if state is None:
        state = {}
    c1 = 1.0 - beta1 ** step
    c2 = 1.0 - beta2 ** step
    for p in params:
        g = grads.get(p)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ContractViolation(f"adam: gradient shape {g.shape} != parameter {p.shape}")
        m, v = state.get(p, (np.zeros(p.shape), np.zeros(p.shape)))
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        state[p] = (m, v)
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params


class Adam:
    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.step_count = 0
        self.state: dict = {}

    def step(self, grads: dict):
        self.step_count += 1
        adam_step(self.params, grads, self.lr, self.betas[0], self.betas[1], self.eps,
                  self.step_count, self.state)


# ---------------------------------------------------------------- containers

MAGIC = b"FBMLAB01"


def write_container(path, header: dict, arrays: Sequence[tuple[str, np.ndarray]]) -> None:
    """JSON manifest followed by little-endian float64 buffers in manifest order."""
    entries = []
    offset = 0
    for name, arr in arrays:
        arr = np.asarray(arr, dtype=np.float64)
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    manifest = dict(header)
    manifest["buffers"] = entries
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != MAGIC:
        raise ContractViolation(f"{path}: not an fbm-lab container")
    (n,) = struct.unpack("<Q", raw[8:16])
    manifest = json.loads(raw[16:16 + n])
    base = 16 + n
    arrays = {}
    for e in manifest["buffers"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        start = base + e["offset"]
        buf = np.frombuffer(raw, dtype="<f8", count=count, offset=start)
        arrays[e["name"]] = buf.astype(np.float64).reshape(e["shape"])
    return manifest, arrays


def save_checkpoint(path, params: Iterable[Parameter], meta: dict | None = None) -> None:
    params = list(params)
    names = [p.name for p in params]
    if len(set(names)) != len(names):
        raise ContractViolation("duplicate parameter names in checkpoint")
    header = {"kind": "checkpoint", "schema": 1, "meta": meta or {},
              "trainable": {p.name: bool(p.trainable) for p in params}}
    write_container(path, header, [(p.name, p.data) for p in params])


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    manifest, arrays = read_container(path)
    if manifest.get("kind") != "checkpoint":
        raise ContractViolation(f"{path}: not a checkpoint")
    return manifest, arrays
