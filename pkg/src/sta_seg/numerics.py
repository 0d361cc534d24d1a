"""Dense tensor algebra with a minimal reverse-mode tape.

Tensors are plain float64 ``numpy`` arrays. Every op accepts either arrays
or :class:`Var` nodes: with arrays only it is a pure function returning an
array, and as soon as one argument is a ``Var`` the result is recorded on
that variable's :class:`Tape` so :func:`backward` can replay it.
"""

from __future__ import annotations

import math
import struct
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

LN_EPS = 1e-5


class ShapeError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


class FormatError(ValueError):
    pass


class Var:
    """A tape node: a value plus an accumulated gradient."""

    __slots__ = ("value", "grad", "tape", "requires_grad")

    def __init__(self, value: np.ndarray, tape: "Tape", requires_grad: bool):
        self.value = value
        self.grad = None
        self.tape = tape
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of differentiable operations."""

    def __init__(self):
        self.nodes: list[tuple[Var, tuple, Callable]] = []
        self._params: dict[str, Var] = {}

    def constant(self, value) -> Var:
        return Var(np.asarray(value, dtype=np.float64), self, False)

    def variable(self, value) -> Var:
        return Var(np.asarray(value, dtype=np.float64), self, True)

    def param(self, store: "ParamStore", name: str) -> Var:
        var = self._params.get(name)
        if var is None:
            var = Var(store.value(name), self, store.trainable(name))
            self._params[name] = var
        return var

    def record(self, value: np.ndarray, inputs: tuple, vjp: Callable) -> Var:
        needs = any(isinstance(x, Var) and x.requires_grad for x in inputs)
        out = Var(value, self, needs)
        if needs:
            self.nodes.append((out, inputs, vjp))
        return out

    def __len__(self):
        return len(self.nodes)


class ParamStore:
    """Named learnable tensors with gradient accumulators."""

    def __init__(self):
        self._values: dict[str, np.ndarray] = {}
        self._grads: dict[str, np.ndarray] = {}
        self._trainable: dict[str, bool] = {}

    def add(self, name: str, value, trainable: bool = True) -> None:
        if name in self._values:
            raise KeyError(f"duplicate parameter name {name!r}")
        value = np.array(value, dtype=np.float64)
        self._values[name] = value
        self._grads[name] = np.zeros_like(value)
        self._trainable[name] = trainable

    def names(self) -> list[str]:
        return list(self._values)

    def value(self, name: str) -> np.ndarray:
        return self._values[name]

    def set_value(self, name: str, value) -> None:
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self._values[name].shape:
            raise ShapeError(f"{name}: expected {self._values[name].shape}, got {value.shape}")
        self._values[name] = value

    def grad(self, name: str) -> np.ndarray:
        return self._grads[name]

    def trainable(self, name: str) -> bool:
        return self._trainable[name]

    def zero_grads(self) -> None:
        for g in self._grads.values():
            g.fill(0.0)

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for name in self._values:
            out.add(name, self._values[name].copy(), self._trainable[name])
        return out

    def __contains__(self, name):
        return name in self._values

    def __len__(self):
        return len(self._values)

    def num_elements(self) -> int:
        return sum(v.size for v in self._values.values())


class ParamView:
    """Name -> tensor lookup, bound to a tape when gradients are wanted."""

    def __init__(self, store: ParamStore, tape: Tape | None = None):
        self.store = store
        self.tape = tape

    def __getitem__(self, name: str):
        if self.tape is None:
            return self.store.value(name)
        return self.tape.param(self.store, name)

    def __contains__(self, name):
        return name in self.store


def uniform_init(rng: np.random.Generator, shape: Sequence[int], fan_in: int) -> np.ndarray:
    s = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-s, s, size=tuple(shape))


# ---------------------------------------------------------------------------
# op plumbing


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else x


def _tape_of(*xs) -> Tape | None:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    return None


def _emit(value, inputs, vjp):
    tape = _tape_of(*inputs)
    if tape is None:
        return value
    return tape.record(value, inputs, vjp)


def _dims(x) -> tuple:
    return tuple(np.shape(value_of(x)))


def _require_2d(name, x):
    if np.ndim(value_of(x)) != 2:
        raise ShapeError(f"{name}: expected a matrix, got dims {_dims(x)}")


# ---------------------------------------------------------------------------
# ops


def matmul(a, b):
    _require_2d("matmul", a)
    _require_2d("matmul", b)
    av, bv = value_of(a), value_of(b)
    if av.shape[1] != bv.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, {av.shape} x {bv.shape}")
    return _emit(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def add(a, b):
    av, bv = value_of(a), value_of(b)
    if av.shape != bv.shape:
        raise ShapeError(f"add: dims differ, {av.shape} vs {bv.shape}")
    return _emit(av + bv, (a, b), lambda g: (g, g))


def scale(a, s: float):
    av = value_of(a)
    return _emit(av * s, (a,), lambda g: (g * s,))


def add_rowwise(a, b):
    """Add a length-n bias vector to every row of an m x n matrix."""
    av, bv = value_of(a), value_of(b)
    if av.ndim != 2 or bv.shape != (av.shape[1],):
        raise ShapeError(f"bias: dims {bv.shape} do not match rows of {av.shape}")
    return _emit(av + bv, (a, b), lambda g: (g, g.sum(axis=0)))


def linear(x, w, b=None):
    y = matmul(x, w)
    if b is not None:
        y = add_rowwise(y, b)
    return y


def transpose(a):
    _require_2d("transpose", a)
    return _emit(value_of(a).T, (a,), lambda g: (g.T,))


def reshape(a, shape):
    av = value_of(a)
    old = av.shape
    try:
        out = av.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {old} as {tuple(shape)}") from exc
    return _emit(out, (a,), lambda g: (g.reshape(old),))


def concat_cols(parts: Sequence):
    vals = [value_of(p) for p in parts]
    rows = {v.shape[0] for v in vals}
    if len(rows) != 1 or any(v.ndim != 2 for v in vals):
        raise ShapeError(f"concat_cols: incompatible dims {[v.shape for v in vals]}")
    bounds = np.cumsum([0] + [v.shape[1] for v in vals])

    def vjp(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(vals)))

    return _emit(np.concatenate(vals, axis=1), tuple(parts), vjp)


def total(a):
    av = value_of(a)
    shape = av.shape
    return _emit(np.array(av.sum()), (a,), lambda g: (np.full(shape, float(g)),))


def softmax_rows(m):
    _require_2d("softmax_rows", m)
    mv = value_of(m)
    e = np.exp(mv - mv.max(axis=1, keepdims=True))
    y = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return _emit(y, (m,), vjp)


def layer_norm(m, gamma, beta, eps: float = LN_EPS):
    _require_2d("layer_norm", m)
    mv, gv, bv = value_of(m), value_of(gamma), value_of(beta)
    n = mv.shape[1]
    if gv.shape != (n,) or bv.shape != (n,):
        raise ShapeError(f"layer_norm: gamma {gv.shape} / beta {bv.shape} vs rows of {mv.shape}")
    mu = mv.mean(axis=1, keepdims=True)
    xc = mv - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gv + bv

    def vjp(g):
        gx = g * gv
        dx = inv * (gx - gx.mean(axis=1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=1, keepdims=True))
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _emit(y, (m, gamma, beta), vjp)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a):
    """Tanh-approximated GELU."""
    x = value_of(a)
    x2 = x * x
    inner = _GELU_C * x * (1.0 + 0.044715 * x2)
    th = np.tanh(inner)
    y = 0.5 * x * (1.0 + th)

    def vjp(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner),)

    return _emit(y, (a,), vjp)


def patchify(x, p: int):
    """(H, W, c) -> (H/p * W/p, p*p*c); patches row-major, (row, col, channel) inside."""
    xv = value_of(x)
    if xv.ndim != 3:
        raise ShapeError(f"patchify: expected H x W x c, got {xv.shape}")
    H, W, c = xv.shape
    if H % p or W % p:
        raise ShapeError(f"patchify: patch side {p} does not divide image dims {H}x{W}")
    gh, gw = H // p, W // p
    out = xv.reshape(gh, p, gw, p, c).transpose(0, 2, 1, 3, 4).reshape(gh * gw, p * p * c)

    def vjp(g):
        return (g.reshape(gh, gw, p, p, c).transpose(0, 2, 1, 3, 4).reshape(H, W, c),)

    return _emit(out, (x,), vjp)


def bilinear_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Corner-aligned 1-D linear interpolation weights, shape (n_out, n_in)."""
    m = np.zeros((n_out, n_in))
    if n_in == 1 or n_out == 1:
        m[:, 0] = 1.0
        return m
    pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - lo
    m[np.arange(n_out), lo] = 1.0 - frac
    m[np.arange(n_out), lo + 1] += frac
    return m


def upsample_bilinear(x, out_h: int, out_w: int):
    """Corner-aligned bilinear resize of an (h, w, c) field to (out_h, out_w, c)."""
    xv = value_of(x)
    if xv.ndim != 3:
        raise ShapeError(f"upsample_bilinear: expected h x w x c, got {xv.shape}")
    h, w, c = xv.shape
    uh, uw = bilinear_matrix(out_h, h), bilinear_matrix(out_w, w)
    y = np.einsum("jb,ibc->ijc", uw, (uh @ xv.reshape(h, w * c)).reshape(out_h, w, c))

    def vjp(g):
        gw_ = np.einsum("jb,ijc->ibc", uw, g)
        return ((uh.T @ gw_.reshape(out_h, w * c)).reshape(h, w, c),)

    return _emit(y, (x,), vjp)


def softmax_last(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits, labels: np.ndarray, ignore_index: int = 255):
    """Mean over non-ignored pixels of -log softmax(logits)[label].

    ``logits`` has the class axis last; ``labels`` matches the leading dims.
    """
    lv = value_of(logits)
    labels = np.asarray(labels)
    if lv.shape[:-1] != labels.shape:
        raise ShapeError(f"cross_entropy: logits {lv.shape} vs labels {labels.shape}")
    C = lv.shape[-1]
    flat = lv.reshape(-1, C)
    lab = labels.reshape(-1).astype(np.int64)
    keep = lab != ignore_index
    n = int(keep.sum())
    if n == 0:
        raise ContractError("cross_entropy: every pixel is ignored")
    if np.any(lab[keep] < 0) or np.any(lab[keep] >= C):
        raise ValueError(f"cross_entropy: label outside 0..{C - 1}")
    mx = flat.max(axis=1, keepdims=True)
    lse = mx[:, 0] + np.log(np.exp(flat - mx).sum(axis=1))
    idx = np.nonzero(keep)[0]
    loss = (lse[idx] - flat[idx, lab[idx]]).sum() / n

    def vjp(g):
        p = softmax_last(flat)
        p[idx, lab[idx]] -= 1.0
        p[~keep] = 0.0
        return ((float(g) / n) * p.reshape(lv.shape),)

    return _emit(np.array(loss), (logits,), vjp)


# ---------------------------------------------------------------------------
# reverse pass


def backward(tape: Tape, loss: Var, store: ParamStore | None = None) -> None:
    """Accumulate d(loss)/d(param) into ``store``'s gradient buffers."""
    if not isinstance(loss, Var) or loss.value.size != 1:
        raise ContractError("backward: loss must be a scalar tape node")
    if loss.tape is not tape:
        raise ContractError("backward: loss was not recorded on this tape")
    loss.grad = np.ones_like(loss.value)
    for out, inputs, vjp in reversed(tape.nodes):
        if out.grad is None:
            continue
        grads = vjp(out.grad)
        for x, g in zip(inputs, grads):
            if isinstance(x, Var) and x.requires_grad:
                x.grad = g if x.grad is None else x.grad + g
    if store is not None:
        for name, var in tape._params.items():
            if var.requires_grad and var.grad is not None:
                store.grad(name)[...] += var.grad


# ---------------------------------------------------------------------------
# .tns files

TNS_MAGIC = b"STAT"
TNS_VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("u1"), 4: np.dtype("<i4")}


def _dtype_code(dtype: np.dtype) -> int:
    dtype = np.dtype(dtype)
    for code, dt in _DTYPES.items():
        if dt.kind == dtype.kind and dt.itemsize == dtype.itemsize:
            return code
    raise FormatError(f"unsupported dtype for .tns: {dtype}")


def encode_tns(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    code = _dtype_code(array.dtype)
    if array.ndim > 255:
        raise FormatError("too many dims for .tns")
    head = TNS_MAGIC + struct.pack("<BBBB", TNS_VERSION, code, array.ndim, 0)
    head += struct.pack(f"<{array.ndim}I", *array.shape)
    return head + np.ascontiguousarray(array, dtype=_DTYPES[code]).tobytes()


def decode_tns(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(buf) < 8:
        raise FormatError(f"{source}: truncated header")
    if buf[:4] != TNS_MAGIC:
        raise FormatError(f"{source}: bad magic {buf[:4]!r}")
    version, code, ndim, _ = struct.unpack("<BBBB", buf[4:8])
    if version != TNS_VERSION:
        raise FormatError(f"{source}: unsupported version {version}")
    if code not in _DTYPES:
        raise FormatError(f"{source}: unknown dtype code {code}")
    end = 8 + 4 * ndim
    if len(buf) < end:
        raise FormatError(f"{source}: truncated dims")
    dims = struct.unpack(f"<{ndim}I", buf[8:end])
    dtype = _DTYPES[code]
    need = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(buf) - end != need:
        raise FormatError(f"{source}: payload is {len(buf) - end} bytes, expected {need}")
    return np.frombuffer(buf, dtype=dtype, offset=end).reshape(dims).astype(dtype.newbyteorder("="))


def save_tns(path, array: np.ndarray) -> None:
    Path(path).write_bytes(encode_tns(array))


def load_tns(path) -> np.ndarray:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"{path}: cannot read ({exc.strerror})") from exc
    return decode_tns(buf, str(path))


def all_finite(arrays: Iterable[np.ndarray]) -> bool:
    return all(np.isfinite(a).all() for a in arrays)
