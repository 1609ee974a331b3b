"""Small reverse-mode differentiation engine over dense float64 arrays.

Every learnable or differentiable quantity in the detector is a :class:`Value`.
Operations record their parents and a closure that maps the output gradient to
parent gradients; :meth:`Value.backward` walks the graph in reverse
topological order.

Broadcasting is deliberately narrow: two operands must have equal shapes, or
the shape of one must be a trailing suffix of the other (a scalar has the
empty shape and is therefore a suffix of everything).
"""

from __future__ import annotations

import struct
from collections.abc import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, ShapeError, ValidationError

__all__ = [
    "Value",
    "Parameter",
    "ShapeError",
    "as_value",
    "elementwise",
    "matmul",
    "softmax",
    "gather_rows",
    "concat",
    "layer_norm",
    "maximum",
    "minimum",
    "where_mask",
    "numeric_grad",
    "grad_rel_error",
    "save_checkpoint",
    "load_checkpoint",
]


def _broadcast_shape(a: tuple, b: tuple) -> tuple:
    if a == b:
        return a
    if len(a) >= len(b) and a[len(a) - len(b):] == b:
        return a
    if len(b) > len(a) and b[len(b) - len(a):] == a:
        return b
    raise ShapeError(f"incompatible shapes {a} and {b} (only trailing-suffix broadcasting is supported)")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


class Value:
    """A float64 array node in a differentiation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: tuple["Value", ...] = (),
        _backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None,
        op: str = "",
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = _parents if requires_grad else ()
        self._backward = _backward if requires_grad else None
        self.op = op

    # -- basic protocol -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Value(shape={self.shape}{rg}, op={self.op!r})"

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Value":
        return Value(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    # -- graph construction helper ---------------------------------------
    @staticmethod
    def _make(data, parents: tuple["Value", ...], backward, op: str) -> "Value":
        needs = any(p.requires_grad for p in parents)
        return Value(data, requires_grad=needs, _parents=parents, _backward=backward, op=op)

    # -- arithmetic --------------------------------------------------------
    def __add__(self, other) -> "Value":
        other = as_value(other)
        _broadcast_shape(self.shape, other.shape)
        sa, sb = self.shape, other.shape
        return Value._make(
            self.data + other.data,
            (self, other),
            lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
            "add",
        )

    __radd__ = __add__

    def __sub__(self, other) -> "Value":
        other = as_value(other)
        _broadcast_shape(self.shape, other.shape)
        sa, sb = self.shape, other.shape
        return Value._make(
            self.data - other.data,
            (self, other),
            lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)),
            "sub",
        )

    def __rsub__(self, other) -> "Value":
        return as_value(other) - self

    def __mul__(self, other) -> "Value":
        other = as_value(other)
        _broadcast_shape(self.shape, other.shape)
        a, b = self.data, other.data
        return Value._make(
            a * b,
            (self, other),
            lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
            "mul",
        )

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Value":
        other = as_value(other)
        _broadcast_shape(self.shape, other.shape)
        a, b = self.data, other.data
        return Value._make(
            a / b,
            (self, other),
            lambda g: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)),
            "div",
        )

    def __rtruediv__(self, other) -> "Value":
        return as_value(other) / self

    def __neg__(self) -> "Value":
        return Value._make(-self.data, (self,), lambda g: (-g,), "neg")

    def __pow__(self, exponent: float) -> "Value":
        if isinstance(exponent, Value):
            raise TypeError("pow supports constant exponents only")
        k = float(exponent)
        x = self.data
        out = np.power(x, k)

        def back(g):
            if k == 0.0:
                return (np.zeros_like(x),)
            return (g * k * np.power(x, k - 1.0),)

        return Value._make(out, (self,), back, "pow")

    def __matmul__(self, other) -> "Value":
        return matmul(self, as_value(other))

    def __getitem__(self, index) -> "Value":
        src_shape = self.shape

        def back(g):
            full = np.zeros(src_shape)
            np.add.at(full, index, g)
            return (full,)

        return Value._make(self.data[index], (self,), back, "index")

    # -- unary functions -------------------------------------------------
    def sigmoid(self) -> "Value":
        x = self.data
        s = np.empty_like(x)
        pos = x >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        s[~pos] = ex / (1.0 + ex)
        return Value._make(s, (self,), lambda g: (g * s * (1.0 - s),), "sigmoid")

    def log(self) -> "Value":
        x = self.data
        return Value._make(np.log(x), (self,), lambda g: (g / x,), "log")

    def exp(self) -> "Value":
        e = np.exp(self.data)
        return Value._make(e, (self,), lambda g: (g * e,), "exp")

    def sin(self) -> "Value":
        x = self.data
        return Value._make(np.sin(x), (self,), lambda g: (g * np.cos(x),), "sin")

    def cos(self) -> "Value":
        x = self.data
        return Value._make(np.cos(x), (self,), lambda g: (-g * np.sin(x),), "cos")

    def relu(self) -> "Value":
        mask = self.data > 0
        return Value._make(self.data * mask, (self,), lambda g: (g * mask,), "relu")

    def abs(self) -> "Value":
        sgn = np.sign(self.data)
        return Value._make(np.abs(self.data), (self,), lambda g: (g * sgn,), "abs")

    def clamp_min(self, lo: float) -> "Value":
        """Elementwise max against a constant; gradient passes where x > lo."""
        mask = self.data > lo
        return Value._make(np.where(mask, self.data, lo), (self,), lambda g: (g * mask,), "max_const")

    def clamp_max(self, hi: float) -> "Value":
        mask = self.data < hi
        return Value._make(np.where(mask, self.data, hi), (self,), lambda g: (g * mask,), "min_const")

    def clip(self, lo: float, hi: float) -> "Value":
        return self.clamp_min(lo).clamp_max(hi)

    # -- reductions and reshaping -----------------------------------------
    def sum(self, axis: int | None = None) -> "Value":
        shape = self.shape
        if axis is None:
            return Value._make(self.data.sum(), (self,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")
        ax = axis % self.ndim

        def back(g):
            return (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),)

        return Value._make(self.data.sum(axis=ax), (self,), back, "sum")

    def mean(self, axis: int | None = None) -> "Value":
        n = self.data.size if axis is None else self.shape[axis]
        return self.sum(axis) * (1.0 / n)

    def reshape(self, *shape) -> "Value":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src = self.shape
        return Value._make(self.data.reshape(shape), (self,), lambda g: (g.reshape(src),), "reshape")

    @property
    def T(self) -> "Value":
        if self.ndim != 2:
            raise ShapeError(f"transpose needs a 2-d value, got shape {self.shape}")
        return Value._make(self.data.T, (self,), lambda g: (g.T,), "transpose")

    # -- backward ----------------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(node) into ``node.grad`` for every reachable node."""
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar root, got shape {self.shape}")
        if not self.requires_grad:
            return
        order: list[Value] = []
        seen: set[int] = set()
        stack: list[tuple[Value, bool]] = [(self, False)]
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

        pending: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg


class Parameter(Value):
    """A named, gradient-requiring leaf."""

    __slots__ = ("name",)

    def __init__(self, data, name: str):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_value(x) -> Value:
    return x if isinstance(x, Value) else Value(x)


def elementwise(op_kind: str, a, b=None, const: float | None = None) -> Value:
    """Dispatch a named elementwise operation.

    ``op_kind`` is one of add, sub, mul, div, sigmoid, log, exp, relu, abs,
    negate, pow (``const`` is the exponent) or max (``const`` is the floor).
    """
    a = as_value(a)
    if op_kind in ("add", "sub", "mul", "div"):
        if b is None:
            raise TypeError(f"{op_kind} needs two operands")
        b = as_value(b)
        return {"add": a.__add__, "sub": a.__sub__, "mul": a.__mul__, "div": a.__truediv__}[op_kind](b)
    if op_kind == "pow":
        return a ** const
    if op_kind == "max":
        return a.clamp_min(const)
    if op_kind == "negate":
        return -a
    if op_kind in ("sigmoid", "log", "exp", "relu", "abs"):
        return getattr(a, op_kind)()
    raise ValidationError(f"unknown elementwise op {op_kind!r}")


def matmul(a: Value, b: Value) -> Value:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    A, B = a.data, b.data
    return Value._make(A @ B, (a, b), lambda g: (g @ B.T, A.T @ g), "matmul")


def softmax(a: Value, axis: int = -1) -> Value:
    ax = axis % a.ndim
    z = a.data - a.data.max(axis=ax, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=ax, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=ax, keepdims=True)),)

    return Value._make(s, (a,), back, "softmax")


def layer_norm(a: Value, eps: float = 1e-5) -> Value:
    """Normalize each row of a 2-d value to zero mean and unit variance."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def back(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return Value._make(y, (a,), back, "layer_norm")


def _check_perm(perm, n: int) -> np.ndarray:
    perm = np.asarray(perm)
    if perm.shape != (n,) or not np.array_equal(np.sort(perm), np.arange(n)):
        raise ValidationError(f"not a permutation of range({n}): {perm.tolist()}")
    return perm.astype(np.int64)


def gather_rows(a: Value, perm) -> Value:
    """Row ``i`` of the result is row ``perm[i]`` of ``a``; ``perm`` must be a bijection."""
    perm = _check_perm(perm, a.shape[0])
    inv = np.empty_like(perm)
    inv[perm] = np.arange(len(perm))
    return Value._make(a.data[perm], (a,), lambda g: (g[inv],), "gather_rows")


def concat(a: Value, b: Value) -> Value:
    """Concatenate along the last (feature) axis."""
    if a.shape[:-1] != b.shape[:-1]:
        raise ShapeError(f"concat leading dimensions differ: {a.shape} vs {b.shape}")
    k = a.shape[-1]
    return Value._make(
        np.concatenate([a.data, b.data], axis=-1),
        (a, b),
        lambda g: (g[..., :k], g[..., k:]),
        "concat",
    )


def maximum(a, b) -> Value:
    """Elementwise max of two values; ties send the gradient to ``a``."""
    a, b = as_value(a), as_value(b)
    _broadcast_shape(a.shape, b.shape)
    m = a.data >= b.data
    return Value._make(
        np.where(m, a.data, b.data),
        (a, b),
        lambda g: (_unbroadcast(g * m, a.shape), _unbroadcast(g * ~m, b.shape)),
        "maximum",
    )


def minimum(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    _broadcast_shape(a.shape, b.shape)
    m = a.data <= b.data
    return Value._make(
        np.where(m, a.data, b.data),
        (a, b),
        lambda g: (_unbroadcast(g * m, a.shape), _unbroadcast(g * ~m, b.shape)),
        "minimum",
    )


def where_mask(mask: np.ndarray, a: Value, b: Value) -> Value:
    """Select ``a`` where ``mask`` else ``b``; mask is a constant."""
    mask = np.asarray(mask, dtype=bool)
    return Value._make(
        np.where(mask, a.data, b.data),
        (a, b),
        lambda g: (_unbroadcast(g * mask, a.shape), _unbroadcast(g * ~mask, b.shape)),
        "where",
    )


# -- finite differences ------------------------------------------------------

def numeric_grad(fn: Callable[[], Value], param: Value, h: float = 1e-4) -> np.ndarray:
    """Central differences of the scalar ``fn()`` with respect to ``param.data``."""
    out = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn().item()
        flat[i] = orig - h
        fm = fn().item()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return out


def grad_rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Norm-wise relative error ``|a - n| / max(|a|, |n|, floor)``."""
    diff = np.linalg.norm(analytic - numeric)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(diff / scale)


# -- checkpoints -------------------------------------------------------------
#
# Layout (all little-endian):
#   magic  b"TDCK"            4 bytes
#   version u32 (= 1)
#   count   u32               number of records
#   record*: name_len u16, name utf-8 bytes, ndim u8, dims u32*ndim,
#            data float64*prod(dims), row-major

_MAGIC = b"TDCK"
_VERSION = 1


def save_checkpoint(path, params: Iterable[Parameter]) -> None:
    params = list(params)
    names = [p.name for p in params]
    if len(set(names)) != len(names):
        raise ValidationError("parameter names must be unique")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(params)))
        for p in params:
            raw = p.name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", p.ndim))
            fh.write(struct.pack(f"<{p.ndim}I", *p.shape))
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def load_checkpoint(path, params: Iterable[Parameter]) -> None:
    """Fill ``params`` in place; names and shapes must match the file exactly."""
    by_name = {p.name: p for p in params}
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MAGIC:
        raise ValidationError("not a checkpoint file")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != _VERSION:
        raise ValidationError(f"unsupported checkpoint version {version}")
    off = 12
    seen = set()
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<B", blob, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(blob, dtype="<f8", count=size, offset=off).reshape(shape)
        off += 8 * size
        if name not in by_name:
            raise ValidationError(f"checkpoint has unknown parameter {name!r}")
        target = by_name[name]
        if tuple(shape) != target.shape:
            raise ShapeError(f"parameter {name!r}: checkpoint shape {tuple(shape)} != model shape {target.shape}")
        target.data[...] = data
        seen.add(name)
    missing = set(by_name) - seen
    if missing:
        raise ValidationError(f"checkpoint lacks parameters: {sorted(missing)}")
