"""Dense 2-D array maths on a recording tape with reverse-mode gradients.

Every primitive is a pair of pure numpy functions registered in ``_OPS``:
``forward(inputs, attrs) -> (value, saved)`` and
``backward(grad, inputs, value, saved, attrs) -> input grads``.
A :class:`Tape` stores the op kind, input ids and static attributes of each
node, so a graph can be replayed from its leaves and differentiated once.

>>> tape = Tape(np.float64)
>>> x = tape.leaf(np.array([[1.0, 2.0]]))
>>> grads = backward(tape, (x * x).sum())
>>> grads[x.id]
array([[2., 4.]])
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import erf

LN_EPS = 1e-5
_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    pass


class ContractError(ValueError):
    pass


@dataclass(frozen=True)
class GroupConvKernel:
    """One odd-width 1-D kernel per channel, shape ``(C, k)``."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights)
        if w.ndim != 2 or w.shape[1] % 2 == 0:
            raise ShapeError(f"kernel must be (C, odd k), got {w.shape}")
        if not np.all(np.isfinite(w)):
            raise ValueError("kernel weights must be finite")
        object.__setattr__(self, "weights", w)

    @property
    def channels(self) -> int:
        return self.weights.shape[0]

    @property
    def width(self) -> int:
        return self.weights.shape[1]

    @classmethod
    def delta(cls, channels: int, width: int = 3, dtype=np.float32) -> "GroupConvKernel":
        w = np.zeros((channels, width), dtype=dtype)
        w[:, width // 2] = 1
        return cls(w)


# --- primitive forward/backward pairs -----------------------------------------


def _matmul_f(ins, attrs):
    a, b = ins
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return a @ b, None


def _matmul_b(g, ins, out, saved, attrs):
    a, b = ins
    return g @ b.T, a.T @ g


def _same_shape(name, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{name}: shape mismatch {a.shape} vs {b.shape}")


def _add_f(ins, attrs):
    _same_shape("add", *ins)
    return ins[0] + ins[1], None


def _add_b(g, ins, out, saved, attrs):
    return g, g


def _sub_f(ins, attrs):
    _same_shape("sub", *ins)
    return ins[0] - ins[1], None


def _sub_b(g, ins, out, saved, attrs):
    return g, -g


def _mul_f(ins, attrs):
    _same_shape("mul", *ins)
    return ins[0] * ins[1], None


def _mul_b(g, ins, out, saved, attrs):
    return g * ins[1], g * ins[0]


def _scale_f(ins, attrs):
    (a,) = ins
    return a * a.dtype.type(attrs["c"]), None


def _scale_b(g, ins, out, saved, attrs):
    return (g * g.dtype.type(attrs["c"]),)


def _bias_f(ins, attrs):
    x, b = ins
    if b.shape != (x.shape[1],):
        raise ShapeError(f"bias of shape {b.shape} does not match {x.shape[1]} columns")
    return x + b, None


def _bias_b(g, ins, out, saved, attrs):
    return g, g.sum(axis=0)


def _transpose_f(ins, attrs):
    return ins[0].T.copy(), None


def _transpose_b(g, ins, out, saved, attrs):
    return (g.T,)


def _sum_f(ins, attrs):
    return ins[0].sum().reshape(1, 1), None


def _sum_b(g, ins, out, saved, attrs):
    return (np.full_like(ins[0], g[0, 0]),)


def _gelu_f(ins, attrs):
    x = ins[0]
    cdf = 0.5 * (1.0 + erf(x / x.dtype.type(_SQRT2)))
    return x * cdf, cdf


def _gelu_b(g, ins, out, cdf, attrs):
    x = ins[0]
    pdf = np.exp(-0.5 * x * x) * x.dtype.type(_INV_SQRT_2PI)
    return (g * (cdf + x * pdf),)


def _softmax_f(ins, attrs):
    x = ins[0]
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True), None


def _softmax_b(g, ins, y, saved, attrs):
    return (y * (g - (g * y).sum(axis=1, keepdims=True)),)


def _layer_norm_f(ins, attrs):
    x, gamma, beta = ins
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError("layer_norm: gamma/beta must match the channel count")
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(attrs["eps"]))
    xhat = xc * inv
    return xhat * gamma + beta, (xhat, inv)


def _layer_norm_b(g, ins, out, saved, attrs):
    x, gamma, beta = ins
    xhat, inv = saved
    gx_hat = g * gamma
    c = x.shape[1]
    gx = inv / c * (c * gx_hat - gx_hat.sum(axis=1, keepdims=True) - xhat * (gx_hat * xhat).sum(axis=1, keepdims=True))
    return gx, (g * xhat).sum(axis=0), g.sum(axis=0)


def _group_conv_f(ins, attrs):
    f, w = ins
    if f.ndim != 2 or w.ndim != 2 or w.shape[0] != f.shape[1]:
        raise ShapeError(f"group_conv1d: kernel {w.shape} does not match features {f.shape}")
    k = w.shape[1]
    if k % 2 == 0:
        raise ShapeError("group_conv1d: kernel width must be odd")
    r = k // 2
    m = f.shape[0]
    fp = np.pad(f, ((r, r), (0, 0)))
    out = np.zeros_like(f)
    for j in range(k):
        out += fp[j:j + m] * w[:, j]
    return out, fp


def _group_conv_b(g, ins, out, fp, attrs):
    f, w = ins
    k = w.shape[1]
    r = k // 2
    m = f.shape[0]
    gfp = np.zeros_like(fp)
    gw = np.empty_like(w)
    for j in range(k):
        gfp[j:j + m] += g * w[:, j]
        gw[:, j] = (g * fp[j:j + m]).sum(axis=0)
    return gfp[r:r + m], gw


def _im2col_f(ins, attrs):
    """3x3 / stride-2 / pad-1 patches of an ``(H*W, C)`` grid, columns ordered
    (dy, dx, channel)."""
    x = ins[0]
    h, w = attrs["h"], attrs["w"]
    c = x.shape[1]
    if x.shape[0] != h * w:
        raise ShapeError(f"im2col: {x.shape[0]} rows is not {h}x{w}")
    ho, wo = (h + 1) // 2, (w + 1) // 2
    xp = np.zeros((h + 2, w + 2, c), dtype=x.dtype)
    xp[1:h + 1, 1:w + 1] = x.reshape(h, w, c)
    cols = [xp[dy:dy + 2 * ho:2, dx:dx + 2 * wo:2] for dy in range(3) for dx in range(3)]
    return np.concatenate(cols, axis=2).reshape(ho * wo, 9 * c), None


def _im2col_b(g, ins, out, saved, attrs):
    x = ins[0]
    h, w = attrs["h"], attrs["w"]
    c = x.shape[1]
    ho, wo = (h + 1) // 2, (w + 1) // 2
    gp = np.zeros((h + 2, w + 2, c), dtype=g.dtype)
    g3 = g.reshape(ho, wo, 9, c)
    for k in range(9):
        dy, dx = divmod(k, 3)
        gp[dy:dy + 2 * ho:2, dx:dx + 2 * wo:2] += g3[:, :, k]
    return (gp[1:h + 1, 1:w + 1].reshape(h * w, c),)


def _concat_cols_f(ins, attrs):
    rows = {a.shape[0] for a in ins}
    if len(rows) != 1:
        raise ShapeError("concat_cols: row counts differ")
    return np.concatenate(ins, axis=1), None


def _concat_cols_b(g, ins, out, saved, attrs):
    edges = np.cumsum([a.shape[1] for a in ins])[:-1]
    return tuple(np.split(g, edges, axis=1))


def _sigmoid_f(ins, attrs):
    z = ins[0]
    return _stable_sigmoid(z), None


def _sigmoid_b(g, ins, y, saved, attrs):
    return (g * y * (1 - y),)


def _bce_logits_f(ins, attrs):
    z, y = ins
    if z.shape != y.shape:
        raise ShapeError(f"bce: logits {z.shape} vs labels {y.shape}")
    loss = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    return loss.mean().reshape(1, 1), None


def _bce_logits_b(g, ins, out, saved, attrs):
    z, y = ins
    return g[0, 0] * (_stable_sigmoid(z) - y) / z.size, np.zeros_like(y)


def _stable_sigmoid(z):
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1 / (1 + e), e / (1 + e)).astype(z.dtype)


_OPS: dict[str, tuple[Callable, Callable]] = {
    "matmul": (_matmul_f, _matmul_b),
    "add": (_add_f, _add_b),
    "sub": (_sub_f, _sub_b),
    "mul": (_mul_f, _mul_b),
    "scale": (_scale_f, _scale_b),
    "bias": (_bias_f, _bias_b),
    "transpose": (_transpose_f, _transpose_b),
    "sum": (_sum_f, _sum_b),
    "gelu": (_gelu_f, _gelu_b),
    "softmax_rows": (_softmax_f, _softmax_b),
    "layer_norm": (_layer_norm_f, _layer_norm_b),
    "group_conv1d": (_group_conv_f, _group_conv_b),
    "im2col": (_im2col_f, _im2col_b),
    "concat_cols": (_concat_cols_f, _concat_cols_b),
    "sigmoid": (_sigmoid_f, _sigmoid_b),
    "bce_logits": (_bce_logits_f, _bce_logits_b),
}


# --- tape ---------------------------------------------------------------------


@dataclass
class _Record:
    op: str  # "leaf", "const" or a key of _OPS
    inputs: tuple[int, ...]
    attrs: dict
    value: np.ndarray
    saved: object = None


class Node:
    """Handle to one recorded value; supports ``+ - * @`` between nodes."""

    __slots__ = ("tape", "id")

    def __init__(self, tape: "Tape", id: int):
        self.tape = tape
        self.id = id

    @property
    def value(self) -> np.ndarray:
        return self.tape.records[self.id].value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Node):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)

    def sum(self):
        return total(self)

    def __repr__(self):
        return f"Node(id={self.id}, shape={self.shape})"


class Tape:
    """Append-only record of a computation, in topological order."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.records: list[_Record] = []

    def __len__(self):
        return len(self.records)

    def _push(self, op, inputs, attrs, value, saved=None) -> Node:
        value.flags.writeable = False
        self.records.append(_Record(op, tuple(inputs), attrs, value, saved))
        return Node(self, len(self.records) - 1)

    def leaf(self, value) -> Node:
        """A differentiable input (parameter)."""
        return self._push("leaf", (), {}, np.array(value, dtype=self.dtype, ndmin=1))

    def const(self, value) -> Node:
        """A non-differentiable input (data)."""
        return self._push("const", (), {}, np.array(value, dtype=self.dtype, ndmin=1))

    def apply(self, op: str, inputs: tuple[Node, ...], **attrs) -> Node:
        for node in inputs:
            if node.tape is not self:
                raise ContractError("inputs belong to a different tape")
        fwd, _ = _OPS[op]
        value, saved = fwd(tuple(n.value for n in inputs), attrs)
        return self._push(op, (n.id for n in inputs), attrs, np.asarray(value), saved)

    def leaves(self) -> list[int]:
        return [i for i, r in enumerate(self.records) if r.op == "leaf"]

    def replay(self, leaf_values: dict[int, np.ndarray] | None = None) -> list[np.ndarray]:
        """Recompute every node from the stored leaves/constants (optionally
        substituting some leaf values) without touching the tape."""
        leaf_values = leaf_values or {}
        values: list[np.ndarray] = []
        for i, rec in enumerate(self.records):
            if rec.op in ("leaf", "const"):
                values.append(np.asarray(leaf_values.get(i, rec.value), dtype=self.dtype))
            else:
                out, _ = _OPS[rec.op][0](tuple(values[j] for j in rec.inputs), rec.attrs)
                values.append(out)
        return values


def backward(tape: Tape, output: Node) -> dict[int, np.ndarray]:
    """Gradients of a scalar ``output`` w.r.t. every leaf on ``tape``.
    Leaves that do not influence the output receive zeros."""
    if output.value.size != 1:
        raise ContractError(f"backward needs a scalar output, got shape {output.shape}")
    grads: dict[int, np.ndarray] = {output.id: np.ones_like(output.value)}
    for i in range(output.id, -1, -1):
        g = grads.pop(i, None) if tape.records[i].op not in ("leaf",) else grads.get(i)
        rec = tape.records[i]
        if g is None or rec.op in ("leaf", "const"):
            continue
        ins = tuple(tape.records[j].value for j in rec.inputs)
        in_grads = _OPS[rec.op][1](g, ins, rec.value, rec.saved, rec.attrs)
        for j, gj in zip(rec.inputs, in_grads):
            if tape.records[j].op == "const":
                continue
            gj = np.asarray(gj, dtype=tape.dtype).reshape(tape.records[j].value.shape)
            if j in grads:
                grads[j] = grads[j] + gj
            else:
                grads[j] = gj
    return {i: grads.get(i, np.zeros_like(tape.records[i].value)) for i in tape.leaves()}


# --- op wrappers ----------------------------------------------------------------


def matmul(a: Node, b: Node) -> Node:
    return a.tape.apply("matmul", (a, b))


def add(a: Node, b: Node) -> Node:
    return a.tape.apply("add", (a, b))


def sub(a: Node, b: Node) -> Node:
    return a.tape.apply("sub", (a, b))


def mul(a: Node, b: Node) -> Node:
    return a.tape.apply("mul", (a, b))


def scale(a: Node, c: float) -> Node:
    return a.tape.apply("scale", (a,), c=float(c))


def add_bias(x: Node, b: Node) -> Node:
    return x.tape.apply("bias", (x, b))


def transpose(a: Node) -> Node:
    return a.tape.apply("transpose", (a,))


def total(a: Node) -> Node:
    return a.tape.apply("sum", (a,))


def gelu(x: Node) -> Node:
    """Exact GeLU, ``x * Phi(x)`` with the erf form of the normal CDF."""
    return x.tape.apply("gelu", (x,))


def softmax_rows(m: Node) -> Node:
    return m.tape.apply("softmax_rows", (m,))


def layer_norm(x: Node, gamma: Node, beta: Node, eps: float = LN_EPS) -> Node:
    return x.tape.apply("layer_norm", (x, gamma, beta), eps=float(eps))


def group_conv1d(f: Node, kernel: Node) -> Node:
    """Depthwise 1-D cross-correlation along the token (row) axis with zero
    "same" padding; channel ``c`` uses row ``c`` of ``kernel``."""
    return f.tape.apply("group_conv1d", (f, kernel))


def im2col(x: Node, h: int, w: int) -> Node:
    return x.tape.apply("im2col", (x,), h=int(h), w=int(w))


def concat_cols(parts: list[Node]) -> Node:
    return parts[0].tape.apply("concat_cols", tuple(parts))


def sigmoid(z: Node) -> Node:
    return z.tape.apply("sigmoid", (z,))


def bce_with_logits(z: Node, labels: Node) -> Node:
    """Mean binary cross-entropy computed from logits (log-sum-exp form)."""
    return z.tape.apply("bce_logits", (z, labels))


def linear(x: Node, w: Node, b: Node | None = None) -> Node:
    y = matmul(x, w)
    return y if b is None else add_bias(y, b)


def mlp_forward(x: Node, weights: list[Node], biases: list[Node], activations: list[str | None]) -> Node:
    """Token-wise stack of affine layers, each followed by its activation
    (``"gelu"`` or ``None``)."""
    if not len(weights) == len(biases) == len(activations):
        raise ShapeError("one bias and one activation per weight matrix")
    for w, b, act in zip(weights, biases, activations):
        x = linear(x, w, b)
        if act == "gelu":
            x = gelu(x)
        elif act is not None:
            raise ValueError(f"unknown activation {act!r}")
    return x


# --- finite-difference checking ------------------------------------------------


def grad_check(
    f: Callable[[dict[str, Node]], Node],
    params: dict[str, np.ndarray],
    eps: float = 1e-5,
    floor: float = 1e-8,
    max_entries: int | None = None,
    seed: int = 0,
    corrupt: Callable[[dict[str, np.ndarray]], None] | None = None,
    ladder: tuple[float, ...] = (1.0,),
) -> float:
    """Largest relative disagreement between tape gradients and central
    differences, in float64.

    ``f`` receives a dict of leaf nodes (same keys as ``params``) and must
    return a scalar node.  ``max_entries`` caps how many coordinates per
    array are probed (chosen with ``seed``); ``corrupt`` may edit the
    analytic gradients in place, which is how the checker is tested against
    itself.

    ``ladder`` lists step multipliers tried per coordinate (best agreement
    wins).  Deep stacks mix gradients spanning many decades, and no single
    step sits between the roundoff and truncation regimes for all of them; a
    wrong gradient disagrees at every step, so the ladder does not mask bugs.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    def evaluate(values) -> tuple[Tape, dict[str, Node], Node]:
        tape = Tape(np.float64)
        leaves = {k: tape.leaf(v) for k, v in values.items()}
        return tape, leaves, f(leaves)

    tape, leaves, out = evaluate(base)
    ids = backward(tape, out)
    analytic = {k: ids[n.id] for k, n in leaves.items()}
    if corrupt is not None:
        corrupt(analytic)

    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, value in base.items():
        flat_idx = np.arange(value.size)
        if max_entries is not None and value.size > max_entries:
            flat_idx = np.sort(rng.choice(value.size, size=max_entries, replace=False))
        for i in flat_idx:
            idx = np.unravel_index(i, value.shape)
            a = analytic[name][idx]
            best = np.inf
            for mult in ladder:
                h = eps * mult
                hi = dict(base)
                lo = dict(base)
                hi[name] = value.copy()
                lo[name] = value.copy()
                hi[name][idx] += h
                lo[name][idx] -= h
                cd = (evaluate(hi)[2].value.item() - evaluate(lo)[2].value.item()) / (2 * h)
                best = min(best, abs(a - cd) / max(abs(a), abs(cd), floor))
                if best < 1e-7:
                    break
            worst = max(worst, best)
    return worst
