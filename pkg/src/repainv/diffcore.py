"""Eager, tape-based reverse-mode differentiation over float64 numpy arrays.

Every op records its output and a backward closure on a :class:`Tape`.
Shapes are explicit: the only implicit broadcasting allowed is
scalar-tensor arithmetic, a shared 2-D weight in :func:`matmul`, and a
trailing-dims bias in :func:`add_bias`.  Anything else must go through an
explicit op (:func:`repeat_tokens`, :func:`apply_mask`, ...).

Example::

    tape = Tape()
    x = tape.var(np.array([3.0, 4.0]))
    y = dsum(x * x)
    (gx,) = tape.gradient(y, [x])   # -> [6., 8.]
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from scipy import ndimage

__all__ = [
    "NonFiniteError",
    "Tape",
    "Var",
    "Graph",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "transpose",
    "add_bias",
    "repeat_tokens",
    "concat",
    "conv2d",
    "avg_pool",
    "upsample_nearest",
    "apply_mask",
    "reshape",
    "patchify",
    "unpatchify",
    "dsum",
    "dmean",
    "square",
    "l2norm",
    "normalize_rows",
    "cosine_rows",
    "relu",
    "gelu",
    "dsin",
    "dcos",
    "finite_difference_check",
]


class NonFiniteError(FloatingPointError):
    """Raised when a recorded value or gradient contains NaN or Inf."""


class _Node:
    __slots__ = ("kind", "inputs", "backward", "requires_grad")

    def __init__(self, kind, inputs, backward, requires_grad):
        self.kind = kind
        self.inputs = inputs
        self.backward = backward
        self.requires_grad = requires_grad


class Var:
    """Handle to one recorded value on a tape."""

    __slots__ = ("tape", "idx", "value")

    def __init__(self, tape: "Tape", idx: int, value: np.ndarray):
        self.tape = tape
        self.idx = idx
        self.value = value

    @property
    def shape(self):
        return self.value.shape

    @property
    def requires_grad(self) -> bool:
        return self.tape._nodes[self.idx].requires_grad

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        if not _is_scalar(other):
            raise TypeError("division only by a python/numpy scalar")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        kind = self.tape._nodes[self.idx].kind
        return f"Var(#{self.idx} {kind} shape={self.shape})"


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer)) or (
        isinstance(x, np.ndarray) and x.ndim == 0
    )


class Tape:
    """Append-only record of operations; single use, single thread."""

    def __init__(self, check_finite: bool = True):
        self._nodes: list[_Node] = []
        self.check_finite = check_finite

    def __len__(self):
        return len(self._nodes)

    def var(self, value, requires_grad: bool = True, name: str | None = None) -> Var:
        """Register a root (input or parameter)."""
        arr = np.array(value, dtype=np.float64)
        return self._record(name or "root", (), arr, None, requires_grad)

    def const(self, value) -> Var:
        arr = np.asarray(value, dtype=np.float64)
        return self._record("const", (), arr, None, False)

    def _record(self, kind, inputs, value, backward, requires_grad=None) -> Var:
        if self.check_finite and not np.all(np.isfinite(value)):
            raise NonFiniteError(
                f"non-finite value produced by node #{len(self._nodes)} ({kind})"
            )
        if requires_grad is None:
            requires_grad = any(self._nodes[i].requires_grad for i in inputs)
        self._nodes.append(_Node(kind, tuple(inputs), backward, requires_grad))
        return Var(self, len(self._nodes) - 1, value)

    def gradient(
        self, out: Var, wrt: Sequence[Var], allow_unreachable: bool = False
    ) -> list[np.ndarray]:
        """Backpropagate from scalar ``out`` and return d(out)/d(w) for each root.

        The tape is left intact, so several gradients may be taken from one
        forward pass.
        """
        if out.tape is not self:
            raise ValueError("output belongs to a different tape")
        if out.value.size != 1:
            raise ValueError(f"gradient requires a scalar output, got shape {out.shape}")
        for w in wrt:
            if self._nodes[w.idx].inputs or self._nodes[w.idx].backward is not None:
                raise ValueError(f"{w!r} is not a root")
        wanted = {w.idx for w in wrt}
        grads: dict[int, np.ndarray] = {out.idx: np.ones_like(out.value)}
        found: dict[int, np.ndarray] = {}
        for i in range(out.idx, -1, -1):
            g = grads.pop(i, None)
            if g is None:
                continue
            node = self._nodes[i]
            if i in wanted:
                found[i] = g
            if node.backward is None or not node.requires_grad:
                continue
            in_grads = node.backward(g)
            for j, gj in zip(node.inputs, in_grads):
                if gj is None or not self._nodes[j].requires_grad:
                    continue
                if j in grads:
                    grads[j] = grads[j] + gj
                else:
                    grads[j] = gj
        result = []
        for w in wrt:
            if w.idx not in found:
                if not allow_unreachable:
                    raise ValueError(f"{w!r} is not reachable from the output")
                result.append(np.zeros_like(w.value))
                continue
            g = found[w.idx]
            if self.check_finite and not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient for root #{w.idx}")
            result.append(g)
        return result


class Graph:
    """A reusable function of root arrays, evaluated on a fresh tape per call.

    ``fn`` receives the root :class:`Var` objects and must return a Var.
    """

    def __init__(self, fn: Callable[..., Var], root_shapes: Sequence[tuple]):
        self.fn = fn
        self.root_shapes = [tuple(s) for s in root_shapes]
        self.tape: Tape | None = None
        self.roots: list[Var] = []
        self.output: Var | None = None

    def forward(self, inputs: Sequence[np.ndarray]) -> np.ndarray:
        if len(inputs) != len(self.root_shapes):
            raise ValueError(f"expected {len(self.root_shapes)} inputs, got {len(inputs)}")
        for k, (a, s) in enumerate(zip(inputs, self.root_shapes)):
            if np.shape(a) != s:
                raise ValueError(f"input {k}: shape {np.shape(a)} != declared {s}")
        self.tape = Tape()
        self.roots = [self.tape.var(a) for a in inputs]
        self.output = self.fn(*self.roots)
        return self.output.value

    def gradient(self, wrt: Sequence[int] | None = None) -> list[np.ndarray]:
        if self.output is None:
            raise RuntimeError("forward() must run before gradient()")
        idx = range(len(self.roots)) if wrt is None else wrt
        return self.tape.gradient(self.output, [self.roots[i] for i in idx])


# ---------------------------------------------------------------------------
# helpers


def _as_var(tape: Tape, x) -> Var:
    if isinstance(x, Var):
        if x.tape is not tape:
            raise ValueError("mixing Vars from different tapes")
        return x
    return tape.const(x)


def _check_same_shape(kind, a: Var, b: Var):
    if a.shape != b.shape:
        raise ValueError(f"{kind}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Var, b) -> Var:
    tape = a.tape
    if _is_scalar(b):
        c = float(b)
        return tape._record("add_scalar", (a.idx,), a.value + c, lambda g: (g,))
    b = _as_var(tape, b)
    _check_same_shape("add", a, b)
    return tape._record("add", (a.idx, b.idx), a.value + b.value, lambda g: (g, g))


def sub(a: Var, b) -> Var:
    tape = a.tape
    if _is_scalar(b):
        c = float(b)
        return tape._record("sub_scalar", (a.idx,), a.value - c, lambda g: (g,))
    b = _as_var(tape, b)
    _check_same_shape("sub", a, b)
    return tape._record("sub", (a.idx, b.idx), a.value - b.value, lambda g: (g, -g))


def neg(a: Var) -> Var:
    return a.tape._record("neg", (a.idx,), -a.value, lambda g: (-g,))


def mul(a: Var, b) -> Var:
    tape = a.tape
    if _is_scalar(b):
        c = float(b)
        return tape._record("mul_scalar", (a.idx,), a.value * c, lambda g: (g * c,))
    b = _as_var(tape, b)
    _check_same_shape("mul", a, b)
    av, bv = a.value, b.value
    return tape._record("mul", (a.idx, b.idx), av * bv, lambda g: (g * bv, g * av))


def square(a: Var) -> Var:
    av = a.value
    return a.tape._record("square", (a.idx,), av * av, lambda g: (2.0 * av * g,))


# ---------------------------------------------------------------------------
# linear algebra


def _mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """a @ b where a is (..., n, k) and b is (k, m), through a single gemm."""
    lead = a.shape[:-1]
    return (a.reshape(-1, a.shape[-1]) @ b).reshape(*lead, b.shape[-1])


def _lmm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """a @ b where a is (n, k) and b is (B, k, m)."""
    bt = np.moveaxis(b, -2, 0)  # (k, B, m)
    k = bt.shape[0]
    out = a @ bt.reshape(k, -1)
    return np.moveaxis(out.reshape(a.shape[0], *bt.shape[1:]), 0, -2)


def matmul(a: Var, b) -> Var:
    """Matrix product over the last two axes.

    Either operand may be a 2-D weight shared over the other's batch axes;
    otherwise batch axes must match exactly.
    """
    tape = a.tape
    b = _as_var(tape, b)
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2]:
        raise ValueError(f"matmul: incompatible shapes {av.shape} @ {bv.shape}")

    if bv.ndim == 2:
        out = _mm(av, bv)

        def backward(g):
            ga = _mm(g, bv.T)
            gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb

    elif av.ndim == 2:
        out = _lmm(av, bv)

        def backward(g):
            # g: (..., n, m); ga = sum_batch g @ b^T ; gb = a^T @ g
            gt = np.moveaxis(g, -2, 0).reshape(g.shape[-2], -1)
            bt = np.moveaxis(bv, -2, 0).reshape(bv.shape[-2], -1)
            ga = gt @ bt.T
            gb = _lmm(av.T, g)
            return ga, gb

    else:
        if av.shape[:-2] != bv.shape[:-2]:
            raise ValueError(f"matmul: batch mismatch {av.shape} @ {bv.shape}")
        out = np.matmul(av, bv)

        def backward(g):
            return np.matmul(g, np.swapaxes(bv, -1, -2)), np.matmul(np.swapaxes(av, -1, -2), g)

    return tape._record("matmul", (a.idx, b.idx), out, backward)


def transpose(a: Var, axes: Sequence[int] | None = None) -> Var:
    axes = tuple(range(a.value.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return a.tape._record(
        "transpose", (a.idx,), np.transpose(a.value, axes), lambda g: (np.transpose(g, inv),)
    )


def add_bias(x: Var, b) -> Var:
    """x + b where b's shape equals the trailing dims of x."""
    tape = x.tape
    b = _as_var(tape, b)
    k = b.value.ndim
    if x.shape[x.value.ndim - k :] != b.shape:
        raise ValueError(f"add_bias: bias {b.shape} does not match trailing dims of {x.shape}")
    lead = tuple(range(x.value.ndim - k))
    return tape._record(
        "add_bias", (x.idx, b.idx), x.value + b.value, lambda g: (g, g.sum(axis=lead))
    )


def repeat_tokens(x: Var, n: int) -> Var:
    """(B, D) -> (B, n, D) by copying each row n times."""
    if x.value.ndim != 2:
        raise ValueError("repeat_tokens expects a (B, D) input")
    out = np.repeat(x.value[:, None, :], n, axis=1)
    return x.tape._record("repeat_tokens", (x.idx,), out, lambda g: (g.sum(axis=1),))


def concat(xs: Sequence[Var], axis: int = -1) -> Var:
    tape = xs[0].tape
    vals = [x.value for x in xs]
    out = np.concatenate(vals, axis=axis)
    splits = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return tape._record("concat", tuple(x.idx for x in xs), out, backward)


# ---------------------------------------------------------------------------
# image ops; images are (B, H, W)


def conv2d(x: Var, kernel: np.ndarray) -> Var:
    """Same-size 2-D convolution with zero padding; the kernel is a constant."""
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.ndim != 2 or kernel.shape[0] % 2 == 0 or kernel.shape[1] % 2 == 0:
        raise ValueError(f"conv2d needs an odd-sized 2-D kernel, got {kernel.shape}")
    if x.value.ndim != 3:
        raise ValueError(f"conv2d expects (B, H, W), got {x.shape}")
    if kernel.shape[0] > x.shape[1] or kernel.shape[1] > x.shape[2]:
        raise ValueError(f"kernel {kernel.shape} larger than image {x.shape[1:]}")
    k3 = kernel[None]
    out = ndimage.convolve(x.value, k3, mode="constant", cval=0.0)

    def backward(g):
        return (ndimage.correlate(g, k3, mode="constant", cval=0.0),)

    return x.tape._record("conv2d", (x.idx,), out, backward)


def avg_pool(x: Var, k: int) -> Var:
    b, h, w = x.shape
    if h % k or w % k:
        raise ValueError(f"avg_pool: {h}x{w} not divisible by {k}")
    out = x.value.reshape(b, h // k, k, w // k, k).mean(axis=(2, 4))

    def backward(g):
        return (np.repeat(np.repeat(g, k, axis=1), k, axis=2) / (k * k),)

    return x.tape._record("avg_pool", (x.idx,), out, backward)


def upsample_nearest(x: Var, k: int) -> Var:
    b, h, w = x.shape
    out = np.repeat(np.repeat(x.value, k, axis=1), k, axis=2)

    def backward(g):
        return (g.reshape(b, h, k, w, k).sum(axis=(2, 4)),)

    return x.tape._record("upsample_nearest", (x.idx,), out, backward)


def apply_mask(x: Var, mask: np.ndarray) -> Var:
    """Multiply by a constant mask matching x's trailing dims."""
    mask = np.asarray(mask, dtype=np.float64)
    if x.shape[x.value.ndim - mask.ndim :] != mask.shape:
        raise ValueError(f"mask {mask.shape} does not match {x.shape}")
    return x.tape._record("mask", (x.idx,), x.value * mask, lambda g: (g * mask,))


def reshape(x: Var, shape: Sequence[int]) -> Var:
    old = x.shape
    return x.tape._record(
        "reshape", (x.idx,), x.value.reshape(shape), lambda g: (g.reshape(old),)
    )


def _patchify(a: np.ndarray, s: int) -> np.ndarray:
    b, h, w = a.shape
    p, q = h // s, w // s
    return a.reshape(b, p, s, q, s).transpose(0, 1, 3, 2, 4).reshape(b, p * q, s * s)


def _unpatchify(a: np.ndarray, s: int, h: int, w: int) -> np.ndarray:
    b = a.shape[0]
    p, q = h // s, w // s
    return a.reshape(b, p, q, s, s).transpose(0, 1, 3, 2, 4).reshape(b, h, w)


def patchify(x: Var, s: int) -> Var:
    """(B, H, W) -> (B, N, s*s), patches in row-major order."""
    b, h, w = x.shape
    if h % s or w % s:
        raise ValueError(f"patchify: {h}x{w} not divisible by patch {s}")
    return x.tape._record(
        "patchify", (x.idx,), _patchify(x.value, s), lambda g: (_unpatchify(g, s, h, w),)
    )


def unpatchify(x: Var, s: int, h: int, w: int) -> Var:
    return x.tape._record(
        "unpatchify", (x.idx,), _unpatchify(x.value, s, h, w), lambda g: (_patchify(g, s),)
    )


# ---------------------------------------------------------------------------
# reductions and norms


def dsum(x: Var, axis=None) -> Var:
    shape = x.shape
    out = np.asarray(x.value.sum(axis=axis))

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return x.tape._record("sum", (x.idx,), out, backward)


def dmean(x: Var, axis=None) -> Var:
    n = x.value.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(dsum(x, axis), 1.0 / float(n))


def l2norm(x: Var) -> Var:
    """Euclidean norm over the last axis."""
    xv = x.value
    n = np.sqrt((xv * xv).sum(axis=-1))

    def backward(g):
        return (g[..., None] * xv / n[..., None],)

    return x.tape._record("l2norm", (x.idx,), n, backward)


def normalize_rows(x: Var, tol: float = 1e-12, fallback: np.ndarray | None = None) -> Var:
    """x / ||x|| over the last axis.

    Rows with norm below ``tol`` are replaced by ``fallback`` (a constant unit
    vector, default e_0) and receive zero gradient.
    """
    xv = x.value
    n = np.sqrt((xv * xv).sum(axis=-1, keepdims=True))
    bad = n[..., 0] < tol
    safe = np.where(n < tol, 1.0, n)
    u = xv / safe
    if bad.any():
        if fallback is None:
            fallback = np.zeros(xv.shape[-1])
            fallback[0] = 1.0
        u = np.where(bad[..., None], np.broadcast_to(fallback, xv.shape), u)

    def backward(g):
        gx = (g - u * (g * u).sum(axis=-1, keepdims=True)) / safe
        if bad.any():
            gx = np.where(bad[..., None], 0.0, gx)
        return (gx,)

    return x.tape._record("normalize_rows", (x.idx,), u, backward)


def cosine_rows(a: Var, b) -> Var:
    """Cosine similarity between matching rows (last axis) of a and b."""
    tape = a.tape
    b = _as_var(tape, b)
    _check_same_shape("cosine_rows", a, b)
    av, bv = a.value, b.value
    na = np.sqrt((av * av).sum(axis=-1))
    nb = np.sqrt((bv * bv).sum(axis=-1))
    if np.any(na == 0) or np.any(nb == 0):
        raise ValueError("cosine_rows: zero-norm row")
    c = (av * bv).sum(axis=-1) / (na * nb)

    def backward(g):
        ga = g[..., None] * (bv / (na * nb)[..., None] - c[..., None] * av / (na * na)[..., None])
        gb = g[..., None] * (av / (na * nb)[..., None] - c[..., None] * bv / (nb * nb)[..., None])
        return ga, gb

    return tape._record("cosine_rows", (a.idx, b.idx), c, backward)


# ---------------------------------------------------------------------------
# nonlinearities


def relu(x: Var) -> Var:
    xv = x.value
    return x.tape._record("relu", (x.idx,), np.maximum(xv, 0.0), lambda g: (g * (xv > 0),))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Var) -> Var:
    """tanh-approximated GELU (smooth, so finite differences behave)."""
    xv = x.value
    x2 = xv * xv
    th = np.tanh(_GELU_C * xv * (1.0 + 0.044715 * x2))
    half = 0.5 * (1.0 + th)
    out = xv * half

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (half + 0.5 * xv * (1.0 - th * th) * dinner),)

    return x.tape._record("gelu", (x.idx,), out, backward)


def dsin(x: Var) -> Var:
    xv = x.value
    return x.tape._record("sin", (x.idx,), np.sin(xv), lambda g: (g * np.cos(xv),))


def dcos(x: Var) -> Var:
    xv = x.value
    return x.tape._record("cos", (x.idx,), np.cos(xv), lambda g: (-g * np.sin(xv),))


# ---------------------------------------------------------------------------


def finite_difference_check(
    fn: Callable[..., Var],
    inputs: Sequence[np.ndarray],
    eps: float = 1e-5,
    n_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between backward gradients and central differences.

    ``fn`` maps root Vars to a scalar Var.  If ``n_coords`` is given, only that
    many randomly chosen coordinates per input are probed.
    """
    rng = rng or np.random.default_rng(0)
    inputs = [np.array(a, dtype=np.float64) for a in inputs]
    tape = Tape()
    roots = [tape.var(a) for a in inputs]
    grads = tape.gradient(fn(*roots), roots, allow_unreachable=True)

    def evaluate(arrs):
        t = Tape()
        return float(fn(*[t.var(a) for a in arrs]).value)

    worst = 0.0
    for k, a in enumerate(inputs):
        coords = np.arange(a.size)
        if n_coords is not None and n_coords < a.size:
            coords = rng.choice(a.size, size=n_coords, replace=False)
        for c in coords:
            plus = [x.copy() for x in inputs]
            minus = [x.copy() for x in inputs]
            plus[k].flat[c] += eps
            minus[k].flat[c] -= eps
            fd = (evaluate(plus) - evaluate(minus)) / (2 * eps)
            ad = grads[k].flat[c]
            scale = max(abs(fd), abs(ad), 1e-6)
            worst = max(worst, abs(fd - ad) / scale)
    return worst
