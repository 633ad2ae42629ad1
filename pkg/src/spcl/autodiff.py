"""Dense float64 tensors with reverse-mode differentiation on an explicit tape.

A ``Tensor`` wraps an immutable C-order float64 ndarray. While a ``GradTape``
is active, every primitive applied to a tracked tensor appends a node (inputs,
forward closure, backward closure) to the tape; ``grad`` walks the tape in
reverse to accumulate d(scalar)/d(param), and ``GradTape.replay`` re-executes
the recorded forwards to reproduce the output bit-for-bit. Outside a tape,
the same primitives evaluate eagerly with no recording.

Every public operation checks its result for NaN/Inf and raises
``NonFiniteValue`` instead of propagating garbage.
"""

from __future__ import annotations

import warnings
from typing import Callable, Sequence

import numpy as np

from .errors import DisconnectedParamWarning, NonFiniteValue, NormTooSmall, ShapeMismatch

EPS_NORM = 1e-30

_TAPE_STACK: list["GradTape"] = []


def _freeze(a: np.ndarray) -> np.ndarray:
    out = np.array(a, dtype=np.float64, order="C")
    out.flags.writeable = False
    return out


class Tensor:
    """Immutable float64 array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = _freeze(data)
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteValue(f"tensor {name!r} contains NaN/Inf")
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # arithmetic (scalars and ndarrays are wrapped as constants)
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __pow__(self, exponent):
        return power(self, exponent)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def leaky_relu(self, slope: float = 0.01):
        return leaky_relu(self, slope)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


class Node:
    """One recorded primitive: inputs, output, and its forward/backward rules."""

    __slots__ = ("op", "inputs", "output", "forward_fn", "backward_fn")

    def __init__(self, op, inputs, output, forward_fn, backward_fn):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.forward_fn = forward_fn
        self.backward_fn = backward_fn


class GradTape:
    """Ordered record of primitive applications for one differentiable scope."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._tracked: set[int] = set()

    def __enter__(self) -> "GradTape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self

    def watch(self, tensor: Tensor) -> None:
        self._tracked.add(id(tensor))

    def _tracks(self, tensor: Tensor) -> bool:
        return tensor.requires_grad or id(tensor) in self._tracked

    def replay(self) -> np.ndarray:
        """Re-execute the recorded forward ops; return the last output's value.

        Leaf tensors are read from their (immutable) data, so the result must
        reproduce the original forward value bit-for-bit.
        """
        if not self.nodes:
            raise ValueError("empty tape")
        values: dict[int, np.ndarray] = {}

        def value_of(t: Tensor) -> np.ndarray:
            return values.get(id(t), t.data)

        out = None
        for node in self.nodes:
            out = node.forward_fn(*[value_of(t) for t in node.inputs])
            values[id(node.output)] = out
        return np.asarray(out)

    def gradient(
        self,
        output: Tensor,
        params: Sequence[Tensor],
        warn_disconnected: bool = True,
    ) -> list[np.ndarray]:
        """Gradient of a recorded scalar output w.r.t. each parameter tensor.

        Parameters that never influenced ``output`` get an exact zero gradient
        and a ``DisconnectedParamWarning`` (suppress with
        ``warn_disconnected=False``).
        """
        if output.data.ndim != 0:
            raise ShapeMismatch(f"gradient target must be scalar, got shape {output.shape}")
        grads: dict[int, np.ndarray] = {id(output): np.ones((), dtype=np.float64)}
        for node in reversed(self.nodes):
            g_out = grads.pop(id(node.output), None)
            if g_out is None:
                continue
            g_inputs = node.backward_fn(g_out)
            for t, g in zip(node.inputs, g_inputs):
                if g is None or not self._tracks(t):
                    continue
                acc = grads.get(id(t))
                grads[id(t)] = g if acc is None else acc + g
        out: list[np.ndarray] = []
        disconnected: list[str] = []
        for i, p in enumerate(params):
            g = grads.get(id(p))
            if g is None:
                disconnected.append(p.name or f"param[{i}]")
                g = np.zeros(p.shape, dtype=np.float64)
            out.append(np.asarray(g, dtype=np.float64).reshape(p.shape))
        if disconnected and warn_disconnected:
            warnings.warn(
                f"parameters do not influence the output: {disconnected}",
                DisconnectedParamWarning,
                stacklevel=2,
            )
        return out


def active_tape() -> GradTape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def grad(
    output: Tensor,
    params: Sequence[Tensor],
    tape: GradTape | None = None,
    warn_disconnected: bool = True,
) -> list[np.ndarray]:
    """Reverse-mode gradient of ``output`` w.r.t. ``params`` on the given/active tape."""
    tape = tape or active_tape()
    if tape is None:
        raise ValueError("grad() requires an active or explicit GradTape")
    return tape.gradient(output, params, warn_disconnected=warn_disconnected)


def _apply(
    op: str,
    inputs: tuple[Tensor, ...],
    forward_fn: Callable[..., np.ndarray],
    backward_fn_factory,
) -> Tensor:
    """Run a primitive; record it on the active tape if any input is tracked.

    ``backward_fn_factory(input_datas, out_data)`` must return a closure
    mapping the output cotangent to one cotangent (or None) per input.
    """
    datas = [t.data for t in inputs]
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        out_data = forward_fn(*datas)
    if not np.all(np.isfinite(out_data)):
        raise NonFiniteValue(f"op {op!r} produced NaN/Inf")
    tape = active_tape()
    tracked = tape is not None and any(tape._tracks(t) for t in inputs)
    out = Tensor(out_data)
    if tracked:
        tape._tracked.add(id(out))
        tape.nodes.append(Node(op, inputs, out, forward_fn, backward_fn_factory(datas, out_data)))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast cotangent back down to the original operand shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    def bwd(datas, out):
        sa, sb = datas[0].shape, datas[1].shape
        return lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb))

    return _apply("add", (a, b), np.add, bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def bwd(datas, out):
        sa, sb = datas[0].shape, datas[1].shape
        return lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb))

    return _apply("sub", (a, b), np.subtract, bwd)


def neg(a: Tensor) -> Tensor:
    return _apply("neg", (a,), np.negative, lambda datas, out: lambda g: (-g,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    def bwd(datas, out):
        da, db = datas
        return lambda g: (_unbroadcast(g * db, da.shape), _unbroadcast(g * da, db.shape))

    return _apply("mul", (a, b), np.multiply, bwd)


def div(a: Tensor, b: Tensor) -> Tensor:
    def bwd(datas, out):
        da, db = datas
        return lambda g: (
            _unbroadcast(g / db, da.shape),
            _unbroadcast(-g * da / (db * db), db.shape),
        )

    return _apply("div", (a, b), np.divide, bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeMismatch(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")

    def bwd(datas, out):
        da, db = datas
        return lambda g: (g @ db.T, da.T @ g)

    return _apply("matmul", (a, b), np.matmul, bwd)


def transpose(a: Tensor) -> Tensor:
    return _apply(
        "transpose",
        (a,),
        lambda x: np.ascontiguousarray(x.T),
        lambda datas, out: lambda g: (g.T,),
    )


def exp(a: Tensor) -> Tensor:
    return _apply("exp", (a,), np.exp, lambda datas, out: lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    def bwd(datas, out):
        (da,) = datas
        return lambda g: (g / da,)

    return _apply("log", (a,), np.log, bwd)


def power(a: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)

    def bwd(datas, out):
        (da,) = datas
        return lambda g: (g * exponent * da ** (exponent - 1.0),)

    return _apply("power", (a,), lambda x: x**exponent, bwd)


_KINK_TRACK: list[float] | None = None


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    slope = float(slope)

    def fwd(x):
        if _KINK_TRACK is not None and x.size:
            _KINK_TRACK.append(float(np.min(np.abs(x))))
        return np.where(x > 0.0, x, slope * x)

    def bwd(datas, out):
        (da,) = datas
        return lambda g: (g * np.where(da > 0.0, 1.0, slope),)

    return _apply("leaky_relu", (a,), fwd, bwd)


def min_kink_distance(f, *args) -> float:
    """Smallest |pre-activation| any leaky_relu sees while evaluating f(*args).

    Central differences are invalid when a perturbation crosses the kink, so
    gradient checks should skip configurations where this distance is within
    a safety factor of the step.
    """
    global _KINK_TRACK
    prev = _KINK_TRACK
    _KINK_TRACK = []
    try:
        f(*args)
        return min(_KINK_TRACK) if _KINK_TRACK else float("inf")
    finally:
        _KINK_TRACK = prev


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def fwd(x):
        return np.sum(x, axis=axis, keepdims=keepdims)

    def bwd(datas, out):
        shape = datas[0].shape

        def back(g):
            g = np.asarray(g)
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return back

    return _apply("sum", (a,), fwd, bwd)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def fwd(x):
        return np.mean(x, axis=axis, keepdims=keepdims)

    def bwd(datas, out):
        shape = datas[0].shape
        n = datas[0].size if axis is None else np.prod([shape[i] for i in np.atleast_1d(axis)])

        def back(g):
            g = np.asarray(g) / float(n)
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return back

    return _apply("mean", (a,), fwd, bwd)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    def bwd(datas, out):
        orig = datas[0].shape
        return lambda g: (g.reshape(orig),)

    return _apply("reshape", (a,), lambda x: x.reshape(shape).copy(), bwd)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(_as_tensor(t) for t in tensors)

    def fwd(*xs):
        return np.concatenate(xs, axis=axis)

    def bwd(datas, out):
        sizes = [d.shape[axis] for d in datas]
        splits = np.cumsum(sizes)[:-1]
        return lambda g: tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _apply("concat", tensors, fwd, bwd)


def _patch_indices(h: int, w: int, k: int) -> np.ndarray:
    """Flat pixel indices of each kxk window (same padding) on an h*w grid.

    Out-of-bounds taps map to index h*w, a zero pad slot appended to the
    flattened image.
    """
    r = k // 2
    rows = np.arange(h)[:, None, None, None] + np.arange(-r, r + 1)[None, None, :, None]
    cols = np.arange(w)[None, :, None, None] + np.arange(-r, r + 1)[None, None, None, :]
    rows = np.broadcast_to(rows, (h, w, k, k))
    cols = np.broadcast_to(cols, (h, w, k, k))
    inside = (rows >= 0) & (rows < h) & (cols >= 0) & (cols < w)
    flat = np.where(inside, rows * w + cols, h * w)
    return flat.reshape(h * w, k * k)


_PATCH_CACHE: dict[tuple[int, int, int], np.ndarray] = {}


def conv2d(x: Tensor, kernel: Tensor, image_hw: tuple[int, int]) -> Tensor:
    """Same-padded 2-D convolution via im2col.

    x: (B, H*W*Cin) with channel-last pixel layout; kernel: (k*k*Cin, Cout).
    Returns (B, H*W*Cout). The square kernel size is inferred from shapes.
    """
    h, w = image_hw
    cin = x.shape[1] // (h * w)
    k2 = kernel.shape[0] // cin
    k = int(round(k2**0.5))
    if k * k * cin != kernel.shape[0]:
        raise ShapeMismatch(f"kernel rows {kernel.shape[0]} not a k*k*{cin} layout")
    idx = _PATCH_CACHE.setdefault((h, w, k), _patch_indices(h, w, k))
    cout = kernel.shape[1]

    def im2col(xd, channels):
        b = xd.shape[0]
        imgs = xd.reshape(b, h * w, channels)
        padded = np.concatenate([imgs, np.zeros((b, 1, channels))], axis=1)
        return padded[:, idx, :].reshape(b * h * w, k * k * channels)

    def fwd(xd, kd):
        return (im2col(xd, cin) @ kd).reshape(xd.shape[0], h * w * cout)

    def bwd(datas, out):
        xd, kd = datas
        # input cotangent of a same-padded stride-1 conv is a conv of the
        # output cotangent with the spatially flipped, channel-swapped kernel
        flipped = kd.reshape(k, k, cin, cout)[::-1, ::-1].transpose(0, 1, 3, 2).reshape(k * k * cout, cin)

        def back(g):
            b = xd.shape[0]
            g_kernel = im2col(xd, cin).T @ g.reshape(b * h * w, cout)
            g_x = (im2col(g, cout) @ flipped).reshape(b, h * w * cin)
            return g_x, g_kernel

        return back

    return _apply("conv2d", (x, kernel), fwd, bwd)


def avg_pool2x(x: Tensor, image_hw: tuple[int, int]) -> Tensor:
    """2x2 mean pooling on (B, H*W*C) channel-last pixels; H and W must be even."""
    h, w = image_hw
    if h % 2 or w % 2:
        raise ShapeMismatch(f"avg_pool2x needs even spatial dims, got {image_hw}")
    c = x.shape[1] // (h * w)

    def fwd(xd):
        b = xd.shape[0]
        grid = xd.reshape(b, h // 2, 2, w // 2, 2, c)
        return grid.mean(axis=(2, 4)).reshape(b, (h // 2) * (w // 2) * c)

    def bwd(datas, out):
        (xd,) = datas

        def back(g):
            b = xd.shape[0]
            g_grid = g.reshape(b, h // 2, 1, w // 2, 1, c) / 4.0
            return (np.broadcast_to(g_grid, (b, h // 2, 2, w // 2, 2, c)).reshape(b, h * w * c).copy(),)

        return back

    return _apply("avg_pool2x", (x,), fwd, bwd)


def upsample2x(x: Tensor, image_hw: tuple[int, int]) -> Tensor:
    """Nearest-neighbor 2x upsampling on (B, H*W*C) channel-last pixels."""
    h, w = image_hw
    c = x.shape[1] // (h * w)

    def fwd(xd):
        b = xd.shape[0]
        grid = xd.reshape(b, h, 1, w, 1, c)
        return np.broadcast_to(grid, (b, h, 2, w, 2, c)).reshape(b, 4 * h * w * c).copy()

    def bwd(datas, out):
        (xd,) = datas

        def back(g):
            b = xd.shape[0]
            return (g.reshape(b, h, 2, w, 2, c).sum(axis=(2, 4)).reshape(b, h * w * c),)

        return back

    return _apply("upsample2x", (x,), fwd, bwd)


# ---------------------------------------------------------------------------
# composites
# ---------------------------------------------------------------------------

def detached_max(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Row/array max as a constant (no gradient flows through the shift)."""
    return Tensor(np.max(a.data, axis=axis, keepdims=keepdims))


def l2_normalize(v: Tensor | np.ndarray) -> Tensor:
    """Scale a 1-D vector to unit Euclidean norm.

    Raises NormTooSmall when the norm is at or below 1e-30: a representation
    that tiny means a dead network upstream, and dividing by it would just
    manufacture noise.
    """
    t = _as_tensor(v)
    if t.ndim != 1:
        raise ShapeMismatch(f"l2_normalize expects a 1-D vector, got shape {t.shape}")
    norm = float(np.linalg.norm(t.data))
    if norm <= EPS_NORM:
        raise NormTooSmall(f"vector norm {norm:.3e} <= {EPS_NORM:.0e}")
    return t / tsum(t * t) ** 0.5


def l2_normalize_rows(m: Tensor | np.ndarray) -> Tensor:
    """Normalize each row of a 2-D matrix to unit norm (differentiable)."""
    t = _as_tensor(m)
    if t.ndim != 2:
        raise ShapeMismatch(f"l2_normalize_rows expects a matrix, got shape {t.shape}")
    norms = np.linalg.norm(t.data, axis=1)
    if np.any(norms <= EPS_NORM):
        raise NormTooSmall(f"row norm {norms.min():.3e} <= {EPS_NORM:.0e}")
    return t / tsum(t * t, axis=1, keepdims=True) ** 0.5


def masked_logsumexp_rows(scores: Tensor, mask: np.ndarray) -> Tensor:
    """Per-row log(sum_j mask_ij * exp(scores_ij)), shift-stabilized, shape (R, 1).

    The shift is the full-row max taken as a constant; it cancels exactly in
    both the value and the gradient, and keeps every exponent <= 0.
    """
    shift = detached_max(scores, axis=1, keepdims=True)
    e = exp(scores - shift) * Tensor(np.asarray(mask, dtype=np.float64))
    return log(tsum(e, axis=1, keepdims=True)) + shift


def finite_diff_check(
    f: Callable[..., Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
    tolerance: float = 1e-4,
    floor: float = 1e-3,
) -> "FiniteDiffReport":
    """Compare analytic gradients of f(*params) against central differences.

    Relative error per coordinate is |a - n| / max(|a| + |n|, floor). The
    floor turns the check into an absolute one on near-zero coordinates,
    where central differences carry truncation error ~ step^2 * f'''/6 and
    roundoff ~ 1e-16 * |f| / step that would otherwise register as spurious
    relative error; proportional corruption of real gradients still fails.
    """
    if not (0.0 < step <= 1e-2):
        raise ValueError(f"step must be in (0, 1e-2], got {step}")
    with GradTape() as tape:
        out = f(*params)
    analytic = tape.gradient(out, params, warn_disconnected=False)

    max_rel = 0.0
    worst = ("", 0)
    for pi, p in enumerate(params):
        base = p.data
        numeric = np.zeros(base.size, dtype=np.float64)
        for ci in range(base.size):
            pert = base.reshape(-1).copy()
            pert[ci] += step
            plus = Tensor(pert.reshape(base.shape), name=p.name)
            pert[ci] = base.reshape(-1)[ci] - step
            minus = Tensor(pert.reshape(base.shape), name=p.name)
            args_p = [plus if j == pi else q for j, q in enumerate(params)]
            args_m = [minus if j == pi else q for j, q in enumerate(params)]
            numeric[ci] = (f(*args_p).item() - f(*args_m).item()) / (2.0 * step)
        numeric = numeric.reshape(base.shape)
        a = analytic[pi]
        rel = np.abs(a - numeric) / np.maximum(np.abs(a) + np.abs(numeric), floor)
        m = float(rel.max()) if rel.size else 0.0
        if m > max_rel:
            max_rel = m
            worst = (p.name or f"param[{pi}]", int(np.argmax(rel)))
    return FiniteDiffReport(max_rel_error=max_rel, tolerance=tolerance, worst=worst)


class FiniteDiffReport:
    """Outcome of a finite-difference gradient comparison."""

    def __init__(self, max_rel_error: float, tolerance: float, worst: tuple[str, int]):
        self.max_rel_error = max_rel_error
        self.tolerance = tolerance
        self.worst = worst

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def __repr__(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return (
            f"FiniteDiffReport({status}, max_rel_error={self.max_rel_error:.3e}, "
            f"tolerance={self.tolerance:.1e}, worst={self.worst})"
        )
