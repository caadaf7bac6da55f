"""Minimal dense tensor library with hand-written backward passes.

Every primitive the policy needs is defined here as a pure function over
`Tensor` values. Each op records its parents and a hand-written backward
closure, so calling `backward()` on a scalar result fills the `.grad`
buffers of everything that contributed to it. There is no general autodiff:
the set of primitives below is closed and each gradient is derived by hand.

Float64 is the default dtype and is what the tests and gradient checks
assume; float32 is permitted on the benchmark path (never mixed in one run).
"""

from __future__ import annotations

import math
import weakref
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError

_GRAD_ENABLED = True

# Active instrumentation counters (innermost last). All active counters see
# every matmul and every owning allocation.
_COUNTERS: list["OpCounter"] = []


class OpCounter:
    """Counts matmul FLOPs and tracks transient tensor-buffer bytes."""

    def __init__(self):
        self.flops = 0
        self.current_bytes = 0
        self.peak_bytes = 0

    def add_flops(self, n: int):
        self.flops += n

    def alloc(self, nbytes: int):
        self.current_bytes += nbytes
        if self.current_bytes > self.peak_bytes:
            self.peak_bytes = self.current_bytes

    def free(self, nbytes: int):
        self.current_bytes -= nbytes


@contextmanager
def instrumented(counter: OpCounter):
    """Route matmul FLOP counts and buffer allocations into `counter`."""
    _COUNTERS.append(counter)
    try:
        yield counter
    finally:
        _COUNTERS.remove(counter)


@contextmanager
def no_grad():
    """Disable tape recording (evaluation and decoding paths)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """Dense N-dimensional real array with an optional gradient buffer.

    `data` is a numpy array; `grad`, once touched, is a same-shaped float
    buffer. Tensors produced by ops keep references to their parents and a
    backward closure; leaves created directly have neither.
    """

    def __init__(self, data: np.ndarray, requires_grad: bool = False):
        self.data = data
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        if _COUNTERS and data.base is None:
            nbytes = data.nbytes
            for c in list(_COUNTERS):
                c.alloc(nbytes)
                weakref.finalize(self, c.free, nbytes)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def ensure_grad(self) -> np.ndarray:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        return self.grad

    def zero_grad(self):
        self.grad = None

    def backward(self, seed: np.ndarray | None = None):
        """Accumulate gradients of this value into every contributing tensor.

        Without an explicit seed the value must be scalar (seeded with 1).
        Repeated calls accumulate, which is what batch loops rely on.
        """
        if seed is None:
            if self.data.size != 1:
                raise ShapeError(
                    f"backward() without a seed needs a scalar, got {self.shape}"
                )
            seed = np.ones_like(self.data)
        order = _toposort(self)
        self.ensure_grad()
        self.grad = self.grad + seed
        for node in order:
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _toposort(root: Tensor) -> list[Tensor]:
    """Reverse topological order of the graph rooted at `root` (iterative)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    """Wrap an op result; tape recording is skipped under no_grad."""
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out = Tensor(data, requires_grad=True)
        out._parents = parents
        out._backward = backward
        return out
    return Tensor(data)


def _accum(t: Tensor, g: np.ndarray):
    if t.requires_grad:
        t.ensure_grad()
        t.grad += g


# ---------------------------------------------------------------------------
# Construction helpers
# ---------------------------------------------------------------------------


def constant(values, dtype=np.float64) -> Tensor:
    """Leaf tensor that accumulates no gradient."""
    return Tensor(np.asarray(values, dtype=dtype))


def parameter(values, dtype=np.float64) -> Tensor:
    """Leaf tensor that accumulates gradient."""
    return Tensor(np.asarray(values, dtype=dtype), requires_grad=True)


def assert_finite(t: Tensor, name: str = "tensor"):
    """NaN/Inf anywhere is a contract violation; raise naming the tensor."""
    if not np.all(np.isfinite(t.data)):
        raise FloatingPointError(f"{name} contains non-finite values")


def zero_grads(params):
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(m, k) @ (k, n) -> (m, n). The only op the FLOP counter sees."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    m, k = a.shape
    n = b.shape[1]
    for c in _COUNTERS:
        c.add_flops(2 * m * k * n)
    out_data = a.data @ b.data

    def backward(g):
        # dA = dC @ B^T, dB = A^T @ dC
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _make(out_data, (a, b), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two same-shaped tensors."""
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")
    out_data = a.data + b.data

    def backward(g):
        _accum(a, g)
        _accum(b, g)

    return _make(out_data, (a, b), backward)


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Broadcast a length-d bias over the rows of (..., d).

    This is the only broadcast the library supports; every other shape mix
    is an error.
    """
    if bias.data.ndim != 1 or x.shape[-1] != bias.shape[0]:
        raise ShapeError(f"add_bias shape mismatch: {x.shape} + {bias.shape}")
    out_data = x.data + bias.data

    def backward(g):
        _accum(x, g)
        _accum(bias, g.reshape(-1, bias.shape[0]).sum(axis=0))

    return _make(out_data, (x, bias), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of two same-shaped tensors."""
    if a.shape != b.shape:
        raise ShapeError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    out_data = a.data * b.data

    def backward(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _make(out_data, (a, b), backward)


def scale(x: Tensor, c: float) -> Tensor:
    out_data = x.data * c

    def backward(g):
        _accum(x, g * c)

    return _make(out_data, (x,), backward)


def sum_all(x: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    out_data = np.asarray(x.data.sum())

    def backward(g):
        _accum(x, np.broadcast_to(g, x.shape).astype(x.data.dtype))

    return _make(out_data, (x,), backward)


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"transpose needs 2-D, got {x.shape}")
    out_data = x.data.T

    def backward(g):
        _accum(x, g.T)

    return _make(out_data, (x,), backward)


def concat(parts: list[Tensor], axis: int) -> Tensor:
    """Concatenate 2-D tensors along axis 0 (rows) or 1 (columns)."""
    if axis not in (0, 1):
        raise ShapeError(f"concat axis must be 0 or 1, got {axis}")
    other = 1 - axis
    base = parts[0].shape[other]
    for p in parts[1:]:
        if p.data.ndim != 2 or p.shape[other] != base:
            raise ShapeError(
                f"concat shape mismatch on axis {axis}: "
                f"{[p.shape for p in parts]}"
            )
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    offsets = np.cumsum([0] + [p.shape[axis] for p in parts])

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            piece = g[lo:hi] if axis == 0 else g[:, lo:hi]
            _accum(p, piece)

    return _make(out_data, tuple(parts), backward)


def slice_rows(x: Tensor, lo: int, hi: int) -> Tensor:
    out_data = x.data[lo:hi]

    def backward(g):
        if x.requires_grad:
            x.ensure_grad()
            x.grad[lo:hi] += g

    return _make(out_data, (x,), backward)


def slice_cols(x: Tensor, lo: int, hi: int) -> Tensor:
    out_data = x.data[:, lo:hi]

    def backward(g):
        if x.requires_grad:
            x.ensure_grad()
            x.grad[:, lo:hi] += g

    return _make(out_data, (x,), backward)


def gather_rows(table: Tensor, ids) -> Tensor:
    """Look up rows of (N, d) by integer id; backward scatter-adds."""
    idx = np.asarray(ids, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"gather_rows ids must be 1-D, got {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(
            f"gather_rows id out of range [0, {table.shape[0]}): {ids}"
        )
    out_data = table.data[idx]

    def backward(g):
        if table.requires_grad:
            table.ensure_grad()
            np.add.at(table.grad, idx, g)

    return _make(out_data, (table,), backward)


def gelu(x: Tensor, exact: bool = False) -> Tensor:
    """Elementwise GELU. Default is the tanh approximation; `exact` uses erf.

    The tanh form stays within ~1e-3 of exact GELU and avoids an erf
    dependency on the hot path.
    """
    if exact:
        erf = np.vectorize(math.erf)
        inner = erf(x.data * (1.0 / math.sqrt(2.0)))
        out_data = 0.5 * x.data * (1.0 + inner)

        def backward(g):
            pdf = np.exp(-0.5 * x.data * x.data) * (1.0 / math.sqrt(2.0 * math.pi))
            _accum(x, g * (0.5 * (1.0 + inner) + x.data * pdf))

        return _make(out_data.astype(x.data.dtype), (x,), backward)

    c = math.sqrt(2.0 / math.pi)
    u = c * (x.data + 0.044715 * x.data**3)
    t = np.tanh(u)
    out_data = 0.5 * x.data * (1.0 + t)

    def backward(g):
        du = c * (1.0 + 3 * 0.044715 * x.data**2)
        _accum(x, g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * du))

    return _make(out_data, (x,), backward)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, max-subtracted for stability."""
    if x.shape[-1] < 1:
        raise ShapeError("softmax_rows needs a non-empty last axis")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        _accum(x, y * (g - dot))

    return _make(y, (x,), backward)


def masked_softmax_rows(x: Tensor, allow: np.ndarray) -> Tensor:
    """Row softmax restricted to allowed keys; disallowed entries are 0.

    `allow` is a same-shaped boolean array with at least one True per row,
    so no infinities are ever materialized.
    """
    if allow.shape != x.shape:
        raise ShapeError(
            f"masked_softmax_rows mask shape {allow.shape} != {x.shape}"
        )
    if not allow.any(axis=-1).all():
        raise ShapeError("masked_softmax_rows: a row allows no keys")
    neg = np.finfo(x.data.dtype).min
    m = np.where(allow, x.data, neg).max(axis=-1, keepdims=True)
    e = np.where(allow, np.exp(x.data - m), 0.0)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        _accum(x, y * (g - dot))

    return _make(y, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row zero-mean unit-variance normalization, then affine.

    Normalizes over the last axis of (..., d); `gain` and `bias` are
    length-d vectors.
    """
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm affine shapes {gain.shape}/{bias.shape} "
            f"do not match feature dim {d}"
        )
    if eps <= 0:
        raise ShapeError("layer_norm eps must be > 0")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = xhat * gain.data + bias.data

    def backward(g):
        dxhat = g * gain.data
        # dx = inv * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
        _accum(
            x,
            inv
            * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            ),
        )
        flat_g = g.reshape(-1, d)
        flat_xhat = xhat.reshape(-1, d)
        _accum(gain, (flat_g * flat_xhat).sum(axis=0))
        _accum(bias, flat_g.sum(axis=0))

    return _make(out_data, (x, gain, bias), backward)


def cross_entropy_logits(logits: Tensor, labels, mask) -> Tensor:
    """Mean negative log-softmax over masked-in rows of (t, V).

    Rows masked out contribute zero loss and exactly zero gradient.
    """
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy_logits needs (t, V), got {logits.shape}")
    lab = np.asarray(labels, dtype=np.int64)
    msk = np.asarray(mask, dtype=bool)
    t, v = logits.shape
    if lab.shape != (t,) or msk.shape != (t,):
        raise ShapeError(
            f"cross_entropy_logits labels/mask lengths {lab.shape}/{msk.shape} "
            f"do not match {t} rows"
        )
    rows = np.nonzero(msk)[0]
    if rows.size == 0:
        raise ValueError("no supervised positions")
    sub = lab[rows]
    if sub.min() < 0 or sub.max() >= v:
        raise ValueError(f"label outside [0, {v}) at a supervised position")
    z = logits.data[rows]
    z = z - z.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1))
    picked = z[np.arange(rows.size), sub]
    out_data = np.asarray((logsumexp - picked).mean())

    def backward(g):
        if not logits.requires_grad:
            return
        p = np.exp(z - logsumexp[:, None])
        p[np.arange(rows.size), sub] -= 1.0
        logits.ensure_grad()
        logits.grad[rows] += (float(g) / rows.size) * p

    return _make(out_data, (logits,), backward)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    """Outcome of comparing analytic gradients to central differences."""

    max_rel_err: float
    n_checked: int
    tol: float
    failures: list[tuple[int, int, float, float, float]] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures


def grad_check(f, params, step: float = 1e-5, tol: float = 1e-6,
               floor: float = 1e-6) -> GradCheckReport:
    """Check the backward of a scalar function against central differences.

    `f` is called with no arguments and must return a scalar Tensor computed
    from `params`. For every parameter element the analytic gradient is
    compared to (f(x+h) - f(x-h)) / 2h. Relative error uses
    |a - n| / max(|a|, |n|, floor); the floor keeps finite-difference noise
    on near-zero gradients from registering as spurious relative error.
    Failures are report content, not exceptions.
    """
    if step <= 0:
        raise ValueError("grad_check step must be > 0")
    zero_grads(params)
    loss = f()
    loss.backward()
    analytic = [
        p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
        for p in params
    ]

    max_rel = 0.0
    n_checked = 0
    failures = []
    with no_grad():
        for pi, p in enumerate(params):
            flat = p.data.reshape(-1)
            a_flat = analytic[pi].reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                up = f().item()
                flat[i] = orig - step
                down = f().item()
                flat[i] = orig
                numeric = (up - down) / (2.0 * step)
                a = float(a_flat[i])
                rel = abs(a - numeric) / max(abs(a), abs(numeric), floor)
                n_checked += 1
                if rel > max_rel:
                    max_rel = rel
                if rel > tol:
                    failures.append((pi, i, a, numeric, rel))
    return GradCheckReport(max_rel_err=max_rel, n_checked=n_checked,
                           tol=tol, failures=failures)
