"""Dense float64 kernels with tape-based reverse-mode differentiation.

The op set is intentionally small: exactly the layers the IMU encoder and
its losses need (1-D convolution, group normalization, max pooling, a GRU,
affine maps, L2 normalization) plus a handful of elementwise/reduction
helpers used to compose losses. There is no broadcasting engine; every op
takes exact shapes and raises ShapeMismatchError otherwise.

Forward calls record entries on a Tape. `backward` replays the tape in
reverse, accumulating adjoints, and adds them into each tensor's `grad`
buffer, so calling it twice on the same tape doubles every gradient.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import GraphError, NumericError, ShapeMismatchError

Array = np.ndarray


class Tensor:
    """A float64 array plus an optional same-shape gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Array | None = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeMismatchError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class _Entry:
    __slots__ = ("output", "inputs", "vjp")

    def __init__(self, output: Tensor, inputs: tuple[Tensor, ...], vjp: Callable):
        self.output = output
        self.inputs = inputs
        self.vjp = vjp


class Tape:
    """Ordered record of primitive operations.

    Entries are appended in execution order, which is a topological order by
    construction: an op's inputs always exist before its output.
    """

    def __init__(self):
        self._entries: list[_Entry] = []
        self._output_ids: set[int] = set()

    def __len__(self) -> int:
        return len(self._entries)

    def record(self, output: Tensor, inputs: Sequence[Tensor], vjp: Callable) -> None:
        """Register `output = op(inputs)` with `vjp(g) -> per-input adjoints`.

        Recording is skipped when no input requires gradients; the output
        then stays a constant for everything downstream.
        """
        inputs = tuple(inputs)
        if any(t.requires_grad for t in inputs):
            output.requires_grad = True
            self._entries.append(_Entry(output, inputs, vjp))
            self._output_ids.add(id(output))

    def produced(self, t: Tensor) -> bool:
        return id(t) in self._output_ids


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(tensor) into `.grad` of every tensor on the tape.

    Repeated calls without clearing grads accumulate additively.
    """
    if loss.data.size != 1:
        raise ShapeMismatchError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not tape.produced(loss):
        raise GraphError("loss is not the output of any operation recorded on this tape")
    adjoint: dict[int, Array] = {id(loss): np.ones_like(loss.data)}
    tensors: dict[int, Tensor] = {id(loss): loss}
    for entry in reversed(tape._entries):
        g = adjoint.get(id(entry.output))
        if g is None:
            continue
        contribs = entry.vjp(g)
        for t, c in zip(entry.inputs, contribs):
            if c is None or not t.requires_grad:
                continue
            key = id(t)
            tensors[key] = t
            if key in adjoint:
                adjoint[key] = adjoint[key] + c
            else:
                adjoint[key] = np.asarray(c, dtype=np.float64)
    for key, t in tensors.items():
        g = adjoint[key]
        if g.shape != t.data.shape:
            g = g.reshape(t.data.shape)
        t.grad = g.copy() if t.grad is None else t.grad + g


# ---------------------------------------------------------------------------
# elementwise and reduction ops


def add(tape: Tape, a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"add: shapes {a.shape} and {b.shape} differ")
    out = Tensor(a.data + b.data)
    tape.record(out, (a, b), lambda g: (g, g))
    return out


def mul(tape: Tape, a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"mul: shapes {a.shape} and {b.shape} differ")
    out = Tensor(a.data * b.data)
    tape.record(out, (a, b), lambda g: (g * b.data, g * a.data))
    return out


def scale(tape: Tape, x: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor(x.data * c)
    tape.record(out, (x,), lambda g: (g * c,))
    return out


def sum_all(tape: Tape, x: Tensor) -> Tensor:
    out = Tensor(np.sum(x.data))
    tape.record(out, (x,), lambda g: (np.full_like(x.data, float(g)),))
    return out


def tanh(tape: Tape, x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    out = Tensor(y)
    tape.record(out, (x,), lambda g: (g * (1.0 - y * y),))
    return out


def relu(tape: Tape, x: Tensor) -> Tensor:
    mask = x.data > 0.0
    out = Tensor(np.where(mask, x.data, 0.0))
    tape.record(out, (x,), lambda g: (g * mask,))
    return out


# ---------------------------------------------------------------------------
# shape plumbing


def stack_rows(tape: Tape, rows: Sequence[Tensor]) -> Tensor:
    if not rows:
        raise ShapeMismatchError("stack_rows: need at least one row")
    dim = rows[0].shape
    for r in rows:
        if r.shape != dim:
            raise ShapeMismatchError(f"stack_rows: row shapes {dim} and {r.shape} differ")
        if r.data.ndim != 1:
            raise ShapeMismatchError(f"stack_rows: rows must be vectors, got {r.shape}")
    out = Tensor(np.stack([r.data for r in rows]))
    tape.record(out, tuple(rows), lambda g: tuple(g[i] for i in range(len(rows))))
    return out


def take_row(tape: Tape, x: Tensor, index: int) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeMismatchError(f"take_row: expected a matrix, got shape {x.shape}")
    if not 0 <= index < x.shape[0]:
        raise ShapeMismatchError(f"take_row: row {index} out of range for shape {x.shape}")
    out = Tensor(x.data[index].copy())

    def vjp(g):
        dx = np.zeros_like(x.data)
        dx[index] = g
        return (dx,)

    tape.record(out, (x,), vjp)
    return out


def transpose2d(tape: Tape, x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeMismatchError(f"transpose2d: expected a matrix, got shape {x.shape}")
    out = Tensor(x.data.T.copy())
    tape.record(out, (x,), lambda g: (g.T.copy(),))
    return out


# ---------------------------------------------------------------------------
# affine maps


def linear(tape: Tape, x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """w @ x + b for a single feature vector x."""
    if x.data.ndim != 1 or w.data.ndim != 2 or b.data.ndim != 1:
        raise ShapeMismatchError(
            f"linear: expected x (F,), w (O,F), b (O,), got {x.shape}, {w.shape}, {b.shape}"
        )
    if w.shape[1] != x.shape[0] or w.shape[0] != b.shape[0]:
        raise ShapeMismatchError(
            f"linear: w {w.shape} incompatible with x {x.shape} and b {b.shape}"
        )
    out = Tensor(w.data @ x.data + b.data)

    def vjp(g):
        return (w.data.T @ g, np.outer(g, x.data), g)

    tape.record(out, (x, w, b), vjp)
    return out


def matmul_nt(tape: Tape, a: Tensor, b: Tensor) -> Tensor:
    """a @ b.T; the natural primitive for row-vs-row inner products."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeMismatchError(f"matmul_nt: expected matrices, got {a.shape}, {b.shape}")
    if a.shape[1] != b.shape[1]:
        raise ShapeMismatchError(
            f"matmul_nt: inner dimensions differ: {a.shape} vs {b.shape}"
        )
    out = Tensor(a.data @ b.data.T)
    tape.record(out, (a, b), lambda g: (g @ b.data, g.T @ a.data))
    return out


def add_rowvec(tape: Tape, x: Tensor, v: Tensor) -> Tensor:
    """Add a vector to every row of a matrix."""
    if x.data.ndim != 2 or v.data.ndim != 1 or x.shape[1] != v.shape[0]:
        raise ShapeMismatchError(f"add_rowvec: shapes {x.shape} and {v.shape} incompatible")
    out = Tensor(x.data + v.data)
    tape.record(out, (x, v), lambda g: (g, g.sum(axis=0)))
    return out


# ---------------------------------------------------------------------------
# encoder layers


def conv1d(tape: Tape, x: Tensor, w: Tensor, b: Tensor, stride: int = 1) -> Tensor:
    """Valid (no padding) cross-correlation over the time axis.

    x: (channels_in, time), w: (channels_out, channels_in, kernel),
    b: (channels_out,). Output time is floor((time - kernel) / stride) + 1.
    """
    if x.data.ndim != 2 or w.data.ndim != 3 or b.data.ndim != 1:
        raise ShapeMismatchError(
            f"conv1d: expected x (C,T), w (O,C,K), b (O,), got {x.shape}, {w.shape}, {b.shape}"
        )
    c_out, c_in, kernel = w.shape
    if x.shape[0] != c_in:
        raise ShapeMismatchError(
            f"conv1d: input has {x.shape[0]} channels but weights expect {c_in}"
        )
    if b.shape[0] != c_out:
        raise ShapeMismatchError(f"conv1d: bias {b.shape} does not match {c_out} filters")
    if stride < 1:
        raise ShapeMismatchError(f"conv1d: stride must be >= 1, got {stride}")
    time = x.shape[1]
    if time < kernel:
        raise ShapeMismatchError(f"conv1d: time {time} shorter than kernel {kernel}")
    t_out = (time - kernel) // stride + 1
    windows = np.lib.stride_tricks.sliding_window_view(x.data, kernel, axis=1)[:, ::stride]
    out = Tensor(np.einsum("cok,dck->do", windows, w.data) + b.data[:, None])

    def vjp(g):
        dw = np.einsum("do,cok->dck", g, windows)
        db = g.sum(axis=1)
        dx = np.zeros_like(x.data)
        for k in range(kernel):
            # positions k, k+stride, ... receive the k-th tap of every filter
            dx[:, k : k + stride * (t_out - 1) + 1 : stride] += np.einsum(
                "dc,do->co", w.data[:, :, k], g
            )
        return (dx, dw, db)

    tape.record(out, (x, w, b), vjp)
    return out


def group_norm(
    tape: Tape, x: Tensor, num_groups: int, gamma: Tensor, beta: Tensor, eps: float
) -> Tensor:
    """Normalize over (channel, time) within each channel group, then apply
    the per-channel affine gamma * xhat + beta.

    Group statistics use the biased variance over all entries of the group.
    """
    if x.data.ndim != 2:
        raise ShapeMismatchError(f"group_norm: expected (C,T) input, got {x.shape}")
    channels, time = x.shape
    if num_groups < 1 or channels % num_groups != 0:
        raise ShapeMismatchError(
            f"group_norm: {channels} channels not divisible into {num_groups} groups"
        )
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise ShapeMismatchError(
            f"group_norm: gamma {gamma.shape} / beta {beta.shape} must be ({channels},)"
        )
    if eps <= 0:
        raise ShapeMismatchError(f"group_norm: eps must be > 0, got {eps}")
    per = channels // num_groups
    grouped = x.data.reshape(num_groups, per, time)
    mean = grouped.mean(axis=(1, 2), keepdims=True)
    var = grouped.var(axis=(1, 2), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((grouped - mean) * inv).reshape(channels, time)
    out = Tensor(gamma.data[:, None] * xhat + beta.data[:, None])

    def vjp(g):
        dgamma = (g * xhat).sum(axis=1)
        dbeta = g.sum(axis=1)
        dxhat = (g * gamma.data[:, None]).reshape(num_groups, per, time)
        xh = xhat.reshape(num_groups, per, time)
        m1 = dxhat.mean(axis=(1, 2), keepdims=True)
        m2 = (dxhat * xh).mean(axis=(1, 2), keepdims=True)
        dx = (inv * (dxhat - m1 - xh * m2)).reshape(channels, time)
        return (dx, dgamma, dbeta)

    tape.record(out, (x, gamma, beta), vjp)
    return out


def max_pool1d(tape: Tape, x: Tensor, kernel: int, stride: int) -> Tensor:
    """Per-channel max over sliding windows; gradient routes to the first
    maximal position of each window.
    """
    if x.data.ndim != 2:
        raise ShapeMismatchError(f"max_pool1d: expected (C,T) input, got {x.shape}")
    if kernel < 1 or stride < 1:
        raise ShapeMismatchError(f"max_pool1d: kernel/stride must be >= 1, got {kernel}/{stride}")
    channels, time = x.shape
    if time < kernel:
        raise ShapeMismatchError(f"max_pool1d: time {time} shorter than kernel {kernel}")
    windows = np.lib.stride_tricks.sliding_window_view(x.data, kernel, axis=1)[:, ::stride]
    argmax = windows.argmax(axis=2)  # first occurrence on ties
    out = Tensor(np.take_along_axis(windows, argmax[:, :, None], axis=2)[:, :, 0])
    t_out = out.shape[1]

    def vjp(g):
        dx = np.zeros_like(x.data)
        cols = np.arange(t_out) * stride + argmax
        rows = np.repeat(np.arange(channels), t_out)
        np.add.at(dx, (rows, cols.ravel()), g.ravel())
        return (dx,)

    tape.record(out, (x,), vjp)
    return out


def gru_forward(
    tape: Tape,
    x: Tensor,
    w_ih: Tensor,
    w_hh: Tensor,
    b_ih: Tensor,
    b_hh: Tensor,
    h0: Tensor,
) -> Tensor:
    """Unidirectional GRU over a (time, features) sequence; returns all
    hidden states as (time, hidden).

    Gate layout stacks reset, update, candidate rows: w_ih is (3H, F), w_hh
    is (3H, H). The reset gate multiplies the hidden-side affine term of the
    candidate, and the state update is h' = (1 - z) * n + z * h.
    """
    if x.data.ndim != 2:
        raise ShapeMismatchError(f"gru_forward: expected (T,F) sequence, got {x.shape}")
    time, feat = x.shape
    hidden = h0.shape[0] if h0.data.ndim == 1 else -1
    if h0.data.ndim != 1:
        raise ShapeMismatchError(f"gru_forward: h0 must be a vector, got {h0.shape}")
    if w_ih.shape != (3 * hidden, feat):
        raise ShapeMismatchError(
            f"gru_forward: w_ih {w_ih.shape} does not match features {feat} / hidden {hidden}"
        )
    if w_hh.shape != (3 * hidden, hidden):
        raise ShapeMismatchError(f"gru_forward: w_hh {w_hh.shape} must be (3*{hidden}, {hidden})")
    if b_ih.shape != (3 * hidden,) or b_hh.shape != (3 * hidden,):
        raise ShapeMismatchError(
            f"gru_forward: biases {b_ih.shape}/{b_hh.shape} must be (3*{hidden},)"
        )

    H = hidden
    gi_all = x.data @ w_ih.data.T + b_ih.data  # (T, 3H)
    hs = np.empty((time, H))
    cache = []
    h = h0.data
    for t in range(time):
        gh = w_hh.data @ h + b_hh.data
        r = _sigmoid(gi_all[t, :H] + gh[:H])
        z = _sigmoid(gi_all[t, H : 2 * H] + gh[H : 2 * H])
        hn = gh[2 * H :]
        n = np.tanh(gi_all[t, 2 * H :] + r * hn)
        h_new = (1.0 - z) * n + z * h
        cache.append((h, r, z, n, hn))
        hs[t] = h_new
        h = h_new
    out = Tensor(hs)

    def vjp(g):
        dw_ih = np.zeros_like(w_ih.data)
        dw_hh = np.zeros_like(w_hh.data)
        db_ih = np.zeros_like(b_ih.data)
        db_hh = np.zeros_like(b_hh.data)
        dx = np.zeros_like(x.data)
        dh = np.zeros(H)
        for t in range(time - 1, -1, -1):
            h_prev, r, z, n, hn = cache[t]
            dh = dh + g[t]
            dz = dh * (h_prev - n)
            dn = dh * (1.0 - z)
            dh_prev = dh * z
            da_n = dn * (1.0 - n * n)
            dr = da_n * hn
            dhn = da_n * r
            da_z = dz * z * (1.0 - z)
            da_r = dr * r * (1.0 - r)
            da = np.concatenate([da_r, da_z, da_n])  # input-side pre-activations
            dgh = np.concatenate([da_r, da_z, dhn])  # hidden-side pre-activations
            dw_ih += np.outer(da, x.data[t])
            db_ih += da
            dx[t] = w_ih.data.T @ da
            dw_hh += np.outer(dgh, h_prev)
            db_hh += dgh
            dh = dh_prev + w_hh.data.T @ dgh
        return (dx, dw_ih, dw_hh, db_ih, db_hh, dh)

    tape.record(out, (x, w_ih, w_hh, b_ih, b_hh, h0), vjp)
    return out


def l2_normalize(tape: Tape, v: Tensor, eps: float = 1e-12) -> Tensor:
    """v / max(||v||, eps); maps any vector with norm >= eps onto the unit
    sphere and leaves the zero vector at zero.
    """
    if v.data.ndim != 1:
        raise ShapeMismatchError(f"l2_normalize: expected a vector, got {v.shape}")
    if eps <= 0:
        raise ShapeMismatchError(f"l2_normalize: eps must be > 0, got {eps}")
    norm = float(np.linalg.norm(v.data))
    s = max(norm, eps)
    y = v.data / s
    out = Tensor(y)

    def vjp(g):
        if norm < eps:
            return (g / eps,)
        return ((g - y * float(y @ g)) / s,)

    tape.record(out, (v,), vjp)
    return out


def _sigmoid(x: Array) -> Array:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


# ---------------------------------------------------------------------------
# gradient checking


def finite_difference_check(
    f: Callable[[Tape, Tensor], Tensor], point: Tensor, h: float = 1e-5
) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f` must build its computation on the tape it is given and return a
    scalar Tensor. The relative error at each coordinate is
    |analytic - fd| / max(1, |analytic|).
    """
    base = np.array(point.data, dtype=np.float64)
    probe = Tensor(base.copy(), requires_grad=True)
    tape = Tape()
    out = f(tape, probe)
    if out.data.size != 1:
        raise ShapeMismatchError(f"finite_difference_check: f returned shape {out.shape}")
    backward(tape, out)
    analytic = probe.grad if probe.grad is not None else np.zeros_like(base)

    fd = np.zeros_like(base)
    flat = base.ravel()
    fd_flat = fd.ravel()
    for i in range(flat.size):
        for sign in (+1.0, -1.0):
            shifted = flat.copy()
            shifted[i] += sign * h
            val = f(Tape(), Tensor(shifted.reshape(base.shape))).item()
            if not np.isfinite(val):
                raise NumericError(f"finite_difference_check: f is non-finite at coordinate {i}")
            fd_flat[i] += sign * val
        fd_flat[i] /= 2.0 * h
    if not np.all(np.isfinite(analytic)):
        raise NumericError("finite_difference_check: non-finite analytic gradient")
    rel = np.abs(analytic - fd) / np.maximum(1.0, np.abs(analytic))
    return float(rel.max())
