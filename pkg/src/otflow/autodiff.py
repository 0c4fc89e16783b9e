"""Minimal dense-tensor reverse-mode automatic differentiation.

A `Tape` records op outputs in creation order (parents always precede their
children, so the list is already topologically sorted); `backward` walks it
in reverse, accumulating vector-Jacobian products into `.grad`. Ops executed
without an active tape just compute values, which keeps inference cheap.

Storage is float32 by default (float64 is used by the gradient-check tests);
reductions accumulate in float64 regardless of storage width.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import BadMagic, NonScalarRoot, ShapeMismatch

_CKPT_MAGIC = b"CKPT"

_active_tape = None


class Tape:
    """Ordered record of op outputs; use as a context manager around a forward pass."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self):
        global _active_tape
        if _active_tape is not None:
            raise RuntimeError("a tape is already active; tapes do not nest")
        _active_tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _active_tape
        _active_tape = None
        return False

    def __len__(self):
        return len(self.nodes)


class Tensor:
    __slots__ = ("values", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, values, requires_grad: bool = False, dtype=np.float32):
        if isinstance(values, np.ndarray) and values.dtype in (np.float32, np.float64):
            self.values = values
        elif isinstance(values, np.floating):
            # keep numpy scalar dtype (reduction outputs) instead of forcing f32
            self.values = np.asarray(values)
        else:
            self.values = np.asarray(values, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    def __repr__(self):
        return f"Tensor(shape={self.values.shape}, requires_grad={self.requires_grad})"


def constant(values, dtype=np.float32) -> Tensor:
    return Tensor(values, requires_grad=False, dtype=dtype)


def parameter(values, dtype=np.float32) -> Tensor:
    return Tensor(values, requires_grad=True, dtype=dtype)


def _record(out: Tensor, parents, backward) -> Tensor:
    if _active_tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        _active_tape.nodes.append(out)
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
    else:
        t.grad = t.grad + g


def backward(tape: Tape, root: Tensor, leaves=None):
    """Backpropagate from a scalar root through the tape.

    Returns a list of gradient arrays aligned with `leaves` when given;
    leaves that do not influence the root get zero gradients.
    """
    if root.values.size != 1:
        raise NonScalarRoot(f"backward root must be scalar, got shape {root.values.shape}")
    root.grad = np.ones_like(root.values)
    for node in reversed(tape.nodes):
        if node.grad is None or node._backward is None:
            continue
        node._backward(node.grad)
    if leaves is None:
        return None
    out = []
    for leaf in leaves:
        if leaf.grad is None:
            out.append(np.zeros_like(leaf.values))
        else:
            out.append(leaf.grad)
    return out


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# primitives


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.values.shape != b.values.shape:
        raise ShapeMismatch(f"{op}: shapes {a.values.shape} and {b.values.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add; also matrix + row-vector bias (the only broadcast)."""
    bias_add = a.values.ndim == 2 and b.values.ndim == 1 and a.values.shape[1] == b.values.shape[0]
    if not bias_add:
        _same_shape(a, b, "add")
    out = Tensor(a.values + b.values)

    def _bw(g):
        if a.requires_grad:
            _accum(a, g)
        if b.requires_grad:
            if bias_add:
                _accum(b, g.sum(axis=0, dtype=np.float64).astype(b.values.dtype))
            else:
                _accum(b, g)

    return _record(out, (a, b), _bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    out = Tensor(a.values - b.values)

    def _bw(g):
        if a.requires_grad:
            _accum(a, g)
        if b.requires_grad:
            _accum(b, -g)

    return _record(out, (a, b), _bw)


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product. `b` may be a python scalar (constant), a size-1
    tensor (broadcast over `a`), or a tensor of the same shape."""
    if not isinstance(b, Tensor):
        c = float(b)
        out = Tensor(a.values * np.asarray(c, dtype=a.values.dtype))

        def _bw_const(g):
            if a.requires_grad:
                _accum(a, g * np.asarray(c, dtype=g.dtype))

        return _record(out, (a,), _bw_const)

    scalar_side = None
    if a.values.shape != b.values.shape:
        if b.values.size == 1:
            scalar_side = "b"
        elif a.values.size == 1:
            scalar_side = "a"
        else:
            raise ShapeMismatch(f"mul: shapes {a.values.shape} and {b.values.shape} differ")
    out = Tensor(a.values * b.values)

    def _bw(g):
        if a.requires_grad:
            ga = g * b.values
            if scalar_side == "a":
                ga = ga.sum(dtype=np.float64).astype(a.values.dtype).reshape(a.values.shape)
            _accum(a, ga)
        if b.requires_grad:
            gb = g * a.values
            if scalar_side == "b":
                gb = gb.sum(dtype=np.float64).astype(b.values.dtype).reshape(b.values.shape)
            _accum(b, gb)

    return _record(out, (a, b), _bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim != 2 or b.values.ndim != 2 or a.values.shape[1] != b.values.shape[0]:
        raise ShapeMismatch(f"matmul: shapes {a.values.shape} and {b.values.shape} incompatible")
    out = Tensor(a.values @ b.values)

    def _bw(g):
        if a.requires_grad:
            _accum(a, g @ b.values.T)
        if b.requires_grad:
            _accum(b, a.values.T @ g)

    return _record(out, (a, b), _bw)


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.values, 0))

    def _bw(g):
        if a.requires_grad:
            _accum(a, g * (a.values > 0))

    return _record(out, (a,), _bw)


def softplus(a: Tensor) -> Tensor:
    out = Tensor(np.logaddexp(0.0, a.values.astype(np.float64)).astype(a.values.dtype))

    def _bw(g):
        if a.requires_grad:
            # sigmoid via tanh keeps both exp branches in range
            sig = 0.5 * (1.0 + np.tanh(0.5 * a.values))
            _accum(a, g * sig)

    return _record(out, (a,), _bw)


def tanh(a: Tensor) -> Tensor:
    out = Tensor(np.tanh(a.values))

    def _bw(g):
        if a.requires_grad:
            _accum(a, g * (1.0 - out.values**2))

    return _record(out, (a,), _bw)


def tsum(a: Tensor, axis: int | None = None) -> Tensor:
    out_v = a.values.sum(axis=axis, dtype=np.float64).astype(a.values.dtype)
    out = Tensor(out_v)

    def _bw(g):
        if a.requires_grad:
            if axis is None:
                _accum(a, np.broadcast_to(g, a.values.shape).astype(a.values.dtype))
            else:
                _accum(a, np.broadcast_to(np.expand_dims(g, axis), a.values.shape).astype(a.values.dtype))

    return _record(out, (a,), _bw)


def tmean(a: Tensor) -> Tensor:
    n = a.values.size
    out = Tensor(np.asarray(a.values.mean(dtype=np.float64), dtype=a.values.dtype))

    def _bw(g):
        if a.requires_grad:
            _accum(a, np.broadcast_to(g / n, a.values.shape).astype(a.values.dtype))

    return _record(out, (a,), _bw)


def square(a: Tensor) -> Tensor:
    out = Tensor(a.values * a.values)

    def _bw(g):
        if a.requires_grad:
            _accum(a, g * 2.0 * a.values)

    return _record(out, (a,), _bw)


def l2_norm(a: Tensor) -> Tensor:
    norm = float(np.sqrt(np.sum(a.values.astype(np.float64) ** 2)))
    out = Tensor(np.asarray(norm, dtype=a.values.dtype))

    def _bw(g):
        if a.requires_grad:
            denom = max(norm, np.finfo(np.float64).tiny)
            _accum(a, (g * (a.values / denom)).astype(a.values.dtype))

    return _record(out, (a,), _bw)


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.values.reshape(shape))

    def _bw(g):
        if a.requires_grad:
            _accum(a, g.reshape(a.values.shape))

    return _record(out, (a,), _bw)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = Tensor(np.concatenate([t.values for t in tensors], axis=axis))
    sizes = [t.values.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def _bw(g):
        for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(start, stop)
                _accum(t, g[tuple(sl)])

    return _record(out, tuple(tensors), _bw)


def tslice(a: Tensor, start: int, stop: int, axis: int = 0) -> Tensor:
    sl = [slice(None)] * a.values.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)
    out = Tensor(a.values[sl])

    def _bw(g):
        if a.requires_grad:
            full = np.zeros_like(a.values)
            full[sl] = g
            _accum(a, full)

    return _record(out, (a,), _bw)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8
    step: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)


def adam_init(params: dict, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
              eps_hat: float = 1e-8) -> AdamState:
    state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps_hat=eps_hat)
    for name, p in params.items():
        state.first_moment[name] = np.zeros_like(p.values)
        state.second_moment[name] = np.zeros_like(p.values)
    return state


def adam_step(params: dict, grads: dict, state: AdamState) -> None:
    """Bias-corrected Adam update, in place."""
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.values.shape:
            raise ShapeMismatch(f"adam_step '{name}': gradient {g.shape} vs parameter {p.values.shape}")
        m = state.first_moment[name]
        v = state.second_moment[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps_hat)
        p.values = p.values - update.astype(p.values.dtype)


# ---------------------------------------------------------------------------
# checkpoint format


def save_checkpoint(params: dict, path) -> None:
    """Write 'CKPT', u32 count, then per-tensor (name, rank, dims, f32 data), little-endian."""
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", len(params)))
        for name, p in params.items():
            values = p.values if isinstance(p, Tensor) else np.asarray(p)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", values.ndim))
            for dim in values.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(values.astype("<f4").tobytes())


def load_checkpoint(path) -> dict:
    """Read the checkpoint format back into an ordered {name: float32 array} dict."""
    with open(path, "rb") as fh:
        if fh.read(4) != _CKPT_MAGIC:
            raise BadMagic(f"{path}: not a checkpoint file")
        (count,) = struct.unpack("<I", fh.read(4))
        out = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", fh.read(4))
            name = fh.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", fh.read(4))
            dims = struct.unpack(f"<{rank}I", fh.read(4 * rank)) if rank else ()
            n = int(np.prod(dims)) if dims else 1
            data = np.frombuffer(fh.read(4 * n), dtype="<f4").reshape(dims)
            out[name] = data.astype(np.float32)
    return out
