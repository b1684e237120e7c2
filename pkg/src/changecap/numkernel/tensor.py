"""Dense f64 tensors with a define-by-run tape for reverse-mode gradients.

Operations executed while a :class:`Tape` is active (``with Tape() as tape:``)
and touching at least one tracked tensor are appended to that tape.  Calling
:func:`backward` replays the tape in reverse and accumulates into the ``grad``
field of every tracked leaf.  Outside a tape, operations run as plain numpy.
"""

from __future__ import annotations

import threading

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when operand shapes are inconsistent with an operation."""


class TapeError(RuntimeError):
    """Raised on misuse of the computation tape."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim and 0 in arr.shape:
            raise ShapeError(f"tensor dimensions must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # operator sugar; the functional forms live in numkernel.functional
    def __add__(self, other):
        from . import functional as F
        return F.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import functional as F
        return F.sub(self, other)

    def __rsub__(self, other):
        from . import functional as F
        return F.sub(other, self)

    def __mul__(self, other):
        from . import functional as F
        return F.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import functional as F
        return F.mul(self, -1.0)

    def __matmul__(self, other):
        from . import functional as F
        return F.matmul(self, other)

    def __getitem__(self, index):
        from . import functional as F
        return F.getitem(self, index)

    def sum(self, axis=None):
        from . import functional as F
        return F.sum(self, axis)

    def reshape(self, *shape):
        from . import functional as F
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return F.reshape(self, shape)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class _Record:
    __slots__ = ("outputs", "inputs", "backward_fn", "op")

    def __init__(self, outputs, inputs, backward_fn, op):
        self.outputs = outputs
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.op = op


_local = threading.local()


def _tape_stack():
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of differentiable operations for one forward pass."""

    def __init__(self):
        self.records = []
        self._produced = {}

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise TapeError("tape stack corrupted")
        stack.pop()
        return False

    def __len__(self):
        return len(self.records)

    def record(self, outputs, inputs, backward_fn, op=""):
        rec = _Record(tuple(outputs), tuple(inputs), backward_fn, op)
        idx = len(self.records)
        self.records.append(rec)
        for out in rec.outputs:
            self._produced[id(out)] = idx

    def contains(self, tensor):
        return id(tensor) in self._produced

    def backward(self, loss):
        backward(loss, self)


class no_tape:
    """Suspend recording (used for inference and parameter updates)."""

    def __enter__(self):
        stack = _tape_stack()
        self._saved = list(stack)
        stack.clear()
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        stack.extend(self._saved)
        return False


def make_op(outputs_data, inputs, backward_fn, op=""):
    """Wrap raw arrays as output tensors and record them when needed.

    ``backward_fn(grads)`` receives one upstream gradient per output (zeros
    for outputs that did not reach the loss) and returns one gradient per
    input, ``None`` allowed for untracked inputs.
    """
    single = not isinstance(outputs_data, tuple)
    datas = (outputs_data,) if single else outputs_data
    datas = tuple(np.asarray(d) for d in datas)
    tape = active_tape()
    tracked = tape is not None and any(t.requires_grad for t in inputs)
    outs = []
    for d in datas:
        t = Tensor.__new__(Tensor)
        t.data = d if d.dtype == DTYPE else d.astype(DTYPE)
        t.requires_grad = tracked
        t.grad = None
        t.name = None
        outs.append(t)
    if tracked:
        tape.record(outs, inputs, backward_fn, op)
    return outs[0] if single else tuple(outs)


def backward(loss, tape):
    """Populate ``grad`` of every tracked leaf with d(loss)/d(leaf).

    Gradients accumulate across calls until the leaves are reset.
    """
    if loss.data.size != 1:
        raise TapeError(f"backward expects a scalar loss, got shape {loss.shape}")
    if not tape.contains(loss):
        raise TapeError("loss was not produced by an operation recorded on this tape")
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for rec in reversed(tape.records[: tape._produced[id(loss)] + 1]):
        upstream = [grads.pop(id(o), None) for o in rec.outputs]
        if all(g is None for g in upstream):
            continue
        upstream = [np.zeros_like(o.data) if g is None else g
                    for g, o in zip(upstream, rec.outputs)]
        in_grads = rec.backward_fn(upstream)
        for inp, g in zip(rec.inputs, in_grads):
            if g is None or not inp.requires_grad:
                continue
            if g.shape != inp.data.shape:
                raise ShapeError(f"{rec.op}: gradient shape {g.shape} != input shape {inp.shape}")
            key = id(inp)
            if tape.contains(inp):
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
            else:
                if key in leaves:
                    leaves[key] = (inp, leaves[key][1] + g)
                else:
                    leaves[key] = (inp, g)
    for inp, g in leaves.values():
        inp.grad = g.copy() if inp.grad is None else inp.grad + g
