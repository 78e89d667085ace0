"""Dense 2-D tensor engine with reverse-mode differentiation.

Everything is a row-major matrix: vectors are ``(1, d)`` rows and scalars are
``(1, 1)``.  Ops record onto an explicitly opened :class:`Tape`; the tape's
insertion order is its topological order, so a backward pass is a single
reverse sweep.  No broadcasting is performed except the bias case
``(n, m) + (1, m)`` -- anything else must match shapes exactly and raises
:class:`ShapeError` naming the offending shapes.

Two precision modes are supported by construction: build parameters as
float64 for gradient checking (finite differences are unreliable at 32-bit)
and float32 for experiment runs.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "tape",
    "constant",
    "parameter",
    "ShapeError",
    "NonScalarLossError",
    "NanGradientError",
    "matmul",
    "add",
    "mul",
    "affine",
    "scale",
    "scalar_combine",
    "concat",
    "transpose",
    "row",
    "gather_rows",
    "sigmoid",
    "tanh",
    "relu",
    "softmax",
    "log",
    "clamp",
    "sum_all",
    "mean_all",
    "binary_cross_entropy",
    "Adam",
    "grad_check",
    "GradCheckReport",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
]


class ShapeError(ValueError):
    """Raised when operand shapes do not conform to an op's rule."""


class NonScalarLossError(ValueError):
    """Raised when backward() is started from a non-(1,1) tensor."""


class NanGradientError(RuntimeError):
    """Raised by the optimizer when a gradient contains NaN/Inf."""


_ACTIVE_TAPE: "Tape | None" = None


class Tensor:
    """A matrix value in the computation graph.

    ``track`` marks tensors whose gradient matters (parameters and anything
    computed from one).  Constants built from raw data are untracked, so
    subgraphs of constants cost nothing at backward time.
    """

    __slots__ = ("data", "grad", "track", "param", "name", "decay", "sparse_decay", "_backward")

    def __init__(self, data, *, param=False, name=None, decay=False, sparse_decay=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ShapeError(f"tensors are 2-D matrices, got shape {arr.shape}")
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.param = param
        self.track = param
        self.name = name
        self.decay = decay
        self.sparse_decay = sparse_decay
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() needs a (1,1) tensor, got {self.shape}")
        return float(self.data[0, 0])

    def accumulate(self, g):
        """Add ``g`` into this tensor's gradient slot (allocating on demand)."""
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{tag})"

    # operator sugar; everything funnels through the module-level ops
    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __sub__(self, other):
        return add(self, affine(other, mul=-1.0))

    def __neg__(self):
        return affine(self, mul=-1.0)


class Tape:
    """Ordered record of op nodes; insertion order is topological order."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("a tape is already active; tapes do not nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def backward(self, loss):
        """Reverse sweep from ``loss``, accumulating into .grad of tracked tensors."""
        if loss.data.shape != (1, 1):
            raise NonScalarLossError(f"loss must be (1,1), got {loss.data.shape}")
        loss.accumulate(np.ones_like(loss.data))
        for node in reversed(self.nodes):
            if node.grad is not None and node._backward is not None:
                node._backward(node.grad)


def tape():
    return Tape()


def constant(data, dtype=None):
    return Tensor(data, dtype=dtype)


def parameter(data, name, *, decay=False, sparse_decay=False, dtype=None):
    return Tensor(data, param=True, name=name, decay=decay, sparse_decay=sparse_decay, dtype=dtype)


def node(data, parents, backward):
    """Create an op output.

    Records on the active tape only when some parent is tracked; otherwise the
    result is a plain untracked value (the no-grad fast path).
    """
    out = Tensor(data)
    if _ACTIVE_TAPE is not None and any(p.track for p in parents):
        out.track = True
        out._backward = backward
        _ACTIVE_TAPE.nodes.append(out)
    return out


def _require_same_dtype(*tensors):
    dt = tensors[0].data.dtype
    for t in tensors[1:]:
        if t.data.dtype != dt:
            raise ShapeError(f"mixed dtypes {dt} vs {t.data.dtype}")
    return dt


# ---------------------------------------------------------------------------
# ops


def matmul(a, b):
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    _require_same_dtype(a, b)
    ad, bd = a.data, b.data

    def backward(g):
        if a.track:
            a.accumulate(g @ bd.T)
        if b.track:
            b.accumulate(ad.T @ g)

    return node(ad @ bd, (a, b), backward)


def add(a, b):
    """Elementwise add; also allows the bias case (n,m) + (1,m)."""
    bias = a.shape != b.shape
    if bias and not (b.shape == (1, a.shape[1])):
        raise ShapeError(f"add shapes differ: {a.shape} + {b.shape}")
    _require_same_dtype(a, b)

    def backward(g):
        if a.track:
            a.accumulate(g)
        if b.track:
            b.accumulate(g.sum(axis=0, keepdims=True) if bias else g)

    return node(a.data + b.data, (a, b), backward)


def mul(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"mul shapes differ: {a.shape} * {b.shape}")
    _require_same_dtype(a, b)
    ad, bd = a.data, b.data

    def backward(g):
        if a.track:
            a.accumulate(g * bd)
        if b.track:
            b.accumulate(g * ad)

    return node(ad * bd, (a, b), backward)


def affine(x, mul=1.0, add=0.0):
    """``mul * x + add`` with plain Python scalars (not graph nodes)."""

    def backward(g):
        if x.track:
            x.accumulate(mul * g)

    return node(mul * x.data + add, (x,), backward)


def scale(s, v):
    """Scalar graph node times a matrix: ``s`` must be (1,1)."""
    if s.shape != (1, 1):
        raise ShapeError(f"scale() wants a (1,1) scalar, got {s.shape}")
    _require_same_dtype(s, v)
    sval = s.data[0, 0]
    vd = v.data

    def backward(g):
        if s.track:
            s.accumulate(np.array([[np.sum(g * vd)]], dtype=vd.dtype))
        if v.track:
            v.accumulate(sval * g)

    return node(sval * vd, (s, v), backward)


def scalar_combine(s1, v1, s2, v2):
    """``s1*v1 + s2*v2`` where s1, s2 are (1,1) graph scalars."""
    return add(scale(s1, v1), scale(s2, v2))


def concat(parts, axis=1):
    parts = list(parts)
    if not parts:
        raise ShapeError("concat of zero tensors")
    if axis not in (0, 1):
        raise ShapeError(f"concat axis must be 0 or 1, got {axis}")
    other = 1 - axis
    w = parts[0].shape[other]
    for p in parts[1:]:
        if p.shape[other] != w:
            raise ShapeError(f"concat axis={axis} mismatch: {[p.shape for p in parts]}")
    _require_same_dtype(*parts)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.track:
                p.accumulate(g[lo:hi, :] if axis == 0 else g[:, lo:hi])

    return node(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), backward)


def transpose(a):
    def backward(g):
        if a.track:
            a.accumulate(g.T)

    return node(a.data.T.copy(), (a,), backward)


def row(a, i):
    """Row ``i`` of a matrix as a (1, m) tensor."""
    if not 0 <= i < a.shape[0]:
        raise ShapeError(f"row {i} out of range for shape {a.shape}")

    def backward(g):
        if a.track:
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            a.grad[i, :] += g[0, :]

    return node(a.data[i : i + 1, :].copy(), (a,), backward)


def gather_rows(table, ids):
    """Rows ``ids`` of a matrix; gradient accumulates only into touched rows.

    An empty id list yields a (0, d) matrix.
    """
    idx = np.asarray(ids, dtype=np.intp).reshape(-1)

    def backward(g):
        if table.track:
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            np.add.at(table.grad, idx, g)

    return node(table.data[idx, :], (table,), backward)


def sigmoid(a):
    with np.errstate(over="ignore"):
        out_data = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        if a.track:
            a.accumulate(g * out_data * (1.0 - out_data))

    return node(out_data, (a,), backward)


def tanh(a):
    out_data = np.tanh(a.data)

    def backward(g):
        if a.track:
            a.accumulate(g * (1.0 - out_data * out_data))

    return node(out_data, (a,), backward)


def relu(a):
    mask = a.data > 0

    def backward(g):
        if a.track:
            a.accumulate(g * mask)

    return node(np.where(mask, a.data, 0.0), (a,), backward)


def softmax(a):
    """Row-wise softmax; each output row sums to 1."""
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        if a.track:
            dot = (g * out_data).sum(axis=1, keepdims=True)
            a.accumulate(out_data * (g - dot))

    return node(out_data, (a,), backward)


def log(a):
    ad = a.data

    def backward(g):
        if a.track:
            a.accumulate(g / ad)

    return node(np.log(ad), (a,), backward)


def clamp(a, lo, hi):
    """Clip values to [lo, hi]; gradient passes through only inside the interval."""
    mask = (a.data > lo) & (a.data < hi)

    def backward(g):
        if a.track:
            a.accumulate(g * mask)

    return node(np.clip(a.data, lo, hi), (a,), backward)


def sum_all(a):
    def backward(g):
        if a.track:
            a.accumulate(np.full_like(a.data, g[0, 0]))

    return node(np.array([[a.data.sum()]], dtype=a.data.dtype), (a,), backward)


def mean_all(a):
    n = a.data.size

    def backward(g):
        if a.track:
            a.accumulate(np.full_like(a.data, g[0, 0] / n))

    return node(np.array([[a.data.mean()]], dtype=a.data.dtype), (a,), backward)


_BCE_EPS = 1e-7


def binary_cross_entropy(p, y):
    """``-(y log p + (1-y) log(1-p))`` with p clamped to [1e-7, 1-1e-7].

    ``y`` is a plain 0/1 label, not a graph node.  Fused into one op: the
    hand-written backward keeps per-example graphs small.
    """
    if y not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {y!r}")
    if p.shape != (1, 1):
        raise ShapeError(f"binary_cross_entropy wants a (1,1) probability, got {p.shape}")
    pc = np.clip(p.data, _BCE_EPS, 1.0 - _BCE_EPS)
    inside = (p.data > _BCE_EPS) & (p.data < 1.0 - _BCE_EPS)
    loss = -(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))

    def backward(g):
        if p.track:
            p.accumulate(g * inside * (pc - y) / (pc * (1.0 - pc)))

    return node(loss, (p,), backward)


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Adam with the L2 term folded into the gradient before the moment update.

    Decay covers parameters flagged ``decay=True``; embedding-style parameters
    flagged ``sparse_decay=True`` are decayed only on rows touched by the
    current gradient.  Biases are created without either flag.
    """

    def __init__(self, params, lr=5e-4, beta1=0.9, beta2=0.999, eps=1e-8, l2_weight=1e-4):
        self.params = list(params)
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise ValueError("optimizer parameters must have unique names")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.l2_weight = l2_weight
        self.step_count = 0
        self._m = {p.name: np.zeros_like(p.data) for p in self.params}
        self._v = {p.name: np.zeros_like(p.data) for p in self.params}

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self, scale=1.0):
        """One Adam update over all registered parameters.

        ``scale`` multiplies raw gradients first (1/batch for accumulated
        minibatches).  Parameters with no gradient this step still advance
        their moments, as in any dense Adam.
        """
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for p in self.params:
            g = p.grad
            g = np.zeros_like(p.data) if g is None else scale * g
            if not np.all(np.isfinite(g)):
                raise NanGradientError(f"non-finite gradient for parameter {p.name!r}")
            if self.l2_weight:
                if p.sparse_decay:
                    touched = np.any(g != 0.0, axis=1, keepdims=True)
                    g = g + self.l2_weight * p.data * touched
                elif p.decay:
                    g = g + self.l2_weight * p.data
            m = self._m[p.name]
            v = self._v[p.name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    """Per-parameter comparison of analytic vs central-difference gradients."""

    tolerance: float
    per_param: dict = field(default_factory=dict)

    @property
    def max_rel_err(self):
        return max(self.per_param.values(), default=0.0)

    @property
    def passed(self):
        return self.max_rel_err < self.tolerance

    def __str__(self):
        lines = [f"{'parameter':<28} {'max rel err':>12}"]
        for name in sorted(self.per_param):
            lines.append(f"{name:<28} {self.per_param[name]:>12.3e}")
        verdict = "PASS" if self.passed else "FAIL"
        lines.append(f"{verdict}: max {self.max_rel_err:.3e} vs tolerance {self.tolerance:.1e}")
        return "\n".join(lines)


def _rel_err(a, n):
    denom = max(abs(a), abs(n), 1e-5)
    return abs(a - n) / denom


def grad_check(loss_fn, params, tolerance=1e-4, h=1e-5):
    """Compare analytic gradients of ``loss_fn`` against central differences.

    ``loss_fn`` rebuilds the forward graph from the parameters' current data
    on every call and returns the scalar loss tensor.  Meant for 64-bit
    fragments under ~1e4 parameters; at 32-bit the differences drown in
    rounding noise.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    with tape() as t:
        loss = loss_fn()
        t.backward(loss)
    analytic = {p.name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for p in params}
    for p in params:
        p.zero_grad()

    report = GradCheckReport(tolerance=tolerance)
    for p in params:
        worst = 0.0
        flat = p.data.reshape(-1)
        an = analytic[p.name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn().item()
            flat[i] = orig - h
            down = loss_fn().item()
            flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            worst = max(worst, _rel_err(an[i], numeric))
        report.per_param[p.name] = worst
    return report


# ---------------------------------------------------------------------------
# checkpoint format: magic "SFPK", version byte, u32 tensor count, then per
# tensor: name len (u16 LE), UTF-8 name, rank (u8), dims (u32 LE each),
# float32 LE payload.

_CKPT_MAGIC = b"SFPK"
_CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, named_arrays):
    """Write named arrays to ``path`` in the SFPK format (payload is float32)."""
    blob = bytearray()
    blob += _CKPT_MAGIC
    blob += struct.pack("<BI", _CKPT_VERSION, len(named_arrays))
    for name in sorted(named_arrays):
        arr = np.asarray(named_arrays[name], dtype=np.float32)
        encoded = name.encode("utf-8")
        blob += struct.pack("<H", len(encoded))
        blob += encoded
        blob += struct.pack("<B", arr.ndim)
        for dim in arr.shape:
            blob += struct.pack("<I", dim)
        blob += arr.astype("<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


def load_checkpoint(path):
    """Read an SFPK checkpoint back into a dict of float32 arrays."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != _CKPT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {raw[:4]!r}")
    version, count = struct.unpack_from("<BI", raw, 4)
    if version != _CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    out = {}
    off = 9
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off : off + name_len].decode("utf-8")
        off += name_len
        (rank,) = struct.unpack_from("<B", raw, off)
        off += 1
        dims = struct.unpack_from(f"<{rank}I", raw, off)
        off += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(dims)
        off += 4 * n
        out[name] = arr.copy()
    if off != len(raw):
        raise CheckpointError(f"{len(raw) - off} trailing bytes in checkpoint")
    return out
