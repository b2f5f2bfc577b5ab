"""Dense float64 tensors with tape-based reverse-mode automatic differentiation.

A ``ComputeGraph`` is a tape: every operation executed while a graph is
active appends one node, and ``backward`` replays the tape in reverse
append order. Tensors created outside any active graph are leaves;
operations run outside a graph (evaluation, finite differences) record
nothing. A graph and its tensors belong to one thread; independent graphs
may run concurrently on different threads.

All values are 64-bit reals. Every forward operation checks its result for
NaN/Inf and raises ``NumericError`` instead of letting degeneracy
propagate; ops that only move finite values around (gathers, reshapes,
maxima) rely on their inputs having been checked.
"""

from __future__ import annotations

import threading

import numpy as np

from .errors import ContractError, DegeneracyError, DimensionError, NumericError

_STATE = threading.local()


def _active_graph():
    return getattr(_STATE, "graph", None)


class ComputeGraph:
    """Tape of recorded operations for one forward pass.

    Use as a context manager around the forward computation, then call
    ``backward(loss)`` (or the module-level ``backward``) to populate
    gradients.
    """

    def __init__(self):
        self.nodes = []  # (output tensor, backward closure), append order
        self._outer = None

    def __enter__(self):
        self._outer = _active_graph()
        _STATE.graph = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _STATE.graph = self._outer
        _STATE.last_graph = self
        self._outer = None
        return False

    def backward(self, loss):
        """Propagate d(loss)/d(tensor) to every tensor reachable from loss."""
        if not isinstance(loss, Tensor) or loss.data.shape != ():
            raise ContractError("backward requires a scalar Tensor loss")
        loss.grad = np.ones((), dtype=np.float64)
        for out, fn in reversed(self.nodes):
            if out.grad is not None:
                fn(out.grad)


def backward(loss):
    """Run backward on the graph most recently active on this thread."""
    graph = _active_graph() or getattr(_STATE, "last_graph", None)
    if graph is None:
        raise ContractError("backward called with no recorded graph on this thread")
    graph.backward(loss)


class Tensor:
    """Dense float64 array with an optional gradient of the same shape."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _accumulate(t, delta, own=False):
    """Add ``delta`` into ``t.grad``. ``own=True`` promises the caller will
    not reuse ``delta``, letting the first accumulation adopt it directly."""
    if not t.requires_grad:
        return
    if t.grad is None:
        if own and isinstance(delta, np.ndarray) and delta.flags.owndata:
            t.grad = delta
        else:
            t.grad = np.array(delta, dtype=np.float64)
    else:
        t.grad += delta


def _finish(op, out_data, parents, backward_fn, check=True):
    if check and not np.isfinite(out_data.sum()):
        # The cheap reduction can only trip on non-finite entries or on a
        # sum overflow, which itself implies astronomically large values.
        if not np.isfinite(out_data).all():
            raise NumericError(f"{op} produced NaN or infinite values")
    out = Tensor(out_data)
    graph = _active_graph()
    if graph is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        graph.nodes.append((out, backward_fn))
    return out


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b, alpha=1.0):
    """alpha * (a @ b) for 2-D tensors; alpha is a compile-time constant."""
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner extents disagree: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    alpha = float(alpha)
    out = ad @ bd
    if alpha != 1.0:
        out *= alpha

    def backward_fn(g):
        if alpha != 1.0:
            g = g * alpha
        if a.requires_grad:
            _accumulate(a, g @ bd.T, own=True)
        if b.requires_grad:
            _accumulate(b, ad.T @ g, own=True)

    return _finish("matmul", out, (a, b), backward_fn)


def transpose(a):
    if a.ndim != 2:
        raise DimensionError(f"transpose expects a 2-D tensor, got {a.shape}")

    def backward_fn(g):
        _accumulate(a, g.T)

    return _finish("transpose", a.data.T, (a,), backward_fn, check=False)


def affine_map(x, w, b):
    """x @ w + b with b broadcast over rows; x may carry extra leading axes."""
    if w.ndim != 2 or b.ndim != 1 or w.shape[1] != b.shape[0]:
        raise DimensionError(f"affine_map weight/bias extents disagree: {w.shape}, {b.shape}")
    if x.ndim < 2 or x.shape[-1] != w.shape[0]:
        raise DimensionError(f"affine_map input extent {x.shape} does not match weight {w.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ w.data
    out += b.data

    def backward_fn(g):
        g2 = g.reshape(-1, w.shape[1])
        if x.requires_grad:
            _accumulate(x, (g2 @ w.data.T).reshape(x.shape), own=True)
        if w.requires_grad:
            _accumulate(w, x2.T @ g2, own=True)
        if b.requires_grad:
            _accumulate(b, g2.sum(axis=0), own=True)

    return _finish("affine_map", out.reshape(*lead, w.shape[1]), (x, w, b), backward_fn)


def pairwise_sq_dist(q, k):
    """All-pairs squared Euclidean distances between rows of q and rows of k.

    Computed via the norm expansion; tiny negative round-off is clamped to
    zero, and the diagonal is exactly zero when q and k are the same tensor.
    """
    if q.ndim != 2 or k.ndim != 2 or q.shape[1] != k.shape[1]:
        raise DimensionError(f"pairwise_sq_dist feature extents disagree: {q.shape}, {k.shape}")
    qd, kd = q.data, k.data
    qq = np.einsum("ij,ij->i", qd, qd)
    kk = np.einsum("ij,ij->i", kd, kd)
    out = qd @ kd.T
    out *= -2.0
    out += qq[:, None]
    out += kk[None, :]
    np.maximum(out, 0.0, out=out)
    if q is k:
        np.fill_diagonal(out, 0.0)

    def backward_fn(g):
        # d/dq ||q_i - k_j||^2 = 2 (q_i - k_j); clamped entries have ~zero
        # true gradient, so the unclamped rule is used throughout.
        if q.requires_grad:
            dq = qd * g.sum(axis=1)[:, None]
            dq -= g @ kd
            dq *= 2.0
            _accumulate(q, dq, own=True)
        if k.requires_grad:
            dk = kd * g.sum(axis=0)[:, None]
            dk -= g.T @ qd
            dk *= 2.0
            _accumulate(k, dk, own=True)

    return _finish("pairwise_sq_dist", out, (q, k), backward_fn)


# ---------------------------------------------------------------------------
# element-wise and structural ops
# ---------------------------------------------------------------------------

def add(a, b):
    if a.shape != b.shape:
        raise DimensionError(f"add shapes disagree: {a.shape} vs {b.shape}")

    def backward_fn(g):
        # g is dead once this node's backward ran; the second parent may
        # adopt it in place of a copy.
        _accumulate(a, g)
        _accumulate(b, g, own=True)

    return _finish("add", a.data + b.data, (a, b), backward_fn)


def sub(a, b):
    if a.shape != b.shape:
        raise DimensionError(f"sub shapes disagree: {a.shape} vs {b.shape}")

    def backward_fn(g):
        _accumulate(a, g)
        if b.requires_grad:
            _accumulate(b, -g, own=True)

    return _finish("sub", a.data - b.data, (a, b), backward_fn)


def mul(a, b):
    """Element-wise (Hadamard) product of same-shape tensors."""
    if a.shape != b.shape:
        raise DimensionError(f"mul shapes disagree: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data

    def backward_fn(g):
        if a.requires_grad:
            _accumulate(a, g * bd, own=True)
        if b.requires_grad:
            _accumulate(b, g * ad, own=True)

    return _finish("mul", ad * bd, (a, b), backward_fn)


def scale(a, c):
    c = float(c)

    def backward_fn(g):
        _accumulate(a, g * c, own=True)

    return _finish("scale", a.data * c, (a,), backward_fn)


def add_bias(x, b):
    """x + b with the 1-D bias broadcast along the last axis."""
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise DimensionError(f"add_bias extents disagree: {x.shape} vs {b.shape}")

    def backward_fn(g):
        if b.requires_grad:
            _accumulate(b, g.reshape(-1, b.shape[0]).sum(axis=0), own=True)
        _accumulate(x, g, own=True)

    return _finish("add_bias", x.data + b.data, (x, b), backward_fn)


def relu(x):
    """Element-wise max(0, x); the gradient at exactly 0 is 0 by convention."""
    mask = x.data > 0.0

    def backward_fn(g):
        _accumulate(x, g * mask, own=True)

    return _finish("relu", np.maximum(x.data, 0.0), (x,), backward_fn, check=False)


def _scatter_rows(shape, idx_flat, g2):
    """Sum rows of g2 into a zero matrix at the given row indices."""
    n, d = shape
    cells = idx_flat[:, None] * d + np.arange(d)[None, :]
    flat = np.bincount(cells.reshape(-1), weights=g2.reshape(-1), minlength=n * d)
    return flat.reshape(n, d)


def gather_rows(x, idx, unique=False):
    """Select rows of a 2-D tensor by integer index.

    idx may be 1-D (m,) giving an (m, d) result or 2-D (m, k) giving
    (m, k, d). Backward scatters additively, so duplicated indices
    accumulate gradient; ``unique=True`` asserts the caller knows the
    indices are distinct and takes a faster scatter path.
    """
    if x.ndim != 2:
        raise DimensionError(f"gather_rows expects a 2-D source, got {x.shape}")
    idx = np.asarray(idx)
    if idx.ndim not in (1, 2) or not np.issubdtype(idx.dtype, np.integer):
        raise ContractError("gather_rows index must be a 1-D or 2-D integer array")
    n = x.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"gather_rows index out of range for {n} rows")
    out = x.data[idx]

    def backward_fn(g):
        if x.requires_grad:
            g2 = g.reshape(-1, x.shape[1])
            if unique:
                dx = np.zeros_like(x.data)
                dx[idx.reshape(-1)] = g2
                _accumulate(x, dx, own=True)
            else:
                _accumulate(x, _scatter_rows(x.data.shape, idx.reshape(-1), g2), own=True)

    return _finish("gather_rows", out, (x,), backward_fn, check=False)


def relative_to_center(neighbors, centers):
    """(m, k, d) neighbor block minus the per-row (m, d) center."""
    if neighbors.ndim != 3 or centers.ndim != 2 or neighbors.shape[::2] != centers.shape:
        raise DimensionError(
            f"relative_to_center extents disagree: {neighbors.shape} vs {centers.shape}")

    def backward_fn(g):
        if centers.requires_grad:
            _accumulate(centers, -g.sum(axis=1), own=True)
        _accumulate(neighbors, g, own=True)

    out = neighbors.data - centers.data[:, None, :]
    return _finish("relative_to_center", out, (neighbors, centers), backward_fn)


def reduce_max_rows(x):
    """Column-wise maximum of an (n, d) tensor -> (d,).

    Gradient routes to the lowest-index argmax row of each column (argmax
    is recomputed lazily so untracked passes skip it).
    """
    if x.ndim != 2 or x.shape[0] < 1:
        raise DimensionError(f"reduce_max_rows expects a nonempty 2-D tensor, got {x.shape}")
    out = x.data.max(axis=0)

    def backward_fn(g):
        if x.requires_grad:
            am = np.argmax(x.data, axis=0)  # first (lowest-index) maximum
            cols = np.arange(x.shape[1])
            dx = np.zeros_like(x.data)
            dx[am, cols] = g
            _accumulate(x, dx, own=True)

    return _finish("reduce_max_rows", out, (x,), backward_fn, check=False)


def reduce_max_neighbors(x):
    """Maximum over the middle axis of an (m, k, d) tensor -> (m, d).

    Ties route gradient to the lowest neighbor index, matching
    ``reduce_max_rows``.
    """
    if x.ndim != 3 or x.shape[1] < 1:
        raise DimensionError(f"reduce_max_neighbors expects (m, k, d), got {x.shape}")
    out = x.data.max(axis=1)

    def backward_fn(g):
        if x.requires_grad:
            am = np.argmax(x.data, axis=1)  # (m, d)
            m, _, d = x.shape
            rows = np.arange(m)[:, None]
            cols = np.arange(d)[None, :]
            dx = np.zeros_like(x.data)
            dx[rows, am, cols] = g
            _accumulate(x, dx, own=True)

    return _finish("reduce_max_neighbors", out, (x,), backward_fn, check=False)


def gather_rows_max(x, idx):
    """Fused gather + neighbor max: out[i] = max over j in idx[i] of x[j].

    Equivalent to ``reduce_max_neighbors(gather_rows(x, idx))`` but never
    materializes gradient blocks of the gathered shape; with the engine
    bandwidth-bound at production sizes this halves the op's traffic.
    Ties route to the lowest position within each index row.
    """
    if x.ndim != 2:
        raise DimensionError(f"gather_rows_max expects a 2-D source, got {x.shape}")
    idx = np.asarray(idx)
    if idx.ndim != 2 or not np.issubdtype(idx.dtype, np.integer):
        raise ContractError("gather_rows_max index must be a 2-D integer array")
    n, d = x.shape
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"gather_rows_max index out of range for {n} rows")
    gathered = x.data[idx]  # (m, k, d)
    out = gathered.max(axis=1)

    def backward_fn(g):
        if x.requires_grad:
            m = idx.shape[0]
            am = np.argmax(gathered, axis=1)          # (m, d) winning slot
            rows = idx[np.arange(m)[:, None], am]     # (m, d) source row ids
            cells = rows * d + np.arange(d)[None, :]
            flat = np.bincount(cells.reshape(-1), weights=g.reshape(-1),
                               minlength=n * d)
            _accumulate(x, flat.reshape(n, d), own=True)

    return _finish("gather_rows_max", out, (x,), backward_fn, check=False)


def gather_relative_relu_max(features, neighbor_idx, w, b, center_idx=None):
    """Fused neighborhood kernel:

        out[i] = max over j in neighbor_idx[i] of
                 relu((features[j] - features[center_idx[i]]) @ w + b)

    (without the subtraction when ``center_idx`` is None). Functionally the
    gather / subtract / affine / relu / max composition, with a backward
    pass that only touches the winning cells, since only they carry
    gradient.
    """
    if features.ndim != 2 or w.ndim != 2 or b.ndim != 1:
        raise DimensionError("gather_relative_relu_max expects 2-D features and weight")
    if features.shape[1] != w.shape[0] or w.shape[1] != b.shape[0]:
        raise DimensionError(
            f"extents disagree: features {features.shape}, w {w.shape}, b {b.shape}")
    neighbor_idx = np.asarray(neighbor_idx)
    n, c_in = features.shape
    if neighbor_idx.ndim != 2 or not np.issubdtype(neighbor_idx.dtype, np.integer):
        raise ContractError("neighbor index must be a 2-D integer array")
    if neighbor_idx.size and (neighbor_idx.min() < 0 or neighbor_idx.max() >= n):
        raise IndexError(f"neighbor index out of range for {n} rows")
    m, k = neighbor_idx.shape
    d = w.shape[1]

    rel = features.data[neighbor_idx]  # (m, k, c_in), c_in is small
    if center_idx is not None:
        center_idx = np.asarray(center_idx)
        rel = rel - features.data[center_idx][:, None, :]
    z = rel.reshape(-1, c_in) @ w.data
    z += b.data
    np.maximum(z, 0.0, out=z)
    z3 = z.reshape(m, k, d)
    out = z3.max(axis=1)

    def backward_fn(g):
        mrows = np.arange(m)
        am = np.argmax(z3, axis=1)                       # (m, d)
        upstream = g * (z3[mrows[:, None], am, np.arange(d)[None, :]] > 0.0)
        if b.requires_grad:
            _accumulate(b, upstream.sum(axis=0), own=True)
        rel_win = rel[mrows[:, None], am, :]             # (m, d, c_in)
        if w.requires_grad:
            _accumulate(w, np.einsum("mdc,md->cd", rel_win, upstream), own=True)
        if features.requires_grad:
            # (m, d, c_in) per-cell contribution u * w[:, col]
            contrib = upstream[:, :, None] * w.data.T[None, :, :]
            rows = neighbor_idx[mrows[:, None], am]      # (m, d)
            cells = rows[:, :, None] * c_in + np.arange(c_in)[None, None, :]
            flat = np.bincount(cells.reshape(-1), weights=contrib.reshape(-1),
                               minlength=n * c_in)
            dx = flat.reshape(n, c_in)
            if center_idx is not None:
                np.subtract.at(dx, center_idx, contrib.sum(axis=1))
            _accumulate(features, dx, own=True)

    return _finish("gather_relative_relu_max", out, (features, w, b), backward_fn)


def concat_last(a, b):
    """Concatenate along the last axis (rows for 1-D, columns for 2-D)."""
    if a.ndim != b.ndim or a.shape[:-1] != b.shape[:-1]:
        raise DimensionError(f"concat_last shapes disagree: {a.shape} vs {b.shape}")
    na = a.shape[-1]

    def backward_fn(g):
        _accumulate(a, g[..., :na])
        _accumulate(b, g[..., na:])

    out = np.concatenate([a.data, b.data], axis=-1)
    return _finish("concat_last", out, (a, b), backward_fn, check=False)


def broadcast_row(v, n):
    """Repeat a 1-D tensor as n identical rows; backward sums over rows."""
    if v.ndim != 1:
        raise DimensionError(f"broadcast_row expects a 1-D tensor, got {v.shape}")

    def backward_fn(g):
        _accumulate(v, g.sum(axis=0), own=True)

    out = np.broadcast_to(v.data, (int(n), v.shape[0])).copy()
    return _finish("broadcast_row", out, (v,), backward_fn, check=False)


def reshape(x, shape):
    shape = tuple(int(s) for s in shape)

    def backward_fn(g):
        _accumulate(x, g.reshape(x.shape))

    return _finish("reshape", x.data.reshape(shape), (x,), backward_fn, check=False)


# ---------------------------------------------------------------------------
# normalizations and reductions
# ---------------------------------------------------------------------------

def _softmax(op, x, axis):
    out = x.data - x.data.max(axis=axis, keepdims=True)
    np.exp(out, out=out)
    out /= out.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        if x.requires_grad:
            dx = g - (g * out).sum(axis=axis, keepdims=True)
            dx *= out
            _accumulate(x, dx, own=True)

    # exp of a shifted finite value is finite; no output check needed.
    return _finish(op, out, (x,), backward_fn, check=False)


def softmax_rows(x):
    """Row-wise softmax of a 2-D tensor (each row sums to 1)."""
    if x.ndim != 2:
        raise DimensionError(f"softmax_rows expects a 2-D tensor, got {x.shape}")
    return _softmax("softmax_rows", x, axis=1)


def softmax_cols(x):
    """Column-wise softmax of a 2-D tensor (each column sums to 1)."""
    if x.ndim != 2:
        raise DimensionError(f"softmax_cols expects a 2-D tensor, got {x.shape}")
    return _softmax("softmax_cols", x, axis=0)


def normalize_rows(x):
    """Divide each row of a nonnegative 2-D tensor by its sum.

    A row that sums to zero (every entry masked away) is a degeneracy,
    not a numeric accident, and raises ``DegeneracyError``.
    """
    if x.ndim != 2:
        raise DimensionError(f"normalize_rows expects a 2-D tensor, got {x.shape}")
    s = x.data.sum(axis=1, keepdims=True)
    if not (s > 0.0).all():
        raise DegeneracyError("normalize_rows: a row sums to zero (fully masked row)")
    out = x.data / s

    def backward_fn(g):
        if x.requires_grad:
            dx = g - (g * out).sum(axis=1, keepdims=True)
            dx /= s
            _accumulate(x, dx, own=True)

    return _finish("normalize_rows", out, (x,), backward_fn)


def sum_all(x):
    """Sum of all elements -> scalar tensor."""

    def backward_fn(g):
        _accumulate(x, np.full(x.shape, float(g)), own=True)

    return _finish("sum_all", np.asarray(x.data.sum()), (x,), backward_fn)


def cross_entropy_logits(logits, label):
    """-log softmax(logits)[label] for a 1-D logit vector, max-stabilized."""
    if logits.ndim != 1:
        raise DimensionError(f"cross_entropy_logits expects 1-D logits, got {logits.shape}")
    label = int(label)
    if not 0 <= label < logits.shape[0]:
        raise ContractError(f"label {label} out of range for {logits.shape[0]} classes")
    z = logits.data - logits.data.max()
    e = np.exp(z)
    total = e.sum()
    loss = np.asarray(np.log(total) - z[label])

    def backward_fn(g):
        if logits.requires_grad:
            p = e / total
            p[label] -= 1.0
            _accumulate(logits, float(g) * p, own=True)

    return _finish("cross_entropy_logits", loss, (logits,), backward_fn)


def cross_entropy_rows(logits, labels):
    """Mean cross entropy over the rows of an (n, c) logit matrix."""
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy_rows expects 2-D logits, got {logits.shape}")
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"labels shape {labels.shape} does not match {n} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ContractError(f"a label is out of range for {c} classes")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    total = e.sum(axis=1)
    rows = np.arange(n)
    loss = np.asarray((np.log(total) - z[rows, labels]).mean())

    def backward_fn(g):
        if logits.requires_grad:
            p = e / total[:, None]
            p[rows, labels] -= 1.0
            p *= float(g) / n
            _accumulate(logits, p, own=True)

    return _finish("cross_entropy_rows", loss, (logits,), backward_fn)


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------

def grad_check(f, x, eps=1e-5):
    """Max relative error between backward and central-difference gradients.

    ``f`` must map a tensor to a scalar tensor using only operations from
    this module. The relative error per coordinate is
    |a - b| / max(1e-8, |a| + |b|).
    """
    if eps <= 0:
        raise ContractError("grad_check requires eps > 0")
    probe = Tensor(np.array(x.data, dtype=np.float64, copy=True), requires_grad=True)
    with ComputeGraph() as graph:
        out = f(probe)
    if out.data.shape != ():
        raise ContractError("grad_check requires a scalar-valued function")
    graph.backward(out)
    analytic = probe.grad if probe.grad is not None else np.zeros_like(probe.data)
    analytic = analytic.reshape(-1).copy()

    flat = probe.data.reshape(-1)
    numeric = np.empty_like(analytic)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = float(f(probe).data)
        flat[i] = orig - eps
        f_minus = float(f(probe).data)
        flat[i] = orig
        numeric[i] = (f_plus - f_minus) / (2.0 * eps)

    denom = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    rel = np.abs(analytic - numeric) / denom
    return float(rel.max()) if rel.size else 0.0
