"""Dense float64 kernels with reverse-mode differentiation.

Just enough machinery to express the detection heads and train the toy
model: 2-D tensors, a gradient tape, a small set of primitives with
hand-written vector-Jacobian products, fused numerics (row softmax, layer
norm, row L2 normalization, masked row logsumexp, smooth L1), the MLP and
multi-head cross-attention composites, and a central-difference gradient
checker.

Conventions:

- Everything is a ``Tensor2D`` (rows x cols, float64). Scalars are 1x1.
- A ``Tape`` records primitives in creation order, which is already a
  topological order; ``backward`` walks it once in reverse.
- Ops accept tensors from at most one tape. Tensors without a tape are
  constants: they get values but never gradients.
- Finiteness is enforced where data enters (``leaf`` / ``constant``);
  the training loop is responsible for watching losses for NaN blow-ups.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor2D",
    "Tape",
    "constant",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "add_const",
    "mul_array",
    "add_array",
    "matmul",
    "transpose",
    "add_rowvec",
    "add_colvec",
    "mul_scalar",
    "add_scalar",
    "gather_rows",
    "gather_cols",
    "slice_cols",
    "concat_cols",
    "concat_rows",
    "sum_all",
    "rowmax",
    "sigmoid",
    "softplus",
    "silu",
    "sin",
    "cos",
    "smooth_l1",
    "softmax_rows",
    "layer_norm",
    "l2_normalize_rows",
    "row_logsumexp_masked",
    "MlpParams",
    "AttnParams",
    "linear",
    "mlp2",
    "mhca",
    "init_linear",
    "init_mlp",
    "init_attn",
    "mlp_params",
    "attn_params",
    "grad_check",
]


def _as_matrix(a) -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"Tensor2D needs a 2-D array, got shape {arr.shape}")
    return arr


class Tensor2D:
    """A rows x cols float64 matrix, optionally attached to a tape node."""

    __slots__ = ("array", "tape", "node_id")

    def __init__(self, array: np.ndarray, tape: "Tape | None" = None, node_id: int | None = None):
        self.array = array
        self.tape = tape
        self.node_id = node_id

    @property
    def rows(self) -> int:
        return self.array.shape[0]

    @property
    def cols(self) -> int:
        return self.array.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.array.shape

    def item(self) -> float:
        if self.array.shape != (1, 1):
            raise ValueError(f"item() needs a 1x1 tensor, got {self.array.shape}")
        return float(self.array[0, 0])

    def __repr__(self) -> str:
        tag = "const" if self.tape is None else f"node {self.node_id}"
        return f"Tensor2D({self.rows}x{self.cols}, {tag})"


def constant(a) -> Tensor2D:
    """Wrap an array as an un-differentiated constant tensor."""
    arr = _as_matrix(a).copy()
    if not np.all(np.isfinite(arr)):
        raise ValueError("constant tensor contains non-finite entries")
    return Tensor2D(arr)


@dataclass
class _Node:
    out_id: int
    parent_ids: tuple
    vjp: Callable[[np.ndarray], tuple]


class Tape:
    """Recorded primitive ops in topological (creation) order.

    ``backward`` walks the record once in reverse, accumulating adjoints
    by node id; each node's VJP runs at most once. Gradients of leaves
    are then available through ``grad``.
    """

    def __init__(self) -> None:
        self._nodes: list[_Node] = []
        self._grads: dict[int, np.ndarray] = {}
        self._next_id = 0

    def _fresh_id(self) -> int:
        i = self._next_id
        self._next_id += 1
        return i

    def leaf(self, array) -> Tensor2D:
        """Register a differentiable input (a parameter or data tensor)."""
        arr = _as_matrix(array).copy()
        if not np.all(np.isfinite(arr)):
            raise ValueError("leaf tensor contains non-finite entries")
        return Tensor2D(arr, self, self._fresh_id())

    def _emit(self, array: np.ndarray, parents: Sequence[Tensor2D], vjp) -> Tensor2D:
        out = Tensor2D(array, self, self._fresh_id())
        ids = tuple(p.node_id if p.tape is self else None for p in parents)
        self._nodes.append(_Node(out.node_id, ids, vjp))
        return out

    def backward(self, out: Tensor2D) -> None:
        """Backpropagate from a scalar output to every reachable leaf."""
        if out.tape is not self:
            raise ValueError("output tensor does not belong to this tape")
        if out.array.shape != (1, 1):
            raise ValueError(f"backward needs a scalar (1x1) output, got {out.array.shape}")
        grads: dict[int, np.ndarray] = {out.node_id: np.ones((1, 1))}
        for node in reversed(self._nodes):
            g = grads.pop(node.out_id, None)
            if g is None:
                continue
            for pid, pg in zip(node.parent_ids, node.vjp(g)):
                if pid is None or pg is None:
                    continue
                acc = grads.get(pid)
                grads[pid] = pg if acc is None else acc + pg
        self._grads = grads

    def grad(self, t: Tensor2D) -> np.ndarray:
        """Gradient of the last backward() target with respect to ``t``."""
        if t.tape is not self:
            raise ValueError("tensor does not belong to this tape")
        g = self._grads.get(t.node_id)
        return np.zeros_like(t.array) if g is None else g


def _tape_of(*ts: Tensor2D) -> Tape | None:
    tape = None
    for t in ts:
        if t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif tape is not t.tape:
            raise ValueError("operands belong to different tapes")
    return tape


def _result(value: np.ndarray, parents: Sequence[Tensor2D], vjp) -> Tensor2D:
    tape = _tape_of(*parents)
    if tape is None:
        return Tensor2D(value)
    return tape._emit(value, parents, vjp)


def _need_same_shape(a: Tensor2D, b: Tensor2D, opname: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{opname} needs matching shapes, got {a.shape} and {b.shape}")


# ------------------------------------------------------------------ primitives


def add(a: Tensor2D, b: Tensor2D) -> Tensor2D:
    _need_same_shape(a, b, "add")
    return _result(a.array + b.array, (a, b), lambda g: (g, g))


def sub(a: Tensor2D, b: Tensor2D) -> Tensor2D:
    _need_same_shape(a, b, "sub")
    return _result(a.array - b.array, (a, b), lambda g: (g, -g))


def mul(a: Tensor2D, b: Tensor2D) -> Tensor2D:
    """Elementwise (Hadamard) product."""
    _need_same_shape(a, b, "mul")
    av, bv = a.array, b.array
    return _result(av * bv, (a, b), lambda g: (g * bv, g * av))


def neg(a: Tensor2D) -> Tensor2D:
    return _result(-a.array, (a,), lambda g: (-g,))


def scale(a: Tensor2D, c: float) -> Tensor2D:
    c = float(c)
    return _result(a.array * c, (a,), lambda g: (g * c,))


def add_const(a: Tensor2D, c: float) -> Tensor2D:
    return _result(a.array + float(c), (a,), lambda g: (g,))


def mul_array(a: Tensor2D, m) -> Tensor2D:
    """Elementwise product with a constant array (masks, fixed weights)."""
    mv = np.asarray(m, dtype=np.float64)
    if mv.shape != a.shape:
        raise ValueError(f"mul_array needs shape {a.shape}, got {mv.shape}")
    return _result(a.array * mv, (a,), lambda g: (g * mv,))


def add_array(a: Tensor2D, m) -> Tensor2D:
    """Add a constant array."""
    mv = np.asarray(m, dtype=np.float64)
    if mv.shape != a.shape:
        raise ValueError(f"add_array needs shape {a.shape}, got {mv.shape}")
    return _result(a.array + mv, (a,), lambda g: (g,))


def matmul(a: Tensor2D, b: Tensor2D) -> Tensor2D:
    if a.cols != b.rows:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    av, bv = a.array, b.array
    return _result(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def transpose(a: Tensor2D) -> Tensor2D:
    return _result(a.array.T.copy(), (a,), lambda g: (g.T,))


def add_rowvec(x: Tensor2D, v: Tensor2D) -> Tensor2D:
    """Broadcast-add a 1 x D row vector to every row of an N x D tensor."""
    if v.rows != 1 or v.cols != x.cols:
        raise ValueError(f"add_rowvec needs a 1x{x.cols} vector, got {v.shape}")
    return _result(x.array + v.array, (x, v), lambda g: (g, g.sum(axis=0, keepdims=True)))


def add_colvec(x: Tensor2D, v: Tensor2D) -> Tensor2D:
    """Broadcast-add an N x 1 column vector to every column of an N x D tensor."""
    if v.cols != 1 or v.rows != x.rows:
        raise ValueError(f"add_colvec needs a {x.rows}x1 vector, got {v.shape}")
    return _result(x.array + v.array, (x, v), lambda g: (g, g.sum(axis=1, keepdims=True)))


def mul_scalar(x: Tensor2D, s: Tensor2D) -> Tensor2D:
    """Multiply every entry by a learnable 1x1 scalar tensor."""
    if s.shape != (1, 1):
        raise ValueError(f"mul_scalar needs a 1x1 scalar, got {s.shape}")
    xv, sv = x.array, s.array[0, 0]
    return _result(xv * sv, (x, s), lambda g: (g * sv, np.array([[(g * xv).sum()]])))


def add_scalar(x: Tensor2D, s: Tensor2D) -> Tensor2D:
    """Add a learnable 1x1 scalar tensor to every entry."""
    if s.shape != (1, 1):
        raise ValueError(f"add_scalar needs a 1x1 scalar, got {s.shape}")
    return _result(x.array + s.array[0, 0], (x, s), lambda g: (g, np.array([[g.sum()]])))


def gather_rows(x: Tensor2D, idx) -> Tensor2D:
    """Select rows by integer index (repeats allowed); scatter-adds on backward."""
    ii = np.asarray(idx, dtype=np.intp)
    if ii.ndim != 1:
        raise ValueError("gather_rows needs a 1-D index array")
    if ii.size and (ii.min() < 0 or ii.max() >= x.rows):
        raise ValueError("gather_rows index out of range")
    nrows, ncols = x.shape

    def vjp(g):
        acc = np.zeros((nrows, ncols))
        np.add.at(acc, ii, g)
        return (acc,)

    return _result(x.array[ii].copy(), (x,), vjp)


def gather_cols(x: Tensor2D, idx) -> Tensor2D:
    """Select columns by integer index (repeats allowed)."""
    ii = np.asarray(idx, dtype=np.intp)
    if ii.ndim != 1:
        raise ValueError("gather_cols needs a 1-D index array")
    if ii.size and (ii.min() < 0 or ii.max() >= x.cols):
        raise ValueError("gather_cols index out of range")
    nrows, ncols = x.shape

    def vjp(g):
        acc = np.zeros((nrows, ncols))
        np.add.at(acc.T, ii, g.T)
        return (acc,)

    return _result(x.array[:, ii].copy(), (x,), vjp)


def slice_cols(x: Tensor2D, j0: int, j1: int) -> Tensor2D:
    if not (0 <= j0 < j1 <= x.cols):
        raise ValueError(f"bad column slice [{j0}:{j1}] for width {x.cols}")
    nrows, ncols = x.shape

    def vjp(g):
        acc = np.zeros((nrows, ncols))
        acc[:, j0:j1] = g
        return (acc,)

    return _result(x.array[:, j0:j1].copy(), (x,), vjp)


def concat_cols(parts: Sequence[Tensor2D]) -> Tensor2D:
    if not parts:
        raise ValueError("concat_cols needs at least one tensor")
    nrows = parts[0].rows
    if any(p.rows != nrows for p in parts):
        raise ValueError("concat_cols needs equal row counts")
    widths = [p.cols for p in parts]
    edges = np.cumsum([0] + widths)

    def vjp(g):
        return tuple(g[:, edges[k]:edges[k + 1]] for k in range(len(widths)))

    return _result(np.concatenate([p.array for p in parts], axis=1), tuple(parts), vjp)


def concat_rows(parts: Sequence[Tensor2D]) -> Tensor2D:
    if not parts:
        raise ValueError("concat_rows needs at least one tensor")
    ncols = parts[0].cols
    if any(p.cols != ncols for p in parts):
        raise ValueError("concat_rows needs equal column counts")
    heights = [p.rows for p in parts]
    edges = np.cumsum([0] + heights)

    def vjp(g):
        return tuple(g[edges[k]:edges[k + 1], :] for k in range(len(heights)))

    return _result(np.concatenate([p.array for p in parts], axis=0), tuple(parts), vjp)


def sum_all(x: Tensor2D) -> Tensor2D:
    nrows, ncols = x.shape
    return _result(
        np.array([[x.array.sum()]]),
        (x,),
        lambda g: (np.full((nrows, ncols), g[0, 0]),),
    )


def rowmax(x: Tensor2D) -> Tensor2D:
    """Per-row maximum (N x 1). Gradient routes to the first argmax of each row."""
    arg = np.argmax(x.array, axis=1)
    nrows, ncols = x.shape

    def vjp(g):
        acc = np.zeros((nrows, ncols))
        acc[np.arange(nrows), arg] = g[:, 0]
        return (acc,)

    return _result(x.array[np.arange(nrows), arg].reshape(-1, 1), (x,), vjp)


def sigmoid(x: Tensor2D) -> Tensor2D:
    # Stable two-sided form.
    v = x.array
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ex = np.exp(v[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _result(out, (x,), lambda g: (g * out * (1.0 - out),))


def softplus(x: Tensor2D) -> Tensor2D:
    """log(1 + e^x), computed as max(x, 0) + log1p(e^-|x|)."""
    v = x.array
    out = np.maximum(v, 0.0) + np.log1p(np.exp(-np.abs(v)))
    sig = np.empty_like(v)
    pos = v >= 0
    sig[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ex = np.exp(v[~pos])
    sig[~pos] = ex / (1.0 + ex)
    return _result(out, (x,), lambda g: (g * sig,))


def silu(x: Tensor2D) -> Tensor2D:
    """x * sigmoid(x)."""
    v = x.array
    sig = np.empty_like(v)
    pos = v >= 0
    sig[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ex = np.exp(v[~pos])
    sig[~pos] = ex / (1.0 + ex)
    out = v * sig
    return _result(out, (x,), lambda g: (g * (sig + out * (1.0 - sig)),))


def sin(x: Tensor2D) -> Tensor2D:
    v = x.array
    return _result(np.sin(v), (x,), lambda g: (g * np.cos(v),))


def cos(x: Tensor2D) -> Tensor2D:
    v = x.array
    return _result(np.cos(v), (x,), lambda g: (g * -np.sin(v),))


def smooth_l1(pred: Tensor2D, target, beta: float = 1.0) -> Tensor2D:
    """Elementwise smooth-L1 (Huber) against a constant target.

    0.5 d^2 / beta for |d| < beta, |d| - 0.5 beta otherwise.
    """
    if beta <= 0.0:
        raise ValueError(f"smooth_l1 beta must be positive, got {beta}")
    tv = np.asarray(target, dtype=np.float64)
    if tv.shape != pred.shape:
        raise ValueError(f"smooth_l1 target needs shape {pred.shape}, got {tv.shape}")
    d = pred.array - tv
    ad = np.abs(d)
    out = np.where(ad < beta, 0.5 * d * d / beta, ad - 0.5 * beta)
    return _result(out, (pred,), lambda g: (g * np.clip(d / beta, -1.0, 1.0),))


def softmax_rows(x: Tensor2D) -> Tensor2D:
    """Row softmax with max subtraction for stability."""
    v = x.array
    sh = v - v.max(axis=1, keepdims=True)
    e = np.exp(sh)
    y = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        return (y * (g - dot),)

    return _result(y, (x,), vjp)


def layer_norm(x: Tensor2D, gamma: Tensor2D, beta: Tensor2D, eps: float = 1e-6) -> Tensor2D:
    """Per-row normalization to zero mean / unit variance, then affine.

    gamma and beta are 1 x D row vectors (learnable when on a tape).
    """
    if gamma.shape != (1, x.cols) or beta.shape != (1, x.cols):
        raise ValueError(
            f"layer_norm affine vectors must be 1x{x.cols}, got {gamma.shape} and {beta.shape}"
        )
    v = x.array
    n = v.shape[1]
    mu = v.mean(axis=1, keepdims=True)
    xc = v - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gv = gamma.array
    out = xhat * gv + beta.array

    def vjp(g):
        gg = g * gv  # adjoint of xhat
        # d xhat / dx folded analytically: inv * (gg - mean(gg) - xhat * mean(gg*xhat))
        m1 = gg.mean(axis=1, keepdims=True)
        m2 = (gg * xhat).mean(axis=1, keepdims=True)
        dx = inv * (gg - m1 - xhat * m2)
        dgamma = (g * xhat).sum(axis=0, keepdims=True)
        dbeta = g.sum(axis=0, keepdims=True)
        return (dx, dgamma, dbeta)

    return _result(out, (x, gamma, beta), vjp)


def l2_normalize_rows(x: Tensor2D, eps: float = 1e-12) -> Tensor2D:
    """Scale each row to unit L2 norm (norms below eps are clamped)."""
    v = x.array
    r = np.sqrt((v * v).sum(axis=1, keepdims=True))
    r = np.maximum(r, eps)
    y = v / r

    def vjp(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        return ((g - y * dot) / r,)

    return _result(y, (x,), vjp)


def row_logsumexp_masked(x: Tensor2D, mask) -> Tensor2D:
    """Per-row log sum exp over entries where mask is true (N x 1 output).

    Every row must have at least one unmasked entry.
    """
    mv = np.asarray(mask, dtype=bool)
    if mv.shape != x.shape:
        raise ValueError(f"mask needs shape {x.shape}, got {mv.shape}")
    if not mv.any(axis=1).all():
        raise ValueError("row_logsumexp_masked: some row has an empty mask")
    v = np.where(mv, x.array, -np.inf)
    m = v.max(axis=1, keepdims=True)
    e = np.where(mv, np.exp(v - m), 0.0)
    s = e.sum(axis=1, keepdims=True)
    out = m + np.log(s)

    def vjp(g):
        return (g * (e / s),)

    return _result(out, (x,), vjp)


# ------------------------------------------------------------------ composites


@dataclass
class MlpParams:
    """Two linear layers; the activation between them is SiLU."""

    w1: Tensor2D
    b1: Tensor2D
    w2: Tensor2D
    b2: Tensor2D


@dataclass
class AttnParams:
    """Projection weights for multi-head cross-attention."""

    wq: Tensor2D
    bq: Tensor2D
    wk: Tensor2D
    bk: Tensor2D
    wv: Tensor2D
    bv: Tensor2D
    wo: Tensor2D
    bo: Tensor2D


def linear(x: Tensor2D, w: Tensor2D, b: Tensor2D) -> Tensor2D:
    return add_rowvec(matmul(x, w), b)


def mlp2(x: Tensor2D, params: MlpParams) -> Tensor2D:
    """linear -> SiLU -> linear."""
    return linear(silu(linear(x, params.w1, params.b1)), params.w2, params.b2)


def mhca(q: Tensor2D, kv: Tensor2D, params: AttnParams, n_heads: int) -> Tensor2D:
    """Multi-head scaled dot-product cross-attention.

    Queries come from ``q`` (N_q x D), keys and values from ``kv``
    (N_kv x D). Per head of width d = D / n_heads: softmax(Q Kᵀ / sqrt(d)) V;
    head outputs are concatenated and passed through the output projection.
    """
    d_model = q.cols
    if kv.cols != d_model:
        raise ValueError(f"q and kv widths differ: {d_model} vs {kv.cols}")
    if n_heads < 1 or d_model % n_heads != 0:
        raise ValueError(f"model width {d_model} not divisible by {n_heads} heads")
    d_head = d_model // n_heads
    qp = linear(q, params.wq, params.bq)
    kp = linear(kv, params.wk, params.bk)
    vp = linear(kv, params.wv, params.bv)
    heads = []
    for h in range(n_heads):
        j0, j1 = h * d_head, (h + 1) * d_head
        qh = slice_cols(qp, j0, j1)
        kh = slice_cols(kp, j0, j1)
        vh = slice_cols(vp, j0, j1)
        att = softmax_rows(scale(matmul(qh, transpose(kh)), 1.0 / math.sqrt(d_head)))
        heads.append(matmul(att, vh))
    return linear(concat_cols(heads), params.wo, params.bo)


# -------------------------------------------------------------- initialization


def init_linear(rng: np.random.Generator, d_in: int, d_out: int) -> tuple[np.ndarray, np.ndarray]:
    """Weight and bias drawn uniform(-1/sqrt(fan_in), +1/sqrt(fan_in))."""
    bound = 1.0 / math.sqrt(d_in)
    w = rng.uniform(-bound, bound, size=(d_in, d_out))
    b = rng.uniform(-bound, bound, size=(1, d_out))
    return w, b


def init_mlp(
    rng: np.random.Generator, prefix: str, d_in: int, d_hidden: int, d_out: int
) -> dict[str, np.ndarray]:
    w1, b1 = init_linear(rng, d_in, d_hidden)
    w2, b2 = init_linear(rng, d_hidden, d_out)
    return {f"{prefix}.w1": w1, f"{prefix}.b1": b1, f"{prefix}.w2": w2, f"{prefix}.b2": b2}


def init_attn(rng: np.random.Generator, prefix: str, d_model: int) -> dict[str, np.ndarray]:
    out = {}
    for name in ("q", "k", "v", "o"):
        w, b = init_linear(rng, d_model, d_model)
        out[f"{prefix}.w{name}"] = w
        out[f"{prefix}.b{name}"] = b
    return out


def mlp_params(leaves: dict[str, Tensor2D], prefix: str) -> MlpParams:
    return MlpParams(
        w1=leaves[f"{prefix}.w1"], b1=leaves[f"{prefix}.b1"],
        w2=leaves[f"{prefix}.w2"], b2=leaves[f"{prefix}.b2"],
    )


def attn_params(leaves: dict[str, Tensor2D], prefix: str) -> AttnParams:
    return AttnParams(
        wq=leaves[f"{prefix}.wq"], bq=leaves[f"{prefix}.bq"],
        wk=leaves[f"{prefix}.wk"], bk=leaves[f"{prefix}.bk"],
        wv=leaves[f"{prefix}.wv"], bv=leaves[f"{prefix}.bv"],
        wo=leaves[f"{prefix}.wo"], bo=leaves[f"{prefix}.bo"],
    )


# ---------------------------------------------------------------- verification


def grad_check(
    f: Callable[[Tape, dict[str, Tensor2D]], Tensor2D],
    params: dict[str, np.ndarray],
    h: float = 1e-5,
    max_coords_per_param: int | None = None,
    seed: int = 0,
) -> float:
    """Worst relative error between reverse-mode and central differences.

    ``f(tape, leaves)`` must build and return a scalar (1x1) tensor from
    the leaf tensors registered for every entry of ``params``. Each
    parameter coordinate is probed with (f(x+h) - f(x-h)) / 2h; the
    relative error divides by max(|analytic|, |numeric|, 1e-6) so exact
    zeros do not blow up. When ``max_coords_per_param`` is given, that
    many coordinates per parameter are sampled (deterministically from
    ``seed``) instead of probing all of them.
    """
    if h <= 0.0:
        raise ValueError(f"step size must be positive, got {h}")
    work = {k: np.asarray(v, dtype=np.float64).copy() for k, v in params.items()}

    def value_at() -> float:
        tape = Tape()
        leaves = {k: tape.leaf(v) for k, v in work.items()}
        return f(tape, leaves).item()

    tape = Tape()
    leaves = {k: tape.leaf(v) for k, v in work.items()}
    tape.backward(f(tape, leaves))
    analytic = {k: tape.grad(leaves[k]) for k in work}

    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, arr in work.items():
        coords = [tuple(c) for c in np.ndindex(arr.shape)]
        if max_coords_per_param is not None and len(coords) > max_coords_per_param:
            pick = rng.choice(len(coords), size=max_coords_per_param, replace=False)
            coords = [coords[int(i)] for i in pick]
        for idx in coords:
            keep = arr[idx]
            arr[idx] = keep + h
            fp = value_at()
            arr[idx] = keep - h
            fm = value_at()
            arr[idx] = keep
            numeric = (fp - fm) / (2.0 * h)
            a = analytic[name][idx]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
            worst = max(worst, err)
    return worst
