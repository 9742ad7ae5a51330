"""Reverse-mode automatic differentiation over numpy arrays.

A ``Tape`` records array operations eagerly (define-by-run).  Values are
float64 throughout.  The operation set is deliberately small: affine maps,
SiLU, elementwise arithmetic with broadcasting, gather/segment-sum over
index lists, smoothed vector norms, per-segment softmax, and a
stop-gradient ``detach`` whose value is the identity but whose gradient is
zero.  That closure is everything the message-passing vector fields in
this package need.

The reverse pass propagates cotangents from a single output node back to
the leaves, skipping any node that never receives a cotangent.  Detach
therefore makes backward passes through the detached subgraph free, which
is what makes the d-probe divergence extraction cheap.

Pass and visit counters live on the tape so callers can assert exact
backward-pass counts.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

NORM_EPS = 1e-12  # smoothing inside sqrt so unit vectors are defined at 0


def _as_f64(x):
    return np.asarray(x, dtype=np.float64)


class Tape:
    """Eager record of array operations supporting vector-Jacobian products."""

    __slots__ = ("kinds", "parents", "aux", "vals", "n_forward_visits",
                 "n_reverse_visits", "n_reverse_passes")

    def __init__(self):
        self.kinds: list[str] = []
        self.parents: list[tuple[int, ...]] = []
        self.aux: list = []
        self.vals: list[np.ndarray] = []
        self.n_forward_visits = 0
        self.n_reverse_visits = 0
        self.n_reverse_passes = 0

    def __len__(self):
        return len(self.kinds)

    def _push(self, kind, parents, aux, value) -> "Var":
        self.kinds.append(kind)
        self.parents.append(parents)
        self.aux.append(aux)
        self.vals.append(value)
        self.n_forward_visits += 1
        return Var(self, len(self.kinds) - 1)

    def leaf(self, value) -> "Var":
        """Differentiable input or parameter node."""
        return self._push("leaf", (), None, _as_f64(value))

    def const(self, value) -> "Var":
        """Node that never receives a gradient (labels, time features)."""
        return self._push("const", (), None, _as_f64(value))

    def vjp(self, out: "Var", cotangent, wrt: list["Var"]) -> list[np.ndarray]:
        """Propagate ``cotangent`` from ``out`` back to the ``wrt`` leaves.

        Returns one gradient array per entry of ``wrt`` (zeros when the
        output does not depend on that leaf).  Counts one reverse pass.
        """
        if out.tape is not self:
            raise ValueError("output var belongs to a different tape")
        g = _as_f64(cotangent)
        if g.shape != self.vals[out.i].shape:
            raise ValueError(
                f"cotangent shape {g.shape} != output shape {self.vals[out.i].shape}")
        self.n_reverse_passes += 1
        grads: list = [None] * len(self.kinds)
        grads[out.i] = g
        for i in range(out.i, -1, -1):
            gi = grads[i]
            if gi is None:
                continue
            self.n_reverse_visits += 1
            kind = self.kinds[i]
            if kind in ("leaf", "const", "detach"):
                if kind == "detach":
                    grads[i] = None  # cut: parent gets nothing
                continue
            rule = _BACKWARD[kind]
            contribs = rule(gi, self.vals, self.parents[i], self.aux[i])
            for p, gp in zip(self.parents[i], contribs):
                if gp is None:
                    continue
                if grads[p] is None:
                    grads[p] = gp
                else:
                    grads[p] = grads[p] + gp
        result = []
        for v in wrt:
            if grads[v.i] is None:
                result.append(np.zeros_like(self.vals[v.i]))
            else:
                result.append(grads[v.i])
        return result


@dataclass(frozen=True)
class Var:
    """Handle to one tape node; supports numpy-flavoured arithmetic."""

    tape: Tape
    i: int

    @property
    def value(self) -> np.ndarray:
        return self.tape.vals[self.i]

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return _binary("add", self, other)

    def __sub__(self, other):
        return _binary("sub", self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return self.tape._push("smul", (self.i,), float(other),
                                   self.value * float(other))
        return _binary("mul", self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return _binary("div", self, other)

    def __neg__(self):
        return self * -1.0


def _binary(kind, a: Var, b: Var) -> Var:
    if a.tape is not b.tape:
        raise ValueError("operands live on different tapes")
    fa, fb = a.value, b.value
    if kind == "add":
        v = fa + fb
    elif kind == "sub":
        v = fa - fb
    elif kind == "mul":
        v = fa * fb
    else:
        v = fa / fb
    return a.tape._push(kind, (a.i, b.i), None, v)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to the shape of the broadcast operand."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def matmul(a: Var, b: Var) -> Var:
    return a.tape._push("matmul", (a.i, b.i), None, a.value @ b.value)


def gather(a: Var, idx: np.ndarray) -> Var:
    idx = np.asarray(idx, dtype=np.intp)
    return a.tape._push("gather", (a.i,), idx, a.value[idx])


def segment_sum(a: Var, seg: np.ndarray, num_segments: int) -> Var:
    """Sum rows of ``a`` into ``num_segments`` buckets; empty buckets are 0."""
    seg = np.asarray(seg, dtype=np.intp)
    out = np.zeros((num_segments,) + a.value.shape[1:])
    np.add.at(out, seg, a.value)
    return a.tape._push("segsum", (a.i,), seg, out)


def concat(vs: list[Var], axis: int = 1) -> Var:
    tape = vs[0].tape
    sizes = [v.value.shape[axis] for v in vs]
    val = np.concatenate([v.value for v in vs], axis=axis)
    return tape._push("concat", tuple(v.i for v in vs), (axis, sizes), val)


def slice_cols(a: Var, j0: int, j1: int) -> Var:
    return a.tape._push("slice", (a.i,), (j0, j1), a.value[:, j0:j1])


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # evaluate exp on negative magnitudes only so it never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def silu(a: Var) -> Var:
    s = _sigmoid(a.value)
    return a.tape._push("silu", (a.i,), s, a.value * s)


def smooth_norm(a: Var) -> Var:
    """sqrt(sum(a^2, last axis) + eps), keepdims; defined and smooth at 0."""
    v = np.sqrt(np.sum(a.value * a.value, axis=-1, keepdims=True) + NORM_EPS)
    return a.tape._push("snorm", (a.i,), v, v)


def channel_norm(a: Var) -> Var:
    """Like smooth_norm but drops the reduced axis: (R,C,d) -> (R,C)."""
    v = np.sqrt(np.sum(a.value * a.value, axis=-1) + NORM_EPS)
    return a.tape._push("cnorm", (a.i,), v, v)


def dot_last(a: Var, b: Var) -> Var:
    """Row/channel-wise inner product over the trailing axis."""
    return a.tape._push("dotl", (a.i, b.i), None,
                        np.sum(a.value * b.value, axis=-1))


def scale_channels(v: Var, s: Var) -> Var:
    """v[r,c,:] * s[r,c] (or s[r,0] broadcast across channels)."""
    return v.tape._push("scalec", (v.i, s.i), None,
                        v.value * s.value[..., None])


def outer_rows(s: Var, u: Var) -> Var:
    """(R,C) x (R,d) -> (R,C,d) per-row outer product."""
    return s.tape._push("outer", (s.i, u.i), None,
                        s.value[:, :, None] * u.value[:, None, :])


def sum_channels(v: Var) -> Var:
    """(R,C,d) -> (R,d): sum over the channel axis."""
    return v.tape._push("sumc", (v.i,), v.value.shape,
                        np.sum(v.value, axis=1))


def sum_all(a: Var) -> Var:
    return a.tape._push("suma", (a.i,), a.value.shape,
                        np.asarray(np.sum(a.value)))


def gauss_rbf(r: Var, centers: np.ndarray, gamma: float) -> Var:
    """Gaussian radial basis expansion of a (R,1) distance column."""
    centers = _as_f64(centers)
    val = np.exp(-gamma * (r.value - centers) ** 2)
    return r.tape._push("rbf", (r.i,), (centers, gamma), val)


def segment_softmax(y: Var, seg: np.ndarray, num_segments: int) -> Var:
    """Softmax of a (R,1) score column within each segment.

    Segments with a single member get exactly 1.0; empty segments simply
    have no rows.
    """
    seg = np.asarray(seg, dtype=np.intp)
    col = y.value[:, 0]
    m = np.full(num_segments, -np.inf)
    np.maximum.at(m, seg, col)
    e = np.exp(col - m[seg])
    tot = np.zeros(num_segments)
    np.add.at(tot, seg, e)
    a = (e / tot[seg])[:, None]
    return y.tape._push("segsoft", (y.i,), (seg, num_segments), a)


def detach(a: Var) -> Var:
    """Identity in value; gradients stop here."""
    return a.tape._push("detach", (a.i,), None, a.value)


def reshape(a: Var, shape) -> Var:
    return a.tape._push("reshape", (a.i,), a.value.shape,
                        a.value.reshape(shape))


# backward rules: fn(g, vals, parents, aux) -> per-parent gradients

def _bw_add(g, vals, ps, aux):
    return (_unbroadcast(g, vals[ps[0]].shape),
            _unbroadcast(g, vals[ps[1]].shape))


def _bw_sub(g, vals, ps, aux):
    return (_unbroadcast(g, vals[ps[0]].shape),
            _unbroadcast(-g, vals[ps[1]].shape))


def _bw_mul(g, vals, ps, aux):
    a, b = vals[ps[0]], vals[ps[1]]
    return (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape))


def _bw_div(g, vals, ps, aux):
    a, b = vals[ps[0]], vals[ps[1]]
    return (_unbroadcast(g / b, a.shape),
            _unbroadcast(-g * a / (b * b), b.shape))


def _bw_smul(g, vals, ps, aux):
    return (g * aux,)


def _bw_matmul(g, vals, ps, aux):
    a, b = vals[ps[0]], vals[ps[1]]
    return (g @ b.T, a.T @ g)


def _bw_gather(g, vals, ps, idx):
    out = np.zeros_like(vals[ps[0]])
    np.add.at(out, idx, g)
    return (out,)


def _bw_segsum(g, vals, ps, seg):
    return (g[seg],)


def _bw_concat(g, vals, ps, aux):
    axis, sizes = aux
    outs = []
    off = 0
    for s in sizes:
        sl = [slice(None)] * g.ndim
        sl[axis] = slice(off, off + s)
        outs.append(g[tuple(sl)])
        off += s
    return tuple(outs)


def _bw_slice(g, vals, ps, aux):
    j0, j1 = aux
    out = np.zeros_like(vals[ps[0]])
    out[:, j0:j1] = g
    return (out,)


def _bw_silu(g, vals, ps, s):
    x = vals[ps[0]]
    return (g * (s * (1.0 + x * (1.0 - s))),)


def _bw_snorm(g, vals, ps, v):
    return (g * vals[ps[0]] / v,)


def _bw_cnorm(g, vals, ps, v):
    return (g[..., None] * vals[ps[0]] / v[..., None],)


def _bw_dotl(g, vals, ps, aux):
    a, b = vals[ps[0]], vals[ps[1]]
    return (g[..., None] * b, g[..., None] * a)


def _bw_scalec(g, vals, ps, aux):
    v, s = vals[ps[0]], vals[ps[1]]
    return (g * s[..., None], _unbroadcast(np.sum(g * v, axis=-1), s.shape))


def _bw_outer(g, vals, ps, aux):
    s, u = vals[ps[0]], vals[ps[1]]
    return (np.sum(g * u[:, None, :], axis=-1), np.sum(g * s[:, :, None], axis=1))


def _bw_sumc(g, vals, ps, shape):
    return (np.broadcast_to(g[:, None, :], shape).copy(),)


def _bw_suma(g, vals, ps, shape):
    return (np.full(shape, float(g)),)


def _bw_rbf(g, vals, ps, aux):
    centers, gamma = aux
    r = vals[ps[0]]
    val = np.exp(-gamma * (r - centers) ** 2)
    return (np.sum(g * val * (-2.0 * gamma) * (r - centers),
                   axis=1, keepdims=True),)


def _bw_segsoft(g, vals, ps, aux):
    seg, nseg = aux
    # alpha is this node's own value; recompute from parent for locality
    col = vals[ps[0]][:, 0]
    m = np.full(nseg, -np.inf)
    np.maximum.at(m, seg, col)
    e = np.exp(col - m[seg])
    tot = np.zeros(nseg)
    np.add.at(tot, seg, e)
    a = e / tot[seg]
    ga = g[:, 0] * a
    dots = np.zeros(nseg)
    np.add.at(dots, seg, ga)
    return ((ga - a * dots[seg])[:, None],)


def _bw_reshape(g, vals, ps, orig_shape):
    return (g.reshape(orig_shape),)


_BACKWARD: dict[str, Callable] = {
    "add": _bw_add, "sub": _bw_sub, "mul": _bw_mul, "div": _bw_div,
    "smul": _bw_smul, "matmul": _bw_matmul, "gather": _bw_gather,
    "segsum": _bw_segsum, "concat": _bw_concat, "slice": _bw_slice,
    "silu": _bw_silu, "snorm": _bw_snorm, "cnorm": _bw_cnorm,
    "dotl": _bw_dotl, "scalec": _bw_scalec, "outer": _bw_outer,
    "sumc": _bw_sumc, "suma": _bw_suma, "rbf": _bw_rbf,
    "segsoft": _bw_segsoft, "reshape": _bw_reshape,
}


# ---------------------------------------------------------------------------
# flat-vector program interface
# ---------------------------------------------------------------------------

@dataclass
class ProbeVectorSet:
    """The d binary probe vectors that read a block-diagonal Jacobian.

    Probe i has ones exactly at flat coordinates congruent to i modulo d
    (row-major (n, d) flattening), so each probe has n ones, probes are
    pairwise orthogonal, and they sum to the all-ones vector.
    """

    n: int
    d: int

    def vectors(self) -> np.ndarray:
        vs = np.zeros((self.d, self.n * self.d))
        for i in range(self.d):
            vs[i, i::self.d] = 1.0
        return vs


def probe_vectors(n: int, d: int) -> ProbeVectorSet:
    return ProbeVectorSet(n=n, d=d)


class Program:
    """A differentiable map from a flat input vector to a flat output.

    ``build(tape, x)`` receives the numeric input so it may configure
    data-dependent structure (e.g. neighbor graphs) before recording the
    tape; it returns the input leaf and the output var.  Forward values
    are cached for the subsequent reverse passes.
    """

    def __init__(self, build: Callable, n_in: int):
        self.build = build
        self.n_in = n_in
        self.tape: Tape | None = None
        self.in_var: Var | None = None
        self.out_var: Var | None = None

    @property
    def n_out(self) -> int | None:
        if self.out_var is None:
            return None
        return int(np.prod(self.out_var.shape))


def forward_eval(program: Program, x) -> np.ndarray:
    """Run the program forward, caching intermediates for reverse passes."""
    x = _as_f64(x)
    if x.size != program.n_in:
        raise ValueError(f"expected {program.n_in} inputs, got {x.size}")
    tape = Tape()
    program.tape = tape
    program.in_var, program.out_var = program.build(tape, x)
    out = program.out_var.value
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("non-finite program output")
    return out


def vjp(program: Program, cotangent) -> np.ndarray:
    """u^T J of the last forward evaluation, honoring detach markers."""
    if program.tape is None:
        raise RuntimeError("vjp called before forward_eval")
    u = _as_f64(cotangent).reshape(program.out_var.shape)
    (g,) = program.tape.vjp(program.out_var, u, [program.in_var])
    return g.reshape(-1)


def jacobian_diagonal(program: Program, probes: ProbeVectorSet) -> np.ndarray:
    """All n*d diagonal Jacobian entries using exactly d reverse passes.

    Requires the program's effective Jacobian to be block-diagonal with
    d x d blocks (arrange this with detach markers); entry i + d*(k-1) is
    read from probe i's vector-Jacobian product at that same position.
    """
    nd = probes.n * probes.d
    if program.n_in != nd:
        raise ValueError(f"probe set for {nd} coords, program takes {program.n_in}")
    if program.n_out != nd:
        raise ValueError(f"probe set for {nd} coords, program returns {program.n_out}")
    diag = np.empty(nd)
    for i, v in enumerate(probes.vectors()):
        row = vjp(program, v)
        diag[i::probes.d] = row[i::probes.d]
    return diag


def full_jacobian_fd(f: Callable, x, eps: float = 1e-5) -> np.ndarray:
    """Central finite-difference Jacobian; the independent test oracle."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = _as_f64(x).reshape(-1)
    cols = []
    for b in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[b] += eps
        xm[b] -= eps
        fp = _as_f64(f(xp)).reshape(-1)
        fm = _as_f64(f(xm)).reshape(-1)
        if not (np.all(np.isfinite(fp)) and np.all(np.isfinite(fm))):
            raise FloatingPointError("non-finite function value in FD stencil")
        cols.append((fp - fm) / (2.0 * eps))
    return np.stack(cols, axis=1)
