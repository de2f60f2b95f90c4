"""Reverse-mode autodiff on an explicit operation tape.

Purpose-built for differentiating the filter rollout and the contact network:
a small set of primitives (batched matrix algebra, SPD solves, Cholesky,
elementwise unaries, SO(3) exponential, block assembly) with hand-written
vector-Jacobian products.  Values are float64 numpy arrays; a leading batch
axis carries parallel environments through one tape.

Every primitive dispatches on its inputs: if none is a :class:`Var` the plain
numpy result is returned (zero-overhead inference path), otherwise the op is
recorded on the owning tape.  The backward sweep walks the node list in
reverse, accumulating adjoints in a fixed order, so gradients are
deterministic and bit-reproducible across passes.
"""

from __future__ import annotations

import numpy as np

from . import liegroup as lg


class GradientOverflowError(RuntimeError):
    """Raised when a backward sweep produces a non-finite adjoint."""

    def __init__(self, node_id: int, name: str):
        super().__init__(f"non-finite adjoint at tape node {node_id} ({name})")
        self.node_id = node_id


class _Node:
    __slots__ = ("value", "parents", "vjps", "name")

    def __init__(self, value, parents, vjps, name):
        self.value = value
        self.parents = parents
        self.vjps = vjps
        self.name = name


class Var:
    """Handle to a tape node."""

    __slots__ = ("tape", "nid")

    def __init__(self, tape: "Tape", nid: int):
        self.tape = tape
        self.nid = nid

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.nid].value

    @property
    def shape(self):
        return self.tape.nodes[self.nid].value.shape

    def __repr__(self):
        return f"Var(nid={self.nid}, shape={self.shape})"


class Tape:
    """Append-only record of primitive operations forming a DAG."""

    __slots__ = ("nodes", "__weakref__")

    def __init__(self):
        self.nodes: list[_Node] = []

    def __len__(self):
        return len(self.nodes)

    def leaf(self, value, name: str = "leaf") -> Var:
        return self._record(np.asarray(value, dtype=float), (), (), name)

    def _record(self, value, parents, vjps, name) -> Var:
        self.nodes.append(_Node(value, tuple(parents), tuple(vjps), name))
        return Var(self, len(self.nodes) - 1)

    def backward(self, out: Var, seed=None, check_finite: bool = False):
        """Reverse sweep from ``out``; returns the per-node adjoint list.

        ``seed`` defaults to ones (i.e. gradient of sum(out)).  With
        ``check_finite`` every propagated adjoint is validated and a
        :class:`GradientOverflowError` names the offending node.
        """
        if out.tape is not self:
            raise ValueError("output Var does not belong to this tape")
        adj: list = [None] * len(self.nodes)
        node = self.nodes[out.nid]
        adj[out.nid] = (
            np.ones_like(node.value) if seed is None else np.asarray(seed, dtype=float)
        )
        for nid in range(out.nid, -1, -1):
            g = adj[nid]
            if g is None:
                continue
            rec = self.nodes[nid]
            if check_finite and not np.all(np.isfinite(g)):
                raise GradientOverflowError(nid, rec.name)
            for pid, vjp in zip(rec.parents, rec.vjps):
                contrib = vjp(g)
                if adj[pid] is None:
                    adj[pid] = contrib
                else:
                    adj[pid] = adj[pid] + contrib
        return adj

    def grad(self, out: Var, wrt, seed=None, check_finite: bool = False):
        """Gradients of ``out`` w.r.t. a list of leaf Vars (zeros if unused)."""
        adj = self.backward(out, seed=seed, check_finite=check_finite)
        return [
            adj[v.nid] if adj[v.nid] is not None else np.zeros_like(v.value)
            for v in wrt
        ]


# ---------------------------------------------------------------------------
# dispatch helpers


def value(x):
    """Underlying ndarray of a Var, or the input itself."""
    return x.value if isinstance(x, Var) else x


def _tape(*xs):
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    return None


def _swap(a):
    return np.swapaxes(a, -1, -2)


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (adjoint of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _binary(a, b, out, vjp_a, vjp_b, name):
    t = _tape(a, b)
    if t is None:
        return out
    parents, vjps = [], []
    if isinstance(a, Var):
        parents.append(a.nid)
        vjps.append(vjp_a)
    if isinstance(b, Var):
        parents.append(b.nid)
        vjps.append(vjp_b)
    return t._record(out, parents, vjps, name)


def _unary(a, out, vjp, name):
    if not isinstance(a, Var):
        return out
    return a.tape._record(out, (a.nid,), (vjp,), name)


# ---------------------------------------------------------------------------
# arithmetic primitives


def add(a, b):
    av, bv = value(a), value(b)
    return _binary(
        a, b, av + bv,
        lambda g, sh=np.shape(av): _unbroadcast(g, sh),
        lambda g, sh=np.shape(bv): _unbroadcast(g, sh),
        "add",
    )


def sub(a, b):
    av, bv = value(a), value(b)
    return _binary(
        a, b, av - bv,
        lambda g, sh=np.shape(av): _unbroadcast(g, sh),
        lambda g, sh=np.shape(bv): _unbroadcast(-g, sh),
        "sub",
    )


def mul(a, b):
    av, bv = value(a), value(b)
    return _binary(
        a, b, av * bv,
        lambda g, o=bv, sh=np.shape(av): _unbroadcast(g * o, sh),
        lambda g, o=av, sh=np.shape(bv): _unbroadcast(g * o, sh),
        "mul",
    )


def neg(a):
    return _unary(a, -value(a), lambda g: -g, "neg")


def scale(a, c: float):
    return _unary(a, value(a) * c, lambda g, c=c: g * c, "scale")


def transpose(a):
    return _unary(a, _swap(value(a)), lambda g: _swap(g), "transpose")


def reshape(a, shape):
    av = value(a)
    out = av.reshape(shape)
    return _unary(a, out, lambda g, sh=av.shape: g.reshape(sh), "reshape")


def matmul(a, b):
    av, bv = value(a), value(b)
    if av.ndim < 2 or bv.ndim < 2:
        raise ValueError("matmul requires matrix operands; use matvec for vectors")
    return _binary(
        a, b, av @ bv,
        lambda g, o=bv, sh=av.shape: _unbroadcast(g @ _swap(o), sh),
        lambda g, o=av, sh=bv.shape: _unbroadcast(_swap(o) @ g, sh),
        "matmul",
    )


def matvec(a, x):
    av, xv = value(a), value(x)
    out = (av @ xv[..., None])[..., 0]
    return _binary(
        a, x, out,
        lambda g, o=xv, sh=av.shape: _unbroadcast(
            g[..., None] @ o[..., None, :], sh
        ),
        lambda g, o=av, sh=xv.shape: _unbroadcast(
            (_swap(o) @ g[..., None])[..., 0], sh
        ),
        "matvec",
    )


def rotate_many(m, x):
    """Apply one (B,3,3) matrix per batch element to (B,N,3) stacked vectors."""
    mv, xv = value(m), value(x)
    out = np.einsum("bij,bnj->bni", mv, xv)
    return _binary(
        m, x, out,
        lambda g, o=xv: np.einsum("bni,bnj->bij", g, o),
        lambda g, o=mv: np.einsum("bij,bni->bnj", o, g),
        "rotate_many",
    )


def sum_last(a):
    av = value(a)
    out = av.sum(axis=-1)
    return _unary(
        a, out,
        lambda g, n=av.shape[-1]: np.repeat(g[..., None], n, axis=-1),
        "sum_last",
    )


def total(a):
    """Sum of all entries (scalar output)."""
    av = value(a)
    return _unary(a, np.asarray(av.sum()), lambda g, sh=av.shape: np.broadcast_to(g, sh).copy(), "total")


def slice_last(a, sl: slice):
    av = value(a)
    out = av[..., sl]

    def vjp(g, sh=av.shape, sl=sl):
        full = np.zeros(sh)
        full[..., sl] = g
        return full

    return _unary(a, out, vjp, "slice_last")


def take_last(a, idx):
    idx = tuple(idx)
    av = value(a)
    out = av[..., list(idx)]

    def vjp(g, sh=av.shape, idx=idx):
        full = np.zeros(sh)
        full[..., list(idx)] = g
        return full

    return _unary(a, out, vjp, "take_last")


def slice_block(a, rsl: slice, csl: slice):
    av = value(a)
    out = av[..., rsl, csl]

    def vjp(g, sh=av.shape, rsl=rsl, csl=csl):
        full = np.zeros(sh)
        full[..., rsl, csl] = g
        return full

    return _unary(a, out, vjp, "slice_block")


def where_lanes(mask, a, b):
    """Per-lane select: ``mask`` is a constant (B,) bool; out = mask ? a : b."""
    av, bv = value(a), value(b)
    out_shape = np.broadcast_shapes(np.shape(av), np.shape(bv))
    m = np.asarray(mask, dtype=bool).reshape((-1,) + (1,) * (len(out_shape) - 1))
    out = np.where(m, av, bv)
    return _binary(
        a, b, out,
        lambda g, m=m, sh=np.shape(av): _unbroadcast(g * m, sh),
        lambda g, m=m, sh=np.shape(bv): _unbroadcast(g * (~m), sh),
        "where_lanes",
    )


# ---------------------------------------------------------------------------
# elementwise nonlinearities


def relu(a):
    av = value(a)
    return _unary(a, np.maximum(av, 0.0), lambda g, m=(av > 0.0): g * m, "relu")


def softplus(a):
    av = value(a)
    out = np.where(av > 30.0, av, np.log1p(np.exp(np.minimum(av, 30.0))))

    def vjp(g, x=av):
        sig = np.where(x > 30.0, 1.0, 1.0 / (1.0 + np.exp(-np.minimum(x, 30.0))))
        return g * sig

    return _unary(a, out, vjp, "softplus")


def _coef(a, f, df, name):
    av = value(a)
    return _unary(a, f(av), lambda g, x=av, df=df: g * df(x), name)


def coeff_sin(a):
    return _coef(a, lg.coeff_sin, lg.coeff_sin_d, "coeff_sin")


def coeff_cos(a):
    return _coef(a, lg.coeff_cos, lg.coeff_cos_d, "coeff_cos")


def coeff_j(a):
    return _coef(a, lg.coeff_j, lg.coeff_j_d, "coeff_j")


# ---------------------------------------------------------------------------
# structural primitives


def skew(v):
    vv = value(v)
    out = lg.skew(vv)

    def vjp(g):
        return np.stack(
            [
                g[..., 2, 1] - g[..., 1, 2],
                g[..., 0, 2] - g[..., 2, 0],
                g[..., 1, 0] - g[..., 0, 1],
            ],
            axis=-1,
        )

    return _unary(v, out, vjp, "skew")


def so3_exp(w):
    """Rodrigues exponential; backward is the right-Jacobian transpose rule."""
    wv = value(w)
    out = lg.so3_exp(wv)

    def vjp(g, wv=wv, r=out):
        s = np.sum(wv * wv, axis=-1)
        k = lg.skew(wv)
        k2 = k @ k
        jr = (
            np.eye(3)
            - lg.coeff_cos(s)[..., None, None] * k
            + lg.coeff_j(s)[..., None, None] * k2
        )
        m = _swap(r) @ g
        w_of_m = np.stack(
            [
                m[..., 2, 1] - m[..., 1, 2],
                m[..., 0, 2] - m[..., 2, 0],
                m[..., 1, 0] - m[..., 0, 1],
            ],
            axis=-1,
        )
        return (_swap(jr) @ w_of_m[..., None])[..., 0]

    return _unary(w, out, vjp, "so3_exp")


def build_lower3(d, o):
    """Lower-triangular (..., 3, 3) from diagonal (..., 3) and strict-lower
    (..., 3) entries ordered (L10, L20, L21)."""
    dv, ov = value(d), value(o)
    out = np.zeros(dv.shape[:-1] + (3, 3))
    out[..., 0, 0] = dv[..., 0]
    out[..., 1, 1] = dv[..., 1]
    out[..., 2, 2] = dv[..., 2]
    out[..., 1, 0] = ov[..., 0]
    out[..., 2, 0] = ov[..., 1]
    out[..., 2, 1] = ov[..., 2]
    return _binary(
        d, o, out,
        lambda g: np.stack([g[..., 0, 0], g[..., 1, 1], g[..., 2, 2]], axis=-1),
        lambda g: np.stack([g[..., 1, 0], g[..., 2, 0], g[..., 2, 1]], axis=-1),
        "build_lower3",
    )


def assemble(batch_shape, rows, cols, items, base=None):
    """Build a (batch..., rows, cols) matrix from placed blocks.

    ``items`` is a sequence of ``(r, c, x, n)`` tuples: block ``x`` has shape
    (batch..., h, w), or (batch..., N, h, w) with ``n`` selecting the stacked
    slice.  Blocks may overlap only by exact replacement intent -- later items
    overwrite earlier ones -- but in this package all placements are disjoint.
    ``base`` is an optional constant (rows, cols) background (e.g. identity
    blocks).
    """
    batch_shape = tuple(batch_shape)
    if base is None:
        out = np.zeros(batch_shape + (rows, cols))
    else:
        out = np.broadcast_to(np.asarray(base, dtype=float), batch_shape + (rows, cols)).copy()
    parents, vjps = [], []
    for r, c, x, n in items:
        xv = value(x)
        blk = xv if n is None else xv[..., n, :, :]
        h, w = blk.shape[-2:]
        out[..., r : r + h, c : c + w] = blk
        if isinstance(x, Var):
            def vjp(g, r=r, c=c, h=h, w=w, n=n, sh=xv.shape):
                piece = g[..., r : r + h, c : c + w]
                if n is None:
                    return piece
                full = np.zeros(sh)
                full[..., n, :, :] = piece
                return full

            parents.append(x.nid)
            vjps.append(vjp)
    t = _tape(*[x for _, _, x, _ in items])
    if t is None:
        return out
    return t._record(out, parents, vjps, "assemble")


# ---------------------------------------------------------------------------
# dense linear algebra


def _tri_solve_lower(l, b):
    """Solve L y = b for batched lower-triangular L via forward substitution."""
    m = l.shape[-1]
    y = np.empty_like(b)
    for i in range(m):
        acc = b[..., i, :]
        if i:
            acc = acc - np.einsum("...j,...jk->...k", l[..., i, :i], y[..., :i, :])
        y[..., i, :] = acc / l[..., i, i][..., None]
    return y


def _tri_solve_upper(u, b):
    """Solve U x = b for batched upper-triangular U via back substitution."""
    m = u.shape[-1]
    x = np.empty_like(b)
    for i in range(m - 1, -1, -1):
        acc = b[..., i, :]
        if i < m - 1:
            acc = acc - np.einsum(
                "...j,...jk->...k", u[..., i, i + 1 :], x[..., i + 1 :, :]
            )
        x[..., i, :] = acc / u[..., i, i][..., None]
    return x


def chol_solve_with_factor(l, b):
    """Solve (L L^T) x = b given the Cholesky factor."""
    return _tri_solve_upper(_swap(l), _tri_solve_lower(l, b))


def spd_solve(s, b):
    """X = S^{-1} B through a Cholesky factorization of symmetric S.

    Backward follows the two-solve adjoint rule: B_bar = S^{-1} X_bar,
    S_bar = -B_bar X^T, reusing the forward factor.  Raises
    ``np.linalg.LinAlgError`` if S is not positive definite.
    """
    sv, bv = value(s), value(b)
    l = np.linalg.cholesky(sv)
    x = chol_solve_with_factor(l, bv)

    def vjp_s(g, l=l, x=x):
        bbar = chol_solve_with_factor(l, g)
        return -bbar @ _swap(x)

    def vjp_b(g, l=l):
        return chol_solve_with_factor(l, g)

    return _binary(s, b, x, vjp_s, vjp_b, "spd_solve")


def cholesky(a):
    """Batched lower Cholesky factor with the standard symmetric backward rule.

    The input must be numerically symmetric; the returned adjoint is the
    symmetrized gradient (the convention that composes correctly with a
    symmetric upstream construction).
    """
    av = value(a)
    l = np.linalg.cholesky(av)

    def vjp(g, l=l):
        # The factor's upper triangle is structurally zero; drop any adjoint
        # components a downstream dense op may have produced there.
        m = _swap(l) @ np.tril(g)
        phi = np.tril(m)
        idx = np.arange(l.shape[-1])
        phi[..., idx, idx] *= 0.5
        # solve L^T W = phi, then L S^T = W^T  ->  abar = sym part of result
        w = _tri_solve_upper(_swap(l), phi)
        abar = _swap(_tri_solve_upper(_swap(l), _swap(w)))
        return 0.5 * (abar + _swap(abar))

    return _unary(a, l, vjp, "cholesky")


def symmetrize(a):
    """0.5 (A + A^T) as a composite of primitives."""
    return scale(add(a, transpose(a)), 0.5)
