"""Forward-mode derivative arrays with two tangent channels.

A :class:`Dual` carries a value ndarray plus its directional derivatives with
respect to two scalar inputs (the material parameters being calibrated),
stored as one stacked ``(2, *shape)`` tangent array so both channels ride on
a single numpy op. Arithmetic is overloaded to propagate tangents by the
chain rule, and the generic helpers below (``where``, ``sqrt3``, ``matmul``,
``bincount_accumulate`` ...) dispatch on type, so the simulation core runs
unchanged on plain ndarrays or Duals.

Branch decisions (masks, argmins, index arithmetic) always read the value
channel, which is the usual piecewise-smooth treatment: the derivative is
exact wherever the branch pattern is locally constant.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Dual",
    "seed_scalar",
    "value",
    "tangent",
    "is_dual",
    "promote",
    "where",
    "sqrt",
    "safe_norm_sq_sqrt",
    "exp",
    "maximum0",
    "dsum",
    "dmean",
    "matmul",
    "matvec",
    "transpose_mat",
    "reshape_like_tail",
    "stack_mat33",
    "bincount_accumulate",
    "outer",
]


def _expand_tan(tan: np.ndarray, val_ndim: int, out_ndim: int) -> np.ndarray:
    """Insert singleton axes after the channel axis so tangents broadcast
    against higher-rank partners."""
    if out_ndim == val_ndim:
        return tan
    shape = (2,) + (1,) * (out_ndim - val_ndim) + tan.shape[1:]
    return tan.reshape(shape)


class Dual:
    __slots__ = ("val", "tan")

    # keep numpy from consuming us in mixed expressions; reflected ops fire
    __array_ufunc__ = None
    __array_priority__ = 1000

    def __init__(self, val, tan=None):
        self.val = np.asarray(val, dtype=np.float64)
        if tan is None:
            tan = np.zeros((2,) + self.val.shape)
        self.tan = np.asarray(tan, dtype=np.float64)
        if self.tan.shape != (2,) + self.val.shape:
            raise ValueError(
                f"tangent shape {self.tan.shape} does not match value shape {self.val.shape}"
            )

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.val.shape

    @property
    def ndim(self):
        return self.val.ndim

    def copy(self) -> "Dual":
        return Dual(self.val.copy(), self.tan.copy())

    def __repr__(self):
        return f"Dual(val={self.val!r})"

    # -- arithmetic ----------------------------------------------------
    def _binary(self, other, vop, top):
        a, b = self, promote(other)
        out_val = vop(a.val, b.val)
        ta = _expand_tan(a.tan, a.val.ndim, out_val.ndim)
        tb = _expand_tan(b.tan, b.val.ndim, out_val.ndim)
        return Dual(out_val, top(a.val, b.val, ta, tb))

    def __add__(self, other):
        return self._binary(other, np.add, lambda av, bv, ta, tb: ta + tb)

    __radd__ = __add__

    def __sub__(self, other):
        return self._binary(other, np.subtract, lambda av, bv, ta, tb: ta - tb)

    def __rsub__(self, other):
        return promote(other).__sub__(self)

    def __mul__(self, other):
        return self._binary(
            other, np.multiply, lambda av, bv, ta, tb: ta * bv + av * tb
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        return self._binary(
            other,
            np.divide,
            lambda av, bv, ta, tb: (ta * bv - av * tb) / (bv * bv),
        )

    def __rtruediv__(self, other):
        return promote(other).__truediv__(self)

    def __neg__(self):
        return Dual(-self.val, -self.tan)

    def __pow__(self, n):
        if not isinstance(n, (int, float)):
            raise TypeError("Dual ** only supports plain exponents")
        return Dual(self.val ** n, n * self.val ** (n - 1) * self.tan)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    # comparisons read the value channel (branching happens on values)
    def __lt__(self, other):
        return self.val < value(other)

    def __le__(self, other):
        return self.val <= value(other)

    def __gt__(self, other):
        return self.val > value(other)

    def __ge__(self, other):
        return self.val >= value(other)

    # -- indexing ------------------------------------------------------
    def __getitem__(self, key):
        if not isinstance(key, tuple):
            key = (key,)
        return Dual(self.val[key], self.tan[(slice(None),) + key])

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Dual(self.val.reshape(shape), self.tan.reshape((2,) + tuple(shape)))


# ---------------------------------------------------------------------------
# generic helpers (work on ndarray or Dual)
# ---------------------------------------------------------------------------

def is_dual(x) -> bool:
    return isinstance(x, Dual)


def value(x):
    return x.val if isinstance(x, Dual) else np.asarray(x)


def tangent(x):
    if isinstance(x, Dual):
        return x.tan
    x = np.asarray(x)
    return np.zeros((2,) + x.shape)


def promote(x) -> Dual:
    return x if isinstance(x, Dual) else Dual(np.asarray(x, dtype=np.float64))


def seed_scalar(v: float, channel: int) -> Dual:
    """Scalar Dual with a unit tangent on the given channel."""
    tan = np.zeros(2)
    tan[channel] = 1.0
    return Dual(np.float64(v), tan)


def where(cond, a, b):
    cond = np.asarray(cond)
    if not (isinstance(a, Dual) or isinstance(b, Dual)):
        return np.where(cond, a, b)
    a, b = promote(a), promote(b)
    out_val = np.where(cond, a.val, b.val)
    ta = _expand_tan(a.tan, a.val.ndim, out_val.ndim)
    tb = _expand_tan(b.tan, b.val.ndim, out_val.ndim)
    return Dual(out_val, np.where(cond, ta, tb))


def sqrt(x):
    if not isinstance(x, Dual):
        return np.sqrt(x)
    s = np.sqrt(x.val)
    return Dual(s, x.tan * (0.5 / s))


def safe_norm_sq_sqrt(sq, eps: float = 1e-24):
    """sqrt of a squared quantity with the tangent zeroed near zero.

    Euclidean norms are non-differentiable at the origin; coincident points
    would otherwise inject inf tangents into the loss.
    """
    if not isinstance(sq, Dual):
        return np.sqrt(sq)
    s = np.sqrt(sq.val)
    denom = np.where(sq.val > eps, 2.0 * np.maximum(s, 1e-300), 1.0)
    tan = np.where(sq.val > eps, sq.tan / denom, 0.0)
    return Dual(s, tan)


def exp(x):
    if not isinstance(x, Dual):
        return np.exp(x)
    e = np.exp(x.val)
    return Dual(e, x.tan * e)


def maximum0(x):
    """max(x, 0) elementwise; tangent passes where value > 0."""
    if not isinstance(x, Dual):
        return np.maximum(x, 0.0)
    pos = x.val > 0.0
    return Dual(np.where(pos, x.val, 0.0), np.where(pos, x.tan, 0.0))


def _shift_axis(axis, ndim):
    if axis is None:
        raise ValueError("axis must be explicit for Dual reductions")
    return axis % ndim + 1


def dsum(x, axis):
    if not isinstance(x, Dual):
        return np.sum(x, axis=axis)
    return Dual(np.sum(x.val, axis=axis), np.sum(x.tan, axis=_shift_axis(axis, x.val.ndim)))


def dmean(x, axis=None):
    if not isinstance(x, Dual):
        return np.mean(x, axis=axis)
    if axis is None:
        return Dual(np.mean(x.val), x.tan.reshape(2, -1).mean(axis=1))
    return Dual(np.mean(x.val, axis=axis), np.mean(x.tan, axis=_shift_axis(axis, x.val.ndim)))


def matmul(a, b):
    if not (isinstance(a, Dual) or isinstance(b, Dual)):
        return np.matmul(a, b)
    a, b = promote(a), promote(b)
    out_val = np.matmul(a.val, b.val)
    tan = np.matmul(a.tan, b.val) + np.matmul(a.val, b.tan)
    return Dual(out_val, tan)


def matvec(m, v):
    """Batched 3x3 matrix times 3-vector: (..., 3, 3) x (..., 3) -> (..., 3)."""
    if isinstance(v, Dual):
        vv = v[..., None]
    else:
        vv = np.asarray(v)[..., None]
    out = matmul(m, vv)
    return out[..., 0]


def transpose_mat(x):
    """Swap the trailing two axes of a matrix stack."""
    if not isinstance(x, Dual):
        return np.swapaxes(x, -1, -2)
    return Dual(np.swapaxes(x.val, -1, -2), np.swapaxes(x.tan, -1, -2))


def reshape_like_tail(x, extra: int):
    """Append `extra` singleton axes (scalar-per-item -> broadcast over mats)."""
    if not isinstance(x, Dual):
        return np.asarray(x).reshape(np.shape(x) + (1,) * extra)
    return Dual(
        x.val.reshape(x.val.shape + (1,) * extra),
        x.tan.reshape(x.tan.shape + (1,) * extra),
    )


def stack_mat33(comps):
    """Assemble a (..., 3, 3) stack from 9 component arrays in row-major order."""
    if not any(isinstance(c, Dual) for c in comps):
        flat = np.stack(comps, axis=-1)
        return flat.reshape(flat.shape[:-1] + (3, 3))
    comps = [promote(c) for c in comps]
    val = np.stack([c.val for c in comps], axis=-1)
    tan = np.stack([c.tan for c in comps], axis=-1)
    return Dual(
        val.reshape(val.shape[:-1] + (3, 3)),
        tan.reshape(tan.shape[:-1] + (3, 3)),
    )


def bincount_accumulate(idx: np.ndarray, weights, minlength: int):
    """Deterministic scatter-add of `weights` into `minlength` bins."""
    if not isinstance(weights, Dual):
        return np.bincount(idx, weights=weights, minlength=minlength)
    val = np.bincount(idx, weights=weights.val, minlength=minlength)
    tan = np.stack(
        [
            np.bincount(idx, weights=weights.tan[0], minlength=minlength),
            np.bincount(idx, weights=weights.tan[1], minlength=minlength),
        ]
    )
    return Dual(val, tan)


def outer(a, b):
    """Batched outer product (..., 3) x (..., 3) -> (..., 3, 3)."""
    if isinstance(a, Dual) or isinstance(b, Dual):
        return promote(a)[..., :, None] * promote(b)[..., None, :]
    a, b = np.asarray(a), np.asarray(b)
    return a[..., :, None] * b[..., None, :]


def stack_last(items):
    """Stack arrays (or Duals) along a new trailing axis."""
    if not any(isinstance(c, Dual) for c in items):
        return np.stack(items, axis=-1)
    items = [promote(c) for c in items]
    return Dual(
        np.stack([c.val for c in items], axis=-1),
        np.stack([c.tan for c in items], axis=-1),
    )


# fused stencil reductions: these avoid materializing (n, stencil, 3, 3)
# tangent intermediates, which dominate the generic path's cost otherwise

def weighted_vec_sum(w, a):
    """sum_j w[n, j] * a[n, j, :] -> (n, 3)."""
    if not (isinstance(w, Dual) or isinstance(a, Dual)):
        return np.einsum("nj,nja->na", w, a, optimize=True)
    w, a = promote(w), promote(a)
    val = np.einsum("nj,nja->na", w.val, a.val, optimize=True)
    tan = np.einsum("cnj,nja->cna", w.tan, a.val, optimize=True) + np.einsum(
        "nj,cnja->cna", w.val, a.tan, optimize=True
    )
    return Dual(val, tan)


def weighted_outer_sum(w, a, b):
    """sum_j w[n, j] * outer(a[n, j, :], b[n, j, :]) -> (n, 3, 3)."""
    if not (isinstance(w, Dual) or isinstance(a, Dual) or isinstance(b, Dual)):
        return np.einsum("nj,nja,njb->nab", w, a, b, optimize=True)
    w, a, b = promote(w), promote(a), promote(b)
    val = np.einsum("nj,nja,njb->nab", w.val, a.val, b.val, optimize=True)
    tan = (
        np.einsum("cnj,nja,njb->cnab", w.tan, a.val, b.val, optimize=True)
        + np.einsum("nj,cnja,njb->cnab", w.val, a.tan, b.val, optimize=True)
        + np.einsum("nj,nja,cnjb->cnab", w.val, a.val, b.tan, optimize=True)
    )
    return Dual(val, tan)


def mat_times_stencil_vec(m, v):
    """Batched (n, 3, 3) times (n, j, 3) -> (n, j, 3)."""
    if not (isinstance(m, Dual) or isinstance(v, Dual)):
        return np.einsum("nab,njb->nja", m, v, optimize=True)
    m, v = promote(m), promote(v)
    val = np.einsum("nab,njb->nja", m.val, v.val, optimize=True)
    tan = np.einsum("cnab,njb->cnja", m.tan, v.val, optimize=True) + np.einsum(
        "nab,cnjb->cnja", m.val, v.tan, optimize=True
    )
    return Dual(val, tan)


# ---------------------------------------------------------------------------
# small batched 3x3 linear algebra, written with generic ops so it is
# transparent to tangent propagation
# ---------------------------------------------------------------------------

def det3(m):
    if isinstance(m, Dual) and m.val.ndim == 3:
        val = np.linalg.det(m.val)
        inv = np.linalg.inv(m.val)
        # d det = det tr(F^-1 dF)
        tan = val * np.einsum("nab,cnba->cn", inv, m.tan, optimize=True)
        return Dual(val, tan)
    a, b, c = m[..., 0, 0], m[..., 0, 1], m[..., 0, 2]
    d, e, f = m[..., 1, 0], m[..., 1, 1], m[..., 1, 2]
    g, h, i = m[..., 2, 0], m[..., 2, 1], m[..., 2, 2]
    return a * (e * i - f * h) - b * (d * i - f * g) + c * (d * h - e * g)


def inv3(m):
    if isinstance(m, Dual) and m.val.ndim == 3:
        inv = np.linalg.inv(m.val)
        # d(F^-1) = -F^-1 dF F^-1
        tan = -np.matmul(inv, np.matmul(m.tan, inv))
        return Dual(inv, tan)
    a, b, c = m[..., 0, 0], m[..., 0, 1], m[..., 0, 2]
    d, e, f = m[..., 1, 0], m[..., 1, 1], m[..., 1, 2]
    g, h, i = m[..., 2, 0], m[..., 2, 1], m[..., 2, 2]
    det = a * (e * i - f * h) - b * (d * i - f * g) + c * (d * h - e * g)
    comps = [
        (e * i - f * h) / det,
        (c * h - b * i) / det,
        (b * f - c * e) / det,
        (f * g - d * i) / det,
        (a * i - c * g) / det,
        (c * d - a * f) / det,
        (d * h - e * g) / det,
        (b * g - a * h) / det,
        (a * e - b * d) / det,
    ]
    return stack_mat33(comps)


def polar_rotation(F, tol: float = 1e-12, max_iter: int = 40):
    """Rotation factor of the polar decomposition F = R S via Newton iteration.

    R_{k+1} = (R_k + R_k^{-T}) / 2 converges globally for det F > 0 and
    quadratically near the fixed point; for the moderate strains of a gel pad
    a handful of iterations reach machine precision. Written in generic ops
    so tangents flow through the iteration (the converged iterate carries the
    converged derivative).
    """
    R = F
    prev = value(F)
    for _ in range(max_iter):
        R = (R + transpose_mat(inv3(R))) * 0.5
        cur = value(R)
        if np.max(np.abs(cur - prev)) < tol:
            break
        prev = cur
    return R
