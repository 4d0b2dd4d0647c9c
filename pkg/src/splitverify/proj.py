"""Euclidean projections onto the constraint sets of the splitting scheme.

All projectors accept a trailing batch axis on their point arguments; set
parameters (box bounds, hull bounds) broadcast against it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .model import Affine, CircularConv, LinearLayer, Pad, Selection, ShapeError

__all__ = [
    "SizeGuardError",
    "MAX_DENSE_ENTRIES",
    "project_box",
    "project_lp_ball",
    "ReluHullParams",
    "project_relu_hull",
    "AffineProjCache",
    "build_affine_cache",
    "project_affine_graph",
]

MAX_DENSE_ENTRIES = 1 << 26


class SizeGuardError(MemoryError):
    """A dense factorisation request that would not fit in memory."""


def _col(a: np.ndarray, v: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if v.ndim == 2 and a.ndim == 1:
        return a[:, None]
    return a


def project_box(v, lower, upper) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    lo, hi = _col(lower, v), _col(upper, v)
    if lo.shape[0] != v.shape[0] or hi.shape[0] != v.shape[0]:
        raise ShapeError(f"box of size {lo.shape[0]} for a vector of size {v.shape[0]}")
    return np.minimum(np.maximum(v, lo), hi)


def _l1_threshold(u: np.ndarray, z: float, rng: np.random.Generator) -> float:
    """Soft threshold ``t`` with ``sum(max(u - t, 0)) == z`` for ``u >= 0``.

    Randomised pivoting, expected linear time (Duchi et al. style).
    """
    U = u
    s = 0.0
    rho = 0
    while U.size:
        k = rng.integers(U.size)
        pivot = U[k]
        upper = U >= pivot
        ds, dr = U[upper].sum(), int(upper.sum())
        if (s + ds) - (rho + dr) * pivot < z:
            s += ds
            rho += dr
            U = U[~upper]
        else:
            upper[k] = False
            U = U[upper]
    return (s - z) / rho


def project_lp_ball(v, center, radius: float, p=np.inf) -> np.ndarray:
    """Nearest point of ``{x : ||x - center||_p <= radius}`` for p in {1, 2, inf}."""
    if not radius > 0:
        raise ValueError("radius must be positive")
    v = np.asarray(v, dtype=np.float64)
    c = _col(center, v)
    d = v - c
    if p in (np.inf, "inf"):
        return c + np.clip(d, -radius, radius)
    if p == 2:
        nrm = np.linalg.norm(d, axis=0)
        scale = np.where(nrm > radius, radius / np.where(nrm > 0, nrm, 1.0), 1.0)
        return c + d * scale
    if p == 1:
        d2 = d.reshape(d.shape[0], -1)
        out = d2.copy()
        rng = np.random.default_rng(0)
        for j in range(d2.shape[1]):
            a = np.abs(d2[:, j])
            if a.sum() <= radius:
                continue
            t = _l1_threshold(a, radius, rng)
            out[:, j] = np.sign(d2[:, j]) * np.maximum(a - t, 0.0)
        return c + out.reshape(d.shape)
    raise ValueError(f"unsupported norm p={p!r}")


@dataclass(frozen=True)
class ReluHullParams:
    """Interval data of one neuron (or an array of neurons) for the ReLU hull."""

    l: np.ndarray
    u: np.ndarray

    def __post_init__(self):
        l = np.asarray(self.l, dtype=np.float64)
        u = np.asarray(self.u, dtype=np.float64)
        if np.any(l > u):
            raise ValueError("ReLU hull needs l <= u")
        object.__setattr__(self, "l", l)
        object.__setattr__(self, "u", u)

    @property
    def y_l(self):
        return np.maximum(self.l, 0.0)

    @property
    def y_u(self):
        return np.maximum(self.u, 0.0)

    @property
    def s(self):
        width = self.u - self.l
        safe = np.where(width > 0, width, 1.0)
        return np.where(width > 0, (self.y_u - self.y_l) / safe, 0.0)

    def expand(self) -> "ReluHullParams":
        """Add a trailing axis so the parameters broadcast over a batch."""
        return ReluHullParams(self.l[..., None], self.u[..., None])


_TIE = 1e-12


def project_relu_hull(a, c, hull: ReluHullParams):
    """Project ``(a, c)`` onto the convex hull of the ReLU graph over ``[l, u]``.

    For ``l < 0 < u`` the hull is a triangle; points outside it go to the
    nearest of the three facet projections (ties resolved toward the
    lowest facet index). Stable neurons reduce to a segment and ``l == u``
    to a single point.
    """
    a = np.asarray(a, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    l, u = hull.l, hull.u
    yl, s = hull.y_l, hull.s

    # facet y = x on [0, u]
    x1 = np.clip(0.5 * (a + c), 0.0, np.maximum(u, 0.0))
    y1 = x1
    # facet on the upper chord
    x2 = np.clip((a + s * c + s * (s * l - yl)) / (s * s + 1.0), l, u)
    y2 = yl + s * (x2 - l)
    # facet y = 0 on [l, 0]
    x3 = np.clip(a, l, np.minimum(u, 0.0))
    y3 = np.zeros_like(x3)

    d1 = np.hypot(a - x1, c - y1)
    d2 = np.hypot(a - x2, c - y2)
    d3 = np.hypot(a - x3, c - y3)
    dmin = np.minimum(np.minimum(d1, d2), d3)
    pick1 = d1 <= dmin + _TIE
    pick2 = ~pick1 & (d2 <= dmin + _TIE)
    xt = np.where(pick1, x1, np.where(pick2, x2, x3))
    yt = np.where(pick1, y1, np.where(pick2, y2, y3))

    inside = (a >= l) & (a <= u) & (c >= np.maximum(a, 0.0)) & (c <= yl + s * (a - l))
    xt = np.where(inside, a, xt)
    yt = np.where(inside, c, yt)

    # stable neurons: segments of y = x or y = 0
    xa = np.clip(0.5 * (a + c), l, u)
    xi = np.clip(a, l, u)
    active = l >= 0
    dead = u <= 0
    x = np.where(active, xa, np.where(dead, xi, xt))
    y = np.where(active, xa, np.where(dead, 0.0, yt))

    fixed = l == u
    if np.any(fixed):
        x = np.where(fixed, l, x)
        y = np.where(fixed, yl, y)
    return x, y


class AffineProjCache:
    """Cached factorisation for solves with ``I + W^T W``.

    When the layer is expanding (more outputs than inputs) the input-side
    matrix is factored directly; otherwise ``I + W W^T`` is factored and the
    inverse applied through the Woodbury identity.
    """

    def __init__(self, W: np.ndarray, b: np.ndarray):
        m, n = W.shape
        self.W = W
        self.b = b
        self.woodbury = m < n
        G = W @ W.T if self.woodbury else W.T @ W
        G[np.diag_indices_from(G)] += 1.0
        self.factor = linalg.cho_factor(G, lower=False, check_finite=False)

    def solve(self, v: np.ndarray) -> np.ndarray:
        """Apply ``(I + W^T W)^{-1}`` to ``v``."""
        if self.woodbury:
            t = linalg.cho_solve(self.factor, self.W @ v, check_finite=False)
            return v - self.W.T @ t
        return linalg.cho_solve(self.factor, v, check_finite=False)

    def project(self, a: np.ndarray, c: np.ndarray):
        off = self.b if c.ndim == 1 else self.b[:, None]
        y = self.solve(a + self.W.T @ (c - off))
        return y, self.W @ y + off


def build_affine_cache(layer, validate: bool = True) -> AffineProjCache:
    W = layer.W
    if W.shape[0] * W.shape[1] > MAX_DENSE_ENTRIES:
        raise SizeGuardError(
            f"dense {W.shape[0]}x{W.shape[1]} weight is too large to factor; "
            "express convolutions through decompose_conv instead"
        )
    cache = AffineProjCache(np.asarray(W), np.asarray(layer.b))
    if validate:
        v = np.random.default_rng(0).standard_normal(W.shape[1])
        y = cache.solve(v)
        resid = y + W.T @ (W @ y) - v
        scale = 1.0 + np.linalg.norm(W, ord="fro") ** 2
        if not np.linalg.norm(resid) <= 1e-10 * scale * (1.0 + np.linalg.norm(v)):
            raise ArithmeticError("affine projection cache failed its validation solve")
    return cache


def project_affine_graph(a, c, layer: LinearLayer, cache=None):
    """Project ``(a, c)`` onto ``{(y, z) : z = layer(y)}``."""
    a = np.asarray(a, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    if a.shape[0] != layer.n_in or c.shape[0] != layer.n_out:
        raise ShapeError(
            f"graph projection expects ({layer.n_in}, {layer.n_out}) rows, got "
            f"({a.shape[0]}, {c.shape[0]})"
        )
    if isinstance(layer, Affine):
        if cache is None:
            cache = build_affine_cache(layer)
        return cache.project(a, c)
    if isinstance(layer, Pad):
        y = 0.5 * (a + c[layer.indices])
        return y, layer.matvec(y)
    if isinstance(layer, Selection):
        idx = layer.indices
        target = c if layer.offset is None else c - _col(layer.offset, c)
        y = a.copy()
        y[idx] = 0.5 * (a[idx] + target)
        return y, layer.forward(y)
    if isinstance(layer, CircularConv):
        from .convfft import build_fourier_cache, project_circ_graph

        if cache is None:
            cache = build_fourier_cache(layer)
        return project_circ_graph(a, c, cache)
    raise TypeError(f"no graph projection for {layer!r}")
