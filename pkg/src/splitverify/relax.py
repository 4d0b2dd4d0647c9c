"""Input sets and pre-activation bounds.

Bounds are kept for every layer input ``x_0 .. x_l`` as flat vectors. Three
sources are available: plain interval arithmetic, fixed-slope linear bound
propagation (the default), and exact LP tightening with the ADMM solver.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .model import LinearLayer, Network, ReLU, ShapeError
from .proj import project_box, project_lp_ball

__all__ = [
    "InputSet",
    "Box",
    "LpBall",
    "BoundsCache",
    "interval_propagate",
    "linear_bound_propagate",
    "tighten_bounds_admm",
    "relu_relaxation",
]

log = logging.getLogger(__name__)


def _norm_p(p):
    if p in (np.inf, "inf", "Inf", float("inf")):
        return np.inf
    p = int(p)
    if p not in (1, 2):
        raise ValueError(f"unsupported norm p={p}")
    return p


class InputSet:
    """Closed convex input region ``X``."""

    dim: int

    def box(self) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def center(self) -> np.ndarray:
        raise NotImplementedError

    def project(self, v: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def sample(self, rng: np.random.Generator, k: int) -> np.ndarray:
        """``k`` uniform samples as columns of an ``(n, k)`` array."""
        raise NotImplementedError

    def contains(self, x, tol: float = 1e-12) -> bool:
        x = np.asarray(x, dtype=np.float64)
        return bool(np.all(np.abs(self.project(x) - x) <= tol))


@dataclass(frozen=True)
class Box(InputSet):
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=np.float64).reshape(-1)
        hi = np.asarray(self.upper, dtype=np.float64).reshape(-1)
        if lo.shape != hi.shape:
            raise ShapeError("box bounds differ in size")
        if np.any(lo > hi):
            raise ValueError("box needs lower <= upper")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self):
        return self.lower.shape[0]

    def box(self):
        return self.lower.copy(), self.upper.copy()

    def center(self):
        return 0.5 * (self.lower + self.upper)

    def project(self, v):
        return project_box(v, self.lower, self.upper)

    def sample(self, rng, k):
        t = rng.random((self.dim, k))
        return self.lower[:, None] + t * (self.upper - self.lower)[:, None]

    @classmethod
    def point(cls, x) -> "Box":
        x = np.asarray(x, dtype=np.float64).reshape(-1)
        return cls(x, x)


@dataclass(frozen=True)
class LpBall(InputSet):
    center_: np.ndarray
    radius: float
    p: float = np.inf

    def __init__(self, center, radius, p=np.inf):
        if not radius > 0:
            raise ValueError("ball radius must be positive")
        c = np.asarray(center, dtype=np.float64).reshape(-1)
        object.__setattr__(self, "center_", c)
        object.__setattr__(self, "radius", float(radius))
        object.__setattr__(self, "p", _norm_p(p))

    @property
    def dim(self):
        return self.center_.shape[0]

    def box(self):
        # the circumscribing box for every p in {1, 2, inf}
        return self.center_ - self.radius, self.center_ + self.radius

    def center(self):
        return self.center_.copy()

    def project(self, v):
        return project_lp_ball(v, self.center_, self.radius, self.p)

    def sample(self, rng, k):
        n = self.dim
        if self.p == np.inf:
            d = rng.uniform(-1.0, 1.0, (n, k))
        elif self.p == 2:
            g = rng.standard_normal((n, k))
            g /= np.linalg.norm(g, axis=0)
            d = g * rng.random(k) ** (1.0 / n)
        else:
            e = rng.exponential(size=(n + 1, k))
            d = e[:n] / e.sum(axis=0) * rng.choice([-1.0, 1.0], size=(n, k))
        return self.center_[:, None] + self.radius * d


@dataclass
class BoundsCache:
    """Elementwise intervals ``lower[k] <= x_k <= upper[k]`` for k = 0..l."""

    lower: list[np.ndarray]
    upper: list[np.ndarray]
    fallbacks: list[tuple[int, int, str]] = field(default_factory=list)

    def __post_init__(self):
        self.lower = [np.asarray(a, dtype=np.float64).reshape(-1) for a in self.lower]
        self.upper = [np.asarray(a, dtype=np.float64).reshape(-1) for a in self.upper]
        if len(self.lower) != len(self.upper):
            raise ShapeError("lower and upper lists differ in length")
        for k, (lo, hi) in enumerate(zip(self.lower, self.upper)):
            if lo.shape != hi.shape:
                raise ShapeError(f"layer {k}: bound shapes differ")
            if np.any(lo > hi):
                raise ValueError(f"layer {k}: lower bound exceeds upper bound")

    def __len__(self):
        return len(self.lower)

    def check(self, net: Network) -> None:
        dims = net.layer_dims
        if len(self.lower) < len(dims) or any(
            lo.shape[0] != d for lo, d in zip(self.lower, dims)
        ):
            raise ShapeError("bounds do not match the network's layer dimensions")

    def prefix(self, k: int) -> "BoundsCache":
        """Bounds for the network truncated after ``k`` layers."""
        return BoundsCache(self.lower[: k + 1], self.upper[: k + 1])

    def contains(self, acts, tol: float = 0.0) -> bool:
        """Whether flat activations (optionally batched) lie inside the cache."""
        for lo, hi, a in zip(self.lower, self.upper, acts):
            a = a if a.ndim == 2 else a[:, None]
            if np.any(a < lo[:, None] - tol) or np.any(a > hi[:, None] + tol):
                return False
        return True

    def is_subset_of(self, other: "BoundsCache", tol: float = 0.0) -> bool:
        return all(
            np.all(lo >= olo - tol) and np.all(hi <= ohi + tol)
            for lo, hi, olo, ohi in zip(self.lower, self.upper, other.lower, other.upper)
        )


def _start_box(net: Network, input: InputSet):
    lo, hi = input.box()
    if lo.shape[0] != net.layer_dims[0]:
        raise ShapeError(f"input set has dimension {lo.shape[0]}, network expects {net.layer_dims[0]}")
    return lo, hi


def _abs_matvec(layer: LinearLayer, r: np.ndarray) -> np.ndarray:
    from .model import Affine, CircularConv

    if isinstance(layer, Affine):
        return np.abs(layer.W) @ r
    if isinstance(layer, CircularConv):
        absconv = getattr(layer, "_abs_layer", None)
        if absconv is None:
            absconv = CircularConv(np.abs(layer.kernels), layer.shape_in)
            layer._abs_layer = absconv
        return absconv.matvec(r)
    return layer.matvec(r)  # 0/1 selections


def interval_propagate(net: Network, input: InputSet) -> BoundsCache:
    lo, hi = _start_box(net, input)
    lower, upper = [lo], [hi]
    for layer in net.layers:
        if isinstance(layer, ReLU):
            lo, hi = np.maximum(lo, 0.0), np.maximum(hi, 0.0)
        else:
            mid, rad = 0.5 * (lo + hi), 0.5 * (hi - lo)
            c = layer.forward(mid)
            r = np.maximum(_abs_matvec(layer, rad), 0.0)  # FFT round-off can dip below zero
            lo, hi = c - r, c + r
        lower.append(lo)
        upper.append(hi)
    return BoundsCache(lower, upper)


def relu_relaxation(l: np.ndarray, u: np.ndarray):
    """Fixed linear bounds ``sl*x <= relu(x) <= su*x + tu`` on ``[l, u]``.

    Unstable neurons get the chord as upper line and, as lower line,
    whichever of ``y = 0`` or ``y = x`` covers more of the interval.
    """
    unstable = (l < 0) & (u > 0)
    active = l >= 0
    width = np.where(unstable, u - l, 1.0)
    su = np.where(unstable, u / width, active.astype(float))
    tu = np.where(unstable, -l * u / width, 0.0)
    sl = np.where(unstable, (u >= -l).astype(float), active.astype(float))
    return sl, su, tu


def _backsubstitute(net: Network, k: int, lower, upper, lo0, hi0):
    """Linear bounds on ``x_k`` expressed through ``x_0`` and the input box."""
    n = net.layer_dims[k]
    AU = np.eye(n)  # rows: current variable, columns: target coordinates
    AL = np.eye(n)
    cU = np.zeros(n)
    cL = np.zeros(n)
    for j in range(k - 1, -1, -1):
        layer = net.layers[j]
        if isinstance(layer, ReLU):
            sl, su, tu = relu_relaxation(lower[j], upper[j])
            pos, neg = np.maximum(AU, 0.0), np.minimum(AU, 0.0)
            cU += tu @ pos
            AU = pos * su[:, None] + neg * sl[:, None]
            pos, neg = np.maximum(AL, 0.0), np.minimum(AL, 0.0)
            cL += tu @ neg
            AL = pos * sl[:, None] + neg * su[:, None]
        else:
            if layer.offset is not None:
                cU += layer.offset @ AU
                cL += layer.offset @ AL
            AU = layer.rmatvec(AU)
            AL = layer.rmatvec(AL)
    mid, rad = 0.5 * (lo0 + hi0), 0.5 * (hi0 - lo0)
    up = cU + AU.T @ mid + np.abs(AU).T @ rad
    low = cL + AL.T @ mid - np.abs(AL).T @ rad
    return low, up


def linear_bound_propagate(net: Network, input: InputSet) -> BoundsCache:
    ibp = interval_propagate(net, input)
    lo0, hi0 = _start_box(net, input)
    lower, upper = [lo0], [hi0]
    for k, layer in enumerate(net.layers, start=1):
        if isinstance(layer, ReLU):
            lo, hi = np.maximum(lower[-1], 0.0), np.maximum(upper[-1], 0.0)
        else:
            lo, hi = _backsubstitute(net, k, lower, upper, lo0, hi0)
            lo = np.maximum(lo, ibp.lower[k])
            hi = np.minimum(hi, ibp.upper[k])
            hi = np.maximum(hi, lo)
        lower.append(lo)
        upper.append(hi)
    return BoundsCache(lower, upper)


def tighten_bounds_admm(net: Network, input: InputSet, seed_bounds: BoundsCache, cfg, caches=None):
    """Tighten ``seed_bounds`` layer by layer with batched LP solves.

    For every layer output that is not a ReLU output, the min and max of
    each coordinate over the LP relaxation of the truncated network are
    bounded from below by certified solver values. Coordinates whose solve
    does not produce a certified value keep their seed bound and are listed
    in ``fallbacks``.
    """
    from .solver import build_caches, solve

    seed_bounds.check(net)
    caches = build_caches(net) if caches is None else caches
    lower = [seed_bounds.lower[0].copy()]
    upper = [seed_bounds.upper[0].copy()]
    fallbacks = []
    for k, layer in enumerate(net.layers, start=1):
        slo, shi = seed_bounds.lower[k], seed_bounds.upper[k]
        if isinstance(layer, ReLU):
            lower.append(np.maximum(slo, np.maximum(lower[-1], 0.0)))
            upper.append(np.minimum(shi, np.maximum(upper[-1], 0.0)))
            continue
        n = slo.shape[0]
        sub = net.truncate(k)
        cur = BoundsCache(lower + [slo], upper + [shi])
        C = np.hstack([np.eye(n), -np.eye(n)])
        cert = solve(sub, input, cur, C, cfg, caches=caches[:k])
        lb = cert.lower_bound
        lo = np.maximum(slo, lb[:n])
        hi = np.minimum(shi, -lb[n:])
        crossed = lo > hi
        if np.any(crossed):
            lo = np.where(crossed, slo, lo)
            hi = np.where(crossed, shi, hi)
        for i in range(n):
            if not np.isfinite(lb[i]) or crossed[i]:
                fallbacks.append((k, i, "lower"))
            if not np.isfinite(lb[n + i]) or crossed[i]:
                fallbacks.append((k, i, "upper"))
        lower.append(lo)
        upper.append(hi)
    if fallbacks:
        log.warning("bound tightening kept %d seed bounds after solver failures", len(fallbacks))
    out = BoundsCache(lower, upper)
    out.fallbacks = fallbacks
    return out
