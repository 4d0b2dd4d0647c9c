"""ADMM solver for the layer-wise LP relaxation of network verification.

The problem is split with copies ``y_k = x_k`` and ``z_k = x_{k+1}`` so that
every update is closed form:

1. ``x``-update: input-set projection, averaging of the two copies, and the
   prox of the objective at the output,
2. ``(y, z)``-update: a projection onto each layer's graph (affine, circular
   convolution, selection) or onto the ReLU convex hull,
3. scaled dual ascent on the consensus violations.

State is stored stacked: ``X`` holds ``x_0..x_l`` row by row, ``Y`` holds
``y_0..y_{l-1}`` (aligned with ``x_0..x_{l-1}``) and ``Z`` holds
``z_0..z_{l-1}`` (aligned with ``x_1..x_l``). Every array carries a
trailing batch axis, one column per objective, and each column owns its own
penalty ``rho``.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .convfft import build_fourier_cache
from .model import Affine, CircularConv, Network, ReLU
from .proj import ReluHullParams, build_affine_cache, project_affine_graph, project_relu_hull
from .relax import BoundsCache, InputSet

__all__ = [
    "SolverConfig",
    "SolverState",
    "Residuals",
    "LinearObjective",
    "Certificate",
    "SolverDivergedError",
    "MissingProxError",
    "build_caches",
    "init_state",
    "x_update",
    "yz_update",
    "dual_update",
    "compute_residuals",
    "balance_rho",
    "solve",
    "dual_certificate",
    "augmented_lagrangian",
    "write_trace_csv",
]

log = logging.getLogger(__name__)

BOUND_SOURCES = ("interval", "linear", "admm")


class SolverDivergedError(FloatingPointError):
    def __init__(self, iteration: int, layer: int, where: str):
        super().__init__(f"non-finite {where} at iteration {iteration}, layer {layer}")
        self.iteration = iteration
        self.layer = layer


class MissingProxError(ValueError):
    """A non-linear objective was given without its proximal map."""


@dataclass
class SolverConfig:
    rho0: float = 1.0
    eps_abs: float = 1e-4
    eps_rel: float = 1e-3
    max_iter: int = 20000
    balancing: bool = True
    tau: float = 2.0
    mu_rb: float = 10.0
    bound_source: str = "linear"
    check_every: int = 10
    # also evaluate the dual certificate on converged runs and report the smaller value
    certify: bool = True
    # on max_iter, report the dual certificate as the bound
    early_stop_certificate: bool = True
    time_limit: float | None = None
    # compare the plain sums of squared violations instead of their norms
    squared_residuals: bool = False
    # minimum spacing of penalty updates, a multiple of check_every
    balance_interval: int = 100

    def __post_init__(self):
        if not self.rho0 > 0:
            raise ValueError("rho0 must be positive")
        if self.eps_abs < 0 or self.eps_rel < 0:
            raise ValueError("tolerances must be non-negative")
        if self.max_iter < 1 or self.check_every < 1:
            raise ValueError("max_iter and check_every must be positive")
        if self.balancing and not (self.tau > 1 and self.mu_rb > 1):
            raise ValueError("residual balancing needs tau > 1 and mu_rb > 1")
        if self.balance_interval < 1 or self.balance_interval % self.check_every:
            raise ValueError("balance_interval must be a positive multiple of check_every")
        if self.bound_source not in BOUND_SOURCES:
            raise ValueError(f"bound_source must be one of {BOUND_SOURCES}")

    def replace(self, **kw) -> "SolverConfig":
        return SolverConfig(**{**asdict(self), **kw})


@dataclass
class Residuals:
    r_p: np.ndarray
    r_d: np.ndarray
    eps_p: np.ndarray
    eps_d: np.ndarray

    @property
    def converged(self) -> np.ndarray:
        return (self.r_p <= self.eps_p) & (self.r_d <= self.eps_d)

    def take(self, idx) -> "Residuals":
        return Residuals(self.r_p[idx], self.r_d[idx], self.eps_p[idx], self.eps_d[idx])


@dataclass
class LinearObjective:
    """``J(x_l) = c^T x_l``; ``c`` is ``(n_l,)`` or ``(n_l, B)``."""

    c: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.c, dtype=np.float64)
        if c.ndim == 1:
            c = c[:, None]
        if not np.all(np.isfinite(c)):
            raise ValueError("objective has non-finite entries")
        self.c = c

    @property
    def batch(self) -> int:
        return self.c.shape[1]


class _Layout:
    def __init__(self, dims: list[int]):
        self.dims = dims
        self.off = np.concatenate([[0], np.cumsum(dims)]).astype(int)
        self.N = int(self.off[-1])
        self.n0 = dims[0]
        self.nl = dims[-1]
        self.ny = self.N - self.nl  # rows of Y (and LAM)
        self.nz = self.N - self.n0  # rows of Z (and MU)

    def xs(self, k):
        return slice(self.off[k], self.off[k + 1])

    def ys(self, k):
        return self.xs(k)

    def zs(self, k):
        return slice(self.off[k + 1] - self.n0, self.off[k + 2] - self.n0)

    def layer_of_row(self, row: int) -> int:
        return int(np.searchsorted(self.off, row, side="right") - 1)


@dataclass
class SolverState:
    X: np.ndarray
    Y: np.ndarray
    Z: np.ndarray
    LAM: np.ndarray
    MU: np.ndarray
    rho: np.ndarray
    iter: int
    layout: _Layout = field(repr=False)

    @property
    def batch(self) -> int:
        return self.X.shape[1]

    @property
    def x(self) -> list[np.ndarray]:
        return [self.X[self.layout.xs(k)] for k in range(len(self.layout.dims))]

    @property
    def y(self) -> list[np.ndarray]:
        return [self.Y[self.layout.ys(k)] for k in range(len(self.layout.dims) - 1)]

    @property
    def z(self) -> list[np.ndarray]:
        return [self.Z[self.layout.zs(k)] for k in range(len(self.layout.dims) - 1)]

    @property
    def lam(self) -> list[np.ndarray]:
        return [self.LAM[self.layout.ys(k)] for k in range(len(self.layout.dims) - 1)]

    @property
    def mu(self) -> list[np.ndarray]:
        return [self.MU[self.layout.zs(k)] for k in range(len(self.layout.dims) - 1)]

    def copy(self) -> "SolverState":
        return SolverState(
            self.X.copy(), self.Y.copy(), self.Z.copy(), self.LAM.copy(), self.MU.copy(),
            self.rho.copy(), self.iter, self.layout,
        )

    def take(self, cols) -> "SolverState":
        return SolverState(
            self.X[:, cols], self.Y[:, cols], self.Z[:, cols], self.LAM[:, cols],
            self.MU[:, cols], self.rho[cols], self.iter, self.layout,
        )

    def put(self, cols, other: "SolverState") -> None:
        for name in ("X", "Y", "Z", "LAM", "MU"):
            getattr(self, name)[:, cols] = getattr(other, name)
        self.rho[cols] = other.rho


@dataclass
class Certificate:
    """Outcome of a (batched) solve; one entry per objective column."""

    lower_bound: np.ndarray
    primal: np.ndarray
    dual_bound: np.ndarray
    status: list[str]
    iters: np.ndarray
    final_residuals: Residuals
    rho_trace: list[list[tuple[int, float]]]
    trace: list[list[tuple]]
    state: SolverState | None = field(default=None, repr=False)

    @property
    def certified(self) -> np.ndarray:
        return np.array([s != "max_iter" for s in self.status]) & np.isfinite(self.lower_bound)

    @property
    def objective_trace(self) -> list[list[float]]:
        return [[row[6] for row in t] for t in self.trace]


def build_caches(net: Network) -> list:
    """Projection caches for every linear layer that needs one.

    A layer object that appears several times (as in composed dynamics)
    is factored once.
    """
    seen: dict[int, object] = {}
    caches = []
    for layer in net.layers:
        if id(layer) not in seen:
            if isinstance(layer, Affine):
                seen[id(layer)] = build_affine_cache(layer)
            elif isinstance(layer, CircularConv):
                seen[id(layer)] = build_fourier_cache(layer)
            else:
                seen[id(layer)] = None
        caches.append(seen[id(layer)])
    return caches


class _Problem:
    """Per-run constants: layout, caches, ReLU hull data, input set."""

    def __init__(self, net: Network, input: InputSet, bounds: BoundsCache, caches=None):
        bounds.check(net)
        if input.dim != net.layer_dims[0]:
            raise ValueError("input set dimension does not match the network")
        self.net = net
        self.input = input
        self.layout = _Layout(net.layer_dims)
        self.caches = build_caches(net) if caches is None else list(caches)
        if len(self.caches) != len(net.layers):
            raise ValueError("one cache entry per layer is required")
        L = self.layout
        ry, rz, lo, hi = [], [], [], []
        self.linear = []
        for k, layer in enumerate(net.layers):
            if isinstance(layer, ReLU):
                ry.append(np.arange(L.ys(k).start, L.ys(k).stop))
                rz.append(np.arange(L.zs(k).start, L.zs(k).stop))
                lo.append(bounds.lower[k])
                hi.append(bounds.upper[k])
            else:
                if isinstance(layer, (Affine, CircularConv)) and self.caches[k] is None:
                    raise ValueError(f"missing projection cache for layer {k}")
                self.linear.append(k)
        self.has_relu = bool(ry)
        if self.has_relu:
            self.relu_y = np.concatenate(ry)
            self.relu_z = np.concatenate(rz)
            self.hull = ReluHullParams(np.concatenate(lo), np.concatenate(hi)).expand()


def _objective_matrix(objective, nl: int) -> np.ndarray:
    if not isinstance(objective, LinearObjective):
        objective = LinearObjective(objective)
    if objective.c.shape[0] != nl:
        raise ValueError(f"objective has {objective.c.shape[0]} rows, network output has {nl}")
    return objective.c


def init_state(net: Network, input: InputSet, bounds: BoundsCache, cfg: SolverConfig, batch: int = 1) -> SolverState:
    bounds.check(net)
    L = _Layout(net.layer_dims)
    x0 = input.center()
    acts = net.propagate(x0)
    col = np.concatenate(acts)[:, None]
    X = np.repeat(col, batch, axis=1)
    return SolverState(
        X=X,
        Y=X[: L.ny].copy(),
        Z=X[L.n0:].copy(),
        LAM=np.zeros((L.ny, batch)),
        MU=np.zeros((L.nz, batch)),
        rho=np.full(batch, float(cfg.rho0)),
        iter=0,
        layout=L,
    )


def x_update(state: SolverState, input: InputSet, C: np.ndarray | None, prox: Callable | None = None) -> None:
    """Closed-form minimisation over ``x``; ``prox(v, rho)`` handles a non-linear objective."""
    L = state.layout
    X, Y, Z, LAM, MU = state.X, state.Y, state.Z, state.LAM, state.MU
    X[: L.n0] = input.project(Y[: L.n0] - LAM[: L.n0])
    if L.N - L.nl > L.n0:
        X[L.n0: L.ny] = 0.5 * (Y[L.n0:] - LAM[L.n0:] + Z[: L.nz - L.nl] - MU[: L.nz - L.nl])
    v = Z[L.nz - L.nl:] - MU[L.nz - L.nl:]
    if prox is not None:
        X[L.ny:] = prox(v, state.rho)
    elif C is not None:
        X[L.ny:] = v - C / state.rho
    else:
        raise MissingProxError("objective needs either a cost matrix or a prox map")


def _yz_project(problem: _Problem, A: np.ndarray, Cc: np.ndarray, Y: np.ndarray, Z: np.ndarray) -> None:
    L = problem.layout
    for k in problem.linear:
        layer = problem.net.layers[k]
        y, z = project_affine_graph(A[L.ys(k)], Cc[L.zs(k)], layer, problem.caches[k])
        Y[L.ys(k)] = y
        Z[L.zs(k)] = z
    if problem.has_relu:
        y, z = project_relu_hull(A[problem.relu_y], Cc[problem.relu_z], problem.hull)
        Y[problem.relu_y] = y
        Z[problem.relu_z] = z


def yz_update(state: SolverState, problem: _Problem) -> None:
    L = state.layout
    A = state.X[: L.ny] + state.LAM
    Cc = state.X[L.n0:] + state.MU
    _yz_project(problem, A, Cc, state.Y, state.Z)


def dual_update(state: SolverState) -> None:
    L = state.layout
    state.LAM += state.X[: L.ny] - state.Y
    state.MU += state.X[L.n0:] - state.Z


def compute_residuals(state: SolverState, prev_Y: np.ndarray, prev_Z: np.ndarray, cfg: SolverConfig) -> Residuals:
    """Primal/dual residuals and their tolerances, one value per batch column."""
    L = state.layout
    X, Y, Z, LAM, MU = state.X, state.Y, state.Z, state.LAM, state.MU
    r_p = ((Y - X[: L.ny]) ** 2).sum(axis=0) + ((X[L.n0:] - Z) ** 2).sum(axis=0)

    dY = Y - prev_Y
    dZ = Z - prev_Z
    mid = dY[L.n0:] + dZ[: L.nz - L.nl]
    dsq = (mid**2).sum(axis=0) + (dY[: L.n0] ** 2).sum(axis=0) + (dZ[L.nz - L.nl:] ** 2).sum(axis=0)

    dims = L.dims
    p = dims[0] + 2 * sum(dims[1:-1]) + dims[-1]
    n = sum(dims)
    x_norm = np.sqrt((X**2).sum(axis=0) + (X[L.n0: L.ny] ** 2).sum(axis=0))
    yz_norm = np.sqrt((Y**2).sum(axis=0) + (Z**2).sum(axis=0))
    eps_p = np.sqrt(p) * cfg.eps_abs + cfg.eps_rel * np.maximum(x_norm, yz_norm)

    dual_mid = LAM[L.n0:] + MU[: L.nz - L.nl]
    dual_norm = np.sqrt(
        (LAM[: L.n0] ** 2).sum(axis=0) + (dual_mid**2).sum(axis=0) + (MU[L.nz - L.nl:] ** 2).sum(axis=0)
    )
    eps_d = np.sqrt(n) * cfg.eps_abs + cfg.eps_rel * dual_norm
    if cfg.squared_residuals:
        r_d = state.rho * dsq
    else:
        r_p, r_d = np.sqrt(r_p), state.rho * np.sqrt(dsq)
    return Residuals(r_p, r_d, eps_p, eps_d)


def balance_rho(state: SolverState, res: Residuals, cfg: SolverConfig, mask: np.ndarray | None = None) -> np.ndarray:
    """Residual balancing; scaled duals are rescaled so the multipliers are unchanged.

    Returns the direction of the change per column (+1, -1 or 0).
    """
    inc = res.r_p > cfg.mu_rb * res.r_d
    dec = res.r_d > cfg.mu_rb * res.r_p
    if mask is not None:
        inc &= mask
        dec &= mask
    direction = inc.astype(int) - dec.astype(int)
    if not direction.any():
        return direction
    scale = np.where(inc, cfg.tau, np.where(dec, 1.0 / cfg.tau, 1.0))
    state.rho *= scale
    state.LAM /= scale
    state.MU /= scale
    return direction


class _BalanceSchedule:
    """When each column may next change its penalty.

    Updates are spaced ``interval`` iterations apart; a reversal of
    direction doubles the spacing, which damps the up/down cycling that
    otherwise keeps the iterates from settling.
    """

    def __init__(self, batch: int, interval: int):
        self.gap = np.full(batch, interval)
        self.next = np.full(batch, interval)
        self.last = np.zeros(batch, dtype=int)

    def due(self, it: int) -> np.ndarray:
        return it >= self.next

    def record(self, it: int, direction: np.ndarray, due: np.ndarray) -> None:
        flipped = (direction != 0) & (direction == -self.last)
        self.gap = np.where(flipped, 2 * self.gap, self.gap)
        self.next = np.where(due, it + self.gap, self.next)
        self.last = np.where(direction != 0, direction, self.last)

    def take(self, idx) -> None:
        self.gap, self.next, self.last = self.gap[idx], self.next[idx], self.last[idx]


def _check_finite(state: SolverState, it: int) -> None:
    for name in ("X", "Y", "Z", "LAM", "MU"):
        arr = getattr(state, name)
        bad = ~np.isfinite(arr)
        if bad.any():
            row = int(np.argwhere(bad)[0][0])
            offset = state.layout.n0 if name in ("Z", "MU") else 0
            layer = state.layout.layer_of_row(row + offset)
            raise SolverDivergedError(it, layer, name)


def augmented_lagrangian(state: SolverState, C: np.ndarray) -> np.ndarray:
    """Value of the augmented Lagrangian at the current state (indicators omitted)."""
    L = state.layout
    X = state.X
    val = (C * X[L.ny:]).sum(axis=0)
    t1 = ((X[: L.ny] - state.Y + state.LAM) ** 2).sum(axis=0) - (state.LAM**2).sum(axis=0)
    t2 = ((X[L.n0:] - state.Z + state.MU) ** 2).sum(axis=0) - (state.MU**2).sum(axis=0)
    return val + 0.5 * state.rho * (t1 + t2)


def dual_certificate(state, net, input, bounds, objective, cfg, caches=None, prox=None,
                     inner_tol: float = 1e-9, max_inner: int | None = None):
    """Lower bound from the dual function at the state's (frozen) multipliers.

    With ``x`` eliminated in closed form, the augmented Lagrangian is a
    smooth convex function of ``(y, z)`` whose gradient step of length
    ``1/rho`` followed by the graph projections is exactly one alternating
    minimisation sweep. The sweeps are accelerated with Nesterov momentum
    (restarted whenever the value goes up) until successive ``(y, z)``
    move by at most ``inner_tol``. Columns that do not settle within the
    cap get ``-inf``.
    """
    problem = net if isinstance(net, _Problem) else _Problem(net, input, bounds, caches)
    C = _objective_matrix(objective, problem.layout.nl)
    if C.shape[1] != state.batch:
        C = np.broadcast_to(C, (C.shape[0], state.batch))
    cap = max(10 * cfg.max_iter, 10_000) if max_inner is None else max_inner
    work = state.copy()
    Yv, Zv = work.Y.copy(), work.Z.copy()
    t = np.ones(state.batch)
    prev_val = np.full(state.batch, np.inf)
    done = np.zeros(state.batch, dtype=bool)
    for _ in range(cap):
        x_update(work, problem.input, C, prox)
        yz_update(work, problem)
        x_update(work, problem.input, C, prox)
        val = augmented_lagrangian(work, C)
        change = np.maximum(np.abs(work.Y - Yv).max(axis=0), np.abs(work.Z - Zv).max(axis=0))
        done |= change <= inner_tol
        if done.all():
            Yv, Zv = work.Y.copy(), work.Z.copy()
            break
        restart = val > prev_val
        t_next = np.where(restart, 1.0, 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t)))
        beta = np.where(restart | done, 0.0, (t - 1.0) / t_next)
        Yn, Zn = work.Y.copy(), work.Z.copy()
        work.Y = Yn + beta * (Yn - Yv)
        work.Z = Zn + beta * (Zn - Zv)
        Yv, Zv, t, prev_val = Yn, Zn, t_next, np.minimum(val, prev_val)
    work.Y, work.Z = Yv, Zv
    x_update(work, problem.input, C, prox)
    value = augmented_lagrangian(work, C)
    if prox is not None:
        value = np.full(state.batch, np.nan)  # only linear objectives have a closed-form value here
    if not done.all():
        log.warning("dual certificate: inner minimisation did not settle for %d entries", (~done).sum())
    return np.where(done, value, -np.inf)


def solve(net: Network, input: InputSet, bounds: BoundsCache, objective, cfg: SolverConfig | None = None,
          caches=None, prox: Callable | None = None, keep_state: bool = False) -> Certificate:
    """Run the splitting iterations until the residual test passes or ``max_iter``.

    Columns of a batched objective are independent runs that share the work
    of every iteration; a column stops updating once it has converged.
    """
    cfg = cfg or SolverConfig()
    problem = _Problem(net, input, bounds, caches)
    L = problem.layout
    C_full = _objective_matrix(objective, L.nl)
    B = C_full.shape[1]
    full = init_state(net, input, bounds, cfg, B)
    state = full.copy()
    active = np.arange(B)
    C = C_full

    status = [""] * B
    iters = np.zeros(B, dtype=int)
    fin = Residuals(*(np.zeros(B) for _ in range(4)))
    rho_trace = [[(0, float(cfg.rho0))] for _ in range(B)]
    trace: list[list[tuple]] = [[] for _ in range(B)]
    schedule = _BalanceSchedule(B, cfg.balance_interval)
    t0 = time.perf_counter()

    for it in range(1, cfg.max_iter + 1):
        check = it == 1 or it % cfg.check_every == 0 or it == cfg.max_iter
        x_update(state, input, C, prox)
        if check:
            prev_Y, prev_Z = state.Y.copy(), state.Z.copy()
        yz_update(state, problem)
        dual_update(state)
        state.iter = it
        if not check:
            continue

        _check_finite(state, it)
        res = compute_residuals(state, prev_Y, prev_Z, cfg)
        obj = (C * state.X[L.ny:]).sum(axis=0)
        for j, b in enumerate(active):
            trace[b].append((it, res.r_p[j], res.r_d[j], res.eps_p[j], res.eps_d[j], state.rho[j], obj[j]))
        conv = res.converged
        out_of_time = cfg.time_limit is not None and time.perf_counter() - t0 > cfg.time_limit
        stop = conv | (it == cfg.max_iter) | out_of_time
        if cfg.balancing:
            due = schedule.due(it) & ~stop
            if due.any():
                direction = balance_rho(state, res, cfg, mask=due)
                schedule.record(it, direction, due)
                for j in np.flatnonzero(direction):
                    rho_trace[active[j]].append((it, float(state.rho[j])))
        if stop.any():
            idx = np.flatnonzero(stop)
            cols = active[idx]
            full.put(cols, state.take(idx))
            for j, b in zip(idx, cols):
                status[b] = "converged" if conv[j] else "max_iter"
                iters[b] = it
                fin.r_p[b], fin.r_d[b] = res.r_p[j], res.r_d[j]
                fin.eps_p[b], fin.eps_d[b] = res.eps_p[j], res.eps_d[j]
            keep = np.flatnonzero(~stop)
            active = active[keep]
            if not active.size:
                break
            state = state.take(keep)
            C = C[:, keep]
            schedule.take(keep)

    full.iter = int(iters.max())
    primal = (C_full * full.X[L.ny:]).sum(axis=0)
    if prox is not None:
        primal = np.full(B, np.nan)
    dual = np.full(B, np.nan)
    lower = primal.copy()
    need = np.array([
        (s == "converged" and cfg.certify) or (s == "max_iter" and cfg.early_stop_certificate)
        for s in status
    ])
    if need.any() and prox is None:
        sub = np.flatnonzero(need)
        dual[sub] = dual_certificate(full.take(sub), problem, input, bounds, C_full[:, sub], cfg)
    for b, s in enumerate(status):
        if s == "converged":
            if cfg.certify and prox is None:
                lower[b] = min(primal[b], dual[b])
        elif cfg.early_stop_certificate and np.isfinite(dual[b]):
            status[b] = "certified_early_stop"
            lower[b] = dual[b]
        else:
            lower[b] = -np.inf
    return Certificate(
        lower_bound=lower,
        primal=primal,
        dual_bound=dual,
        status=status,
        iters=iters,
        final_residuals=fin,
        rho_trace=rho_trace,
        trace=trace,
        state=full if keep_state else None,
    )


TRACE_HEADER = ["iter", "r_p", "r_d", "eps_p", "eps_d", "rho", "objective"]


def write_trace_csv(cert: Certificate, path) -> None:
    """Residual trace; batched certificates get an extra trailing ``entry`` column."""
    batched = len(cert.trace) > 1
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_HEADER + (["entry"] if batched else []))
        for b, rows in enumerate(cert.trace):
            for row in rows:
                vals = [row[0]] + [repr(float(v)) for v in row[1:]]
                w.writerow(vals + ([b] if batched else []))
