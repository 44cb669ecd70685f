"""Uniform periodic grid, domain partition, time grid and time windows.

The ambient space is the truncated line [-L, L) with periodic identification,
sampled at N equispaced nodes.  The interior region Omega and the exterior
observation windows W1, W2 are intervals whose closures must stay separated.
All L2 inner products over node index sets use weight h (rectangle rule), so
discrete adjointness identities downstream hold to roundoff.

All types here are immutable after construction and safe to share across
threads.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptySetError, OddPointCountError, OverlapError, SupportError

__all__ = [
    "Grid",
    "DomainPartition",
    "TimeGrid",
    "TimeWindow",
    "build_grid",
    "partition_domain",
    "build_time_grid",
    "make_time_window",
    "trapezoid_weights",
]


@dataclass(frozen=True)
class Grid:
    """Uniform grid x_i = -L + i*h, i = 0..N-1, h = 2L/N, on [-L, L).

    n is the spatial dimension tag; the PDE pipeline runs with n = 1, higher
    n is only consulted by the counting operations.
    """

    L: float
    N: int
    n: int
    h: float
    x: np.ndarray

    def __post_init__(self):
        self.x.setflags(write=False)


@dataclass(frozen=True)
class DomainPartition:
    """Disjoint node index sets for Omega, W1, W2 and the remaining exterior.

    gap is the distance between the closure of Omega and the nearer window
    closure; node_gap is the minimum pairwise node distance and satisfies
    node_gap >= gap.
    """

    grid: Grid
    omega: tuple[float, float]
    w1: tuple[float, float]
    w2: tuple[float, float]
    idx_omega: np.ndarray
    idx_w1: np.ndarray
    idx_w2: np.ndarray
    idx_exterior_rest: np.ndarray
    gap: float
    node_gap: float

    def __post_init__(self):
        for a in (self.idx_omega, self.idx_w1, self.idx_w2, self.idx_exterior_rest):
            a.setflags(write=False)


@dataclass(frozen=True)
class TimeGrid:
    """Sample times t_m = m*dt, m = 0..M, dt = T/M."""

    T: float
    M: int
    dt: float
    t: np.ndarray

    def __post_init__(self):
        self.t.setflags(write=False)


@dataclass(frozen=True)
class TimeWindow:
    """Sampled C^2 window chi compactly supported in (0, T).

    chi, dchi, d2chi are samples of the window and its first two analytic
    derivatives on the time grid; norm_w2inf bounds max(|chi|, |chi'|, |chi''|)
    over the support (dense sampling at 10^4 points plus the grid samples).
    """

    timegrid: TimeGrid
    shape: str
    support: tuple[float, float]
    chi: np.ndarray
    dchi: np.ndarray
    d2chi: np.ndarray
    norm_w2inf: float

    def __post_init__(self):
        for a in (self.chi, self.dchi, self.d2chi):
            a.setflags(write=False)


def build_grid(L: float, N: int, n: int = 1) -> Grid:
    """Build the uniform periodic grid on [-L, L).

    N must be even (DFT symmetry convention) and at least 8.
    """
    if N < 8 or N % 2 != 0:
        raise OddPointCountError(f"N must be even and >= 8, got {N}")
    if L <= 0:
        raise ValueError(f"L must be positive, got {L}")
    if n < 1:
        raise ValueError(f"dimension must be >= 1, got {n}")
    h = 2.0 * L / N
    x = -L + h * np.arange(N)
    return Grid(L=float(L), N=int(N), n=int(n), h=h, x=x)


def _nodes_in(grid: Grid, interval) -> np.ndarray:
    a, b = interval
    # Half-open membership keeps adjacent intervals exactly disjoint.
    return np.nonzero((grid.x >= a) & (grid.x < b))[0]


def partition_domain(grid: Grid, omega, w1, w2) -> DomainPartition:
    """Partition grid nodes into Omega, W1, W2 and the remaining exterior.

    Intervals must lie inside (-L, L) and the closure of Omega must be
    disjoint from the closures of W1 and W2.
    """
    intervals = {"omega": tuple(map(float, omega)), "w1": tuple(map(float, w1)),
                 "w2": tuple(map(float, w2))}
    for name, (a, b) in intervals.items():
        if not (-grid.L < a < b < grid.L):
            raise ValueError(f"{name}={a, b} not inside (-L, L) = ({-grid.L}, {grid.L})")
    oa, ob = intervals["omega"]
    for name in ("w1", "w2"):
        a, b = intervals[name]
        if max(oa, a) <= min(ob, b):  # closed intervals intersect
            raise OverlapError(f"closure of omega {oa, ob} meets closure of {name} {a, b}")

    idx = {name: _nodes_in(grid, iv) for name, iv in intervals.items()}
    for name, ids in idx.items():
        if ids.size == 0:
            raise EmptySetError(f"{name}={intervals[name]} captures no grid node")

    ext_rest = np.setdiff1d(
        np.arange(grid.N),
        np.concatenate([idx["omega"], idx["w1"], idx["w2"]]),
    )

    def interval_dist(p, q):
        return max(p[0] - q[1], q[0] - p[1], 0.0)

    gap = min(interval_dist(intervals["omega"], intervals["w1"]),
              interval_dist(intervals["omega"], intervals["w2"]))
    xo = grid.x[idx["omega"]]
    node_gap = min(
        float(np.abs(xo[:, None] - grid.x[idx["w1"]][None, :]).min()),
        float(np.abs(xo[:, None] - grid.x[idx["w2"]][None, :]).min()),
    )
    return DomainPartition(
        grid=grid,
        omega=intervals["omega"],
        w1=intervals["w1"],
        w2=intervals["w2"],
        idx_omega=idx["omega"],
        idx_w1=idx["w1"],
        idx_w2=idx["w2"],
        idx_exterior_rest=ext_rest,
        gap=gap,
        node_gap=node_gap,
    )


def build_time_grid(T: float, M: int) -> TimeGrid:
    if T <= 0 or M < 2:
        raise ValueError(f"need T > 0 and M >= 2, got T={T}, M={M}")
    dt = T / M
    t = dt * np.arange(M + 1)
    return TimeGrid(T=float(T), M=int(M), dt=dt, t=t)


def trapezoid_weights(timegrid: TimeGrid) -> np.ndarray:
    """Trapezoid-rule weights on the time samples (dt at interior, dt/2 at ends)."""
    w = np.full(timegrid.M + 1, timegrid.dt)
    w[0] *= 0.5
    w[-1] *= 0.5
    return w


def _sine_squared(tau, ell):
    # tau in [0, ell]; window sin^2(pi tau / ell)
    w = np.pi / ell
    chi = np.sin(w * tau) ** 2
    dchi = w * np.sin(2.0 * w * tau)
    d2chi = 2.0 * w**2 * np.cos(2.0 * w * tau)
    return chi, dchi, d2chi


def _bump(tau, ell):
    # tau in [0, ell]; C-infinity bump exp(1 - 1/(1 - y^2)), y = 2 tau/ell - 1
    y = 2.0 * tau / ell - 1.0
    y = np.clip(y, -1.0, 1.0)
    inside = np.abs(y) < 1.0
    chi = np.zeros_like(y)
    dchi = np.zeros_like(y)
    d2chi = np.zeros_like(y)
    yi = y[inside]
    g = 1.0 - yi**2
    e = np.exp(1.0 - 1.0 / g)
    dy = 2.0 / ell
    # d/dy exp(1 - 1/g) = e * (-2y/g^2); second derivative by product rule.
    chi[inside] = e
    dchi[inside] = e * (-2.0 * yi / g**2) * dy
    d2chi[inside] = e * ((4.0 * yi**2 / g**4) - (2.0 / g**2) - (8.0 * yi**2 / g**3)) * dy**2
    return chi, dchi, d2chi


_SHAPES = {"sine-squared": _sine_squared, "bump": _bump}


def make_time_window(timegrid: TimeGrid, shape: str, support) -> TimeWindow:
    """Sample a compactly supported window chi on the time grid.

    shape is 'sine-squared' or 'bump'; support = (t_a, t_b) must satisfy
    0 < t_a < t_b < T so that chi and its derivatives vanish at t = 0 and T.
    """
    if shape not in _SHAPES:
        raise ValueError(f"unknown window shape {shape!r}; choose from {sorted(_SHAPES)}")
    ta, tb = float(support[0]), float(support[1])
    if not (0.0 < ta < tb < timegrid.T):
        raise SupportError(f"support [{ta}, {tb}] not inside (0, {timegrid.T})")
    ell = tb - ta
    fn = _SHAPES[shape]

    def sample(t):
        tau = np.asarray(t, dtype=float) - ta
        out = fn(np.clip(tau, 0.0, ell), ell)
        mask = (tau >= 0.0) & (tau <= ell)
        return tuple(np.where(mask, comp, 0.0) for comp in out)

    chi, dchi, d2chi = sample(timegrid.t)
    dense = np.linspace(ta, tb, 10_000)
    cd, dd, dd2 = sample(dense)
    norm = max(
        float(np.max(np.abs(cd))), float(np.max(np.abs(dd))), float(np.max(np.abs(dd2))),
        float(np.max(np.abs(chi))), float(np.max(np.abs(dchi))), float(np.max(np.abs(d2chi))),
    )
    return TimeWindow(
        timegrid=timegrid,
        shape=shape,
        support=(ta, tb),
        chi=chi,
        dchi=dchi,
        d2chi=d2chi,
        norm_w2inf=norm,
    )
