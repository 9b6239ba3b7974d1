"""Deterministic closed-loop flow and its exit behavior (the zero-noise backbone).

The closed loop is x' = (A + sum_i B_i K_i) x, integrated with fixed-step
classical Runge-Kutta.  Fixed steps keep grid placement reproducible, which
the exit-time bisection and kernel computations rely on; sub-step excursions
shorter than dt are missed by design (see the dt-halving convergence test).
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .model import DomainSpec, FeedbackProfile, ModelError, MultiChannelSystem

BOUNDARY_TOL = 1e-10


class DynamicsError(RuntimeError):
    """Numerical failure while integrating the deterministic flow."""


@dataclass(frozen=True)
class Trajectory:
    """A time-uniformly sampled state path: times[0] = 0, states[0] = x0."""

    times: np.ndarray
    states: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        x = np.atleast_2d(np.asarray(self.states, dtype=float))
        if t.ndim != 1 or len(t) != len(x):
            raise ModelError("inconsistent dimensions: times and states differ in length")
        if len(t) and (t[0] != 0.0 or np.any(np.diff(t) <= 0)):
            raise ModelError("times must start at 0 and be strictly increasing")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "states", x)

    @property
    def final_state(self) -> np.ndarray:
        return self.states[-1]

    def as_csv(self) -> str:
        """CSV with header t,x1,...,xd, one row per grid point."""
        d = self.states.shape[1]
        buf = io.StringIO()
        buf.write("t," + ",".join(f"x{i + 1}" for i in range(d)) + "\n")
        for t, row in zip(self.times, self.states):
            buf.write(format(t, ".17g") + "," + ",".join(format(v, ".17g") for v in row) + "\n")
        return buf.getvalue()


def closed_loop_matrix(sys: MultiChannelSystem, prof: FeedbackProfile) -> np.ndarray:
    """A + sum_i B_i K_i (the empty sum leaves A itself)."""
    prof.validate_for(sys)
    acl = sys.A.copy()
    for b, k in zip(sys.B, prof.gains):
        acl += b @ k
    return acl


def _rk4_step(acl: np.ndarray, x: np.ndarray, h: float) -> np.ndarray:
    # overflow here is legitimate divergence; callers test finiteness
    with np.errstate(over="ignore", invalid="ignore"):
        k1 = acl @ x
        k2 = acl @ (x + 0.5 * h * k1)
        k3 = acl @ (x + 0.5 * h * k2)
        k4 = acl @ (x + h * k3)
        return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def flow(
    sys: MultiChannelSystem,
    prof: FeedbackProfile,
    x0,
    t_end: float,
    dt: float,
) -> Trajectory:
    """Integrate the closed loop from x0 over [0, t_end] with step dt (RK4).

    The final step is shortened so the grid ends exactly at t_end.
    """
    if not 0 < dt <= t_end:
        raise ValueError("require 0 < dt <= t_end")
    acl = closed_loop_matrix(sys, prof)
    x = np.asarray(x0, dtype=float).ravel()
    if x.size != sys.d:
        raise ModelError(f"inconsistent dimensions: x0 has {x.size} entries, expected {sys.d}")
    n_full = int(np.floor(t_end / dt + 1e-12))
    times = [0.0]
    states = [x]
    t = 0.0
    for _ in range(n_full):
        x = _rk4_step(acl, x, dt)
        t += dt
        if not np.all(np.isfinite(x)):
            raise DynamicsError("trajectory diverged")
        times.append(t)
        states.append(x)
    rem = t_end - t
    if rem > 1e-12 * max(1.0, t_end):
        x = _rk4_step(acl, x, rem)
        if not np.all(np.isfinite(x)):
            raise DynamicsError("trajectory diverged")
        times.append(t_end)
        states.append(x)
    return Trajectory(np.asarray(times), np.asarray(states))


def deterministic_exit_time(
    sys: MultiChannelSystem,
    prof: FeedbackProfile,
    dom: DomainSpec,
    x0,
    t_max: float,
    dt: float,
) -> float | None:
    """First time the flow leaves the closed domain, or None up to t_max.

    Crossings are located on the integration grid and refined by bisection on
    the closure-membership indicator down to a bracket of BOUNDARY_TOL.
    """
    x = np.asarray(x0, dtype=float).ravel()
    if not dom.closure_contains(x, tol=BOUNDARY_TOL):
        raise ModelError("x0 lies outside the closed domain")
    acl = closed_loop_matrix(sys, prof)
    n_steps = int(np.ceil(t_max / dt - 1e-12))
    t = 0.0
    for _ in range(n_steps):
        h = min(dt, t_max - t)
        x_next = _rk4_step(acl, x, h)
        if not np.all(np.isfinite(x_next)):
            raise DynamicsError("trajectory diverged")
        if not dom.closure_contains(x_next):
            return t + _bisect_crossing(acl, dom, x, h)
        x = x_next
        t += h
    return None


def _bisect_crossing(acl, dom, x_inside: np.ndarray, h: float) -> float:
    # invariant: state at offset lo is inside the closure, at hi it is outside
    lo, hi = 0.0, h
    while hi - lo > BOUNDARY_TOL:
        mid = 0.5 * (lo + hi)
        if dom.closure_contains(_rk4_step(acl, x_inside, mid)):
            lo = mid
        else:
            hi = mid
    return hi
