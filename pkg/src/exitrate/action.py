"""Path-space action evaluation and minimization over domain-confined paths.

The cost of a discrete path is the midpoint-rule quadrature of the squared
drift residual, weighted by the inverse diffusion matrix:

    S = 1/2 * sum_k  v_k^T (sigma sigma^T)^-1 v_k * dt,
    v_k = (x_{k+1} - x_k)/dt - A_cl (x_k + x_{k+1})/2.

For linear closed loops this is a convex quadratic in the free points, and
projected gradient descent (Barzilai-Borwein steps, Armijo backtracking,
exact projection onto boxes and balls) reaches the constrained minimum.  The
per-time minimum over growing horizons estimates the asymptotic exit rate;
the constant-path ("hovering") minimum is its closed-form upper bound and
the oracle the optimizer is checked against.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dynamics import _rk4_step, closed_loop_matrix
from .model import DomainSpec, FeedbackProfile, ModelError, MultiChannelSystem

FEASIBILITY_TOL = 1e-9


class ActionError(RuntimeError):
    """Unrecoverable failure in a path optimization."""


@dataclass(frozen=True)
class DiscretePath:
    """Uniform sampling of a continuous path on [0, T]: N+1 points, d columns."""

    T: float
    points: np.ndarray

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        if pts.shape[0] < 2:
            raise ModelError("a path needs at least two points")
        if not self.T > 0:
            raise ModelError("path horizon must be positive")
        pts = pts.copy()
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "T", float(self.T))

    @property
    def N(self) -> int:
        return self.points.shape[0] - 1

    @property
    def dt(self) -> float:
        return self.T / self.N

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.N + 1)

    def feasible_in(self, dom: DomainSpec, tol: float = FEASIBILITY_TOL) -> bool:
        return bool(np.all(dom.closure_contains_batch(self.points, tol=tol)))

    def as_csv(self) -> str:
        d = self.points.shape[1]
        lines = ["t," + ",".join(f"x{i + 1}" for i in range(d))]
        for t, row in zip(self.times, self.points):
            lines.append(format(t, ".17g") + "," + ",".join(format(v, ".17g") for v in row))
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class RateEstimate:
    """An exit-rate value together with how it was obtained."""

    value: float
    method: str                     # path_opt | pde | mc | hover_oracle
    horizons_used: tuple[float, ...] = ()
    sequence: tuple[tuple[float, float, float], ...] = ()   # (T, S*, S*/T)
    diagnostics: dict = field(default_factory=dict)
    non_monotone: bool = False

    def __post_init__(self):
        if self.value < 0:
            raise ModelError("rate estimates are nonnegative")


@dataclass(frozen=True)
class OptimOptions:
    tol: float = 1e-8               # projected-gradient norm target
    max_iters: int = 50_000
    armijo: float = 1e-4
    n_starts: int = 8
    seed: int = 0


@dataclass(frozen=True)
class MinimizeResult:
    path: DiscretePath
    value: float
    converged: bool
    iterations: int
    grad_norm: float


def _residuals(acl: np.ndarray, pts: np.ndarray, dt: float) -> np.ndarray:
    mid = 0.5 * (pts[1:] + pts[:-1])
    return (pts[1:] - pts[:-1]) / dt - mid @ acl.T


def action_value(sys: MultiChannelSystem, prof: FeedbackProfile, path: DiscretePath) -> float:
    """Midpoint-rule action of the path against the closed-loop drift."""
    acl = closed_loop_matrix(sys, prof)
    v = _residuals(acl, path.points, path.dt)
    w = v @ sys.inv_diffusion
    return 0.5 * float(np.sum(v * w)) * path.dt


def action_gradient(
    sys: MultiChannelSystem,
    prof: FeedbackProfile,
    path: DiscretePath,
    fixed_end: bool = False,
) -> np.ndarray:
    """Exact gradient of the discrete action w.r.t. the movable points.

    Returned with the same shape as path.points; rows of points that are held
    fixed (the initial point, and the final one when fixed_end) are zero.
    """
    acl = closed_loop_matrix(sys, prof)
    pts = path.points
    dt = path.dt
    v = _residuals(acl, pts, dt)
    w = (v @ sys.inv_diffusion) * dt            # dS/dv_k
    half_at_w = 0.5 * (w @ acl)                 # (A_cl/2)^T M v dt, row-wise
    grad = np.zeros_like(pts)
    grad[1:] += w / dt - half_at_w
    grad[:-1] += -w / dt - half_at_w
    grad[0] = 0.0
    if fixed_end:
        grad[-1] = 0.0
    return grad


def _project_points(dom: DomainSpec, pts: np.ndarray, x0, x_end) -> np.ndarray:
    out = dom.project_batch(pts)
    out[0] = x0
    if x_end is not None:
        out[-1] = x_end
    return out


def minimize_action(
    sys: MultiChannelSystem,
    prof: FeedbackProfile,
    dom: DomainSpec,
    x0,
    x_end,
    T: float,
    N: int,
    opts: OptimOptions = OptimOptions(),
    initial: DiscretePath | None = None,
) -> MinimizeResult:
    """Projected gradient descent for the domain-confined action minimum.

    Returns a feasible path and its action: a certified upper bound on the
    true infimum (local optimality only; the caller multi-starts).  A run
    that exhausts max_iters reports converged=False with its best iterate.
    """
    acl = closed_loop_matrix(sys, prof)
    x0 = np.asarray(x0, dtype=float).ravel()
    if not dom.closure_contains(x0, tol=FEASIBILITY_TOL):
        raise ModelError("infeasible endpoint: x0 outside the closed domain")
    if x_end is not None:
        x_end = np.asarray(x_end, dtype=float).ravel()
        if not dom.closure_contains(x_end, tol=FEASIBILITY_TOL):
            raise ModelError("infeasible endpoint: x_end outside the closed domain")
    dt = T / N
    if initial is not None:
        if initial.N != N or abs(initial.T - T) > 1e-12 * max(1.0, T):
            raise ValueError("initial path grid does not match (T, N)")
        z = initial.points.copy()
    elif x_end is not None:
        z = np.linspace(x0, x_end, N + 1)
    else:
        z = np.tile(x0, (N + 1, 1))
    z = _project_points(dom, z, x0, x_end)

    w_metric = sys.inv_diffusion
    fixed_end = x_end is not None

    def value(pts):
        v = _residuals(acl, pts, dt)
        return 0.5 * float(np.sum(v * (v @ w_metric))) * dt

    def grad(pts):
        v = _residuals(acl, pts, dt)
        w = (v @ w_metric) * dt
        half = 0.5 * (w @ acl)
        g = np.zeros_like(pts)
        g[1:] += w / dt - half
        g[:-1] += -w / dt - half
        g[0] = 0.0
        if fixed_end:
            g[-1] = 0.0
        return g

    # curvature scale: leading Hessian eigenvalue ~ 4 * |W| / dt
    lw = float(np.linalg.eigvalsh(w_metric).max())
    alpha = dt / (4.0 * lw)
    f = value(z)
    g = grad(z)
    best_pts, best_f = z, f
    converged = False
    it = 0
    pg_norm = math.inf
    for it in range(1, opts.max_iters + 1):
        pg = z - _project_points(dom, z - g, x0, x_end)
        pg_norm = float(np.linalg.norm(pg))
        if pg_norm < opts.tol:
            converged = True
            break
        step = alpha
        for _ in range(60):
            cand = _project_points(dom, z - step * g, x0, x_end)
            f_cand = value(cand)
            dz = cand - z
            if f_cand <= f + opts.armijo * float(np.sum(g * dz)):
                break
            step *= 0.5
        else:
            break   # line search stalled at the current point
        g_cand = grad(cand)
        s = cand - z
        y = g_cand - g
        sy = float(np.sum(s * y))
        if sy > 1e-300:
            alpha = min(max(float(np.sum(s * s)) / sy, 1e-12), 1e12)
        z, f, g = cand, f_cand, g_cand
        if f < best_f:
            best_pts, best_f = z, f
    return MinimizeResult(
        path=DiscretePath(T, best_pts),
        value=best_f,
        converged=converged,
        iterations=it,
        grad_norm=pg_norm,
    )


def hovering_minimizer(
    sys: MultiChannelSystem,
    prof: FeedbackProfile,
    dom: DomainSpec,
    grid_resolution: int = 33,
) -> tuple[np.ndarray, float]:
    """Constant-path rate minimum over the closed domain and its minimizer.

    Scans a grid of the closure (lexicographically smallest grid minimizer on
    ties), then polishes with projected gradient descent on the quadratic.
    """
    acl = closed_loop_matrix(sys, prof)
    q_mat = acl.T @ sys.inv_diffusion @ acl
    pts = dom.grid_points(grid_resolution)
    vals = 0.5 * np.einsum("ij,jk,ik->i", pts, q_mat, pts)
    vmin = vals.min()
    ties = np.where(vals <= vmin * (1 + 1e-12) + 1e-300)[0]
    order = np.lexsort(pts[ties].T[::-1])       # lexicographic by coordinates
    x = pts[ties[order[0]]].copy()

    lmax = float(np.linalg.eigvalsh(q_mat).max())
    if lmax > 0:
        step = 1.0 / lmax
        for _ in range(500):
            x_new = dom.project(x - step * (q_mat @ x))
            if np.linalg.norm(x_new - x) < 1e-15:
                x = x_new
                break
            x = x_new
    return x, 0.5 * float(x @ q_mat @ x)


def hovering_rate_oracle(
    sys: MultiChannelSystem,
    prof: FeedbackProfile,
    dom: DomainSpec,
    grid_resolution: int = 33,
) -> float:
    """min over the closure of the per-time cost of resting at a point."""
    return hovering_minimizer(sys, prof, dom, grid_resolution)[1]


def _projected_flow_start(acl, dom, x0, T, N) -> np.ndarray:
    """Closed-loop flow sampled on the path grid, clamped into the closure."""
    dt = T / N
    pts = np.empty((N + 1, x0.size))
    pts[0] = x0
    x = x0.copy()
    for k in range(N):
        x = dom.project(_rk4_step(acl, x, dt))
        pts[k + 1] = x
    return pts


def _dilate(path: DiscretePath, T_new: float, N_new: int) -> np.ndarray:
    """Time-stretch a path onto a new horizon/grid (linear interpolation)."""
    t_old = path.times * (T_new / path.T)
    t_new = np.linspace(0.0, T_new, N_new + 1)
    cols = [np.interp(t_new, t_old, path.points[:, j]) for j in range(path.points.shape[1])]
    return np.stack(cols, axis=1)


def rate(
    sys: MultiChannelSystem,
    prof: FeedbackProfile,
    dom: DomainSpec,
    x0,
    T_schedule,
    N_per_T: float,
    opts: OptimOptions = OptimOptions(),
) -> RateEstimate:
    """Per-time minimal action over an increasing horizon schedule.

    Each horizon warm-starts from the previous optimum time-dilated; the
    first horizon multi-starts from constant paths (the hovering minimizer
    plus seeded random domain points) and the projected deterministic flow.
    The final-horizon value is returned; the full (T, S*, S*/T) sequence is
    attached so callers can judge convergence of the limit themselves.
    """
    T_schedule = [float(t) for t in T_schedule]
    if len(T_schedule) < 3 or any(b <= a for a, b in zip(T_schedule, T_schedule[1:])):
        raise ValueError("T_schedule must be increasing with at least 3 entries")
    x0 = np.asarray(x0, dtype=float).ravel()
    acl = closed_loop_matrix(sys, prof)
    hover_x, _ = hovering_minimizer(sys, prof, dom)
    rng = np.random.default_rng(opts.seed)
    lo, hi = dom.bounding_box()

    sequence = []
    diagnostics = {"iterations": [], "grad_norms": []}
    best = None
    failures = 0
    for idx, T in enumerate(T_schedule):
        N = max(int(round(N_per_T * T)), 8)
        starts: list[np.ndarray] = []
        if idx == 0:
            starts.append(_projected_flow_start(acl, dom, x0, T, N))
            starts.append(np.tile(hover_x, (N + 1, 1)))
            for _ in range(max(opts.n_starts - 2, 0)):
                pt = dom.project(rng.uniform(lo, hi))
                starts.append(np.tile(pt, (N + 1, 1)))
        else:
            starts.append(_dilate(best.path, T, N))
            starts.append(np.tile(hover_x, (N + 1, 1)))
        results = []
        for s in starts:
            s[0] = x0
            res = minimize_action(
                sys, prof, dom, x0, None, T, N, opts,
                initial=DiscretePath(T, _project_points(dom, s, x0, None)),
            )
            results.append(res)
        best = min(results, key=lambda r: r.value)
        if not best.converged:
            failures += 1
        sequence.append((T, best.value, best.value / T))
        diagnostics["iterations"].append(best.iterations)
        diagnostics["grad_norms"].append(best.grad_norm)

    per_time = [row[2] for row in sequence]
    diffs = [b - a for a, b in zip(per_time, per_time[1:])]
    scale = max(1e-12, max(abs(v) for v in per_time))
    rising = any(dv > 1e-9 * scale for dv in diffs)
    falling = any(dv < -1e-9 * scale for dv in diffs)
    non_monotone = rising and falling
    diagnostics["unconverged_horizons"] = failures
    diagnostics["tail_slope"] = (
        (sequence[-1][1] - sequence[-2][1]) / (sequence[-1][0] - sequence[-2][0])
    )
    diagnostics["final_path"] = best.path
    return RateEstimate(
        value=max(per_time[-1], 0.0),
        method="path_opt",
        horizons_used=tuple(T_schedule),
        sequence=tuple(sequence),
        diagnostics=diagnostics,
        non_monotone=non_monotone,
    )


@dataclass(frozen=True)
class SensitivityResult:
    rate_inflated: RateEstimate
    rate_deflated: RateEstimate
    delta: float

    @property
    def gap(self) -> float:
        return abs(self.rate_inflated.value - self.rate_deflated.value)


def rate_domain_sensitivity(
    sys: MultiChannelSystem,
    prof: FeedbackProfile,
    dom: DomainSpec,
    x0,
    delta: float,
    T_schedule,
    N_per_T: float,
    opts: OptimOptions = OptimOptions(),
) -> SensitivityResult:
    """Rates on the inflated and deflated domains and their gap.

    The start point is projected into the deflated closure when deflation
    strands it outside.
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    dom_plus = dom.perturb(delta)
    dom_minus = dom.perturb(-delta)
    x0 = np.asarray(x0, dtype=float).ravel()
    r_plus = rate(sys, prof, dom_plus, x0, T_schedule, N_per_T, opts)
    r_minus = rate(sys, prof, dom_minus, dom_minus.project(x0), T_schedule, N_per_T, opts)
    return SensitivityResult(rate_inflated=r_plus, rate_deflated=r_minus, delta=delta)
