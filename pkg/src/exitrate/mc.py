"""Monte Carlo realization of the perturbed dynamics: exit times, survival
probabilities, exit-rate slopes, mean exit times, and tube probabilities.

Noise streams are counter-based and per-path: path p of a run seeded with s
draws its Gaussians, in step order (d values per step), from a Philox
generator keyed by (s, p).  Values depend only on (seed, path, step), never
on how paths are chunked or batched, so path-level parallel schedules cannot
change any estimate and reruns are bit-identical.  Estimator reductions
happen once, over arrays indexed by path, with numpy's pairwise summation.

Exits are detected at grid resolution only: the first step k whose state
leaves the open domain gives tau = k*dt.  The O(sqrt(dt)) bias from missed
sub-step excursions is deliberate (no Brownian-bridge correction) and the
calling tolerances absorb it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dynamics import Trajectory, closed_loop_matrix
from .model import DomainSpec, FeedbackProfile, ModelError, MultiChannelSystem

_CHUNK = 4096   # paths simulated together; fixed constant, not a tuning knob
_BLOCK = 256    # steps drawn per path per noise block


class SimulationError(RuntimeError):
    """Estimator failure: diverged path, empty survivor set, bad grids."""


def path_generator(seed: int, path_index: int) -> np.random.Generator:
    """The noise stream of one path: Philox keyed by (seed, path index)."""
    key = np.array([seed, path_index], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


@dataclass(frozen=True)
class ExitSample:
    """One realized exit: tau and the first outside state, or censoring."""

    tau: float
    censored: bool
    exit_point: np.ndarray | None

    def __post_init__(self):
        if self.censored and self.exit_point is not None:
            raise ModelError("censored samples carry no exit point")


@dataclass(frozen=True)
class SurvivalEstimate:
    T: float
    p_hat: float
    half_width: float
    n_paths: int
    seed: int


@dataclass(frozen=True)
class ExitRateEstimate:
    """Least-squares slope of -log survival against the horizon."""

    lambda_hat: float
    eps_lambda: float
    fit_residual: float
    table: tuple[SurvivalEstimate, ...]
    n_paths: int
    seed: int


@dataclass(frozen=True)
class MeanExitEstimate:
    mean: float
    half_width: float
    censored_fraction: float
    t_max: float
    lower_bound_only: bool
    n_paths: int
    seed: int


@dataclass(frozen=True)
class TubeEstimate:
    p_hat: float
    half_width: float
    hits: int
    n_paths: int
    seed: int
    importance_sampling: bool


def _steps_for(T: float, dt: float) -> int:
    n = int(round(T / dt))
    if n < 1 or abs(n * dt - T) > 1e-9 * max(1.0, T):
        raise ValueError(f"horizon {T} is not a positive multiple of dt={dt}")
    return n


def simulate_sde(
    sys: MultiChannelSystem,
    prof: FeedbackProfile,
    x0,
    T: float,
    dt: float,
    seed: int,
    path_index: int = 0,
) -> Trajectory:
    """Euler-Maruyama path of the closed loop on the uniform grid over [0, T]."""
    acl = closed_loop_matrix(sys, prof)
    x = np.asarray(x0, dtype=float).ravel()
    if x.size != sys.d:
        raise ModelError(f"inconsistent dimensions: x0 has {x.size} entries, expected {sys.d}")
    n_steps = _steps_for(T, dt)
    gen = path_generator(seed, path_index)
    noise = gen.standard_normal(n_steps * sys.d).reshape(n_steps, sys.d)
    scale_t = math.sqrt(sys.epsilon * dt) * sys.sigma.T
    acl_t_dt = acl.T * dt
    states = np.empty((n_steps + 1, sys.d))
    states[0] = x
    for k in range(n_steps):
        x = x + x @ acl_t_dt + noise[k] @ scale_t
        if not np.all(np.isfinite(x)):
            raise SimulationError("path diverged")
        states[k + 1] = x
    return Trajectory(dt * np.arange(n_steps + 1), states)


def terminal_states(
    sys: MultiChannelSystem,
    prof: FeedbackProfile,
    x0,
    T: float,
    dt: float,
    n_paths: int,
    seed: int,
) -> np.ndarray:
    """States at time T of an ensemble of unconstrained paths (one row each)."""
    acl = closed_loop_matrix(sys, prof)
    x0 = np.asarray(x0, dtype=float).ravel()
    n_steps = _steps_for(T, dt)
    d = sys.d
    acl_t_dt = acl.T * dt
    scale_t = math.sqrt(sys.epsilon * dt) * sys.sigma.T
    out = np.empty((n_paths, d))
    for start in range(0, n_paths, _CHUNK):
        stop = min(start + _CHUNK, n_paths)
        gens = [path_generator(seed, p) for p in range(start, stop)]
        size = stop - start
        x = np.tile(x0, (size, 1))
        step = 0
        while step < n_steps:
            b = min(_BLOCK, n_steps - step)
            noise = np.empty((size, b * d))
            for j in range(size):
                noise[j] = gens[j].standard_normal(b * d)
            noise = noise.reshape(size, b, d)
            for s in range(b):
                x = x + x @ acl_t_dt + noise[:, s, :] @ scale_t
            step += b
        if not np.all(np.isfinite(x)):
            raise SimulationError("path diverged")
        out[start:stop] = x
    return out


def _ensemble_exit_steps(
    sys: MultiChannelSystem,
    prof: FeedbackProfile,
    dom: DomainSpec,
    x0,
    dt: float,
    t_max: float,
    n_paths: int,
    seed: int,
    want_points: bool = False,
):
    """Exit step per path (-1 when censored at t_max), optionally exit states.

    Vectorizes over paths in fixed chunks; per-path streams make the result
    independent of the chunking.
    """
    acl = closed_loop_matrix(sys, prof)
    x0 = np.asarray(x0, dtype=float).ravel()
    if not dom.contains(x0):
        raise ModelError("x0 lies outside the domain")
    n_steps = _steps_for(t_max, dt)
    d = sys.d
    acl_t_dt = acl.T * dt
    scale_t = math.sqrt(sys.epsilon * dt) * sys.sigma.T

    exit_steps = np.full(n_paths, -1, dtype=np.int64)
    exit_points = np.full((n_paths, d), np.nan) if want_points else None

    for start in range(0, n_paths, _CHUNK):
        stop = min(start + _CHUNK, n_paths)
        gens = [path_generator(seed, p) for p in range(start, stop)]
        size = stop - start
        x = np.tile(x0, (size, 1))
        alive_idx = np.arange(size)          # chunk-local indices still inside
        step = 0
        while alive_idx.size and step < n_steps:
            b = min(_BLOCK, n_steps - step)
            noise = np.empty((alive_idx.size, b * d))
            for j, li in enumerate(alive_idx):
                noise[j] = gens[li].standard_normal(b * d)
            noise = noise.reshape(alive_idx.size, b, d)
            xs = x[alive_idx]
            live = np.ones(alive_idx.size, dtype=bool)
            for s in range(b):
                upd = xs + xs @ acl_t_dt + noise[:, s, :] @ scale_t
                xs = np.where(live[:, None], upd, xs)
                inside = dom.contains_batch(xs)
                newly = live & ~inside
                if newly.any():
                    gexit = start + alive_idx[newly]
                    exit_steps[gexit] = step + s + 1
                    if want_points:
                        exit_points[gexit] = xs[newly]
                    live &= inside
            if not np.all(np.isfinite(xs[live])):
                raise SimulationError("path diverged")
            x[alive_idx] = xs
            alive_idx = alive_idx[live]
            step += b
    return exit_steps, exit_points


def sample_exit(
    sys: MultiChannelSystem,
    prof: FeedbackProfile,
    dom: DomainSpec,
    x0,
    dt: float,
    t_max: float,
    seed: int,
    path_index: int = 0,
) -> ExitSample:
    """One path's first-exit sample; equals path `path_index` of an ensemble run."""
    acl = closed_loop_matrix(sys, prof)
    x = np.asarray(x0, dtype=float).ravel()
    if not dom.contains(x):
        raise ModelError("x0 lies outside the domain")
    n_steps = _steps_for(t_max, dt)
    gen = path_generator(seed, path_index)
    acl_t_dt = acl.T * dt
    scale_t = math.sqrt(sys.epsilon * dt) * sys.sigma.T
    step = 0
    while step < n_steps:
        b = min(_BLOCK, n_steps - step)
        noise = gen.standard_normal(b * sys.d).reshape(b, sys.d)
        for s in range(b):
            x = x + x @ acl_t_dt + noise[s] @ scale_t
            if not np.all(np.isfinite(x)):
                raise SimulationError("path diverged")
            if not dom.contains(x):
                return ExitSample(tau=(step + s + 1) * dt, censored=False, exit_point=x)
        step += b
    return ExitSample(tau=t_max, censored=True, exit_point=None)


def survival_probability(
    sys: MultiChannelSystem,
    prof: FeedbackProfile,
    dom: DomainSpec,
    x0,
    T: float,
    dt: float,
    n_paths: int,
    seed: int,
) -> SurvivalEstimate:
    """Fraction of paths with tau > T, with a 95% normal-approximation half-width."""
    if n_paths < 100:
        raise ValueError("paths must be >= 100")
    if T == 0.0:
        return SurvivalEstimate(T=0.0, p_hat=1.0, half_width=0.0, n_paths=n_paths, seed=seed)
    exit_steps, _ = _ensemble_exit_steps(sys, prof, dom, x0, dt, T, n_paths, seed)
    return _survival_from_steps(exit_steps, T, dt, n_paths, seed)


def _survival_from_steps(exit_steps, T, dt, n_paths, seed) -> SurvivalEstimate:
    k = int(round(T / dt))
    survived = (exit_steps < 0) | (exit_steps > k)
    p = float(np.sum(survived)) / n_paths
    hw = 1.96 * math.sqrt(p * (1.0 - p) / n_paths)
    return SurvivalEstimate(T=T, p_hat=p, half_width=hw, n_paths=n_paths, seed=seed)


def exit_rate_mc(
    sys: MultiChannelSystem,
    prof: FeedbackProfile,
    dom: DomainSpec,
    x0,
    T_list,
    dt: float,
    n_paths: int,
    seed: int,
) -> ExitRateEstimate:
    """Slope of -log survival over the horizons, from one common-path ensemble.

    All horizons reuse the same simulated paths (common random numbers), so
    the survival table is antitone in T by construction.
    """
    T_list = sorted(float(t) for t in T_list)
    if len(T_list) < 2:
        raise ValueError("need at least two horizons")
    if n_paths < 100:
        raise ValueError("paths must be >= 100")
    exit_steps, _ = _ensemble_exit_steps(sys, prof, dom, x0, dt, max(T_list), n_paths, seed)
    table = tuple(_survival_from_steps(exit_steps, T, dt, n_paths, seed) for T in T_list)
    for row in table:
        if row.p_hat <= 0.0:
            raise SimulationError(
                f"horizon too long for sample size: no survivors at T={row.T}"
            )
    ts = np.array([row.T for row in table])
    ys = -np.log(np.array([row.p_hat for row in table]))
    design = np.stack([ts, np.ones_like(ts)], axis=1)
    coef, *_ = np.linalg.lstsq(design, ys, rcond=None)
    fit = design @ coef
    residual = float(np.sqrt(np.mean((ys - fit) ** 2)))
    lam = float(coef[0])
    return ExitRateEstimate(
        lambda_hat=lam,
        eps_lambda=sys.epsilon * lam,
        fit_residual=residual,
        table=table,
        n_paths=n_paths,
        seed=seed,
    )


def mean_exit_time(
    sys: MultiChannelSystem,
    prof: FeedbackProfile,
    dom: DomainSpec,
    x0,
    dt: float,
    t_max: float,
    n_paths: int,
    seed: int,
) -> MeanExitEstimate:
    """Sample mean of tau with censored paths counted at t_max and flagged."""
    exit_steps, _ = _ensemble_exit_steps(sys, prof, dom, x0, dt, t_max, n_paths, seed)
    taus = np.where(exit_steps < 0, t_max, exit_steps * dt)
    censored = float(np.sum(exit_steps < 0)) / n_paths
    mean = float(np.mean(taus))
    hw = 1.96 * float(np.std(taus, ddof=1)) / math.sqrt(n_paths) if n_paths > 1 else 0.0
    return MeanExitEstimate(
        mean=mean,
        half_width=hw,
        censored_fraction=censored,
        t_max=t_max,
        lower_bound_only=censored >= 0.5,
        n_paths=n_paths,
        seed=seed,
    )


# ---------------------------------------------------------------------------
# Tube probabilities around a reference path
# ---------------------------------------------------------------------------

def _reference_on_grid(reference, dt: float) -> tuple[np.ndarray, int]:
    """Reference states linearly interpolated onto the simulation grid.

    The simulation step must refine the reference grid (integer ratio).
    """
    ref_times = np.asarray(reference.times, dtype=float)
    ref_pts = np.atleast_2d(np.asarray(reference.points, dtype=float))
    dt_ref = ref_times[1] - ref_times[0]
    ratio = dt_ref / dt
    if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
        raise SimulationError("incompatible grids: simulation step must refine the reference grid")
    n_steps = _steps_for(float(ref_times[-1]), dt)
    grid_t = dt * np.arange(n_steps + 1)
    cols = [np.interp(grid_t, ref_times, ref_pts[:, j]) for j in range(ref_pts.shape[1])]
    return np.stack(cols, axis=1), n_steps


def tube_distances(
    sys: MultiChannelSystem,
    prof: FeedbackProfile,
    reference,
    dt: float,
    n_paths: int,
    seed: int,
) -> np.ndarray:
    """Per-path sup-norm distance to the reference over the common grid."""
    phi, n_steps = _reference_on_grid(reference, dt)
    acl = closed_loop_matrix(sys, prof)
    x0 = phi[0]
    d = sys.d
    acl_t_dt = acl.T * dt
    scale_t = math.sqrt(sys.epsilon * dt) * sys.sigma.T
    out = np.empty(n_paths)
    for start in range(0, n_paths, _CHUNK):
        stop = min(start + _CHUNK, n_paths)
        gens = [path_generator(seed, p) for p in range(start, stop)]
        size = stop - start
        x = np.tile(x0, (size, 1))
        dist = np.zeros(size)
        step = 0
        while step < n_steps:
            b = min(_BLOCK, n_steps - step)
            noise = np.empty((size, b * d))
            for j in range(size):
                noise[j] = gens[j].standard_normal(b * d)
            noise = noise.reshape(size, b, d)
            for s in range(b):
                x = x + x @ acl_t_dt + noise[:, s, :] @ scale_t
                dev = np.max(np.abs(x - phi[step + s + 1]), axis=1)
                np.maximum(dist, dev, out=dist)
            step += b
        out[start:stop] = dist
    return out


def tube_probability(
    sys: MultiChannelSystem,
    prof: FeedbackProfile,
    reference,
    delta: float,
    dt: float,
    n_paths: int,
    seed: int,
    importance: bool = False,
) -> TubeEstimate:
    """Probability the path stays within sup distance delta of the reference.

    The reference must start at the initial state; the distance is the max of
    |x - phi| over the common (simulation) grid.  With importance=True the
    proposal steers along the reference velocity and the estimate reweights
    each path by its exact discrete Girsanov likelihood ratio.
    """
    phi, n_steps = _reference_on_grid(reference, dt)
    if not np.all(np.isfinite(phi)):
        raise SimulationError("reference path has nonfinite entries")
    acl = closed_loop_matrix(sys, prof)
    d = sys.d
    x0 = phi[0]
    acl_t_dt = acl.T * dt
    eps = sys.epsilon
    scale_t = math.sqrt(eps * dt) * sys.sigma.T
    lam = sys.inv_diffusion
    lam_sig = lam @ sys.sigma                     # for the Girsanov cross term
    phi_dot = (phi[1:] - phi[:-1]) / dt           # proposal drift per interval

    total = 0.0
    total_sq = 0.0
    hits = 0
    weights_all = np.zeros(n_paths)
    for start in range(0, n_paths, _CHUNK):
        stop = min(start + _CHUNK, n_paths)
        gens = [path_generator(seed, p) for p in range(start, stop)]
        size = stop - start
        x = np.tile(x0, (size, 1))
        log_w = np.zeros(size)
        alive = np.ones(size, dtype=bool)
        step = 0
        while alive.any() and step < n_steps:
            b = min(_BLOCK, n_steps - step)
            idx = np.where(alive)[0]
            noise = np.empty((idx.size, b * d))
            for j, li in enumerate(idx):
                noise[j] = gens[li].standard_normal(b * d)
            noise = noise.reshape(idx.size, b, d)
            xs = x[idx]
            lw = log_w[idx]
            live = np.ones(idx.size, dtype=bool)
            for s in range(b):
                xi = noise[:, s, :]
                if importance:
                    u = phi_dot[step + s] - xs @ acl.T
                    upd = xs + (phi_dot[step + s] * dt) + xi @ scale_t
                    dlw = (
                        -(dt / (2.0 * eps)) * np.einsum("ij,jk,ik->i", u, lam, u)
                        - math.sqrt(dt / eps) * np.einsum("ij,jk,ik->i", u, lam_sig, xi)
                    )
                    lw = np.where(live, lw + dlw, lw)
                else:
                    upd = xs + xs @ acl_t_dt + xi @ scale_t
                xs = np.where(live[:, None], upd, xs)
                dev = np.max(np.abs(xs - phi[step + s + 1]), axis=1)
                live &= dev < delta
            x[idx] = xs
            log_w[idx] = lw
            alive[idx] = live
            step += b
        w = np.where(alive, np.exp(log_w) if importance else 1.0, 0.0)
        weights_all[start:stop] = w
        hits += int(np.sum(alive))
    total = float(np.sum(weights_all))
    total_sq = float(np.sum(weights_all**2))
    p = total / n_paths
    var = max(total_sq / n_paths - p * p, 0.0)
    hw = 1.96 * math.sqrt(var / n_paths)
    return TubeEstimate(
        p_hat=p, half_width=hw, hits=hits, n_paths=n_paths, seed=seed,
        importance_sampling=importance,
    )
