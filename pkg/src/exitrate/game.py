"""Noncooperative exit-rate game over bounded per-player gain boxes.

Each player owns one input channel and tries to minimize the exit rate of
the closed loop through their own gain matrix while the others stay fixed.
Best responses use derivative-free coordinate pattern search (the rate is
only piecewise smooth in the gains: the hovering point can jump between
boundary faces); round-robin best-response iteration stops when no player
can improve by more than the threshold eta, i.e. at an eta-equilibrium.
Everything is deterministic given the configuration and its seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import action
from .model import DomainSpec, FeedbackProfile, ModelError, MultiChannelSystem


class GameError(ValueError):
    """Invalid game configuration or out-of-bounds profile."""


@dataclass(frozen=True)
class GameConfig:
    """Gain boxes, rate-evaluation options, and iteration controls.

    Gain bounds are mandatory: without them the game is degenerate (any
    player could drive the closed loop to zero drift and rate 0).
    """

    bounds: tuple[tuple[np.ndarray, np.ndarray], ...]
    rate_schedule: tuple[float, ...] = (30.0, 60.0, 120.0)
    rate_n_per_t: float = 25.0
    optim: action.OptimOptions = action.OptimOptions(n_starts=3)
    eta: float = 1e-3
    max_rounds: int = 20
    probe_count: int = 32
    seed: int = 0

    def __post_init__(self):
        parsed = []
        for i, (lo, hi) in enumerate(self.bounds):
            lo = np.atleast_2d(np.asarray(lo, dtype=float))
            hi = np.atleast_2d(np.asarray(hi, dtype=float))
            if lo.shape != hi.shape or not np.all(hi >= lo):
                raise GameError(f"gain bounds for player {i} do not form a box")
            parsed.append((lo, hi))
        object.__setattr__(self, "bounds", tuple(parsed))
        if not self.eta > 0:
            raise GameError("eta must be positive")

    def contains(self, prof: FeedbackProfile) -> bool:
        return all(
            np.all(k >= lo - 1e-12) and np.all(k <= hi + 1e-12)
            for k, (lo, hi) in zip(prof.gains, self.bounds)
        )


@dataclass(frozen=True)
class MoveRecord:
    round: int
    player: int
    old_rate: float
    new_rate: float
    gain: np.ndarray


@dataclass(frozen=True)
class BestResponseResult:
    gain: np.ndarray
    rate: float
    evaluations: int
    no_influence: bool


@dataclass(frozen=True)
class GameResult:
    profile: FeedbackProfile
    history: tuple[MoveRecord, ...]
    converged: bool
    rates: tuple[float, ...]
    residual: float | None
    rounds: int


class _RateCache:
    """Memoized exit-rate evaluation keyed by the exact gain bytes."""

    def __init__(self, sys: MultiChannelSystem, dom: DomainSpec, cfg: GameConfig):
        self.sys = sys
        self.dom = dom
        self.cfg = cfg
        self.x0 = _default_start(dom)
        self._store: dict[tuple, float] = {}
        self.evaluations = 0

    def rate_of(self, prof: FeedbackProfile) -> float:
        key = tuple(np.asarray(g, dtype=float).tobytes() for g in prof.gains)
        if key not in self._store:
            est = action.rate(
                self.sys, prof, self.dom, self.x0,
                self.cfg.rate_schedule, self.cfg.rate_n_per_t, self.cfg.optim,
            )
            self._store[key] = est.value
            self.evaluations += 1
        return self._store[key]


def _default_start(dom: DomainSpec) -> np.ndarray:
    lo, hi = dom.bounding_box()
    return dom.project(0.5 * (lo + hi))


def player_rate(
    sys: MultiChannelSystem,
    dom: DomainSpec,
    prof: FeedbackProfile,
    i: int,
    cfg: GameConfig,
) -> float:
    """Exit rate seen by player i under the substituted profile (pure function)."""
    if not 0 <= i < prof.n:
        raise GameError(f"player index {i} out of range")
    prof.validate_for(sys)
    return _RateCache(sys, dom, cfg).rate_of(prof)


def _clamp(gain: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    return np.clip(gain, lo, hi)


def best_response(
    sys: MultiChannelSystem,
    dom: DomainSpec,
    prof: FeedbackProfile,
    i: int,
    cfg: GameConfig,
    _cache: _RateCache | None = None,
) -> BestResponseResult:
    """Coordinate pattern search over player i's gain entries.

    Polls each entry at +/- the current step (entries in lexicographic
    order, the decrease direction first, movements clipped to the box) and
    moves to the best strictly improving poll; ties break toward the earlier
    enumerated (lexicographically smaller) perturbation.  Steps start at a
    quarter of the box width and halve until below 1e-4 of it.
    """
    if not 0 <= i < prof.n:
        raise GameError(f"player index {i} out of range")
    cache = _cache if _cache is not None else _RateCache(sys, dom, cfg)
    lo, hi = cfg.bounds[i]
    width = hi - lo
    gain = _clamp(np.asarray(prof.gains[i], dtype=float), lo, hi)
    no_influence = not np.any(sys.B[i])
    evals0 = cache.evaluations
    r_best = cache.rate_of(prof.replace_gain(i, gain))
    if no_influence:
        return BestResponseResult(gain=gain, rate=r_best, evaluations=cache.evaluations - evals0,
                                  no_influence=True)
    frac = 0.25
    entries = list(np.ndindex(gain.shape))
    while frac >= 1e-4:
        step = frac * width
        best_cand = None
        best_r = r_best
        for e in entries:
            if width[e] == 0.0:
                continue
            for sign in (-1.0, 1.0):
                cand = gain.copy()
                cand[e] = np.clip(gain[e] + sign * step[e], lo[e], hi[e])
                if cand[e] == gain[e]:
                    continue
                r = cache.rate_of(prof.replace_gain(i, cand))
                if r < best_r:
                    best_r = r
                    best_cand = cand
        if best_cand is None:
            frac *= 0.5
        else:
            gain, r_best = best_cand, best_r
    return BestResponseResult(
        gain=gain, rate=r_best, evaluations=cache.evaluations - evals0, no_influence=False
    )


def nash_iterate(
    sys: MultiChannelSystem,
    dom: DomainSpec,
    init: FeedbackProfile,
    cfg: GameConfig,
    compute_residual: bool = True,
) -> GameResult:
    """Round-robin best responses until no player improves by more than eta."""
    init.validate_for(sys)
    if not cfg.contains(init):
        raise GameError("initial profile violates the gain bounds")
    cache = _RateCache(sys, dom, cfg)
    prof = init
    history: list[MoveRecord] = []
    converged = False
    rounds = 0
    for rnd in range(1, cfg.max_rounds + 1):
        rounds = rnd
        best_improvement = 0.0
        for i in range(prof.n):
            r_old = cache.rate_of(prof)
            br = best_response(sys, dom, prof, i, cfg, _cache=cache)
            improvement = r_old - br.rate
            if improvement > cfg.eta:
                prof = prof.replace_gain(i, br.gain)
                history.append(MoveRecord(round=rnd, player=i, old_rate=r_old,
                                          new_rate=br.rate, gain=br.gain))
            best_improvement = max(best_improvement, improvement)
        if best_improvement <= cfg.eta:
            converged = True
            break
    final_rate = cache.rate_of(prof)
    rates = tuple(final_rate for _ in range(prof.n))
    residual = None
    if compute_residual:
        residual = nash_residual(sys, dom, prof, cfg, _cache=cache)
    return GameResult(
        profile=prof, history=tuple(history), converged=converged,
        rates=rates, residual=residual, rounds=rounds,
    )


def nash_residual(
    sys: MultiChannelSystem,
    dom: DomainSpec,
    prof: FeedbackProfile,
    cfg: GameConfig,
    _cache: _RateCache | None = None,
) -> float:
    """Best unilateral improvement available at the profile (0 at equilibrium).

    For each player, polls probe_count random in-bounds gains plus a fresh
    best response; the residual is the largest rate drop any player could
    realize.  At most eta certifies an eta-equilibrium at probe resolution.
    """
    prof.validate_for(sys)
    cache = _cache if _cache is not None else _RateCache(sys, dom, cfg)
    worst = 0.0
    for i in range(prof.n):
        r_here = cache.rate_of(prof)
        lo, hi = cfg.bounds[i]
        rng = np.random.default_rng([cfg.seed, i])
        best_alt = best_response(sys, dom, prof, i, cfg, _cache=cache).rate
        for _ in range(cfg.probe_count):
            probe = rng.uniform(lo, hi)
            best_alt = min(best_alt, cache.rate_of(prof.replace_gain(i, probe)))
        worst = max(worst, max(0.0, r_here - best_alt))
    return worst


def ekeland_gap(
    sys: MultiChannelSystem,
    dom: DomainSpec,
    prof_a: FeedbackProfile,
    prof_b: FeedbackProfile,
    cfg: GameConfig,
) -> float:
    """sum_i [ r_i(a) - r_i(b_i, a_-i) ]: how much profile a's players would
    gain (negative) or lose by deviating one at a time to profile b."""
    if prof_a.n != prof_b.n:
        raise ModelError("profiles have different player counts")
    cache = _RateCache(sys, dom, cfg)
    total = 0.0
    for i in range(prof_a.n):
        total += cache.rate_of(prof_a) - cache.rate_of(prof_a.replace_gain(i, prof_b.gains[i]))
    return total
