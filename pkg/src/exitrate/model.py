"""Problem data: system matrices, noise level, feedback gains, and domains.

A problem instance is a linear plant driven through n input channels,

    dx = A x dt + sum_i B_i u_i dt + sqrt(eps) * sigma dW,

with per-channel linear feedback u_i = K_i x, together with a bounded open
domain from which exit behavior is studied.  Diffusion matrices are constant
and uniformly elliptic; the smallest eigenvalue of sigma sigma^T is reported
as kappa and must stay above a numerical floor.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

ELLIPTICITY_FLOOR = 1e-12


class ModelError(ValueError):
    """Invalid problem data (shape mismatch, degenerate diffusion, bad domain)."""


class ConfigError(ValueError):
    """Malformed configuration document; message names the offending key."""


def _matrix(value, name: str) -> np.ndarray:
    m = np.asarray(value, dtype=float)
    if m.ndim != 2:
        raise ModelError(f"inconsistent dimensions: {name} must be a matrix, got ndim={m.ndim}")
    if not np.all(np.isfinite(m)):
        raise ModelError(f"{name} contains nonfinite entries")
    m.flags.writeable = False
    return m


def _vector(value, name: str) -> np.ndarray:
    v = np.asarray(value, dtype=float).ravel()
    if v.size == 0 or not np.all(np.isfinite(v)):
        raise ModelError(f"{name} must be a finite nonempty vector")
    v.flags.writeable = False
    return v


@dataclass(frozen=True)
class SystemReport:
    """Diagnostic from validate_system: ellipticity constant and any violations."""

    kappa: float
    issues: tuple[str, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.issues


@dataclass(frozen=True)
class MultiChannelSystem:
    """Plant matrices A, (B_1..B_n), constant diffusion sigma, and noise level.

    Construction validates shapes and uniform ellipticity of sigma sigma^T;
    invalid data raises ModelError.  Instances are immutable and safe to share
    across workers.
    """

    A: np.ndarray
    B: tuple[np.ndarray, ...]
    sigma: np.ndarray
    epsilon: float

    def __post_init__(self):
        object.__setattr__(self, "A", _matrix(self.A, "A"))
        object.__setattr__(self, "B", tuple(_matrix(b, f"B[{i}]") for i, b in enumerate(self.B)))
        object.__setattr__(self, "sigma", _matrix(self.sigma, "sigma"))
        object.__setattr__(self, "epsilon", float(self.epsilon))
        report = _diagnose(self.A, self.B, self.sigma, self.epsilon)
        if not report.ok:
            raise ModelError("; ".join(report.issues))

    @property
    def d(self) -> int:
        return self.A.shape[0]

    @property
    def n(self) -> int:
        return len(self.B)

    @property
    def input_dims(self) -> tuple[int, ...]:
        return tuple(b.shape[1] for b in self.B)

    @cached_property
    def diffusion(self) -> np.ndarray:
        """sigma sigma^T (constant by the data model)."""
        a = self.sigma @ self.sigma.T
        a.flags.writeable = False
        return a

    @cached_property
    def inv_diffusion(self) -> np.ndarray:
        """(sigma sigma^T)^-1, the metric weighting path residuals."""
        w = np.linalg.inv(self.diffusion)
        w = 0.5 * (w + w.T)
        w.flags.writeable = False
        return w

    def with_epsilon(self, epsilon: float) -> "MultiChannelSystem":
        return MultiChannelSystem(self.A, self.B, self.sigma, epsilon)


def _diagnose(A, B, sigma, epsilon) -> SystemReport:
    issues = []
    d = A.shape[0]
    if A.shape != (d, d):
        issues.append(f"inconsistent dimensions: A is {A.shape}, expected square")
    if sigma.shape != (d, d):
        issues.append(f"inconsistent dimensions: sigma is {sigma.shape}, expected ({d}, {d})")
    for i, b in enumerate(B):
        if b.shape[0] != d:
            issues.append(f"inconsistent dimensions: B[{i}] has {b.shape[0]} rows, expected {d}")
    if not epsilon > 0:
        issues.append(f"epsilon must be positive, got {epsilon}")
    kappa = float("nan")
    if sigma.shape == (d, d):
        kappa = float(np.linalg.eigvalsh(sigma @ sigma.T).min())
        if kappa <= ELLIPTICITY_FLOOR:
            issues.append(f"ellipticity violated: least eigenvalue of sigma sigma^T is {kappa:.3e}")
    return SystemReport(kappa=kappa, issues=tuple(issues))


def validate_system(sys: MultiChannelSystem) -> SystemReport:
    """Report kappa (least eigenvalue of sigma sigma^T) and shape consistency."""
    return _diagnose(sys.A, sys.B, sys.sigma, sys.epsilon)


@dataclass(frozen=True)
class FeedbackProfile:
    """An n-tuple of constant gain matrices K_i, the i-th of shape r_i x d."""

    gains: tuple[np.ndarray, ...]

    def __post_init__(self):
        object.__setattr__(
            self, "gains", tuple(_matrix(k, f"gains[{i}]") for i, k in enumerate(self.gains))
        )

    @property
    def n(self) -> int:
        return len(self.gains)

    def validate_for(self, sys: MultiChannelSystem) -> None:
        if self.n != sys.n:
            raise ModelError(f"inconsistent dimensions: {self.n} gains for {sys.n} channels")
        for i, (k, r) in enumerate(zip(self.gains, sys.input_dims)):
            if k.shape != (r, sys.d):
                raise ModelError(
                    f"inconsistent dimensions: gains[{i}] is {k.shape}, expected ({r}, {sys.d})"
                )

    def replace_gain(self, i: int, gain) -> "FeedbackProfile":
        gains = list(self.gains)
        gains[i] = gain
        return FeedbackProfile(tuple(gains))


@dataclass(frozen=True, eq=False)
class Box:
    """Axis-aligned open box (lower, upper), componentwise strict membership."""

    lower: np.ndarray
    upper: np.ndarray
    kind = "box"

    def __post_init__(self):
        object.__setattr__(self, "lower", _vector(self.lower, "lower"))
        object.__setattr__(self, "upper", _vector(self.upper, "upper"))
        if self.lower.shape != self.upper.shape:
            raise ModelError("inconsistent dimensions: box corners differ in length")
        if not np.all(self.upper > self.lower):
            raise ModelError("box has empty interior")
        # reference corners + net perturbation, so inflate/deflate round-trips
        # reproduce the original parameters exactly
        if not hasattr(self, "_base"):
            object.__setattr__(self, "_base", (self.lower, self.upper, 0.0))

    @property
    def dim(self) -> int:
        return self.lower.size

    def contains(self, x) -> bool:
        x = self._check(x)
        return bool(np.all(x > self.lower) and np.all(x < self.upper))

    def closure_contains(self, x, tol: float = 0.0) -> bool:
        x = self._check(x)
        return bool(np.all(x >= self.lower - tol) and np.all(x <= self.upper + tol))

    def contains_batch(self, X: np.ndarray) -> np.ndarray:
        return np.all((X > self.lower) & (X < self.upper), axis=-1)

    def closure_contains_batch(self, X: np.ndarray, tol: float = 0.0) -> np.ndarray:
        return np.all((X >= self.lower - tol) & (X <= self.upper + tol), axis=-1)

    def perturb(self, delta: float) -> "Box":
        ref_lo, ref_hi, net = self._base
        net = net + float(delta)
        lo = ref_lo if net == 0.0 else ref_lo - net
        hi = ref_hi if net == 0.0 else ref_hi + net
        if not np.all(hi > lo):
            raise ModelError("empty deflation")
        out = Box(lo, hi)
        object.__setattr__(out, "_base", (ref_lo, ref_hi, net))
        return out

    def project(self, x: np.ndarray) -> np.ndarray:
        return np.clip(x, self.lower, self.upper)

    def project_batch(self, X: np.ndarray) -> np.ndarray:
        return np.clip(X, self.lower, self.upper)

    def bounding_box(self) -> tuple[np.ndarray, np.ndarray]:
        return self.lower, self.upper

    def grid_points(self, resolution: int) -> np.ndarray:
        axes = [np.linspace(lo, hi, resolution) for lo, hi in zip(self.lower, self.upper)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def _check(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float).ravel()
        if x.size != self.dim:
            raise ModelError(f"inconsistent dimensions: point has {x.size} entries, domain has {self.dim}")
        return x


@dataclass(frozen=True, eq=False)
class Ball:
    """Open Euclidean ball of the given center and radius."""

    center: np.ndarray
    radius: float
    kind = "ball"

    def __post_init__(self):
        object.__setattr__(self, "center", _vector(self.center, "center"))
        object.__setattr__(self, "radius", float(self.radius))
        if not self.radius > 0:
            raise ModelError("ball has empty interior")
        if not hasattr(self, "_base"):
            object.__setattr__(self, "_base", (self.radius, 0.0))

    @property
    def dim(self) -> int:
        return self.center.size

    def contains(self, x) -> bool:
        x = self._check(x)
        return bool(np.linalg.norm(x - self.center) < self.radius)

    def closure_contains(self, x, tol: float = 0.0) -> bool:
        x = self._check(x)
        return bool(np.linalg.norm(x - self.center) <= self.radius + tol)

    def contains_batch(self, X: np.ndarray) -> np.ndarray:
        return np.linalg.norm(X - self.center, axis=-1) < self.radius

    def closure_contains_batch(self, X: np.ndarray, tol: float = 0.0) -> np.ndarray:
        return np.linalg.norm(X - self.center, axis=-1) <= self.radius + tol

    def perturb(self, delta: float) -> "Ball":
        ref_r, net = self._base
        net = net + float(delta)
        r = ref_r if net == 0.0 else ref_r + net
        if not r > 0:
            raise ModelError("empty deflation")
        out = Ball(self.center, r)
        object.__setattr__(out, "_base", (ref_r, net))
        return out

    def project(self, x: np.ndarray) -> np.ndarray:
        v = x - self.center
        nrm = np.linalg.norm(v)
        if nrm <= self.radius:
            return np.asarray(x, dtype=float)
        return self.center + v * (self.radius / nrm)

    def project_batch(self, X: np.ndarray) -> np.ndarray:
        v = X - self.center
        nrm = np.linalg.norm(v, axis=-1, keepdims=True)
        scale = np.where(nrm > self.radius, self.radius / np.maximum(nrm, 1e-300), 1.0)
        return self.center + v * scale

    def bounding_box(self) -> tuple[np.ndarray, np.ndarray]:
        return self.center - self.radius, self.center + self.radius

    def grid_points(self, resolution: int) -> np.ndarray:
        lo, hi = self.bounding_box()
        axes = [np.linspace(a, b, resolution) for a, b in zip(lo, hi)]
        mesh = np.meshgrid(*axes, indexing="ij")
        pts = np.stack([m.ravel() for m in mesh], axis=-1)
        return pts[self.closure_contains_batch(pts)]

    def _check(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float).ravel()
        if x.size != self.dim:
            raise ModelError(f"inconsistent dimensions: point has {x.size} entries, domain has {self.dim}")
        return x


DomainSpec = Box | Ball


def domain_contains(dom: DomainSpec, x) -> bool:
    """True iff x lies in the open domain."""
    return dom.contains(x)


def domain_perturb(dom: DomainSpec, delta: float) -> DomainSpec:
    """Inflate (delta > 0) or deflate (delta < 0) the domain, preserving its kind."""
    return dom.perturb(delta)


# ---------------------------------------------------------------------------
# JSON problem configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ProblemConfig:
    """A parsed problem document: system, domain, optional gains and extras."""

    system: MultiChannelSystem
    domain: DomainSpec
    profile: FeedbackProfile | None
    x0: np.ndarray | None
    gain_bounds: tuple[tuple[np.ndarray, np.ndarray], ...] | None
    options: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict)

    @property
    def config_hash(self) -> str:
        return config_hash(self.raw)


def config_hash(document: dict) -> str:
    """Stable sha256 of the canonical (sorted, compact) JSON encoding."""
    canon = json.dumps(document, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def domain_from_dict(doc: dict) -> DomainSpec:
    kind = doc.get("kind")
    if kind == "box":
        _require(doc, "lower", "domain.lower")
        _require(doc, "upper", "domain.upper")
        return Box(doc["lower"], doc["upper"])
    if kind == "ball":
        _require(doc, "center", "domain.center")
        _require(doc, "radius", "domain.radius")
        return Ball(doc["center"], doc["radius"])
    raise ConfigError(f'domain.kind must be "box" or "ball", got {kind!r}')


def domain_to_dict(dom: DomainSpec) -> dict:
    if isinstance(dom, Box):
        return {"kind": "box", "lower": dom.lower.tolist(), "upper": dom.upper.tolist()}
    return {"kind": "ball", "center": dom.center.tolist(), "radius": dom.radius}


def _require(doc: dict, key: str, path: str):
    if key not in doc:
        raise ConfigError(f"missing required key {path!r}")


def parse_config(document: dict) -> ProblemConfig:
    """Build a ProblemConfig from a decoded JSON document.

    Top-level keys: "A", "B", "sigma", "epsilon", "domain", optional "gains",
    "x0", "gain_bounds" and per-command option groups.  Raises ConfigError
    naming the offending key.
    """
    if not isinstance(document, dict):
        raise ConfigError("configuration root must be a JSON object")
    for key in ("A", "B", "sigma", "epsilon", "domain"):
        _require(document, key, key)
    try:
        system = MultiChannelSystem(
            A=document["A"], B=tuple(document["B"]),
            sigma=document["sigma"], epsilon=document["epsilon"],
        )
    except (ModelError, TypeError) as exc:
        raise ConfigError(f"invalid system data: {exc}") from exc
    try:
        domain = domain_from_dict(document["domain"])
    except ModelError as exc:
        raise ConfigError(f"invalid domain: {exc}") from exc
    if domain.dim != system.d:
        raise ConfigError(f"domain dimension {domain.dim} does not match state dimension {system.d}")

    profile = None
    if "gains" in document:
        try:
            profile = FeedbackProfile(tuple(document["gains"]))
            profile.validate_for(system)
        except ModelError as exc:
            raise ConfigError(f"invalid gains: {exc}") from exc

    x0 = None
    if "x0" in document:
        x0 = np.asarray(document["x0"], dtype=float).ravel()
        if x0.size != system.d:
            raise ConfigError(f"x0 has {x0.size} entries, expected {system.d}")

    bounds = None
    if "gain_bounds" in document:
        raw_bounds = document["gain_bounds"]
        if len(raw_bounds) != system.n:
            raise ConfigError(f"gain_bounds lists {len(raw_bounds)} players, system has {system.n}")
        parsed = []
        for i, entry in enumerate(raw_bounds):
            _require(entry, "lower", f"gain_bounds[{i}].lower")
            _require(entry, "upper", f"gain_bounds[{i}].upper")
            lo = np.atleast_2d(np.asarray(entry["lower"], dtype=float))
            hi = np.atleast_2d(np.asarray(entry["upper"], dtype=float))
            r = system.input_dims[i]
            if lo.shape != (r, system.d) or hi.shape != (r, system.d):
                raise ConfigError(f"gain_bounds[{i}] shape mismatch: expected ({r}, {system.d})")
            if not np.all(hi >= lo):
                raise ConfigError(f"gain_bounds[{i}] has empty box (upper < lower)")
            parsed.append((lo, hi))
        bounds = tuple(parsed)

    known = {"A", "B", "sigma", "epsilon", "domain", "gains", "x0", "gain_bounds"}
    options = {k: v for k, v in document.items() if k not in known}
    return ProblemConfig(
        system=system, domain=domain, profile=profile, x0=x0,
        gain_bounds=bounds, options=options, raw=document,
    )


def load_config(path: str | Path) -> ProblemConfig:
    """Read and parse a JSON problem document from disk."""
    text = Path(path).read_text()
    try:
        document = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    return parse_config(document)
