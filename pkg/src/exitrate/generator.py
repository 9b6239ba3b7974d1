"""Finite-difference discretization of the diffusion generator on a grid over
the domain, with zero boundary data, and its principal eigenvalue.

The generator is  L u = <A_cl x, grad u> + (eps/2) tr{sigma sigma^T hess u}.
Diffusion terms use second-order central differences (mixed terms by the
4-point cross stencil); the drift term is central-differenced except where
the mesh Peclet number |b_j| h_j / (eps a_jj) exceeds 1, where it switches to
first-order upwind so -L keeps nonnegative inverse-positivity structure.
Dirichlet rows are eliminated; ball domains are handled as masked boxes with
a staircase boundary (O(h) boundary error, documented).

The principal eigenvalue of -L is found by shifted inverse power iteration
with a sparse direct factorization, Rayleigh-quotient shift updates every
five iterations, and an explicit residual acceptance test.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .dynamics import closed_loop_matrix
from .model import Ball, Box, DomainSpec, FeedbackProfile, ModelError, MultiChannelSystem


class GeneratorError(RuntimeError):
    """Assembly or eigensolver failure."""


@dataclass(frozen=True)
class GridSpec:
    """Rectangular grid: bounding box corners and per-axis node counts."""

    lower: np.ndarray
    upper: np.ndarray
    counts: tuple[int, ...]

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float).ravel()
        hi = np.asarray(self.upper, dtype=float).ravel()
        counts = tuple(int(c) for c in self.counts)
        if lo.size != hi.size or lo.size != len(counts):
            raise ModelError("inconsistent dimensions in grid specification")
        if any(c < 5 for c in counts):
            raise ModelError("grid too coarse: need >= 3 interior nodes per axis")
        if not np.all(hi > lo):
            raise ModelError("grid box has empty interior")
        lo.flags.writeable = False
        hi.flags.writeable = False
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        object.__setattr__(self, "counts", counts)

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def spacing(self) -> np.ndarray:
        return (self.upper - self.lower) / (np.array(self.counts) - 1)

    def axes(self) -> list[np.ndarray]:
        return [np.linspace(a, b, c) for a, b, c in zip(self.lower, self.upper, self.counts)]

    def all_nodes(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    @staticmethod
    def for_domain(dom: DomainSpec, counts) -> "GridSpec":
        lo, hi = dom.bounding_box()
        if np.isscalar(counts):
            counts = (int(counts),) * lo.size
        return GridSpec(lo, hi, tuple(counts))


@dataclass(frozen=True)
class DiscreteOperator:
    """Sparse generator matrix restricted to the unknown (interior) nodes."""

    matrix: sp.csr_matrix
    grid: GridSpec | None = None
    coords: np.ndarray | None = None            # unknown-node coordinates
    unknown_flat: np.ndarray | None = None      # flat grid index per unknown
    upwind_fraction: float = 0.0
    is_m_matrix: bool = True

    @property
    def size(self) -> int:
        return self.matrix.shape[0]

    def apply(self, values: np.ndarray) -> np.ndarray:
        return self.matrix @ values


@dataclass(frozen=True)
class GridField:
    """Values on the unknown nodes of a grid (e.g. an eigenfunction)."""

    values: np.ndarray
    grid: GridSpec | None = None
    coords: np.ndarray | None = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if not np.all(np.isfinite(v)):
            raise ModelError("grid field contains nonfinite entries")
        object.__setattr__(self, "values", v)

    def as_csv(self) -> str:
        if self.coords is None:
            raise GeneratorError("field has no coordinates to export")
        d = self.coords.shape[1]
        lines = [",".join(f"x{i + 1}" for i in range(d)) + ",value"]
        for xy, v in zip(self.coords, self.values):
            lines.append(",".join(format(c, ".17g") for c in xy) + "," + format(v, ".17g"))
        return "\n".join(lines) + "\n"


def discretize_generator(
    sys: MultiChannelSystem,
    prof: FeedbackProfile,
    dom: DomainSpec,
    grid: GridSpec,
) -> DiscreteOperator:
    """Assemble L on the grid's interior unknowns with Dirichlet elimination."""
    if grid.dim != sys.d:
        raise ModelError("inconsistent dimensions: grid and system disagree")
    acl = closed_loop_matrix(sys, prof)
    a = sys.diffusion
    eps = sys.epsilon
    h = grid.spacing
    counts = np.array(grid.counts)
    d = grid.dim

    nodes = grid.all_nodes()
    multi = np.stack(
        np.unravel_index(np.arange(nodes.shape[0]), grid.counts), axis=-1
    )
    off_edge = np.all((multi >= 1) & (multi <= counts - 2), axis=1)
    unknown_mask = off_edge & dom.contains_batch(nodes)
    unknown_flat = np.where(unknown_mask)[0]
    m = unknown_flat.size
    if m == 0:
        raise GeneratorError("grid too coarse: no interior unknowns")
    ids = np.full(nodes.shape[0], -1, dtype=np.int64)
    ids[unknown_flat] = np.arange(m)
    coords = nodes[unknown_flat]
    idx = multi[unknown_flat]

    drift = coords @ acl.T                                   # b(x) per unknown
    strides = np.array([int(np.prod(counts[j + 1:])) for j in range(d)])

    rows: list[np.ndarray] = []
    cols: list[np.ndarray] = []
    vals: list[np.ndarray] = []
    diag = np.zeros(m)
    row_ids = np.arange(m)

    def couple(offset_flat: np.ndarray, coef: np.ndarray, valid=None):
        """Add coef on the neighbor at unknown_flat + offset; Dirichlet drops."""
        nb = ids[unknown_flat + offset_flat]
        keep = nb >= 0
        if valid is not None:
            keep &= valid
        rows.append(row_ids[keep])
        cols.append(nb[keep])
        vals.append(coef[keep] if coef.ndim else np.full(int(keep.sum()), coef))

    upwind_axes = 0
    for j in range(d):
        cdiff = 0.5 * eps * a[j, j] / h[j] ** 2
        bj = drift[:, j]
        upwind = np.abs(bj) * h[j] > eps * a[j, j]
        upwind_axes += int(upwind.sum())
        plus = np.full(m, cdiff)
        minus = np.full(m, cdiff)
        diag -= 2.0 * cdiff
        central = ~upwind
        plus[central] += bj[central] / (2.0 * h[j])
        minus[central] -= bj[central] / (2.0 * h[j])
        up_pos = upwind & (bj > 0)
        up_neg = upwind & (bj < 0)
        plus[up_pos] += bj[up_pos] / h[j]
        diag[up_pos] -= bj[up_pos] / h[j]
        minus[up_neg] -= bj[up_neg] / h[j]
        diag[up_neg] += bj[up_neg] / h[j]
        couple(strides[j], plus)
        couple(-strides[j], minus)

    for j in range(d):
        for k in range(j + 1, d):
            if a[j, k] == 0.0:
                continue
            c = eps * a[j, k] / (4.0 * h[j] * h[k])
            for sj in (+1, -1):
                for sk in (+1, -1):
                    coef = np.full(m, c * sj * sk)
                    couple(sj * strides[j] + sk * strides[k], coef)

    rows.append(row_ids)
    cols.append(row_ids)
    vals.append(diag)
    matrix = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(m, m)
    )
    off = matrix - sp.diags(matrix.diagonal())
    is_m = bool(off.nnz == 0 or off.data.min() >= -1e-13)
    frac = upwind_axes / float(m * d)
    if frac >= 1.0:
        import warnings

        warnings.warn("mesh Peclet guard triggered on every node/axis; accuracy degraded")
    return DiscreteOperator(
        matrix=matrix,
        grid=grid,
        coords=coords,
        unknown_flat=unknown_flat,
        upwind_fraction=frac,
        is_m_matrix=is_m,
    )


def principal_eigenvalue(
    op: DiscreteOperator,
    tol: float = 1e-10,
    max_iters: int = 2000,
) -> tuple[float, GridField]:
    """Smallest eigenvalue of -L by shifted inverse power iteration.

    Factors (-L - mu I) once per shift; the shift follows the Rayleigh
    quotient every five iterations.  The eigenfunction is normalized to
    max value 1 with positive sign.  Raises GeneratorError (with the final
    residual) if the residual tolerance is not met within max_iters.
    """
    M = (-op.matrix).tocsc()
    m = M.shape[0]
    ident = sp.identity(m, format="csc")
    # residuals cannot beat the backward-stable floor eps_mach * ||M||; on
    # fine grids that exceeds the requested tol, so accept the floor instead
    m_scale = float(np.abs(M).sum(axis=1).max())
    tol_eff = max(tol, 64.0 * np.finfo(float).eps * max(1.0, m_scale))

    def factor(mu: float):
        for bump in (0.0, 1e-10, 1e-8, 1e-6):
            try:
                return spla.splu(M - (mu + bump * (1.0 + abs(mu))) * ident)
            except RuntimeError:
                continue
        raise GeneratorError("factorization failed at every perturbed shift")

    mu = 0.0
    lu = factor(mu)
    v = np.ones(m) / np.sqrt(m)
    lam = float(v @ (M @ v))
    residual = np.inf
    for it in range(1, max_iters + 1):
        w = lu.solve(v)
        nw = np.linalg.norm(w)
        if not np.isfinite(nw) or nw == 0.0:
            raise GeneratorError("inverse iteration produced a degenerate vector")
        v = w / nw
        if it % 5 == 0 or it == max_iters:
            mv = M @ v
            lam = float(v @ mv)
            residual = float(np.linalg.norm(mv - lam * v))
            if residual < tol_eff:
                break
            if abs(lam - mu) > 1e-3 * max(abs(lam), 1.0):
                mu = lam
                lu = factor(mu)
    if residual >= tol_eff:
        raise GeneratorError(f"eigensolver did not converge: residual={residual:.3e}")
    peak = np.argmax(np.abs(v))
    if v[peak] < 0:
        v = -v
    v = v / v.max()
    return lam, GridField(values=v, grid=op.grid, coords=op.coords)


@dataclass(frozen=True)
class GridPolicy:
    """How asymptotics sweeps size their grids as eps shrinks.

    The target spacing keeps the mesh Peclet number below 1/safety per axis,
    so h shrinks proportionally to eps against the worst drift over the
    closure.
    """

    peclet_safety: float = 2.0
    min_nodes: int = 101
    max_nodes: int = 4001

    def counts_for(
        self, sys: MultiChannelSystem, prof: FeedbackProfile, dom: DomainSpec
    ) -> tuple[int, ...]:
        acl = closed_loop_matrix(sys, prof)
        lo, hi = dom.bounding_box()
        widths = hi - lo
        bmax = _max_drift_per_axis(acl, dom)
        counts = []
        for j in range(len(widths)):
            ajj = sys.diffusion[j, j]
            if bmax[j] <= 0:
                counts.append(self.min_nodes)
                continue
            h_target = sys.epsilon * ajj / (self.peclet_safety * bmax[j])
            n = int(np.ceil(widths[j] / h_target)) + 1
            counts.append(int(min(max(n, self.min_nodes), self.max_nodes)))
        return tuple(counts)


def _max_drift_per_axis(acl: np.ndarray, dom: DomainSpec) -> np.ndarray:
    if isinstance(dom, Box):
        corners = dom.grid_points(2)
        return np.max(np.abs(corners @ acl.T), axis=0)
    assert isinstance(dom, Ball)
    base = np.abs(acl @ dom.center)
    return base + dom.radius * np.linalg.norm(acl, axis=1)


@dataclass(frozen=True)
class AsymptoticsResult:
    """eps-sweep of the principal eigenvalue with the extrapolated rate."""

    rows: tuple[tuple[float, float, float], ...]    # (eps, lambda, eps*lambda)
    extrapolated_rate: float
    counts_used: tuple[tuple[int, ...], ...]

    def as_csv(self) -> str:
        lines = ["epsilon,lambda,eps_lambda"]
        for eps, lam, el in self.rows:
            lines.append(",".join(format(v, ".17g") for v in (eps, lam, el)))
        return "\n".join(lines) + "\n"

    @property
    def rate_estimate(self):
        from .action import RateEstimate

        return RateEstimate(
            value=max(self.extrapolated_rate, 0.0),
            method="pde",
            diagnostics={"rows": self.rows},
        )


def eigenvalue_asymptotics(
    sys: MultiChannelSystem,
    prof: FeedbackProfile,
    dom: DomainSpec,
    eps_list,
    policy: GridPolicy = GridPolicy(),
    tol: float = 1e-10,
) -> AsymptoticsResult:
    """Tabulate (eps, lambda_eps, eps*lambda_eps) over a decreasing eps sweep.

    Richardson extrapolation (linear in eps) of the last two entries is
    reported as the PDE-side rate estimate.
    """
    eps_list = [float(e) for e in eps_list]
    if len(eps_list) < 2 or any(b >= a for a, b in zip(eps_list, eps_list[1:])):
        raise ValueError("eps_list must be strictly decreasing with >= 2 entries")
    rows = []
    counts_used = []
    for eps in eps_list:
        sys_eps = sys.with_epsilon(eps)
        counts = policy.counts_for(sys_eps, prof, dom)
        grid = GridSpec.for_domain(dom, counts)
        op = discretize_generator(sys_eps, prof, dom, grid)
        lam, _ = principal_eigenvalue(op, tol=tol)
        rows.append((eps, lam, eps * lam))
        counts_used.append(counts)
    (e1, _, y1), (e2, _, y2) = rows[-2], rows[-1]
    extrapolated = (y2 * e1 - y1 * e2) / (e1 - e2)
    return AsymptoticsResult(
        rows=tuple(rows), extrapolated_rate=extrapolated, counts_used=tuple(counts_used)
    )
