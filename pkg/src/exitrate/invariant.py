"""Grid approximation of the largest closed set the deterministic closed loop
never leaves, its emptiness test, and kernel-to-kernel comparisons.

The kernel iteration starts from every grid node in the closed domain and
repeatedly discards nodes whose one-step image under the exact linear map
exp(A_cl dt) leaves the closure or falls outside a one-cell inflation of the
surviving set.  Survivor sets shrink monotonically, so a fixpoint is reached
in at most (number of nodes) sweeps.  The result is an outer approximation:
emptiness reported here is trustworthy, membership may include a thin rind
that disappears under grid refinement.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm
from scipy.optimize import linprog

from .dynamics import closed_loop_matrix
from .generator import GridSpec
from .model import Ball, Box, DomainSpec, FeedbackProfile, MultiChannelSystem


class InvariantError(RuntimeError):
    """Kernel computation misuse (non-fixpoint input, grid mismatch)."""


@dataclass(frozen=True)
class KernelField:
    """Boolean membership per grid node plus the iteration provenance."""

    grid: GridSpec
    member: np.ndarray          # bool, one entry per grid node (C order)
    dt: float
    iterations: int
    fixpoint: bool

    def count(self) -> int:
        return int(np.sum(self.member))

    def as_csv(self) -> str:
        nodes = self.grid.all_nodes()
        d = nodes.shape[1]
        lines = [",".join(f"x{i + 1}" for i in range(d)) + ",member"]
        for xy, flag in zip(nodes, self.member):
            lines.append(",".join(format(c, ".17g") for c in xy) + f",{int(flag)}")
        return "\n".join(lines) + "\n"

    def metadata_json(self) -> str:
        return json.dumps(
            {
                "counts": list(self.grid.counts),
                "lower": self.grid.lower.tolist(),
                "upper": self.grid.upper.tolist(),
                "dt": self.dt,
                "iterations": self.iterations,
                "fixpoint": self.fixpoint,
                "members": self.count(),
            },
            indent=2,
            sort_keys=True,
        )


def _interp_weights(grid: GridSpec, points: np.ndarray):
    """Multilinear interpolation stencil (corner flat ids and weights).

    Points outside the grid box get zero total weight via the valid mask.
    """
    lo = grid.lower
    h = grid.spacing
    counts = np.array(grid.counts)
    rel = (points - lo) / h
    valid = np.all((rel >= -1e-12) & (rel <= counts - 1 + 1e-12), axis=1)
    cell = np.clip(np.floor(rel).astype(np.int64), 0, counts - 2)
    frac = np.clip(rel - cell, 0.0, 1.0)
    d = grid.dim
    strides = np.array([int(np.prod(counts[j + 1:])) for j in range(d)])
    base = cell @ strides
    n_corners = 1 << d
    corner_ids = np.empty((points.shape[0], n_corners), dtype=np.int64)
    weights = np.empty((points.shape[0], n_corners))
    for c in range(n_corners):
        offs = np.array([(c >> j) & 1 for j in range(d)])
        corner_ids[:, c] = base + offs @ strides
        w = np.ones(points.shape[0])
        for j in range(d):
            w *= frac[:, j] if offs[j] else (1.0 - frac[:, j])
        weights[:, c] = w
    weights[~valid] = 0.0
    corner_ids[~valid] = 0
    return corner_ids, weights, valid


def invariance_kernel(
    sys: MultiChannelSystem,
    prof: FeedbackProfile,
    dom: DomainSpec,
    grid: GridSpec,
    dt: float,
    max_iters: int | None = None,
) -> KernelField:
    """Iteratively discard nodes whose exp(A_cl dt)-image escapes the survivors."""
    acl = closed_loop_matrix(sys, prof)
    if np.linalg.norm(acl, 2) * dt >= 0.5:
        raise ValueError("dt too large: require ||A_cl|| * dt < 0.5")
    phi = expm(acl * dt)
    nodes = grid.all_nodes()
    in_closure = dom.closure_contains_batch(nodes, tol=1e-12)
    images = nodes @ phi.T
    image_ok = dom.closure_contains_batch(images, tol=1e-12)
    corner_ids, weights, valid = _interp_weights(grid, images)
    image_ok &= valid

    member = in_closure.copy()
    limit = max_iters if max_iters is not None else nodes.shape[0] + 1
    fixpoint = False
    it = 0
    while it < limit:
        it += 1
        field = member.astype(float)
        interp = np.einsum("ij,ij->i", weights, field[corner_ids])
        survive = member & image_ok & (interp > 0.0)
        if np.array_equal(survive, member):
            fixpoint = True
            break
        member = survive
    return KernelField(grid=grid, member=member, dt=dt, iterations=it, fixpoint=fixpoint)


def kernel_is_empty(kernel: KernelField) -> bool:
    """True iff no node survived; refuses partial (non-fixpoint) results."""
    if not kernel.fixpoint:
        raise InvariantError("kernel iteration did not reach a fixpoint")
    return not bool(kernel.member.any())


def kernel_subset(a: KernelField, b: KernelField) -> bool:
    """Node-wise a => b on an identical grid."""
    same = (
        a.grid.counts == b.grid.counts
        and np.array_equal(a.grid.lower, b.grid.lower)
        and np.array_equal(a.grid.upper, b.grid.upper)
    )
    if not same:
        raise InvariantError("grid mismatch")
    return bool(np.all(b.member[a.member]))


def equilibrium_in_domain(
    sys: MultiChannelSystem, prof: FeedbackProfile, dom: DomainSpec
) -> bool:
    """Does the closed loop have an equilibrium inside the open domain?

    Nonsingular A_cl: the only candidate is the origin.  Singular A_cl: test
    whether the null space meets the domain (closed-form for balls, a linear
    program for boxes).
    """
    acl = closed_loop_matrix(sys, prof)
    u, s, vt = np.linalg.svd(acl)
    smax = s.max() if s.size else 0.0
    null_mask = s <= 1e-12 * max(smax, 1.0)
    if not null_mask.any():
        return dom.contains(np.zeros(sys.d))
    basis = vt[null_mask.size - int(null_mask.sum()):].T   # (d, k), orthonormal rows of vt
    if isinstance(dom, Ball):
        c = dom.center
        proj = basis @ (basis.T @ c)
        return bool(np.linalg.norm(c - proj) < dom.radius)
    assert isinstance(dom, Box)
    # maximize margin m with lower + m <= basis @ t <= upper - m
    k = basis.shape[1]
    d = sys.d
    c_vec = np.zeros(k + 1)
    c_vec[-1] = -1.0
    a_ub = np.block([[basis, np.ones((d, 1))], [-basis, np.ones((d, 1))]])
    b_ub = np.concatenate([dom.upper, -dom.lower])
    width = float(np.max(dom.upper - dom.lower))
    res = linprog(
        c_vec, A_ub=a_ub, b_ub=b_ub,
        bounds=[(None, None)] * k + [(None, width)],
        method="highs",
    )
    if not res.success:
        return False
    return bool(-res.fun > 1e-12)
