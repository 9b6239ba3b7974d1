import numpy as np
import pytest

from exitrate import (
    Ball,
    Box,
    GridSpec,
    InvariantError,
    MultiChannelSystem,
    equilibrium_in_domain,
    invariance_kernel,
    kernel_is_empty,
    kernel_subset,
)
from tests.conftest import empty_profile, scalar_system


def test_unstable_scalar_kernel_empty():
    # x(t) = x0 e^t leaves [1,3] from every start
    sys = scalar_system(1.0, 0.1)
    grid = GridSpec([1.0], [3.0], (81,))
    k = invariance_kernel(sys, empty_profile(), Box([1.0], [3.0]), grid, dt=0.1)
    assert k.fixpoint
    assert kernel_is_empty(k)


def test_stable_scalar_kernel_contains_origin():
    sys = scalar_system(-1.0, 0.1)
    grid = GridSpec([-1.0], [1.0], (81,))
    k = invariance_kernel(sys, empty_profile(), Box([-1.0], [1.0]), grid, dt=0.1)
    assert k.fixpoint
    assert not kernel_is_empty(k)
    nodes = grid.all_nodes()[:, 0]
    nearest = np.argmin(np.abs(nodes))
    assert k.member[nearest]


def test_zero_drift_keeps_every_interior_node():
    sys = scalar_system(0.0, 0.1)
    grid = GridSpec([-1.0], [1.0], (41,))
    dom = Box([-1.0], [1.0])
    k = invariance_kernel(sys, empty_profile(), dom, grid, dt=0.1)
    assert not kernel_is_empty(k)
    nodes = grid.all_nodes()
    assert np.array_equal(k.member, dom.closure_contains_batch(nodes, tol=1e-12))


def test_rotation_preserves_ball():
    # circular orbits: every safely-interior node of the unit ball survives
    sys = MultiChannelSystem(A=[[0.0, 1.0], [-1.0, 0.0]], B=(), sigma=np.eye(2), epsilon=0.1)
    dom = Ball([0.0, 0.0], 1.0)
    grid = GridSpec.for_domain(dom, 41)
    h = grid.spacing[0]
    k = invariance_kernel(sys, empty_profile(), dom, grid, dt=0.3)
    assert k.fixpoint and not kernel_is_empty(k)
    nodes = grid.all_nodes()
    radii = np.linalg.norm(nodes, axis=1)
    inner = radii <= 1.0 - h
    assert np.all(k.member[inner])


def test_kernel_monotone_in_domain():
    sys = scalar_system(-1.0, 0.1)
    grid = GridSpec([-1.0], [1.0], (61,))
    small = invariance_kernel(sys, empty_profile(), Box([-0.5], [0.5]), grid, dt=0.1)
    big = invariance_kernel(sys, empty_profile(), Box([-1.0], [1.0]), grid, dt=0.1)
    assert kernel_subset(small, big)
    assert not kernel_subset(big, small)


def test_kernel_subset_reflexive_and_empty():
    sys = scalar_system(-1.0, 0.1)
    grid = GridSpec([-1.0], [1.0], (41,))
    full = invariance_kernel(sys, empty_profile(), Box([-1.0], [1.0]), grid, dt=0.1)
    assert kernel_subset(full, full)
    # unstable flow on an origin-free window of the same grid: empty kernel
    # (dt large enough that the one-step displacement exceeds a grid cell,
    # otherwise the outer approximation keeps a resolution-limited rind)
    sys_u = scalar_system(1.0, 0.1)
    empty = invariance_kernel(sys_u, empty_profile(), Box([0.25], [0.75]), grid, dt=0.4)
    assert kernel_is_empty(empty)
    assert kernel_subset(empty, full)
    assert kernel_subset(empty, empty)
    assert not kernel_subset(full, empty)


def test_kernel_subset_grid_mismatch():
    sys = scalar_system(-1.0, 0.1)
    a = invariance_kernel(sys, empty_profile(), Box([-1.0], [1.0]),
                          GridSpec([-1.0], [1.0], (41,)), dt=0.1)
    b = invariance_kernel(sys, empty_profile(), Box([-1.0], [1.0]),
                          GridSpec([-1.0], [1.0], (21,)), dt=0.1)
    with pytest.raises(InvariantError, match="grid mismatch"):
        kernel_subset(a, b)


def test_partial_result_refused():
    sys = scalar_system(1.0, 0.1)
    grid = GridSpec([1.0], [3.0], (81,))
    k = invariance_kernel(sys, empty_profile(), Box([1.0], [3.0]), grid, dt=0.1, max_iters=1)
    assert not k.fixpoint
    with pytest.raises(InvariantError, match="fixpoint"):
        kernel_is_empty(k)


def test_kernel_iteration_bounded_and_monotone():
    sys = scalar_system(1.0, 0.1)
    grid = GridSpec([1.0], [3.0], (41,))
    k = invariance_kernel(sys, empty_profile(), Box([1.0], [3.0]), grid, dt=0.1)
    assert k.iterations <= grid.all_nodes().shape[0] + 1


def test_dt_guard():
    sys = scalar_system(10.0, 0.1)
    grid = GridSpec([1.0], [3.0], (41,))
    with pytest.raises(ValueError, match="dt too large"):
        invariance_kernel(sys, empty_profile(), Box([1.0], [3.0]), grid, dt=0.1)


def test_equilibrium_in_domain_origin_cases():
    prof = empty_profile()
    stable = scalar_system(-1.0, 0.1)
    assert equilibrium_in_domain(stable, prof, Box([-1.0], [1.0]))
    assert not equilibrium_in_domain(stable, prof, Box([1.0], [3.0]))
    assert equilibrium_in_domain(stable, prof, Ball([0.1], 0.5))
    assert not equilibrium_in_domain(stable, prof, Ball([2.0], 0.5))


def test_equilibrium_singular_null_line():
    # null direction e1: the fixed line {t e1} crosses [1,3] x [-1,1]
    sys = MultiChannelSystem(A=[[0.0, 0.0], [0.0, -1.0]], B=(), sigma=np.eye(2), epsilon=0.1)
    prof = empty_profile()
    assert equilibrium_in_domain(sys, prof, Box([1.0, -1.0], [3.0, 1.0]))
    # shifted window that the line misses
    assert not equilibrium_in_domain(sys, prof, Box([1.0, 0.5], [3.0, 1.0]))
    # ball tangent cases: line passes within the radius or not
    assert equilibrium_in_domain(sys, prof, Ball([* [2.0, 0.3]], 0.5))
    assert not equilibrium_in_domain(sys, prof, Ball([* [2.0, 0.7]], 0.5))


def test_zero_matrix_every_point_fixed():
    sys = scalar_system(0.0, 0.1)
    assert equilibrium_in_domain(sys, empty_profile(), Box([1.0], [3.0]))


def test_equilibrium_implies_nonempty_kernel():
    for a_cl, dom in ((-1.0, Box([-1.0], [1.0])), (0.0, Box([-2.0], [0.5]))):
        sys = scalar_system(a_cl, 0.1)
        if equilibrium_in_domain(sys, empty_profile(), dom):
            grid = GridSpec(dom.lower, dom.upper, (41,))
            k = invariance_kernel(sys, empty_profile(), dom, grid, dt=0.1)
            assert not kernel_is_empty(k)


def test_kernel_csv_and_metadata():
    sys = scalar_system(-1.0, 0.1)
    grid = GridSpec([-1.0], [1.0], (21,))
    k = invariance_kernel(sys, empty_profile(), Box([-1.0], [1.0]), grid, dt=0.1)
    lines = k.as_csv().strip().splitlines()
    assert lines[0] == "x1,member"
    assert len(lines) == 22
    import json

    meta = json.loads(k.metadata_json())
    assert meta["fixpoint"] is True
    assert meta["members"] == k.count()
