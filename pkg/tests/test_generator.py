import math

import numpy as np
import pytest
import scipy.sparse as sp

from exitrate import (
    Ball,
    Box,
    DiscreteOperator,
    GridPolicy,
    GridSpec,
    MultiChannelSystem,
    discretize_generator,
    eigenvalue_asymptotics,
    principal_eigenvalue,
)
from tests.conftest import empty_profile, scalar_system


def _op_1d(eps=0.1, a_cl=0.0, nodes=101, lo=0.0, hi=1.0):
    sys = scalar_system(a_cl, eps)
    grid = GridSpec([lo], [hi], (nodes,))
    return sys, discretize_generator(sys, empty_profile(), Box([lo], [hi]), grid)


def test_laplacian_stencil_1d():
    eps, nodes = 0.1, 11
    sys, op = _op_1d(eps=eps, nodes=nodes)
    h = 1.0 / (nodes - 1)
    dense = op.matrix.toarray()
    m = dense.shape[0]
    coef = 0.5 * eps / h**2
    for i in range(m):
        assert dense[i, i] == pytest.approx(-2 * coef, rel=1e-12)
        if i > 0:
            assert dense[i, i - 1] == pytest.approx(coef, rel=1e-12)
        if i + 1 < m:
            assert dense[i, i + 1] == pytest.approx(coef, rel=1e-12)


def test_constant_field_annihilated_inside():
    _, op = _op_1d(eps=0.2, nodes=51)
    out = op.apply(np.ones(op.size))
    # rows with a full interior stencil must vanish on constants
    assert np.allclose(out[1:-1], 0.0, atol=1e-12)


def test_quadratic_exact_1d():
    # (eps/2) d2/dx2 x^2 = eps, exact for central differences
    eps = 0.3
    sys, op = _op_1d(eps=eps, nodes=41)
    q = op.coords[:, 0] ** 2
    out = op.apply(q)
    mid = op.size // 2
    assert out[mid] == pytest.approx(eps, rel=1e-10)


def test_mixed_term_exact_on_bilinear():
    # q = x1 x2: L q = (eps/2) * tr(a * [[0,1],[1,0]]) = eps * a12 for zero drift
    eps = 0.25
    sigma = np.array([[1.0, 0.3], [0.0, 1.0]])
    sys = MultiChannelSystem(A=np.zeros((2, 2)), B=(), sigma=sigma, epsilon=eps)
    dom = Box([-1.0, -1.0], [1.0, 1.0])
    op = discretize_generator(sys, empty_profile(), dom, GridSpec.for_domain(dom, 21))
    q = op.coords[:, 0] * op.coords[:, 1]
    out = op.apply(q)
    # pick an unknown whose full 9-point neighborhood is interior
    target = np.array([0.0, 0.0])
    i = int(np.argmin(np.linalg.norm(op.coords - target, axis=1)))
    a12 = sys.diffusion[0, 1]
    assert out[i] == pytest.approx(eps * a12, rel=1e-10)


def test_peclet_guard_upwinds_and_preserves_m_matrix():
    # coarse grid with strong drift: central differencing would break positivity
    sys, op = _op_1d(eps=0.01, a_cl=1.0, nodes=21, lo=1.0, hi=3.0)
    assert op.upwind_fraction > 0.5
    assert op.is_m_matrix
    # refined grid: central everywhere
    sys2, op2 = _op_1d(eps=0.5, a_cl=1.0, nodes=201, lo=1.0, hi=3.0)
    assert op2.upwind_fraction == 0.0
    assert op2.is_m_matrix


def test_principal_eigenvalue_1d_dirichlet_oracle():
    eps = 0.1
    _, op = _op_1d(eps=eps, nodes=2001)
    lam, field = principal_eigenvalue(op)
    assert lam == pytest.approx(eps * math.pi**2 / 2.0, rel=1e-4)
    assert field.values.max() == pytest.approx(1.0)
    assert np.all(field.values > 0.0)            # Perron positivity


def test_principal_eigenvalue_2d_separable_oracle():
    eps = 0.1
    sys = MultiChannelSystem(A=np.zeros((2, 2)), B=(), sigma=np.eye(2), epsilon=eps)
    dom = Box([0.0, 0.0], [1.0, 1.0])
    op = discretize_generator(sys, empty_profile(), dom, GridSpec.for_domain(dom, 61))
    lam, field = principal_eigenvalue(op)
    assert lam == pytest.approx(eps * math.pi**2, rel=1e-3)
    assert np.all(field.values > 0.0)


def test_principal_eigenvalue_diagonal_operator():
    # operator fed directly: -L = diag(1, 2); principal pair (1, e1)
    op = DiscreteOperator(matrix=sp.csr_matrix(-np.diag([1.0, 2.0])))
    lam, field = principal_eigenvalue(op, tol=1e-12)
    assert lam == pytest.approx(1.0, abs=1e-10)
    assert np.allclose(field.values, [1.0, 0.0], atol=1e-8)


def test_eigenvalue_grid_convergence_second_order():
    eps = 0.2
    exact = eps * math.pi**2 / 2.0
    errs = []
    for nodes in (101, 201):
        _, op = _op_1d(eps=eps, nodes=nodes)
        lam, _ = principal_eigenvalue(op)
        errs.append(abs(lam - exact))
    assert errs[0] / errs[1] == pytest.approx(4.0, rel=0.15)


def test_drifted_eigenvalue_positive_eigenfunction():
    sys, op = _op_1d(eps=0.1, a_cl=1.0, nodes=401, lo=1.0, hi=3.0)
    lam, field = principal_eigenvalue(op)
    assert lam > 0
    assert np.all(field.values > 0.0)


def test_ball_domain_masked_assembly():
    # Dirichlet disk of radius 1: lambda = (eps/2) j01^2, staircase boundary O(h)
    eps = 0.2
    j01 = 2.404825557695773
    sys = MultiChannelSystem(A=np.zeros((2, 2)), B=(), sigma=np.eye(2), epsilon=eps)
    dom = Ball([0.0, 0.0], 1.0)
    op = discretize_generator(sys, empty_profile(), dom, GridSpec.for_domain(dom, 81))
    lam, _ = principal_eigenvalue(op)
    assert lam == pytest.approx(0.5 * eps * j01**2, rel=0.05)


def test_asymptotics_drift_free():
    # eps * lambda = eps^2 pi^2 / 2 -> 0, consistent with rate 0 under zero drift
    sys = scalar_system(0.0, 1.0)
    dom = Box([0.0], [1.0])
    result = eigenvalue_asymptotics(sys, empty_profile(), dom, (0.4, 0.2, 0.1),
                                    policy=GridPolicy(min_nodes=801))
    eps_lam = [row[2] for row in result.rows]
    want = [e**2 * math.pi**2 / 2.0 for e in (0.4, 0.2, 0.1)]
    assert eps_lam == pytest.approx(want, rel=1e-3)
    assert eps_lam[0] > eps_lam[1] > eps_lam[2]
    # linear extrapolation undershoots on the quadratic decay; the clamped
    # rate estimate is what downstream consumers see
    assert result.rate_estimate.value <= 0.01


def test_asymptotics_stable_loop_decays_fast():
    sys = scalar_system(-1.0, 1.0)
    dom = Box([-1.0], [1.0])
    result = eigenvalue_asymptotics(sys, empty_profile(), dom, (0.4, 0.2, 0.1),
                                    policy=GridPolicy(min_nodes=401))
    eps_lam = [row[2] for row in result.rows]
    assert eps_lam[0] > eps_lam[1] > eps_lam[2] > 0
    # faster than linear decay in eps
    assert eps_lam[2] / eps_lam[0] < 0.25


def test_asymptotics_requires_decreasing_eps():
    sys = scalar_system(0.0, 1.0)
    with pytest.raises(ValueError, match="decreasing"):
        eigenvalue_asymptotics(sys, empty_profile(), Box([0.0], [1.0]), (0.1, 0.2))


def test_grid_too_coarse_rejected():
    with pytest.raises(Exception, match="coarse|interior"):
        GridSpec([0.0], [1.0], (4,))


def test_eigenfunction_csv_schema():
    _, op = _op_1d(nodes=11)
    _, field = principal_eigenvalue(op)
    lines = field.as_csv().strip().splitlines()
    assert lines[0] == "x1,value"
    assert len(lines) == op.size + 1
