import json

import numpy as np
import pytest

from exitrate import (
    Ball,
    Box,
    ConfigError,
    FeedbackProfile,
    ModelError,
    MultiChannelSystem,
    domain_contains,
    domain_perturb,
    parse_config,
    validate_system,
)


def test_identity_sigma_kappa_one():
    sys = MultiChannelSystem(A=np.zeros((2, 2)), B=(), sigma=np.eye(2), epsilon=1.0)
    report = validate_system(sys)
    assert report.ok
    assert report.kappa == pytest.approx(1.0, abs=1e-12)


def test_zero_sigma_rejected():
    with pytest.raises(ModelError, match="ellipticity violated"):
        MultiChannelSystem(A=np.zeros((2, 2)), B=(), sigma=np.zeros((2, 2)), epsilon=1.0)


def test_diagonal_sigma_kappa():
    # oracle: eigenvalues of diag(2, 0.5) @ diag(2, 0.5)^T = diag(4, 0.25)
    sys = MultiChannelSystem(A=np.zeros((2, 2)), B=(), sigma=np.diag([2.0, 0.5]), epsilon=0.3)
    assert validate_system(sys).kappa == pytest.approx(0.25, abs=1e-10)


def test_kappa_matches_dense_eigensolver_oracle():
    rng = np.random.default_rng(11)
    for _ in range(20):
        d = rng.integers(1, 5)
        sigma = rng.normal(size=(d, d)) + 2.0 * np.eye(d)
        want = np.linalg.eigvalsh(sigma @ sigma.T).min()
        if want <= 1e-12:
            continue
        sys = MultiChannelSystem(A=np.zeros((d, d)), B=(), sigma=sigma, epsilon=1.0)
        assert validate_system(sys).kappa == pytest.approx(want, abs=1e-10)


def test_shape_mismatch_rejected():
    with pytest.raises(ModelError, match="inconsistent dimensions"):
        MultiChannelSystem(A=np.zeros((2, 2)), B=(np.ones((3, 1)),), sigma=np.eye(2), epsilon=1.0)


def test_nonpositive_epsilon_rejected():
    with pytest.raises(ModelError, match="epsilon"):
        MultiChannelSystem(A=np.zeros((1, 1)), B=(), sigma=np.eye(1), epsilon=0.0)


def test_profile_shape_validation():
    sys = MultiChannelSystem(A=np.zeros((2, 2)), B=(np.ones((2, 1)),), sigma=np.eye(2), epsilon=1.0)
    FeedbackProfile(gains=(np.zeros((1, 2)),)).validate_for(sys)
    with pytest.raises(ModelError):
        FeedbackProfile(gains=(np.zeros((2, 2)),)).validate_for(sys)
    with pytest.raises(ModelError):
        FeedbackProfile(gains=()).validate_for(sys)


def test_box_membership():
    box = Box([0.0, 0.0], [1.0, 1.0])
    assert domain_contains(box, [0.5, 0.5])
    assert not domain_contains(box, [1.0, 0.5])   # boundary is not in the open set
    assert box.closure_contains([1.0, 0.5])


def test_ball_membership():
    ball = Ball(center=[0.0, 0.0], radius=2.0)
    assert domain_contains(ball, [1.9, 0.0])
    assert not domain_contains(ball, [2.0, 0.0])


def test_membership_dimension_mismatch():
    with pytest.raises(ModelError):
        Box([0.0], [1.0]).contains([0.5, 0.5])


def test_box_perturb():
    box = Box([0.0], [1.0])
    grown = domain_perturb(box, 0.1)
    assert np.allclose(grown.lower, [-0.1]) and np.allclose(grown.upper, [1.1])
    shrunk = domain_perturb(box, -0.1)
    assert np.allclose(shrunk.lower, [0.1]) and np.allclose(shrunk.upper, [0.9])
    with pytest.raises(ModelError, match="empty deflation"):
        domain_perturb(box, -0.6)


def test_perturb_roundtrip_exact():
    rng = np.random.default_rng(3)
    for _ in range(25):
        d = rng.integers(1, 4)
        lo = rng.normal(size=d)
        box = Box(lo, lo + rng.uniform(0.5, 2.0, size=d))
        delta = rng.uniform(0.01, 0.2)
        back = domain_perturb(domain_perturb(box, delta), -delta)
        assert np.array_equal(back.lower, box.lower)
        assert np.array_equal(back.upper, box.upper)
    ball = Ball([0.3, -0.2], 1.5)
    back = domain_perturb(domain_perturb(ball, 0.25), -0.25)
    assert back.radius == ball.radius and np.array_equal(back.center, ball.center)


def test_contains_monotone_under_inflation():
    rng = np.random.default_rng(5)
    box = Box([-1.0, 0.0], [1.0, 2.0])
    ball = Ball([0.5, 0.5], 1.2)
    for dom in (box, ball):
        pts = rng.uniform(-2, 3, size=(200, 2))
        inside = dom.contains_batch(pts)
        for delta in (0.05, 0.3, 1.0):
            grown = domain_perturb(dom, delta)
            assert np.all(grown.contains_batch(pts[inside]))


def test_deflate_subset_inflate():
    box = Box([0.0, 0.0], [2.0, 1.0])
    rng = np.random.default_rng(8)
    pts = rng.uniform(-0.5, 2.5, size=(300, 2))
    for delta in (0.05, 0.2):
        small = domain_perturb(box, -delta)
        big = domain_perturb(box, delta)
        inside_small = small.contains_batch(pts)
        inside = box.contains_batch(pts)
        assert np.all(inside[inside_small])
        assert np.all(big.contains_batch(pts[inside]))


def test_parse_config_roundtrip():
    doc = {
        "A": [[0.0]],
        "B": [[[1.0]]],
        "sigma": [[1.0]],
        "epsilon": 0.5,
        "domain": {"kind": "box", "lower": [0.0], "upper": [1.0]},
        "gains": [[[-0.25]]],
        "x0": [0.5],
        "gain_bounds": [{"lower": [[-0.25]], "upper": [[0.25]]}],
    }
    cfg = parse_config(doc)
    assert cfg.system.d == 1 and cfg.system.n == 1
    assert isinstance(cfg.domain, Box)
    assert cfg.profile is not None and cfg.profile.gains[0][0, 0] == -0.25
    assert cfg.x0[0] == 0.5
    assert cfg.gain_bounds[0][1][0, 0] == 0.25
    assert len(cfg.config_hash) == 64
    # hash is canonical: key order must not matter
    assert cfg.config_hash == parse_config(json.loads(json.dumps(doc))).config_hash


def test_parse_config_missing_key():
    with pytest.raises(ConfigError, match="sigma"):
        parse_config({"A": [[0.0]], "B": [], "epsilon": 1.0,
                      "domain": {"kind": "box", "lower": [0], "upper": [1]}})


def test_parse_config_bad_domain_kind():
    with pytest.raises(ConfigError, match="domain.kind"):
        parse_config({"A": [[0.0]], "B": [], "sigma": [[1.0]], "epsilon": 1.0,
                      "domain": {"kind": "simplex"}})


def test_parse_config_dimension_mismatch():
    with pytest.raises(ConfigError, match="domain dimension"):
        parse_config({"A": [[0.0]], "B": [], "sigma": [[1.0]], "epsilon": 1.0,
                      "domain": {"kind": "box", "lower": [0, 0], "upper": [1, 1]}})
