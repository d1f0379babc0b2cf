import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adaptive_diffusion.combiners import static_policy
from adaptive_diffusion.network import generate_topology, path_topology
from adaptive_diffusion.theory import (
    DB_FLOOR,
    TheoryError,
    a_infinity,
    msd_low_rank,
    perron_vector,
    predict_steady_state,
    q_infinity,
    relative_variance_theta,
    to_db,
)


def test_q_infinity_hand_values():
    assert np.allclose(q_infinity([0.01, 0.02], [1.0, 2.0]), [5e-5, 4e-4], rtol=1e-14)


def test_q_infinity_rejects_nonpositive():
    with pytest.raises(TheoryError):
        q_infinity([0.01, 0.0], [1.0, 1.0])


def test_a_infinity_two_nodes():
    t = path_topology(2)
    a = a_infinity(t, [1.0, 3.0])
    assert np.allclose(a, [[0.25, 0.25], [0.75, 0.75]], atol=1e-15)


def test_a_infinity_equals_relative_variance_rule(rng):
    t = generate_topology(10, "random", seed=2, p=0.3)
    mu = rng.uniform(0.001, 0.01, 10)
    sigma2 = rng.uniform(0.1, 2.0, 10)
    theta = relative_variance_theta(mu, sigma2)
    assert np.allclose(a_infinity(t, theta), static_policy("relative-variance", t, theta), atol=1e-15)
    # weights are inversely proportional to the limiting Gramian diagonal
    assert np.allclose(a_infinity(t, 1.0 / q_infinity(mu, sigma2)), a_infinity(t, theta), atol=1e-14)


def test_perron_on_path():
    p = perron_vector(path_topology(3), np.ones(3))
    assert np.allclose(p, [2 / 7, 3 / 7, 2 / 7], atol=1e-15)


def _power_iteration(a, iters=20000):
    p = np.full(a.shape[0], 1.0 / a.shape[0])
    for _ in range(iters):
        p = a @ p
    return p / p.sum()


@pytest.mark.parametrize("seed", range(5))
def test_perron_matches_power_iteration(seed):
    rng = np.random.default_rng(seed)
    t = generate_topology(12, "random", seed=seed, p=0.3)
    theta = rng.uniform(0.5, 5.0, 12)
    p = perron_vector(t, theta)
    assert np.all(p > 0)
    assert np.allclose(p, _power_iteration(a_infinity(t, theta)), atol=1e-10)
    w, v = np.linalg.eig(a_infinity(t, theta))
    lead = np.real(v[:, np.argmax(np.real(w))])
    assert np.allclose(p, lead / lead.sum(), atol=1e-10)


@settings(max_examples=50, deadline=None)
@given(st.floats(1e-6, 1e6), st.integers(0, 10_000))
def test_perron_is_scale_invariant(scale, seed):
    rng = np.random.default_rng(seed)
    t = generate_topology(8, "random", seed=seed, p=0.4)
    theta = rng.uniform(0.1, 10.0, 8)
    assert np.allclose(perron_vector(t, theta), perron_vector(t, scale * theta), rtol=1e-9, atol=0)


def test_msd_identity_single_node():
    mu, s2, m = 0.01, 0.3, 5
    msd = msd_low_rank([mu], [1.0], [np.eye(m)], [s2 * np.eye(m)])
    assert msd.linear == pytest.approx(mu * s2 * m / 2, rel=1e-13)
    assert msd.db == pytest.approx(10 * np.log10(mu * s2 * m / 2), rel=1e-13)


def test_msd_two_equal_weight_nodes():
    mu, s1, s2 = 0.02, 0.5, 1.5
    m = 1
    msd = msd_low_rank([mu, mu], [0.5, 0.5], [np.eye(m)] * 2, [s1 * np.eye(m), s2 * np.eye(m)])
    assert msd.linear == pytest.approx(mu * (s1 + s2) / 8, rel=1e-13)


def test_msd_linear_in_noise(rng):
    m = 4
    h = [np.eye(m) * rng.uniform(0.5, 2) for _ in range(3)]
    r = []
    for _ in range(3):
        b = rng.normal(size=(m, m))
        r.append(b @ b.T)
    p = np.array([0.2, 0.3, 0.5])
    mu = np.array([0.01, 0.02, 0.005])
    base = msd_low_rank(mu, p, h, r).linear
    assert msd_low_rank(mu, p, h, [3.0 * x for x in r]).linear == pytest.approx(3 * base, rel=1e-12)


def test_msd_orthogonal_invariance(rng):
    m = 5
    h, r = [], []
    for _ in range(3):
        b = rng.normal(size=(m, m))
        h.append(b @ b.T + m * np.eye(m))
        c = rng.normal(size=(m, m))
        r.append(c @ c.T)
    q, _ = np.linalg.qr(rng.normal(size=(m, m)))
    mu, p = [0.01] * 3, [0.3, 0.3, 0.4]
    a = msd_low_rank(mu, p, h, r).linear
    b = msd_low_rank(mu, p, [q @ x @ q.T for x in h], [q @ x @ q.T for x in r]).linear
    assert b == pytest.approx(a, rel=1e-10)


def test_msd_rejects_indefinite_hessian():
    with pytest.raises(TheoryError):
        msd_low_rank([0.01], [1.0], [-np.eye(2)], [np.eye(2)])


def test_to_db_floor():
    assert to_db(1.0) == 0.0
    assert to_db(0.01) == pytest.approx(-20.0)
    assert to_db(0.0) == DB_FLOOR
    assert np.array_equal(to_db(np.array([-1.0, 10.0])), [DB_FLOOR, 10.0])


def test_predict_steady_state_bundle(rng):
    t = generate_topology(6, "random", seed=4, p=0.5)
    m = 3
    mu = np.full(6, 0.01)
    h = [np.eye(m) * (1 + k) for k in range(6)]
    r = [np.eye(m) * 0.1 * (k + 1) for k in range(6)]
    pred = predict_steady_state(t, mu, h, r)
    sigma2 = np.array([np.trace(x) for x in r])
    assert np.allclose(pred.q_inf_diag, 0.5 * mu**2 * sigma2)
    assert np.allclose(pred.a_inf.sum(axis=0), 1.0)
    assert pred.perron.sum() == pytest.approx(1.0)
    assert pred.msd_av == pytest.approx(msd_low_rank(mu, pred.perron, h, r).linear)
    assert set(pred.to_dict()) == {"q_inf_diag", "perron", "msd_av", "msd_av_db"}
