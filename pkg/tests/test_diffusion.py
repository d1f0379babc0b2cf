import numpy as np
import pytest

import adaptive_diffusion.diffusion as diffusion
from adaptive_diffusion.combiners import (
    DiagonalCombinerState,
    GramianCombinerState,
    adaptive_weights_full,
    diagonal_update_and_weights,
    gramian_update,
    static_policy,
)
from adaptive_diffusion.diffusion import (
    NetworkState,
    PolicySpec,
    SimulationError,
    adapt_step,
    combine_step,
    network_sd,
    node_stream,
    run_replication,
    simulate,
)
from adaptive_diffusion.model import LogisticNodeModel, QuadraticNodeModel, data_from_normals, stochastic_gradient
from adaptive_diffusion.network import Topology, generate_topology


def test_adapt_step_with_zero_step_keeps_iterates(rng):
    models = [QuadraticNodeModel(3, np.ones(3), step=0.0, noise_std=1.0) for _ in range(4)]
    state = NetworkState(rng.normal(size=(4, 3)), np.zeros((4, 3)))
    psi = adapt_step(state, models, rng)
    assert np.array_equal(psi, state.iterates)


def test_adapt_step_with_zero_gradient(rng):
    w = rng.normal(size=(3, 2))
    models = [QuadraticNodeModel(2, w[k], step=0.3) for k in range(3)]
    psi = adapt_step(NetworkState(w.copy(), np.zeros((3, 2))), models, rng)
    assert np.array_equal(psi, w)


def test_adapt_step_quadratic_hand_value(rng):
    models = [QuadraticNodeModel(4, np.ones(4), step=0.1)]
    psi = adapt_step(NetworkState.initial(1, 4), models, rng)
    assert np.allclose(psi, 0.1, rtol=0, atol=1e-16)


def test_adapt_step_uses_supplied_data(rng):
    models = [LogisticNodeModel(3, 1.0, 0.2, 0.5, 0.05) for _ in range(2)]
    w = rng.normal(size=(2, 3))
    data = [(1.0, rng.normal(size=3)), (-1.0, rng.normal(size=3))]
    psi = adapt_step(NetworkState(w.copy(), np.zeros((2, 3))), models, rng, data=data)
    for k in range(2):
        assert np.allclose(psi[k], w[k] - 0.05 * stochastic_gradient(models[k], w[k], data[k]), atol=1e-15)


def test_combine_step_examples(rng):
    psi = rng.normal(size=(5, 3))
    assert np.array_equal(combine_step(psi, np.eye(5)), psi)
    t = generate_topology(5, "random", seed=1, p=0.5)
    v = rng.normal(size=3)
    same = np.tile(v, (5, 1))
    for rule in ("uniform", "metropolis", "max-degree"):
        assert np.allclose(combine_step(same, static_policy(rule, t)), same, atol=1e-15)
    a = np.array([[0.75, 0.5], [0.25, 0.5]])
    out = combine_step(np.array([[1.0, 1.0], [0.0, 0.0]]), a)
    assert np.allclose(out[0], 0.75)


def test_combine_step_rejects_mismatch():
    with pytest.raises(SimulationError):
        combine_step(np.zeros((3, 2)), np.eye(4))


def test_network_sd_examples(rng):
    w_star = rng.normal(size=4)
    state = NetworkState(np.tile(w_star, (4, 1)), np.zeros((4, 4)))
    assert network_sd(state, w_star) == 0.0
    state.iterates[2, 1] += 1.0
    assert network_sd(state, w_star) == pytest.approx(0.25, rel=1e-14)
    w = rng.normal(size=(7, 5))
    w_star5 = rng.normal(size=5)
    total = 0.0
    for k in range(7):
        for m in range(5):
            total += (w_star5[m] - w[k, m]) ** 2
    assert network_sd(NetworkState(w, w), w_star5) == pytest.approx(total / 7, rel=1e-12)


def test_static_policies_preserve_consensus(rng):
    t = generate_topology(8, "random", seed=3, p=0.4)
    v = rng.normal(size=3)
    for rule in ("uniform", "metropolis", "max-degree"):
        models = [QuadraticNodeModel(3, np.zeros(3), step=0.0, noise_std=1.0) for _ in range(8)]
        state = NetworkState(np.tile(v, (8, 1)), np.zeros((8, 3)))
        a = static_policy(rule, t)
        for _ in range(50):
            psi = adapt_step(state, models, rng)
            state.iterates = combine_step(psi, a)
        assert np.allclose(state.iterates, v, atol=1e-13)


def test_zero_iterations_give_empty_curve(small_network):
    t, models, truth = small_network
    rep = run_replication(t, models, truth, "uniform", 0, seed=1)
    assert rep.sd.shape == (0,)


@pytest.mark.parametrize("policy", ["uniform", "relative-variance", "gramian", "gramian-diag"])
def test_replication_is_deterministic(small_network, policy):
    t, models, truth = small_network
    theta = np.arange(1.0, 7.0)
    a = run_replication(t, models, truth, policy, 300, seed=5, theta=theta)
    b = run_replication(t, models, truth, policy, 300, seed=5, theta=theta)
    assert np.array_equal(a.sd, b.sd)
    c = run_replication(t, models, truth, policy, 300, seed=6, theta=theta)
    assert not np.array_equal(a.sd, c.sd)
    assert np.all(a.sd >= 0)


def test_single_node_matches_plain_sgd():
    model = LogisticNodeModel(4, 1.1, 0.3, 0.45, 0.02)
    t = Topology.from_adjacency([[True]])
    w_star = np.full(4, 0.25)
    n_iters = 700  # spans several random-draw chunks
    rep = run_replication(t, [model], w_star, "gramian", n_iters, seed=21)

    rng = node_stream(21, 0, 0)
    w = np.zeros(4)
    expected = []
    for _ in range(n_iters):
        label, h = data_from_normals(rng.standard_normal(5), model.mean_scale, model.std)
        w = w - model.step * stochastic_gradient(model, w, (label, h))
        expected.append(np.sum((w - w_star) ** 2))
    assert np.array_equal(rep.sd, np.array(expected))


def _reference_adaptive(t, models, w_star, policy, n_iters, seed, replication=0):
    """Per-node transcription of the adaptive loop, one state object per node."""
    n, m = t.n_nodes, models[0].dim
    streams = [node_stream(seed, replication, k) for k in range(n)]
    state = NetworkState.initial(n, m)
    if policy.name == "gramian":
        states = [GramianCombinerState.initial(len(nb), m, policy.alpha1, policy.alpha2) for nb in t.neighborhoods]
    else:
        states = [DiagonalCombinerState.initial(m, policy.alpha1, policy.alpha2) for _ in range(n)]
    sd = []
    for _ in range(n_iters):
        data = []
        for k, mdl in enumerate(models):
            label, h = data_from_normals(streams[k].standard_normal(m + 1), mdl.mean_scale, mdl.std)
            data.append((float(label), h))
        psi = adapt_step(state, models, None, data=data)
        if policy.name == "gramian":
            w = np.empty_like(psi)
            for k, nb in enumerate(t.neighborhoods):
                block = psi[list(nb)].T
                gramian_update(states[k], block)
                w[k] = block @ adaptive_weights_full(states[k])
        else:
            w = combine_step(psi, diagonal_update_and_weights(states, psi, t))
        state.iterates = w
        sd.append(network_sd(state, w_star))
    return np.array(sd)


@pytest.mark.parametrize("name", ["gramian", "gramian-diag"])
def test_vectorized_engine_matches_per_node_reference(small_network, name):
    t, models, truth = small_network
    policy = PolicySpec(name, alpha1=0.05, alpha2=0.1)
    ref = _reference_adaptive(t, models, truth.w_star, policy, 400, seed=8, replication=2)
    got = simulate(t, models, truth.w_star, policy, 400, seed=8, replications=(2,)).sd[0]
    assert np.allclose(got, ref, rtol=1e-9, atol=0)


def test_frozen_gramian_reproduces_uniform(small_network):
    t, models, truth = small_network
    frozen = run_replication(t, models, truth, PolicySpec("gramian", alpha1=0.0, alpha2=0.03), 500, seed=4)
    uniform = run_replication(t, models, truth, "uniform", 500, seed=4)
    assert np.allclose(frozen.sd, uniform.sd, rtol=1e-12, atol=0)


def test_batching_does_not_change_replications(small_network):
    t, models, truth = small_network
    for name in ("metropolis", "gramian", "gramian-diag"):
        batch = simulate(t, models, truth.w_star, name, 300, seed=3, replications=(0, 1, 2, 3))
        for j, r in enumerate((0, 1, 2, 3)):
            single = simulate(t, models, truth.w_star, name, 300, seed=3, replications=(r,))
            assert np.array_equal(batch.sd[j], single.sd[0])


def test_weight_logging_and_negative_counts(small_network):
    t, models, truth = small_network
    tr = simulate(t, models, truth.w_star, "gramian", 200, seed=1, replications=(0, 1), log_weights=True)
    assert tr.weights_sum.shape == (200, 6, 6)
    mean = tr.weights_sum / 2
    assert np.allclose(mean.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(mean[:, ~t.adjacency] == 0)
    single = [
        run_replication(t, models, truth, "gramian", 200, seed=1, replication=r, log_weights=True).weights
        for r in (0, 1)
    ]
    assert np.allclose(single[0] + single[1], tr.weights_sum, atol=1e-14)
    negatives = sum(int(np.count_nonzero(w < 0)) for w in single)
    assert tr.negative_weights.sum() == negatives


def test_tail_accumulators(small_network):
    t, models, truth = small_network
    tr = simulate(t, models, truth.w_star, "gramian-diag", 300, seed=1, replications=(0,), tail_start=200)
    assert tr.tail_count == 100
    assert tr.q_tail_sum.shape == (1, 6)
    assert np.all(tr.q_tail_sum > 0)
    assert tr.psi_lag_corr.shape == (1, 6)
    assert np.all(np.abs(tr.psi_lag_corr) <= 1.0 + 1e-9)


def test_errors_carry_iteration_index(small_network, monkeypatch):
    t, models, truth = small_network
    calls = {"n": 0}
    real = diffusion.solve_kkt_batch

    def flaky(q):
        calls["n"] += 1
        if calls["n"] > 40:
            raise np.linalg.LinAlgError("factorization broke")
        return real(q)

    monkeypatch.setattr(diffusion, "solve_kkt_batch", flaky)
    with pytest.raises(SimulationError, match=r"iteration \d+: factorization broke"):
        run_replication(t, models, truth, "gramian", 100, seed=0)


def test_relative_variance_needs_theta(small_network):
    t, models, truth = small_network
    with pytest.raises(ValueError):
        run_replication(t, models, truth, "relative-variance", 10, seed=0)
    with pytest.raises(ValueError):
        run_replication(t, models, truth, "hastings", 10, seed=0)
