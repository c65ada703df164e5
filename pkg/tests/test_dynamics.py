"""Dynamics checks: velocity forward passes, trajectory closed forms,
the snapshot-fit loss, and closest-approach time prediction."""

import numpy as np
import pytest

from gradcheck import assert_param_grads_match
from rode import curvature as cv
from rode import data, dynamics, encoder
from rode import numerics as nm
from rode.config import RunConfig
from rode.errors import ContractViolation, ValidationError


def small_cfg(**kw):
    defaults = dict(d=3, time_dim=2, dropout=0.0, epochs=1, solver_steps=8, grid=8)
    defaults.update(kw)
    return RunConfig(**defaults)


def two_node_graph():
    return data.SocialGraph.build(2, [(0, 1)])


def make_params(graph, cfg, seed=0):
    ps = nm.ParamStore()
    rng = np.random.default_rng(seed)
    encoder.register_params(ps, rng, graph.feature_dim, cfg)
    cv.register_params(ps, rng, cfg)
    dynamics.register_params(ps, rng, graph.feature_dim, cfg)
    return ps


def np_velocity(ps, g_row, t):
    """Plain-numpy forward pass of the field for one user."""
    om, th = ps["vel.time.omega"].data, ps["vel.time.theta"].data
    tf = np.sqrt(1.0 / om.size) * np.cos(om * t + th)
    x = np.concatenate([g_row, tf])
    z = np.tanh(x @ ps["vel.mlp.W1"].data + ps["vel.mlp.b1"].data)
    z = np.tanh(z @ ps["vel.mlp.W2"].data + ps["vel.mlp.b2"].data)
    return z @ ps["vel.mlp.W3"].data + ps["vel.mlp.b3"].data


def zero_field(ps):
    ps["vel.mlp.W3"].data = np.zeros_like(ps["vel.mlp.W3"].data)
    ps["vel.mlp.b3"].data = np.zeros_like(ps["vel.mlp.b3"].data)


def constant_field(ps, c):
    """Hidden layers silenced so the MLP output is exactly the bias c."""
    ps["vel.mlp.W1"].data = np.zeros_like(ps["vel.mlp.W1"].data)
    ps["vel.mlp.b1"].data = np.zeros_like(ps["vel.mlp.b1"].data)
    ps["vel.mlp.b2"].data = np.zeros_like(ps["vel.mlp.b2"].data)
    ps["vel.mlp.b3"].data = np.asarray(c, dtype=float)


# -- velocity ------------------------------------------------------------------


def test_velocity_hand_forward():
    g = two_node_graph()
    cfg = small_cfg()
    ps = make_params(g, cfg, seed=1)
    net = dynamics.velocity_net(g, ps, cfg)
    g_rows = np.tanh(encoder.gcn_norm(g.adjacency) @ g.features @ ps["vel.gcn.W"].data)
    assert np.allclose(net.g_matrix.data, g_rows, atol=1e-15)
    for t in (0.0, 0.37, 1.0):
        got = dynamics.velocity(net, 1, None, t).data
        assert np.allclose(got, np_velocity(ps, g_rows[1], t), atol=1e-13)


def test_velocity_ignores_position_and_matches_twins():
    g = data.SocialGraph.build(2, [], features=np.array([[1.0, 2.0], [1.0, 2.0]]))
    cfg = small_cfg()
    ps = make_params(g, cfg, seed=2)
    net = dynamics.velocity_net(g, ps, cfg)
    a = dynamics.velocity(net, 0, nm.Tensor(np.zeros(3)), 0.5).data
    b = dynamics.velocity(net, 0, nm.Tensor(np.full(3, 9.0)), 0.5).data
    c = dynamics.velocity(net, 1, None, 0.5).data
    assert np.array_equal(a, b)
    assert np.array_equal(a, c)  # identical graph features -> identical field


def test_velocity_zero_final_layer():
    g = two_node_graph()
    cfg = small_cfg()
    ps = make_params(g, cfg, seed=3)
    zero_field(ps)
    net = dynamics.velocity_net(g, ps, cfg)
    for u in (0, 1):
        for t in (0.0, 0.5, 1.0):
            assert np.array_equal(dynamics.velocity(net, u, None, t).data, np.zeros(3))


def test_velocity_time_contract():
    g = two_node_graph()
    cfg = small_cfg()
    ps = make_params(g, cfg)
    net = dynamics.velocity_net(g, ps, cfg)
    with pytest.raises(ContractViolation):
        dynamics.velocity(net, 0, None, 1.5)


# -- trajectories -----------------------------------------------------------------


def test_trajectory_zero_field_constant():
    g = two_node_graph()
    cfg = small_cfg()
    ps = make_params(g, cfg, seed=4)
    zero_field(ps)
    net = dynamics.velocity_net(g, ps, cfg)
    initial = nm.Tensor(np.array([0.2, -0.1, 0.4]))
    traj = dynamics.solve_trajectory(net, 0, initial, 1.0, steps=8)
    assert traj.samples[0][1] is initial  # initial condition kept bitwise
    times = [t for t, _ in traj.samples]
    assert times[0] == 0.0 and all(b > a for a, b in zip(times, times[1:]))
    for _, pos in traj.samples:
        assert np.array_equal(pos.data, initial.data)


def test_trajectory_constant_field_affine():
    g = two_node_graph()
    cfg = small_cfg()
    ps = make_params(g, cfg, seed=5)
    c = np.array([0.3, -0.7, 0.1])
    constant_field(ps, c)
    net = dynamics.velocity_net(g, ps, cfg)
    initial = nm.Tensor(np.zeros(3))
    traj = dynamics.solve_trajectory(net, 1, initial, 0.75, steps=6)
    for t, pos in traj.samples:
        assert np.allclose(pos.data, c * t, atol=1e-12)


def test_trajectory_cosine_field_closed_form():
    # tiny amplitude keeps both tanh layers in their linear regime, so the
    # field is a * cos(w t) within ~1e-9 and the integral is (a/w) sin(w T)
    g = two_node_graph()
    cfg = small_cfg(d=3, time_dim=1)
    ps = make_params(g, cfg, seed=6)
    a, w = 1e-3, 2.0
    ps["vel.gcn.W"].data = np.zeros_like(ps["vel.gcn.W"].data)
    ps["vel.time.omega"].data = np.array([w])
    ps["vel.time.theta"].data = np.array([0.0])
    for name in ("vel.mlp.W1", "vel.mlp.b1", "vel.mlp.W2", "vel.mlp.b2", "vel.mlp.W3", "vel.mlp.b3"):
        ps[name].data = np.zeros_like(ps[name].data)
    ps["vel.mlp.W1"].data[3, 0] = a  # time feature row feeds hidden unit 0
    ps["vel.mlp.W2"].data[0, 0] = 1.0
    ps["vel.mlp.W3"].data[0, 0] = 1.0
    net = dynamics.velocity_net(g, ps, cfg)
    final = dynamics.solve_trajectory(net, 0, nm.Tensor(np.zeros(3)), 1.0, steps=64).final_position()
    want = (a / w) * np.sin(w * 1.0)
    assert abs(final.data[0] - want) <= 1e-6
    assert np.allclose(final.data[1:], 0.0, atol=1e-9)


def test_trajectory_additive_in_initial_condition():
    g = two_node_graph()
    cfg = small_cfg()
    ps = make_params(g, cfg, seed=7)
    net = dynamics.velocity_net(g, ps, cfg)
    rng = np.random.default_rng(8)
    h = rng.normal(size=3)
    delta = rng.normal(size=3)
    t_a = dynamics.solve_trajectory(net, 0, nm.Tensor(h), 1.0, 16).final_position().data
    t_b = dynamics.solve_trajectory(net, 0, nm.Tensor(h + delta), 1.0, 16).final_position().data
    assert np.abs((t_b - t_a) - delta).max() <= 1e-10


def test_trajectory_contracts():
    g = two_node_graph()
    cfg = small_cfg()
    ps = make_params(g, cfg)
    net = dynamics.velocity_net(g, ps, cfg)
    with pytest.raises(ContractViolation):
        dynamics.solve_trajectory(net, 0, nm.Tensor(np.zeros(3)), 0.0, 4)
    with pytest.raises(ContractViolation):
        dynamics.solve_batched(net, [0], [1.5], nm.Tensor(np.zeros((1, 3))), 4)


# -- time rescaling ------------------------------------------------------------------


def test_rescale_time_examples():
    c = data.Cascade("m", ((0, 0.0), (1, 2.5), (2, 4.0)))
    assert dynamics.rescale_time(c, 4.0) == 1.0
    assert dynamics.rescale_time(c, 0.0) == 0.0
    assert dynamics.rescale_time(c, 2.5) == 0.625


def test_rescale_time_offset_variant():
    c = data.Cascade("m", ((0, 2.0), (1, 3.0), (2, 4.0)))
    assert dynamics.rescale_time(c, 3.0, "offset") == 0.5
    assert dynamics.rescale_time(c, 2.0, "offset") == 0.0
    assert dynamics.rescale_time(c, 4.0, "offset") == 1.0


def test_rescale_time_zero_scale_rejected():
    single = data.Cascade("m", ((0, 0.0),))
    with pytest.raises(ValidationError):
        dynamics.rescale_time(single, 0.0)
    with pytest.raises(ValidationError):
        dynamics.rescale_time(single, 0.0, "offset")
    with pytest.raises(ContractViolation):
        dynamics.rescale_time(single, 0.0, "typo")


# -- snapshot-fit loss ------------------------------------------------------------------


def unrolled_case(seed=9, n=5, length=3):
    rng = np.random.default_rng(seed)
    edges = [(int(a), int(b)) for a, b in rng.integers(0, n, size=(2 * n, 2)) if a != b]
    g = data.SocialGraph.build(n, edges)
    cfg = small_cfg()
    ps = make_params(g, cfg, seed=seed)
    users = rng.permutation(n)[:length]
    cascade = data.Cascade("m", tuple((int(u), float(k + 1)) for k, u in enumerate(users)))
    run = encoder.unroll(g, cascade, ps, cfg)
    return g, cfg, ps, cascade, run


def test_ode_loss_zero_velocity_is_snapshot_spread():
    g, cfg, ps, cascade, run = unrolled_case()
    zero_field(ps)
    got = dynamics.ode_loss([run], g, ps, cfg).item()
    total = 0.0
    for k in range(1, cascade.length + 1):
        u = cascade.events[k - 1][0]
        gap = run.states[1].coords.data[u] - run.states[k].coords.data[u]
        total += (gap**2).sum()
    assert got == pytest.approx(total / cascade.length, abs=1e-12)


def test_ode_loss_matches_numpy_rk4_rederivation():
    g, cfg, ps, cascade, run = unrolled_case(seed=10)
    got = dynamics.ode_loss([run], g, ps, cfg).item()

    g_rows = np.tanh(encoder.gcn_norm(g.adjacency) @ g.features @ ps["vel.gcn.W"].data)
    total = 0.0
    for k in range(1, cascade.length + 1):
        u, t = cascade.events[k - 1]
        t_end = t / cascade.max_time
        y = run.states[1].coords.data[u].copy()
        h = t_end / cfg.solver_steps
        for s in range(cfg.solver_steps):
            t0 = s * h
            k1 = np_velocity(ps, g_rows[u], t0)
            k2 = np_velocity(ps, g_rows[u], t0 + h / 2)
            k3 = k2  # position-free field: stages 2 and 3 coincide
            k4 = np_velocity(ps, g_rows[u], t0 + h)
            y = y + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        total += ((y - run.states[k].coords.data[u]) ** 2).sum()
    assert got == pytest.approx(total / cascade.length, rel=1e-9)


def test_ode_loss_gradients_match_fd():
    rng = np.random.default_rng(11)
    g = data.SocialGraph.build(6, [(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (5, 0), (1, 4)])
    cfg = small_cfg(solver_steps=8)
    ps = make_params(g, cfg, seed=12)
    cascade = data.Cascade("m", ((2, 0.5), (5, 1.0), (0, 2.0)))

    def build_loss():
        run = encoder.unroll(g, cascade, ps, cfg)
        return dynamics.ode_loss([run], g, ps, cfg)

    assert_param_grads_match(build_loss, ps)


# -- infection-time prediction -------------------------------------------------------------


def test_predict_planted_linear_motion():
    g, cfg, ps, cascade, _ = unrolled_case(seed=13, n=5, length=3)
    cfg = small_cfg(grid=64)
    prefix = cascade.prefix(2)
    target = next(u for u in range(5) if u not in prefix.users)
    run = encoder.unroll(g, prefix, ps, cfg)
    h1 = run.states[1].coords.data[target]
    m_k = run.states[-1].coords.data[g.num_users]
    t_hat = 0.8
    constant_field(ps, (m_k - h1) / t_hat)  # reaches the message exactly at t_hat
    res = dynamics.predict_infection_time(g, ps, cfg, prefix, target, scale_seconds=cascade.max_time)
    current = prefix.events[-1][1] / cascade.max_time
    cell = (1.0 - current) / cfg.grid
    assert abs(res.t_sys - t_hat) <= cell + 1e-12
    assert res.wallclock == pytest.approx(res.t_sys * cascade.max_time)
    assert res.min_distance <= np.linalg.norm(m_k - h1) * cell / t_hat + 1e-9


def test_predict_tie_breaks_earliest_on_constant_distance():
    g, cfg, ps, cascade, _ = unrolled_case(seed=14)
    zero_field(ps)
    prefix = cascade.prefix(2)
    target = next(u for u in range(5) if u not in prefix.users)
    res = dynamics.predict_infection_time(g, ps, cfg, prefix, target, scale_seconds=cascade.max_time)
    assert res.t_sys == pytest.approx(prefix.events[-1][1] / cascade.max_time)


def test_predict_threshold_rule_takes_first_crossing():
    g, _, ps, cascade, _ = unrolled_case(seed=15)
    cfg = small_cfg(encounter="threshold:100.0", grid=16)
    prefix = cascade.prefix(2)
    target = next(u for u in range(5) if u not in prefix.users)
    res = dynamics.predict_infection_time(g, ps, cfg, prefix, target, scale_seconds=cascade.max_time)
    # an enormous radius crosses immediately at the first grid point
    assert res.t_sys == pytest.approx(prefix.events[-1][1] / cascade.max_time)


def test_predict_grid_refinement_monotone():
    rng = np.random.default_rng(16)
    for seed in (17, 18, 19):
        g, cfg, ps, cascade, _ = unrolled_case(seed=seed)
        prefix = cascade.prefix(2)
        target = next(u for u in range(5) if u not in prefix.users)
        d_coarse = dynamics.predict_infection_time(g, ps, cfg, prefix, target, cascade.max_time, grid=8).min_distance
        d_fine = dynamics.predict_infection_time(g, ps, cfg, prefix, target, cascade.max_time, grid=16).min_distance
        assert d_fine <= d_coarse


def test_predict_contracts():
    g, cfg, ps, cascade, _ = unrolled_case(seed=20)
    prefix = cascade.prefix(2)
    infected = prefix.users[0]
    with pytest.raises(ContractViolation):
        dynamics.predict_infection_time(g, ps, cfg, prefix, infected, cascade.max_time)
    target = next(u for u in range(5) if u not in prefix.users)
    with pytest.raises(ContractViolation):
        dynamics.predict_infection_time(g, ps, cfg, prefix, target, 0.0)
    with pytest.raises(ValidationError):
        dynamics.predict_infection_time(g, ps, cfg, prefix, 99, cascade.max_time)
    with pytest.raises(ContractViolation):
        dynamics.predict_infection_time(g, ps, cfg, prefix, target, cascade.max_time, grid=0)
