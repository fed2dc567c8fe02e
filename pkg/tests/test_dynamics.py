import numpy as np
import pytest

from kma.dynamics import (
    DEFAULT_PLAN,
    SystemSpec,
    cartpole_rhs,
    duffing_rhs,
    euler_step,
    generate_dataset,
    make_system,
    rk4_step,
    simulate,
)
from kma.errors import ConfigError, DivergedError


@pytest.mark.parametrize(
    "x, u, expected",
    [((0, 0), 0, (0, 0)), ((1, 0), 0, (0, -3)), ((1, 2), 0.5, (2, -3.5))],
)
def test_duffing_rhs(x, u, expected):
    np.testing.assert_allclose(duffing_rhs(np.array(x, float), np.array([u], float)), expected, atol=1e-15)


@pytest.mark.parametrize(
    "x, u, expected",
    [
        ((0, 0, 0, 0), 0, (0, 0, 0, 0)),
        # denominator m L^2 (M + m sin^2) = 20; numerators m L^2 u = 4, m L u = 2
        ((0, 0, 0, 0), 1, (0, 0.2, 0, 0.1)),
        # A = -delta * x2 = -1; m L^2 A = -4 and -m L cos(0) A = 2, both over 20
        ((0, 1, 0, 0), 0, (1, -0.2, 0, 0.1)),
    ],
)
def test_cartpole_rhs(x, u, expected):
    np.testing.assert_allclose(cartpole_rhs(np.array(x, float), np.array([u], float)), expected, atol=1e-15)


def test_cartpole_hanging_equilibrium_is_restoring():
    # g = -10 makes the origin the hanging position
    d = cartpole_rhs(np.array([0, 0, 0.1, 0]), np.array([0.0]))
    assert d[3] < 0


def test_cartpole_degenerate_denominator():
    with pytest.raises(ZeroDivisionError):
        cartpole_rhs(np.zeros(4), np.zeros(1), {"M": 0.0})


def test_euler_step():
    np.testing.assert_allclose(euler_step(duffing_rhs, [1.0, 0.0], [0.0], 0.01), [1.0, -0.03], atol=1e-15)
    x = np.array([0.3, -0.7])
    np.testing.assert_array_equal(euler_step(duffing_rhs, x, [0.2], 0.0), x)
    np.testing.assert_array_equal(euler_step(lambda x, u: np.zeros_like(x), x, [5.0], 0.1), x)


def test_rk4_matches_euler_to_first_order():
    x, u = np.array([0.4, 0.1]), np.array([0.3])
    e = euler_step(duffing_rhs, x, u, 1e-4)
    r = rk4_step(duffing_rhs, x, u, 1e-4)
    assert np.max(np.abs(e - r)) < 1e-7


def test_simulate_examples():
    duff = make_system("duffing")
    traj = simulate(duff, [0.0, 0.0], np.zeros((50, 1)))
    assert traj.states.shape == (51, 2)
    assert not np.any(traj.states)
    traj = simulate(duff, [1.0, 0.0], [[0.0]])
    np.testing.assert_allclose(traj.states, [[1, 0], [1.0, -0.03]], atol=1e-15)
    cp = make_system("cartpole")
    traj = simulate(cp, np.zeros(4), [[1.0]])
    np.testing.assert_allclose(traj.states[1], [0, 0.002, 0, 0.001], atol=1e-15)


def test_simulate_composition_with_constant_input():
    duff = make_system("duffing")
    x = np.array([0.5, -0.2])
    traj = simulate(duff, x, np.full((5, 1), 0.7))
    for k in range(5):
        x = duff.step(x, np.array([0.7]))
    np.testing.assert_array_equal(traj.states[-1], x)


def test_simulate_diverges_with_step_index():
    blowup = SystemSpec("custom", 1, 1, 1.0, custom_rhs=lambda x, u: x**3)
    with pytest.raises(DivergedError) as err, np.errstate(over="ignore", invalid="ignore"):
        simulate(blowup, [10.0], np.zeros((20, 1)))
    assert err.value.step is not None and err.value.step > 1
    with pytest.raises(ValueError):
        simulate(blowup, [1.0], np.zeros((0, 1)))


def test_system_spec_validation():
    with pytest.raises(ConfigError, match="system.name"):
        make_system("pendulum")
    with pytest.raises(ConfigError, match="system.dt"):
        make_system("duffing", dt=0.0)
    with pytest.raises(ConfigError):
        SystemSpec("duffing", 3, 1)


def test_default_plan_sizes():
    ds = generate_dataset(make_system("duffing"), seed=3)
    counts = {label: int(np.sum(ds.partition == label)) for label in ds.labels}
    assert counts["D1"] == 300 * 50 == 15000
    assert counts["Da"] == 50 * 20 == 1000
    assert counts == {k: a * b for k, (a, b) in DEFAULT_PLAN.items()}


def test_dataset_is_deterministic_and_partitions_are_independent():
    sysm = make_system("duffing")
    plan = {"D1": (4, 5), "D2": (3, 5), "Da": (2, 4)}
    a = generate_dataset(sysm, plan, seed=11)
    b = generate_dataset(sysm, plan, seed=11)
    for f in ("X", "U", "Y", "partition", "traj_id", "step"):
        np.testing.assert_array_equal(getattr(a, f), getattr(b, f))
    c = generate_dataset(sysm, {"D1": (4, 5), "Da": (2, 4)}, seed=11)
    np.testing.assert_array_equal(a.select("Da").X, c.select("Da").X)
    assert not np.array_equal(a.select("D1").X[:5], a.select("D2").X[:5])
    d = generate_dataset(sysm, plan, seed=12)
    assert not np.array_equal(a.X, d.X)


@pytest.mark.parametrize("name", ["duffing", "cartpole"])
def test_samples_are_exact_euler_successors(name):
    sysm = make_system(name)
    ds = generate_dataset(sysm, {"D1": (20, 10), "Da": (5, 5)}, seed=0)
    np.testing.assert_array_equal(ds.Y, euler_step(sysm.rhs, ds.X, ds.U, sysm.dt))
    for i in range(0, len(ds), 17):
        np.testing.assert_array_equal(ds.Y[i], euler_step(sysm.rhs, ds.X[i], ds.U[i], sysm.dt))


def test_samples_chain_within_trajectories():
    ds = generate_dataset(make_system("duffing"), {"D1": (3, 6), "Da": (2, 3)}, seed=2)
    same = ds.traj_id[1:] == ds.traj_id[:-1]
    np.testing.assert_array_equal(ds.Y[:-1][same], ds.X[1:][same])
    assert np.all(np.abs(ds.U) <= 2.5)
    first = ds.step == 0
    assert np.all(np.abs(ds.X[first]) <= 3.0)


def test_bad_partition_label():
    with pytest.raises(ConfigError):
        generate_dataset(make_system("duffing"), {"train": (1, 2)}, seed=0)
