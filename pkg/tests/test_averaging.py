import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from kma.averaging import (
    ModelEnsemble,
    WeightedModel,
    advance_latent,
    as_weighted,
    build_weighted_model,
    elpd,
    log_predictive_density,
    member_partitions,
    predict_state,
    pseudo_bma_weights,
    rollout,
    run_kma,
)
from kma.dynamics import generate_dataset, make_system
from kma.edmd import GaussianNoiseModel, LinearEmbeddingModel, fit_model
from kma.errors import ConfigError, DivergedError
from kma.features import init_features
from kma.training import TrainConfig

from conftest import Samples, linear_samples, random_stable

LOG_2PI = math.log(2 * math.pi)


def _scalar(a, c, b=0.0):
    return LinearEmbeddingModel(np.array([[a]]), np.array([[b]]), np.array([[c]]))


def _unit_noise_model(n):
    noise = GaussianNoiseModel(np.ones(n), np.ones(n))
    return LinearEmbeddingModel(np.eye(n), np.zeros((n, 1)), np.eye(n), noise)


def test_log_density_cases():
    m, lift = _unit_noise_model(2), init_features(2, 0)
    x = np.array([0.3, -0.4])
    assert log_predictive_density(m, lift, x, [0.0], x) == pytest.approx(-LOG_2PI, abs=1e-15)
    assert -LOG_2PI == pytest.approx(-1.837877, abs=1e-6)
    assert log_predictive_density(m, lift, x, [0.0], x + [1, 0]) == pytest.approx(-LOG_2PI - 0.5, abs=1e-15)
    lat = log_predictive_density(m, lift, x, [0.0], x, space="latent")
    assert lat == pytest.approx(-LOG_2PI, abs=1e-15)


def test_elpd_cases():
    m, lift = _unit_noise_model(2), init_features(2, 0)
    one = Samples(np.zeros((1, 2)), np.zeros((1, 1)), np.zeros((1, 2)))
    assert elpd(m, lift, one) == pytest.approx(-LOG_2PI, abs=1e-15)
    with pytest.raises(ValueError):
        elpd(m, lift, Samples(np.zeros((0, 2)), np.zeros((0, 1)), np.zeros((0, 2))))
    rng = np.random.default_rng(0)
    X = rng.normal(size=(20, 2))
    da = Samples(X, np.zeros((20, 1)), X)
    bad = LinearEmbeddingModel(1.1 * np.eye(2), np.zeros((2, 1)), np.eye(2), m.noise)
    assert elpd(m, lift, da) > elpd(bad, lift, da)


def test_weight_cases():
    np.testing.assert_array_equal(pseudo_bma_weights([0.0, 0.0]), [0.5, 0.5])
    np.testing.assert_allclose(pseudo_bma_weights([math.log(3), 0.0]), [0.75, 0.25], rtol=0, atol=1e-12)
    w = pseudo_bma_weights([1000.0, 0.0])
    assert np.all(np.isfinite(w))
    np.testing.assert_allclose(w, [1.0, 0.0], atol=1e-300)
    with pytest.raises(ValueError):
        pseudo_bma_weights([])


elpd_lists = st.lists(st.floats(-1e4, 1e4), min_size=1, max_size=8)


@settings(max_examples=200, deadline=None)
@given(elpd_lists, st.floats(-1e4, 1e4))
def test_weights_are_a_shift_invariant_distribution(e, c):
    w = pseudo_bma_weights(e)
    assert np.all(w >= 0) and abs(math.fsum(w) - 1.0) < 1e-12
    np.testing.assert_allclose(pseudo_bma_weights(np.array(e) + c), w, atol=1e-9)
    top = np.sort(e)[::-1]
    if len(e) == 1 or top[0] - top[1] > 1e-9:
        assert np.argmax(w) == np.argmax(e)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=2, max_size=6, unique=True))
def test_weights_strictly_monotone_in_elpd(e):
    assume(np.min(np.diff(np.sort(e))) > 1e-9)
    w = pseudo_bma_weights(e)
    order = np.argsort(e)
    assert np.all(np.diff(w[order]) > 0)


def test_weighted_matrices():
    m1, m2 = _scalar(1.0, 1.0), _scalar(3.0, 2.0)
    wm = build_weighted_model([m1, m2], [0.5, 0.5])
    assert wm.CA_bar[0, 0] == 3.5
    assert wm.A_bar[0, 0] == 2.0
    # averaging decoder and dynamics separately would give 1.5 * 2 = 3
    assert predict_state(wm, np.array([1.0]), np.array([0.0]))[0] == 3.5
    z = LinearEmbeddingModel(np.zeros((2, 2)), np.zeros((2, 1)), np.eye(2))
    t = LinearEmbeddingModel(2 * np.eye(2), np.zeros((2, 1)), np.eye(2))
    np.testing.assert_array_equal(build_weighted_model([z, t], [0.5, 0.5]).A_bar, np.eye(2))
    with pytest.raises(ValueError):
        build_weighted_model([m1, z], [0.5, 0.5])
    with pytest.raises(ValueError):
        build_weighted_model([m1, m2], [1.0])


@pytest.mark.parametrize("seed", range(10))
def test_product_order_on_random_ensembles(seed):
    rng = np.random.default_rng(seed)
    nz, n = 4, 2
    members = [LinearEmbeddingModel(rng.normal(size=(nz, nz)), rng.normal(size=(nz, 1)), rng.normal(size=(n, nz)))
               for _ in range(3)]
    w = pseudo_bma_weights(rng.normal(size=3))
    wm = build_weighted_model(members, w)
    ref = sum(wi * m.C @ m.A for wi, m in zip(w, members))
    np.testing.assert_allclose(wm.CA_bar, ref, atol=1e-12)
    naive = sum(wi * m.C for wi, m in zip(w, members)) @ sum(wi * m.A for wi, m in zip(w, members))
    assert np.max(np.abs(wm.CA_bar - naive)) > 1e-6


def test_single_member_identity():
    rng = np.random.default_rng(3)
    m = LinearEmbeddingModel(rng.normal(size=(3, 3)), rng.normal(size=(3, 1)), rng.normal(size=(2, 3)))
    wm = build_weighted_model([m], [1.0])
    np.testing.assert_array_equal(wm.A_bar, m.A)
    np.testing.assert_array_equal(wm.CA_bar, m.C @ m.A)
    z, u = rng.normal(size=3), rng.normal(size=1)
    np.testing.assert_allclose(predict_state(wm, z, u), m.C @ (m.A @ z + m.B @ u), atol=1e-12)


def test_latent_and_state_steps():
    wm = as_weighted(_scalar(2.0, 1.0, b=1.0))
    assert advance_latent(wm, np.array([3.0]), np.array([1.0]))[0] == 7.0
    assert advance_latent(wm, np.zeros(1), np.zeros(1))[0] == 0.0
    assert predict_state(wm, np.zeros(1), np.zeros(1))[0] == 0.0
    ident = as_weighted(LinearEmbeddingModel(np.eye(2), np.zeros((2, 1)), np.eye(2)))
    z = np.array([0.3, 0.7])
    np.testing.assert_array_equal(advance_latent(ident, z, [5.0]), z)


def test_noise_model_is_never_read_by_predictions():
    rng = np.random.default_rng(4)
    m = LinearEmbeddingModel(random_stable(rng, 2), rng.normal(size=(2, 1)), np.eye(2),
                             GaussianNoiseModel(np.ones(2), np.ones(2)))
    U = rng.normal(size=(10, 1))
    lift = init_features(2, 0)
    a = rollout(as_weighted(m), lift, [1.0, 0.0], U)
    b = rollout(as_weighted(m.with_noise(GaussianNoiseModel(9 * np.ones(2), 4 * np.ones(2)))), lift, [1.0, 0.0], U)
    np.testing.assert_array_equal(a, b)


def test_rollout_cases():
    lift = init_features(2, 0)
    ident = as_weighted(LinearEmbeddingModel(np.eye(2), np.zeros((2, 1)), np.eye(2)))
    out = rollout(ident, lift, [0.4, -0.1], np.ones((7, 1)))
    np.testing.assert_array_equal(out, np.tile([0.4, -0.1], (7, 1)))
    wm = as_weighted(_scalar(2.0, 1.0, b=1.0))
    one = rollout(wm, init_features(1, 0), [3.0], [[1.0]])
    assert one.shape == (1, 1) and one[0, 0] == 7.0
    blow = as_weighted(_scalar(1e300, 1.0))
    with pytest.raises(DivergedError) as err, np.errstate(over="ignore"):
        rollout(blow, init_features(1, 0), [1.0], np.zeros((5, 1)))
    assert err.value.step == 2


def test_rollout_of_exact_ensemble_matches_truth():
    rng = np.random.default_rng(5)
    A, B = random_stable(rng, 3), rng.normal(size=(3, 1))
    lift = init_features(3, 0)
    members = [fit_model(lift, linear_samples(A, B, 60, rng)) for _ in range(3)]
    wm = build_weighted_model(ModelEnsemble(lift, members), pseudo_bma_weights([0.0, 1.0, 2.0]))
    U = rng.uniform(-1, 1, size=(50, 1))
    x, truth = rng.normal(size=3), []
    x0 = x.copy()
    for u in U:
        x = A @ x + B @ u
        truth.append(x)
    np.testing.assert_allclose(rollout(wm, lift, x0, U), truth, atol=1e-6)


def test_re_encode_matches_latent_for_identity_lift():
    rng = np.random.default_rng(6)
    wm = as_weighted(LinearEmbeddingModel(random_stable(rng, 2), rng.normal(size=(2, 1)), np.eye(2)))
    U = rng.normal(size=(20, 1))
    lift = init_features(2, 0)
    np.testing.assert_allclose(rollout(wm, lift, [1, 1], U), rollout(wm, lift, [1, 1], U, re_encode=True), atol=1e-12)


def test_permutation_equivariance():
    rng = np.random.default_rng(8)
    members = [LinearEmbeddingModel(rng.normal(size=(3, 3)), rng.normal(size=(3, 1)), rng.normal(size=(2, 3)))
               for _ in range(4)]
    e = rng.normal(size=4)
    perm = rng.permutation(4)
    a = build_weighted_model(members, pseudo_bma_weights(e))
    b = build_weighted_model([members[i] for i in perm], pseudo_bma_weights(e[perm]))
    np.testing.assert_allclose(a.CA_bar, b.CA_bar, atol=1e-12)
    np.testing.assert_allclose(a.A_bar, b.A_bar, atol=1e-12)


def test_member_partitions():
    assert member_partitions(["Da", "D10", "D2", "D1"]) == ["D1", "D2", "D10"]
    with pytest.raises(ConfigError, match="held-out partition required"):
        member_partitions(["D1", "D2"])


@pytest.fixture(scope="module")
def small_kma():
    ds = generate_dataset(make_system("duffing"), {"D1": (20, 10), "D2": (10, 10), "D3": (10, 10), "Da": (5, 5)},
                          seed=0)
    return ds, run_kma(ds, TrainConfig(epochs=3, batch_size=32))


def test_run_kma_members_and_weights(small_kma):
    ds, res = small_kma
    assert len(res.ensemble) == 3 and res.ensemble.partitions == ["D1", "D2", "D3"]
    assert res.w.shape == (3,) and abs(math.fsum(res.w) - 1) < 1e-12
    assert res.n_heldout == 25
    np.testing.assert_array_equal(res.ensemble.members[0].C, np.eye(2, 3))
    m2 = fit_model(res.lift, ds.select("D2"))
    np.testing.assert_array_equal(res.ensemble.members[1].A, m2.A)


def test_run_kma_single_member_is_the_base_model(small_kma):
    ds, res = small_kma
    base = (res.lift, res.ensemble.members[0], res.report)
    one = run_kma(ds.select("D1", "Da"), base=base)
    assert one.w.tolist() == [1.0]
    member = one.ensemble.members[0]
    np.testing.assert_array_equal(one.weighted.A_bar, member.A)
    np.testing.assert_array_equal(one.weighted.CA_bar, member.C @ member.A)
    U = np.random.default_rng(0).uniform(-2.5, 2.5, size=(50, 1))
    x0 = np.array([1.0, -0.5])
    np.testing.assert_array_equal(rollout(one.weighted, one.lift, x0, U), rollout(as_weighted(member), one.lift, x0, U))
    np.testing.assert_array_equal(one.weighted.CA_bar, as_weighted(member).CA_bar)


def test_run_kma_rejects_bad_sizes(small_kma):
    ds, res = small_kma
    base = (res.lift, res.ensemble.members[0], res.report)
    with pytest.raises(ConfigError):
        run_kma(ds, n_members=4, base=base)
    with pytest.raises(ConfigError, match="held-out"):
        run_kma(ds.select("D1", "D2"), base=base)
