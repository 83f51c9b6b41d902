import math

import jax
import jax.numpy as jnp
import numpy as np
import pytest
from scipy import stats

from active_tactile import ekf, training
from active_tactile import generative_model as gm
from active_tactile.ekf import GaussianBelief
from active_tactile.errors import ConfigurationError, DatasetError, LossError
from active_tactile.training import EpisodeRecord, LossConfig, Normalizer

from oracles import expected_loglik_under_belief, kalman_filter, simulate_linear

HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)


def linear_dataset(ls, n_episodes=8, T=30, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_episodes):
        m = rng.uniform(-1, 1)
        actions = rng.normal(size=(T, 2)) * 0.5
        x0 = np.append(np.zeros(ls.n), m)
        obs = simulate_linear(ls.F, ls.G, ls.H, ls.Q, ls.R, x0, actions, rng)
        out.append(EpisodeRecord(actions, obs, m, episode_id=i))
    return out


def small_model(seed=0, n=3, d=2):
    return gm.init_world_model(jax.random.PRNGKey(seed), n=n, a_dim=2, d=d, property_range=(-1.0, 1.0),
                               hidden_width=8, depth=3)


# --- observation loss ---------------------------------------------------------

def test_observation_loss_at_mode():
    m = gm.linear_stub_model(np.eye(2), np.array([[1.0, 2.0], [0.0, -1.0], [3.0, 1.0]]), 0.1, 1.0)
    means = jnp.asarray(np.random.default_rng(0).normal(size=(5, 3)))
    beliefs = GaussianBelief(means, jnp.zeros((5, 3, 3)))
    obs = jax.vmap(lambda x: gm.observe_mean(m, x))(means)
    loss = training.observation_loss(m, beliefs, obs, 4, jax.random.PRNGKey(0))
    assert float(loss) == pytest.approx(3 * HALF_LOG_2PI, abs=1e-9)


def _bars_and_oracle(ls, T=200, seed=0):
    rng = np.random.default_rng(seed)
    actions = rng.normal(size=(T, 2)) * 0.5
    obs = simulate_linear(ls.F, ls.G, ls.H, ls.Q, ls.R, np.append(np.zeros(ls.n), 0.3), actions, rng)
    prior = ekf.initial_belief(ls.n, (-1.0, 1.0))
    bars, _ = ekf.filter_rollout(ls.model, prior, actions, obs)
    _, _, exact = kalman_filter(ls.F, ls.G, ls.H, ls.Q, ls.R, np.asarray(prior.mean), np.asarray(prior.cov),
                                actions, obs)
    closed = sum(expected_loglik_under_belief(ls.H, ls.R, obs[t], np.asarray(bars.mean[t]), np.asarray(bars.cov[t]))
                 for t in range(T))
    return bars, obs, exact, closed


def test_bound_below_exact_loglik(linear_system):
    ls = linear_system
    bars, obs, exact, closed = _bars_and_oracle(ls)
    T = len(obs)
    est = np.array([-float(training.observation_loss(ls.model, bars, obs, 1000, jax.random.PRNGKey(s))) * T
                    for s in range(100)])
    se = est.std(ddof=1) / np.sqrt(len(est))
    assert closed <= exact
    assert est.mean() <= exact + 3 * se
    assert abs(est.mean() - closed) <= 3 * se + 1e-9


def test_bound_tight_once_filter_has_converged():
    # small process noise relative to sensor noise: the predicted covariance collapses and the gap vanishes
    from conftest import LinearSystem
    ls = LinearSystem(seed=1, q=0.01, r=1.0)
    bars, obs, exact, closed = _bars_and_oracle(ls)
    est = np.mean([-float(training.observation_loss(ls.model, bars, obs, 1000, jax.random.PRNGKey(s))) * len(obs)
                   for s in range(10)])
    assert est <= exact
    assert abs(est - exact) <= 0.02 * abs(exact)


def test_more_samples_lower_variance(linear_system):
    ls = linear_system
    bars, obs, _, _ = _bars_and_oracle(ls, T=30)
    est = {N: np.array([float(training.observation_loss(ls.model, bars, obs, N, jax.random.PRNGKey(s)))
                        for s in range(100)]) for N in (1, 8)}
    assert np.all(np.isfinite(est[1])) and np.all(np.isfinite(est[8]))
    assert est[8].var() < est[1].var()


def test_nonfinite_log_density_names_timestep(linear_system):
    ls = linear_system
    bars, obs, _, _ = _bars_and_oracle(ls, T=10)
    obs = np.array(obs)
    obs[6, 1] = np.inf
    with pytest.raises(LossError, match="timestep 6"):
        training.observation_loss(ls.model, bars, obs, 2, jax.random.PRNGKey(0))


# --- property loss -------------------------------------------------------------------

def _beliefs_with(mu, var, T=4, n=2):
    cov = np.tile(np.eye(n + 1), (T, 1, 1))
    cov[:, n, n] = var
    mean = np.zeros((T, n + 1))
    mean[:, n] = mu
    return GaussianBelief(jnp.asarray(mean), jnp.asarray(cov))


def test_property_loss_values():
    assert float(training.property_loss(_beliefs_with(0.7, 1.0), 0.7)) == pytest.approx(0.9189385, abs=1e-6)
    assert float(training.property_loss(_beliefs_with(1.7, 1.0), 0.7)) == pytest.approx(1.4189385, abs=1e-6)


def test_property_loss_with_floored_sigma():
    loss = training.property_loss(_beliefs_with(0.5, 0.0), 0.5)
    assert np.isfinite(float(loss))
    assert float(loss) == pytest.approx(math.log(1e-9) + HALF_LOG_2PI, rel=1e-12)


def test_property_loss_gradient_wrt_dynamics_parameter():
    model = small_model(1)
    rng = np.random.default_rng(2)
    T = 6
    actions, obs = rng.normal(size=(T, 2)) * 0.3, rng.normal(size=(T, 2))
    prior = ekf.initial_belief(3, (-1.0, 1.0))

    def loss(w_cand):
        f = gm.GruParams(model.f.w_update, model.f.w_reset, w_cand, model.f.b_update, model.f.b_reset,
                         model.f.b_cand)
        _, posts = ekf._scan_filter(gm.with_stubs(model, f=f), prior, jnp.asarray(actions), jnp.asarray(obs))
        return training.property_loss(posts, 0.4)

    W = model.f.w_cand
    g = np.asarray(jax.grad(loss)(W))
    for i, j in [(0, 3), (1, 1), (2, 4), (0, 0)]:
        h = 1e-5
        Wp, Wm = W.at[i, j].add(h), W.at[i, j].add(-h)
        fd = (float(loss(Wp)) - float(loss(Wm))) / (2 * h)
        assert abs(g[i, j] - fd) <= 1e-3 * max(abs(fd), 1e-6)


# --- total loss --------------------------------------------------------------------------

@pytest.fixture(scope="module")
def lin_records():
    from conftest import LinearSystem
    ls = LinearSystem()
    data = linear_dataset(ls, n_episodes=6, T=30)
    return ls, training.replay_beliefs(data, ls.model, ekf.initial_belief(ls.n, (-1.0, 1.0)))


def test_total_loss_components(lin_records):
    ls, data = lin_records
    model = small_model(0)
    cfg = LossConfig(alpha=0.0, seq_len=8, batch_size=4)
    batch = training.sample_tbptt_batch(data, cfg, np.random.default_rng(0))
    key = jax.random.PRNGKey(3)
    obs_l, prop_l = training.loss_components(model, batch, cfg, key)
    assert float(training.total_loss(model, batch, cfg, key)) == float(obs_l)
    cfg1 = LossConfig(alpha=1.0, seq_len=8, batch_size=4)
    assert float(training.total_loss(model, batch, cfg1, key)) == float(obs_l) + float(prop_l)
    # window-level definition
    w0 = batch.init[0]
    bars, posts = ekf._scan_filter(model, w0, batch.actions[0], batch.observations[0])
    k0 = jax.random.split(key, 4)[0]
    ref = training.observation_loss(model, bars, batch.observations[0], cfg.n_samples, k0)
    per = jax.vmap(training._window_losses, in_axes=(None, 0, 0, 0, 0, 0, None))(
        model, batch.init, batch.actions, batch.observations, batch.m_true, jax.random.split(key, 4), 4)
    assert float(per[0][0]) == pytest.approx(float(ref), rel=1e-12)
    assert float(per[1][0]) == pytest.approx(float(training.property_loss(posts, batch.m_true[0])), rel=1e-12)


def test_training_reduces_loss_on_linear_data(lin_records):
    ls, data = lin_records
    model = small_model(0)
    prior = ekf.initial_belief(3, (-1.0, 1.0))
    data = training.replay_beliefs(data, model, prior)
    cfg = LossConfig(seq_len=10, batch_size=16, steps_per_epoch=200)
    eval_batch = training.sample_tbptt_batch(data, LossConfig(seq_len=10, batch_size=64), np.random.default_rng(9))
    key = jax.random.PRNGKey(0)
    before = [float(x) for x in training.loss_components(model, eval_batch, cfg, key)]
    model2, _, metrics = training.train_epoch(data, model, training.init_optimizer(model, cfg), cfg,
                                              np.random.default_rng(1))
    after = [float(x) for x in training.loss_components(model2, eval_batch, cfg, key)]
    assert len(metrics) == 200
    total_before, total_after = before[0] + before[1], after[0] + after[1]
    assert total_after < total_before - 0.1 * abs(total_before)
    assert after[1] <= before[1] - 0.1 * abs(before[1])


# --- TBPTT batching ---------------------------------------------------------------------

def _records_with_beliefs(n_eps, T, n=2, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_eps):
        b = GaussianBelief(rng.normal(size=(T, n + 1)), np.tile(np.eye(n + 1), (T, 1, 1)) * rng.uniform(0.5, 2))
        out.append(EpisodeRecord(rng.normal(size=(T, 2)), rng.normal(size=(T, 4)), rng.uniform(), b, 0,
                                 episode_id=i))
    return out


def test_single_valid_start():
    data = _records_with_beliefs(3, 10)
    batch = training.sample_tbptt_batch(data, LossConfig(seq_len=10, batch_size=50), np.random.default_rng(0))
    assert np.all(np.asarray(batch.t0) == 0)


def test_window_start_uniform():
    data = _records_with_beliefs(1, 100)
    cfg = LossConfig(seq_len=20, batch_size=10_000)
    batch = training.sample_tbptt_batch(data, cfg, np.random.default_rng(1))
    counts = np.bincount(np.asarray(batch.t0), minlength=81)
    assert counts.shape == (81,)
    assert stats.chisquare(counts).pvalue > 0.01


def test_window_contents_bit_identical():
    data = _records_with_beliefs(4, 30)
    batch = training.sample_tbptt_batch(data, LossConfig(seq_len=7, batch_size=12), np.random.default_rng(2))
    for k in range(12):
        rec, t0 = data[int(batch.episode[k])], int(batch.t0[k])
        assert np.asarray(batch.init.mean[k]).tobytes() == rec.stored_beliefs.mean[t0].tobytes()
        assert np.asarray(batch.init.cov[k]).tobytes() == rec.stored_beliefs.cov[t0].tobytes()
        np.testing.assert_array_equal(np.asarray(batch.actions[k]), rec.actions[t0:t0 + 7])
        np.testing.assert_array_equal(np.asarray(batch.observations[k]), rec.observations[t0:t0 + 7])
        assert float(batch.m_true[k]) == rec.m_true


def test_batch_errors():
    with pytest.raises(DatasetError):
        training.sample_tbptt_batch([], LossConfig(), np.random.default_rng(0))
    with pytest.raises(ConfigurationError):
        training.sample_tbptt_batch(_records_with_beliefs(1, 5), LossConfig(seq_len=6), np.random.default_rng(0))
    with pytest.raises(ConfigurationError):
        LossConfig(n_samples=0)


def test_normalizer_applied_in_batch():
    data = _records_with_beliefs(2, 10)
    norm = Normalizer(np.ones(4), np.full(4, 2.0))
    b = training.sample_tbptt_batch(data, LossConfig(seq_len=10, batch_size=3), np.random.default_rng(0), norm)
    rec = data[int(b.episode[0])]
    np.testing.assert_allclose(np.asarray(b.observations[0]), (rec.observations - 1.0) / 2.0)


# --- replay ----------------------------------------------------------------------------------

def test_replay_matches_kalman_oracle(lin_records):
    ls, data = lin_records
    prior = ekf.initial_belief(ls.n, (-1.0, 1.0))
    for rec in data[:3]:
        _, posts, _ = kalman_filter(ls.F, ls.G, ls.H, ls.Q, ls.R, np.asarray(prior.mean), np.asarray(prior.cov),
                                    rec.actions, rec.observations)
        np.testing.assert_array_equal(rec.stored_beliefs.mean[0], np.asarray(prior.mean))
        for t in range(1, rec.T):
            np.testing.assert_allclose(rec.stored_beliefs.mean[t], posts[t - 1][0], atol=1e-8)
            np.testing.assert_allclose(rec.stored_beliefs.cov[t], posts[t - 1][1], atol=1e-8)


def test_replay_idempotent_and_sensitive(lin_records):
    ls, data = lin_records
    model = small_model(4, n=3)
    prior = ekf.initial_belief(3, (-1.0, 1.0))
    a = training.replay_beliefs(data, model, prior)
    b = training.replay_beliefs(a, model, prior)
    for x, y in zip(a, b):
        assert x.stored_beliefs.mean.tobytes() == y.stored_beliefs.mean.tobytes()
        assert x.stored_beliefs.cov.tobytes() == y.stored_beliefs.cov.tobytes()
    moved = jax.tree_util.tree_map(lambda p: p * 1.1, model)
    c = training.replay_beliefs(a, moved, prior)
    assert any(not np.array_equal(x.stored_beliefs.mean, y.stored_beliefs.mean) for x, y in zip(a, c))


def test_replay_flags_divergent_episode(lin_records, caplog):
    ls, data = lin_records
    bad = EpisodeRecord(data[0].actions, np.full_like(data[0].observations, np.nan), 0.0, episode_id=99)
    out = training.replay_beliefs(data[:2] + [bad], ls.model, ekf.initial_belief(ls.n, (-1.0, 1.0)))
    assert [r.valid for r in out] == [True, True, False]
    assert out[2].stored_beliefs is None
    batch = training.sample_tbptt_batch(out, LossConfig(seq_len=5, batch_size=200), np.random.default_rng(0))
    assert 2 not in set(np.asarray(batch.episode).tolist())
    # a later successful replay restores the episode
    fixed = EpisodeRecord(data[0].actions, data[0].observations, 0.0, None, 0, None, False, 99)
    again = training.replay_beliefs([fixed], ls.model, ekf.initial_belief(ls.n, (-1.0, 1.0)))
    assert again[0].valid


# --- train_epoch -----------------------------------------------------------------------------

def test_zero_learning_rate_leaves_model_unchanged(lin_records):
    _, data = lin_records
    model = small_model(0)
    data = training.replay_beliefs(data, model, ekf.initial_belief(3, (-1.0, 1.0)))
    cfg = LossConfig(learning_rate=0.0, seq_len=8, batch_size=4, steps_per_epoch=3)
    out, _, metrics = training.train_epoch(data, model, training.init_optimizer(model, cfg), cfg,
                                           np.random.default_rng(0))
    for a, b in zip(jax.tree_util.tree_leaves(model), jax.tree_util.tree_leaves(out)):
        assert np.asarray(a).tobytes() == np.asarray(b).tobytes()
    assert len(metrics) == 3 and len(metrics.grad_norm) == 3


def test_nonfinite_loss_skips_and_halves(lin_records):
    _, data = lin_records
    model = small_model(0)
    data = training.replay_beliefs(data, model, ekf.initial_belief(3, (-1.0, 1.0)))
    poisoned = [training.EpisodeRecord(r.actions, np.full_like(r.observations, np.nan), r.m_true, r.stored_beliefs,
                                       episode_id=r.episode_id) for r in data]
    cfg = LossConfig(seq_len=8, batch_size=4, steps_per_epoch=3, learning_rate=0.01)
    out, _, metrics = training.train_epoch(poisoned, model, training.init_optimizer(model, cfg), cfg,
                                           np.random.default_rng(0))
    assert metrics.skipped == [0, 1, 2]
    assert metrics.final_lr == 0.01 / 8
    for a, b in zip(jax.tree_util.tree_leaves(model), jax.tree_util.tree_leaves(out)):
        assert np.asarray(a).tobytes() == np.asarray(b).tobytes()


def test_train_epoch_requires_data():
    with pytest.raises(DatasetError):
        training.train_epoch([], small_model(0), None, LossConfig(), np.random.default_rng(0))


def test_gradients_match_finite_differences_across_networks(lin_records):
    _, data = lin_records
    model = small_model(2)
    data = training.replay_beliefs(data, model, ekf.initial_belief(3, (-1.0, 1.0)))
    cfg = LossConfig(seq_len=6, batch_size=3, n_samples=2)
    batch = training.sample_tbptt_batch(data, cfg, np.random.default_rng(5))
    key = jax.random.PRNGKey(1)
    loss = jax.jit(lambda m: training.total_loss(m, batch, cfg, key))
    grads = jax.grad(lambda m: training.total_loss(m, batch, cfg, key))(model)
    leaves, treedef = jax.tree_util.tree_flatten(model)
    g_leaves = jax.tree_util.tree_leaves(grads)
    rng = np.random.default_rng(0)
    checked = 0
    for net in ("f", "sigma", "h", "gamma"):
        idx = [i for i, (p, _) in enumerate(jax.tree_util.tree_flatten_with_path(model)[0])
               if jax.tree_util.keystr(p).startswith(f".{net}")]
        for _ in range(5):
            li = int(rng.choice(idx))
            flat = np.asarray(leaves[li]).ravel()
            j = int(rng.integers(flat.size))
            h = 1e-5

            def at(v):
                new = flat.copy()
                new[j] = v
                ls = list(leaves)
                ls[li] = jnp.asarray(new.reshape(np.shape(leaves[li])))
                return float(loss(jax.tree_util.tree_unflatten(treedef, ls)))

            fd = (at(flat[j] + h) - at(flat[j] - h)) / (2 * h)
            an = float(np.asarray(g_leaves[li]).ravel()[j])
            assert abs(an - fd) <= 1e-3 * max(abs(fd), 1e-6), (net, li, j, an, fd)
            checked += 1
    assert checked == 20


# --- persistence -----------------------------------------------------------------------------

def test_dataset_round_trip(tmp_path, lin_records):
    _, data = lin_records
    for i, r in enumerate(data):
        r.epoch_tag = i // 2
    training.save_dataset(tmp_path, data)
    back = training.load_dataset(tmp_path)
    assert len(back) == len(data)
    for a, b in zip(data, back):
        assert a.actions.tobytes() == b.actions.tobytes()
        assert a.observations.tobytes() == b.observations.tobytes()
        assert a.stored_beliefs.cov.tobytes() == b.stored_beliefs.cov.tobytes()
        assert a.m_true == b.m_true and a.epoch_tag == b.epoch_tag
    tags = [r.epoch_tag for r in back]
    assert tags == sorted(tags)


def test_episode_files_are_append_only(tmp_path, lin_records):
    _, data = lin_records
    training.save_episode(tmp_path, data[0])
    before = (tmp_path / "episode_000000.bin").read_bytes()
    changed = EpisodeRecord(data[0].actions * 2, data[0].observations, 0.0, None, 0, None, True, 0)
    training.save_episode(tmp_path, changed)
    assert (tmp_path / "episode_000000.bin").read_bytes() == before
    assert training.load_episode(tmp_path, 0).stored_beliefs is None


def test_normalizer_fit_floor():
    obs = np.zeros((5, 10, 4))
    obs[..., 0] = np.arange(10)
    n = Normalizer.fit(obs)
    assert n.std[1] == 1e-3 and n.mean[0] == 4.5
    np.testing.assert_allclose(n.apply(obs).reshape(-1, 4)[:, 0].std(), 1.0)
