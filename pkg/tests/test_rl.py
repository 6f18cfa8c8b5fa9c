import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import binomial_tail_abs_score, grad_agrees, numeric_partial
from speechrl.features import FeatureMatrix
from speechrl.policy import ArchitectureSpec, NonFiniteLoss, action_probs, init_policy
from speechrl.rl import (GREEDY, SAMPLE, TERMINAL, ClassificationEnv, DatasetTooSmall, EnvConfig,
                         Episode, EpisodeFinished, PolicyMismatch, TrainRunConfig,
                         reinforce_loss_grad, reinforce_update, reward, run_episode,
                         run_experiment, select_action)

TINY = ArchitectureSpec(n_classes=2, n_mfcc=4, n_frames=3, conv_filters=(2,), lstm_units=3,
                        dense_units=(5,))


def dataset(n, n_classes=2, seed=0, shape=(4, 3), labels=None):
    rng = np.random.default_rng(seed)
    return [FeatureMatrix(rng.normal(size=shape), f"d/{i}",
                          (i % n_classes) if labels is None else labels[i]) for i in range(n)]


def fixed_policy(arch, cls, seed=0):
    """Zero action weights and a bias that always picks ``cls``."""
    pol = init_policy(arch, seed)
    b = np.zeros(arch.n_classes)
    b[cls] = 10.0
    return pol.replace(dict(pol.params, **{"action.W": np.zeros((arch.dense_units[-1], arch.n_classes)),
                                           "action.b": b}))


def uniform_policy(arch, seed=0):
    pol = init_policy(arch, seed)
    return pol.replace(dict(pol.params, **{"action.W": np.zeros((arch.dense_units[-1], arch.n_classes)),
                                           "action.b": np.zeros(arch.n_classes)}))


def test_reward_examples():
    assert reward(3, 3) == 1
    assert reward(2, 3) == -1


def test_draw_is_distinct_items():
    env = ClassificationEnv(EnvConfig(dataset(120), 2, eta=50, shuffle_seed=4))
    env.reset()
    assert len(set(env.items.tolist())) == 50


def test_dataset_equal_to_eta_gives_permutation():
    env = ClassificationEnv(EnvConfig(dataset(50), 2, eta=50))
    env.reset()
    assert sorted(env.items.tolist()) == list(range(50))


def test_draw_replays_by_episode_index():
    cfg = EnvConfig(dataset(100), 2, eta=50, shuffle_seed=9)
    a, b = ClassificationEnv(cfg), ClassificationEnv(cfg)
    for _ in range(3):
        a.reset()
    b.reset(episode_index=2)
    np.testing.assert_array_equal(a.items, b.items)
    assert not np.array_equal(a.draw(0), a.draw(1))


def test_dataset_too_small():
    env = ClassificationEnv(EnvConfig(dataset(10), 2, eta=50))
    with pytest.raises(DatasetTooSmall):
        env.reset()


def test_eta_must_be_positive():
    with pytest.raises(ValueError):
        EnvConfig(dataset(10), 2, eta=0)


def test_eta_one_finishes_after_one_step():
    env = ClassificationEnv(EnvConfig(dataset(5), 2, eta=1))
    env.reset()
    nxt, r, done = env.execute(0)
    assert done and nxt is TERMINAL and r in (-1, 1)
    with pytest.raises(EpisodeFinished):
        env.execute(0)


def test_all_correct_episode():
    env = ClassificationEnv(EnvConfig(dataset(80), 2, eta=50, shuffle_seed=1))
    env.reset()
    rewards = []
    for i in range(50):
        label = env.labels[env.items[i]]
        nxt, r, done = env.execute(int(label))
        rewards.append(r)
        assert done == (i == 49)
    assert rewards == [1] * 50 and sum(rewards) == 50


def test_invalid_action():
    env = ClassificationEnv(EnvConfig(dataset(5), 2, eta=2))
    env.reset()
    with pytest.raises(ValueError):
        env.execute(2)


def test_policy_mismatch():
    pol = init_policy(ArchitectureSpec(3, n_mfcc=4, n_frames=3, dense_units=(5,)), 0)
    with pytest.raises(PolicyMismatch):
        run_episode(pol, ClassificationEnv(EnvConfig(dataset(5), 2, eta=2)))


def test_select_action_ties_go_to_lowest_index():
    assert select_action(np.array([0.25, 0.5, 0.25]), GREEDY, None) == 1
    assert select_action(np.array([0.4, 0.2, 0.4]), GREEDY, None) == 0
    with pytest.raises(ValueError):
        select_action(np.array([0.5, 0.5]), "epsilon", None)


@settings(max_examples=50)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=10), st.floats(-1e3, 1e3))
def test_greedy_choice_invariant_to_logit_shift(logits, c):
    z = np.array(logits)
    p = np.exp(z - z.max())
    q = np.exp((z + c) - (z + c).max())
    assert select_action(p / p.sum(), GREEDY, None) == select_action(q / q.sum(), GREEDY, None)


def test_greedy_episode_deterministic_and_well_formed():
    pol = init_policy(TINY, 3)
    cfg = EnvConfig(dataset(60), 2, eta=50, shuffle_seed=2)
    a = run_episode(pol, ClassificationEnv(cfg), GREEDY, episode_index=5)
    b = run_episode(pol, ClassificationEnv(cfg), GREEDY, episode_index=5)
    assert a.actions == b.actions and a.rewards == b.rewards
    assert len(a.states) == len(a.actions) == len(a.rewards) == 50
    assert set(a.rewards) <= {-1, 1}
    assert all(0 <= x < 2 for x in a.actions)
    for s, act in zip(a.states, a.actions):
        assert act == int(np.argmax(action_probs(pol, s)))


def test_oracle_policy_scores_eta():
    data = dataset(50, labels=[1] * 50)
    ep = run_episode(fixed_policy(TINY, 1), ClassificationEnv(EnvConfig(data, 2, eta=50)))
    assert ep.rewards == [1] * 50 and ep.score == 50
    single = dataset(1, labels=[0])
    env = ClassificationEnv(EnvConfig(single, 2, eta=1))
    for _ in range(5):
        assert run_episode(fixed_policy(TINY, 0), env).score == 1


def test_states_do_not_depend_on_policy():
    cfg = EnvConfig(dataset(70), 2, eta=50, shuffle_seed=6)
    a = run_episode(fixed_policy(TINY, 0), ClassificationEnv(cfg), episode_index=3)
    b = run_episode(fixed_policy(TINY, 1), ClassificationEnv(cfg), episode_index=3)
    assert [s.clip_ref for s in a.states] == [s.clip_ref for s in b.states]
    assert a.score == -b.score


def test_sample_mode_uniform_policy_binomial():
    # P(|score| > 20) for 50 fair +-1 steps is about 0.0026
    assert binomial_tail_abs_score(50, 20) < 0.005
    pol = uniform_policy(TINY)
    env = ClassificationEnv(EnvConfig(dataset(100), 2, eta=50, shuffle_seed=0))
    rng = np.random.default_rng(11)
    scores = np.array([run_episode(pol, env, SAMPLE, rng).score for _ in range(1000)])
    assert np.mean(np.abs(scores) <= 20) >= 0.95
    assert np.all(scores % 2 == 0)
    assert abs(scores.mean()) < 4 * 50 ** 0.5 / 1000 ** 0.5


def test_sample_mode_needs_rng():
    with pytest.raises(ValueError):
        run_episode(init_policy(TINY, 0), ClassificationEnv(EnvConfig(dataset(5), 2, eta=2)), SAMPLE)


def test_zero_rewards_leave_parameters_unchanged():
    pol = init_policy(TINY, 0)
    ep = run_episode(pol, ClassificationEnv(EnvConfig(dataset(10), 2, eta=5)))
    ep.rewards = [0] * 5
    new, loss = reinforce_update(pol, ep, 0.1, np.random.default_rng(0))
    assert loss == 0.0
    assert all(np.array_equal(new.params[k], pol.params[k]) for k in pol.params)


def test_positive_reward_raises_chosen_probability():
    pol = init_policy(TINY, 1)
    state = dataset(1)[0]
    ep = Episode([state], [0], [1])
    before = action_probs(pol, state)[0]
    new, _ = reinforce_update(pol, ep, 0.05, np.random.default_rng(0))
    assert action_probs(new, state)[0] > before
    ep = Episode([state], [0], [-1])
    new, _ = reinforce_update(pol, ep, 0.05, np.random.default_rng(0))
    assert action_probs(new, state)[0] < before


def test_loss_grad_closed_form():
    logits = np.zeros((2, 2))
    loss, g = reinforce_loss_grad(logits, [0, 1], [1, -1])
    assert abs(loss - 0.0) < 1e-15
    np.testing.assert_allclose(g, [[-0.25, 0.25], [-0.25, 0.25]])
    loss, _ = reinforce_loss_grad(logits, [0, 1], [1, 1])
    assert abs(loss - np.log(2)) < 1e-15


@pytest.mark.parametrize("seed", [0, 1])
def test_update_gradient_matches_finite_differences(seed):
    """The step taken by reinforce_update equals -lr times the numerical gradient."""
    arch = ArchitectureSpec(n_classes=3, n_mfcc=4, n_frames=3, conv_filters=(2,), lstm_units=3,
                            dense_units=(5,))
    pol = init_policy(arch, seed)
    rng = np.random.default_rng(seed + 10)
    params = {k: v + (rng.normal(0, 0.1, v.shape) if k.endswith(".b") else 0) for k, v in pol.params.items()}
    pol = pol.replace(params)
    states = dataset(3, n_classes=3, seed=seed)
    ep = Episode(states, [0, 2, 1], [1, -1, 1])
    lr = 1.0
    new, loss = reinforce_update(pol, ep, lr, np.random.default_rng(42))
    x = np.stack([s.values.T[..., None] for s in states])

    def loss_fn(p):
        logits, _ = pol.net.forward(p, x, train=True, rng=np.random.default_rng(42))
        return reinforce_loss_grad(logits, ep.actions, ep.rewards)[0]

    assert abs(loss_fn(params) - loss) < 1e-14
    bad = []
    for name in params:
        g = (params[name] - new.params[name]) / lr
        for i in range(g.size):
            num = numeric_partial(loss_fn, params, name, i)
            if not grad_agrees(g.flat[i], num):
                bad.append((name, i, g.flat[i], num))
    assert not bad, bad[:5]


def test_update_reuses_rollout_trace_exactly():
    pol = init_policy(TINY, 2)
    ep = run_episode(pol, ClassificationEnv(EnvConfig(dataset(30), 2, eta=10)))
    assert ep.trace is not None
    a, la = reinforce_update(pol, ep, 0.01, np.random.default_rng(5))
    fresh = Episode(ep.states, ep.actions, ep.rewards)
    b, lb = reinforce_update(pol, fresh, 0.01, np.random.default_rng(5))
    assert la == lb
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_detected():
    pol = init_policy(TINY, 0)
    ep = Episode(dataset(2), [0, 1], [np.inf, 1])
    with pytest.raises(NonFiniteLoss):
        reinforce_update(pol, ep, 0.1, np.random.default_rng(0))


def test_run_experiment_one_episode():
    cfg = TrainRunConfig(n_episodes=1, eta=50, pretrain=False)
    res = run_experiment(cfg, init_policy(TINY, 0), dataset(60))
    assert len(res.log.scores) == 1
    assert -50 <= res.log.scores[0] <= 50
    assert res.log.metadata["mode"] == GREEDY


def test_run_experiment_zero_episodes():
    pol = init_policy(TINY, 0)
    res = run_experiment(TrainRunConfig(n_episodes=0, pretrain=False), pol, dataset(60))
    assert res.log.scores == []
    assert res.policy is pol and res.pretrain_report is None


def test_run_experiment_deterministic_and_checkpoints(tmp_path):
    cfg = TrainRunConfig(n_episodes=6, eta=10, pretrain=True, learning_rate=0.01, checkpoint_every=3,
                         shuffle_seed=1, dropout_seed=2)
    data = dataset(40)
    a = run_experiment(cfg, init_policy(TINY, 0), data, pretrain_data=dataset(20, seed=5),
                       checkpoint_dir=tmp_path)
    b = run_experiment(cfg, init_policy(TINY, 0), data, pretrain_data=dataset(20, seed=5))
    assert a.log.scores == b.log.scores
    assert a.pretrain_report is not None
    assert sorted(p.name for p in tmp_path.iterdir()) == ["episode_000003.poln", "episode_000006.poln"]


def test_run_experiment_attaches_partial_log():
    def boom(j, ep):
        if j == 2:
            raise RuntimeError("stop")
    with pytest.raises(RuntimeError) as err:
        run_experiment(TrainRunConfig(n_episodes=10, eta=5, pretrain=False), init_policy(TINY, 0),
                       dataset(20), on_episode=boom)
    assert len(err.value.partial_result.log.scores) == 3


def test_pretrain_without_data_rejected():
    with pytest.raises(ValueError):
        run_experiment(TrainRunConfig(n_episodes=1, pretrain=True), init_policy(TINY, 0), dataset(60))


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 30), st.integers(0, 1000))
def test_score_bounds_and_parity(eta, seed):
    env = ClassificationEnv(EnvConfig(dataset(40, seed=seed % 7), 2, eta=eta, shuffle_seed=seed))
    ep = run_episode(uniform_policy(TINY), env, SAMPLE, np.random.default_rng(seed))
    assert len(ep) == eta
    assert -eta <= ep.score <= eta
    assert (ep.score - eta) % 2 == 0
