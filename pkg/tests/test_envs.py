import numpy as np
import pytest
from scipy.stats import chisquare

from advest.envs import CartPoleLike, ChainEnv, Continuous, Discrete, EnvSpec, InvalidAction, SparseGrid, make_env
from advest.oracle import chain_mdp


def random_walk(env, n_steps, seed):
    rng = np.random.default_rng(seed)
    obs = env.reset(seed=seed)
    observations, rewards, lengths, length = [obs], [], [], 0
    for _ in range(n_steps):
        obs, r, done = env.step(int(rng.integers(env.spec.action_space.n)))
        observations.append(obs)
        rewards.append(r)
        length += 1
        if done:
            lengths.append(length)
            length = 0
            obs = env.reset()
    return np.array(observations), np.array(rewards), lengths


ENVS = [lambda: CartPoleLike(), lambda: SparseGrid(), lambda: ChainEnv(chain_mdp())]


class TestSpec:
    def test_invalid_dims(self):
        with pytest.raises(ValueError):
            EnvSpec(0, Discrete(2), 10)
        with pytest.raises(ValueError):
            EnvSpec(3, Discrete(2), 0)

    def test_spaces(self):
        assert Discrete(3).contains(2) and not Discrete(3).contains(3)
        assert not Discrete(3).contains(1.0)
        box = Continuous(2)
        assert box.contains([0.5, -1.0])
        assert not box.contains([1.5, 0.0])
        assert not box.contains([np.nan, 0.0])


@pytest.mark.parametrize("factory", ENVS)
class TestCommon:
    def test_reset_same_seed(self, factory):
        env = factory()
        np.testing.assert_array_equal(env.reset(seed=7), env.reset(seed=7))

    def test_invalid_action(self, factory):
        env = factory()
        env.reset(seed=0)
        with pytest.raises(InvalidAction):
            env.step(99)

    def test_step_after_done(self, factory):
        env = factory()
        env.reset(seed=0)
        rng = np.random.default_rng(0)
        done = False
        while not done:
            _, _, done = env.step(int(rng.integers(env.spec.action_space.n)))
        with pytest.raises(RuntimeError):
            env.step(0)

    def test_finite_and_bounded_episodes(self, factory):
        env = factory()
        obs, rewards, lengths = random_walk(env, 100_000, seed=1)
        assert np.isfinite(obs).all() and np.isfinite(rewards).all()
        assert max(lengths) <= env.spec.max_episode_steps

    def test_replay_bit_exact(self, factory):
        env = factory()
        rng = np.random.default_rng(3)
        actions = rng.integers(env.spec.action_space.n, size=300)

        def play():
            env.reset(seed=11)
            out = []
            for a in actions:
                obs, r, done = env.step(int(a))
                out.append((obs.tobytes(), r))
                if done:
                    env.reset()
            return out

        assert play() == play()


class TestSparseGrid:
    def test_reset_at_start_one_hot(self):
        env = SparseGrid()
        obs = env.reset(seed=0)
        assert obs.shape == (144,) and obs[0] == 1.0 and obs.sum() == 1.0

    def test_goal_reward(self):
        env = SparseGrid()
        env.reset(seed=0)
        for _ in range(11):
            _, r, done = env.step(1)
            assert r == 0.0 and not done
        for i in range(11):
            _, r, done = env.step(2)
        assert r == 1.0 and done and env.success

    def test_walls(self):
        env = SparseGrid()
        env.reset(seed=0)
        obs, r, _ = env.step(0)
        assert obs[0] == 1.0 and r == 0.0

    def test_horizon(self):
        env = SparseGrid(max_episode_steps=5)
        env.reset(seed=0)
        dones = [env.step(3)[2] for _ in range(5)]
        assert dones == [False] * 4 + [True]
        assert not env.success


class TestCartPole:
    def test_reset_range(self):
        env = CartPoleLike()
        for seed in range(50):
            obs = env.reset(seed=seed)
            assert obs.shape == (4,) and np.all(np.abs(obs) <= 0.05)

    def test_pole_falls(self):
        env = CartPoleLike()
        env.reset(seed=0)
        done, steps = False, 0
        while not done:
            obs, r, done = env.step(1)
            steps += 1
        assert abs(obs[2]) > env.THETA_LIMIT or abs(obs[0]) > env.X_LIMIT
        assert steps < 100 and not env.success

    def test_reward_per_step(self):
        env = CartPoleLike()
        env.reset(seed=0)
        assert env.step(0)[1] == 1.0


class TestChainEnv:
    def test_matches_transition_tensor(self):
        mdp = chain_mdp()
        env = ChainEnv(mdp, seed=0)
        for s, a in ((0, 1), (2, 0), (3, 1)):
            counts = np.zeros(mdp.n_states)
            for _ in range(10_000):
                env.reset()
                env.state = s
                env.step(a)
                counts[env.state] += 1
            probs = mdp.transition[s, a]
            support = probs > 0
            assert counts[~support].sum() == 0
            _, p = chisquare(counts[support], 10_000 * probs[support])
            assert p > 0.001

    def test_one_hot(self):
        env = ChainEnv(chain_mdp())
        obs = env.reset(seed=0)
        assert obs.argmax() == 0 and obs.sum() == 1.0


class TestRegistry:
    @pytest.mark.parametrize("name", ["chain", "studychain", "cartpole", "sparsegrid"])
    def test_known(self, name):
        assert make_env(name).reset(seed=0).ndim == 1

    def test_unknown(self):
        with pytest.raises(ValueError, match="unknown environment"):
            make_env("pong")
