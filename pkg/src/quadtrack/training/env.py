"""Tracking environment for policy optimization.

Episodes are fixed-length (500 steps = 10 s at 50 Hz). The agent outputs a
raw 4-vector; the environment decodes it exactly like deployed inference
(tanh + affine). During training the policy's disturbance input carries the
ground-truth disturbance; at deployment an estimator supplies it instead.
"""

from dataclasses import dataclass

import numpy as np

from .. import dynamics as dyn
from .. import policy as pol
from .. import rotations as rot
from .. import trajectories as trj


def reward(state: dyn.QuadState, cmd, traj, t) -> float:
    """Negative cost: position error + 0.5 |yaw| + 0.1 |velocity|."""
    pos_err = np.linalg.norm(state.p - traj.eval(t))
    yaw = abs(rot.wrap_angle(rot.yaw(state.q)))
    return -(pos_err + 0.5 * yaw + 0.1 * np.linalg.norm(state.v))


def decode_raw_action(raw, cfg: dyn.SimConfig):
    y = np.tanh(raw)
    return dyn.ControlCommand(
        f_des=0.5 * (y[0] + 1.0) * cfg.f_max,
        omega_des=y[1:4] * cfg.omega_max,
    )


class TrackingEnv:
    """Single trajectory-tracking episode generator."""

    def __init__(
        self,
        cfg: dyn.SimConfig,
        obs_conf: pol.ObsConfig,
        episode_len=500,
        disturbance=True,
        adapt_input=True,
        init_noise_p=0.05,
        init_noise_v=0.05,
        d_max=3.5,
        d_sigma=0.01,
        rng=None,
    ):
        self.cfg = cfg
        self.obs_conf = obs_conf
        self.episode_len = episode_len
        self.disturbance = disturbance
        self.adapt_input = adapt_input
        self.init_noise_p = init_noise_p
        self.init_noise_v = init_noise_v
        self.d_max = d_max
        self.d_sigma = d_sigma
        self.rng = rng or np.random.default_rng()
        self.traj = None
        self.state = None
        self.dist = None
        self.k = 0

    def _d_input(self):
        return self.dist.d if self.adapt_input else np.zeros(3)

    def reset(self, traj):
        self.traj = traj
        p0 = traj.eval(0.0) + self.rng.normal(0.0, self.init_noise_p, 3)
        self.state = dyn.QuadState.hover(self.cfg, p=p0)
        self.state.v = self.rng.normal(0.0, self.init_noise_v, 3)
        if self.disturbance:
            self.dist = dyn.sample_initial_disturbance(
                self.rng, max_magnitude=self.d_max, sigma=self.d_sigma, cap=self.cfg.d_cap
            )
        else:
            self.dist = dyn.DisturbanceState.zero()
        self.k = 0
        return self.observe()

    def observe(self):
        t = self.k * self.cfg.dt
        return pol.build_observation(self.state, self.traj, t, self._d_input(), self.obs_conf)

    def step(self, raw_action):
        cmd = decode_raw_action(np.asarray(raw_action, dtype=float), self.cfg)
        self.state = dyn.step(self.state, cmd, self.dist, self.cfg)
        if self.disturbance:
            self.dist = dyn.evolve_disturbance(self.dist, self.cfg.dt, self.rng)
        self.k += 1
        t = self.k * self.cfg.dt
        pos_err = float(np.linalg.norm(self.state.p - self.traj.eval(t)))
        yaw = abs(rot.wrap_angle(rot.yaw(self.state.q)))
        r = -(pos_err + 0.5 * yaw + 0.1 * np.linalg.norm(self.state.v))
        done = self.k >= self.episode_len
        return self.observe(), r, done, {"tracking_error": pos_err}


class VecTrackingEnv:
    """Synchronous batch of TrackingEnv with the training curriculum.

    Trajectories are fixed to one seeded reference until `curriculum_steps`
    total environment steps have elapsed, then sampled per episode from the
    configured kinds. Each member env owns an independent child rng.
    """

    def __init__(
        self,
        n_envs,
        cfg: dyn.SimConfig,
        obs_conf: pol.ObsConfig,
        seed=0,
        curriculum_steps=2_500_000,
        kinds=("zigzag", "poly5", "chained"),
        fixed_kind="zigzag",
        fixed_seed=0,
        altitude=1.0,
        **env_kwargs,
    ):
        seqs = np.random.SeedSequence(seed).spawn(n_envs + 1)
        self.traj_rng = np.random.default_rng(seqs[-1])
        self.envs = [
            TrackingEnv(cfg, obs_conf, rng=np.random.default_rng(s), **env_kwargs)
            for s in seqs[:-1]
        ]
        self.kinds = tuple(kinds)
        self.altitude = altitude
        self.curriculum_steps = curriculum_steps
        self.fixed_traj = trj.GENERATORS[fixed_kind](
            np.random.default_rng(fixed_seed), altitude=altitude
        )
        self.total_steps = 0
        self.episode_returns = np.zeros(n_envs)
        self.episode_errors = [[] for _ in range(n_envs)]
        self.finished_returns = []
        self.finished_errors = []

    @property
    def n_envs(self):
        return len(self.envs)

    def _sample_traj(self):
        if self.total_steps < self.curriculum_steps:
            return self.fixed_traj
        kind = self.kinds[int(self.traj_rng.integers(len(self.kinds)))]
        return trj.GENERATORS[kind](self.traj_rng, altitude=self.altitude)

    def reset_all(self):
        obs = [env.reset(self._sample_traj()) for env in self.envs]
        return self._stack(obs)

    def _stack(self, observations):
        state = np.stack([o.state_block for o in observations]).astype(np.float32)
        window = np.stack([o.window for o in observations]).astype(np.float32)
        return state, window

    def step(self, raw_actions):
        obs, rewards, dones, errors = [], [], [], []
        for env, a in zip(self.envs, raw_actions):
            o, r, done, info = env.step(a)
            if done:
                o = env.reset(self._sample_traj())
            obs.append(o)
            rewards.append(r)
            dones.append(done)
            errors.append(info["tracking_error"])
        self.total_steps += self.n_envs
        rewards = np.asarray(rewards)
        dones = np.asarray(dones)
        for i in range(self.n_envs):
            self.episode_returns[i] += rewards[i]
            self.episode_errors[i].append(errors[i])
            if dones[i]:
                self.finished_returns.append(self.episode_returns[i])
                self.finished_errors.append(float(np.mean(self.episode_errors[i])))
                self.episode_returns[i] = 0.0
                self.episode_errors[i] = []
        state, window = self._stack(obs)
        return state, window, rewards, dones

    def drain_episode_stats(self):
        """Returns and mean tracking errors of episodes finished since the
        last call."""
        out = (self.finished_returns, self.finished_errors)
        self.finished_returns, self.finished_errors = [], []
        return out
