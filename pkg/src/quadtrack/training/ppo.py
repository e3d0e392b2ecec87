"""Proximal policy optimization with generalized advantage estimation.

The torch modules mirror the numpy inference stack exactly (same layer
sizes, same padding, same decode), so trained weights export losslessly
into a PolicyBundle. Hyperparameters default to the standard published
values: clip 0.2, discount 0.99, GAE 0.95, lr 3e-4, 2048-step buffer,
minibatch 64, 10 epochs, value coefficient 0.5, entropy 0.
"""

import csv
import os
import time
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
import torch.nn as nn

from .. import dynamics as dyn
from .. import policy as pol
from .env import VecTrackingEnv

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib


class TrainingDiverged(RuntimeError):
    """Raised after checkpointing when a loss goes non-finite."""


@dataclass
class TrainConfig:
    total_steps: int = 20_000_000
    curriculum_steps: int = 2_500_000
    episode_len: int = 500
    n_envs: int = 16
    n_steps: int = 2048               # rollout buffer steps per env per update
    minibatch: int = 64
    epochs: int = 10
    clip: float = 0.2
    gamma: float = 0.99
    gae_lambda: float = 0.95
    lr: float = 3e-4
    lr_schedule: str = "constant"     # constant | linear (decay to 10% over the run)
    vf_coef: float = 0.5
    ent_coef: float = 0.0
    max_grad_norm: float = 0.5
    seed: int = 0
    kinds: tuple = ("zigzag", "poly5", "chained")
    fixed_kind: str = "zigzag"
    fixed_seed: int = 0
    altitude: float = 1.0
    disturbance: bool = True
    adapt_input: bool = True
    horizon: float = 0.6
    count: int = 10
    body_frame: bool = True
    use_feedback: bool = True
    init_noise_p: float = 0.05
    init_noise_v: float = 0.05
    log_std_init: float = -0.8
    log_std_floor: float = -2.5
    eval_episodes: int = 3
    eval_bank_seed: int = 900         # held-out selection bank, disjoint from eval banks
    log_every: int = 20_000
    checkpoint_every: int = 0         # steps; 0 disables
    out_dir: str = "runs"
    run_name: str = "ppo"

    def __post_init__(self):
        self.kinds = tuple(self.kinds)
        if not self.curriculum_steps < self.total_steps and self.curriculum_steps != self.total_steps:
            raise ValueError("curriculum_steps must not exceed total_steps")
        if self.episode_len * 0.02 != 10.0:
            # the reference generators produce 10 s references
            raise ValueError("episode_len * dt must equal the 10 s reference duration")

    @property
    def obs_conf(self):
        return pol.ObsConfig(
            horizon=self.horizon, count=self.count,
            body_frame=self.body_frame, use_feedback=self.use_feedback,
        )

    @classmethod
    def preset(cls, name, **overrides):
        """Named scales: `paper` (20M), `desk` (3M), `smoke` (50k, fixed
        reference throughout), `ablation` (1M). The curriculum boundary
        scales with the 2.5M/20M ratio."""
        presets = {
            "paper": dict(total_steps=20_000_000, curriculum_steps=2_500_000),
            "desk": dict(total_steps=3_000_000, curriculum_steps=375_000,
                         n_steps=256, lr_schedule="linear"),
            "ablation": dict(total_steps=1_000_000, curriculum_steps=125_000,
                             n_steps=256, lr_schedule="linear"),
            "smoke": dict(total_steps=50_000, curriculum_steps=50_000,
                          n_envs=4, n_steps=512, log_every=5_000),
        }
        if name not in presets:
            raise ValueError(f"unknown preset {name!r}")
        kw = presets[name]
        kw.update(overrides)
        return cls(**kw)

    @classmethod
    def from_file(cls, path):
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
        preset = data.pop("preset", None)
        known = set(cls.__dataclass_fields__)
        bad = set(data) - known
        if bad:
            raise ValueError(f"unknown TrainConfig keys: {sorted(bad)}")
        if preset:
            return cls.preset(preset, **data)
        return cls(**data)


def _ortho(layer, gain):
    nn.init.orthogonal_(layer.weight, gain=gain)
    nn.init.zeros_(layer.bias)
    return layer


class Encoder(nn.Module):
    def __init__(self, count):
        super().__init__()
        self.convs = nn.ModuleList(
            [nn.Conv1d(3 if i == 0 else pol.CONV_FILTERS, pol.CONV_FILTERS, pol.CONV_KERNEL, padding=1) for i in range(3)]
        )
        self.proj = nn.Linear(pol.CONV_FILTERS * count, pol.EMBED_DIM)
        for c in self.convs:
            _ortho(c, np.sqrt(2.0))
        _ortho(self.proj, 1.0)

    def forward(self, window):
        x = window
        for c in self.convs:
            x = torch.relu(c(x))
        return self.proj(x.flatten(1))


class Head(nn.Module):
    def __init__(self, in_dim, out_dim, out_gain):
        super().__init__()
        self.layers = nn.ModuleList(
            [
                _ortho(nn.Linear(in_dim, pol.HIDDEN), np.sqrt(2.0)),
                _ortho(nn.Linear(pol.HIDDEN, pol.HIDDEN), np.sqrt(2.0)),
                _ortho(nn.Linear(pol.HIDDEN, pol.HIDDEN), np.sqrt(2.0)),
                _ortho(nn.Linear(pol.HIDDEN, out_dim), out_gain),
            ]
        )

    def forward(self, x):
        for layer in self.layers[:-1]:
            x = torch.relu(layer(x))
        return self.layers[-1](x)


class ActorCritic(nn.Module):
    """Separate actor and critic towers (each with its own reference
    encoder) and a diagonal Gaussian with state-independent log-std on the
    raw pre-squash action. Keeping the towers separate stops the large
    value targets early in training from warping the policy's features."""

    def __init__(self, obs_conf: pol.ObsConfig, log_std_init=-0.8, log_std_floor=-2.5):
        super().__init__()
        self.obs_conf = obs_conf
        self.encoder = Encoder(obs_conf.count)
        self.vf_encoder = Encoder(obs_conf.count)
        self.actor = Head(obs_conf.obs_dim, 4, 0.01)
        self.critic = Head(obs_conf.obs_dim, 1, 1.0)
        # raw-space exploration; the tanh decode amplifies std 1.0 into
        # sustained near-limit body rates, so start narrower. The floor
        # keeps the objective from collapsing exploration entirely.
        self.log_std_floor = float(log_std_floor)
        self.log_std = nn.Parameter(torch.full((4,), float(log_std_init)))

    def std(self):
        return torch.exp(torch.clamp(self.log_std, min=self.log_std_floor))

    def forward(self, state, window):
        xa = torch.cat([state, self.encoder(window)], dim=-1)
        xc = torch.cat([state, self.vf_encoder(window)], dim=-1)
        return self.actor(xa), self.critic(xc).squeeze(-1)

    def distribution(self, mean):
        return torch.distributions.Normal(mean, self.std())

    @torch.no_grad()
    def act_batch(self, state, window, deterministic=False):
        mean, value = self(state, window)
        if deterministic:
            return mean, None, value
        dist = self.distribution(mean)
        action = dist.sample()
        return action, dist.log_prob(action).sum(-1), value

    def evaluate(self, state, window, action):
        mean, value = self(state, window)
        dist = self.distribution(mean)
        return dist.log_prob(action).sum(-1), dist.entropy().sum(-1), value


def export_bundle(model: ActorCritic, f_max, omega_max) -> pol.PolicyBundle:
    f32 = lambda t: t.detach().cpu().numpy().astype(np.float32)
    enc = model.encoder
    venc = model.vf_encoder
    return pol.PolicyBundle(
        obs=model.obs_conf,
        conv_w=[f32(c.weight) for c in enc.convs],
        conv_b=[f32(c.bias) for c in enc.convs],
        proj_w=f32(enc.proj.weight),
        proj_b=f32(enc.proj.bias),
        pi_w=[f32(l.weight) for l in model.actor.layers],
        pi_b=[f32(l.bias) for l in model.actor.layers],
        vf_w=[f32(l.weight) for l in model.critic.layers],
        vf_b=[f32(l.bias) for l in model.critic.layers],
        vf_conv_w=[f32(c.weight) for c in venc.convs],
        vf_conv_b=[f32(c.bias) for c in venc.convs],
        vf_proj_w=f32(venc.proj.weight),
        vf_proj_b=f32(venc.proj.bias),
        log_std=f32(model.log_std),
        f_max=f_max,
        omega_max=omega_max,
    )


def import_bundle(bundle: pol.PolicyBundle) -> ActorCritic:
    model = ActorCritic(bundle.obs)
    t = lambda a: torch.from_numpy(np.asarray(a, dtype=np.float32).copy())
    with torch.no_grad():
        for c, w, b in zip(model.encoder.convs, bundle.conv_w, bundle.conv_b):
            c.weight.copy_(t(w))
            c.bias.copy_(t(b))
        model.encoder.proj.weight.copy_(t(bundle.proj_w))
        model.encoder.proj.bias.copy_(t(bundle.proj_b))
        for l, w, b in zip(model.actor.layers, bundle.pi_w, bundle.pi_b):
            l.weight.copy_(t(w))
            l.bias.copy_(t(b))
        for l, w, b in zip(model.critic.layers, bundle.vf_w, bundle.vf_b):
            l.weight.copy_(t(w))
            l.bias.copy_(t(b))
        if bundle.vf_conv_w is not None:
            for c, w, b in zip(model.vf_encoder.convs, bundle.vf_conv_w, bundle.vf_conv_b):
                c.weight.copy_(t(w))
                c.bias.copy_(t(b))
            model.vf_encoder.proj.weight.copy_(t(bundle.vf_proj_w))
            model.vf_encoder.proj.bias.copy_(t(bundle.vf_proj_b))
        model.log_std.copy_(t(bundle.log_std))
    return model


def gae_advantages(rewards, values, dones, last_value, gamma, lam):
    """Generalized advantage estimation over (T, n) arrays.

    dones[t] marks that the transition at t ended an episode (the bootstrap
    through t+1 is cut). Returns (advantages, returns)."""
    T = len(rewards)
    adv = np.zeros_like(rewards)
    lastgaelam = np.zeros(rewards.shape[1]) if rewards.ndim == 2 else 0.0
    for t in reversed(range(T)):
        nonterminal = 1.0 - dones[t]
        next_value = values[t + 1] if t + 1 < T else last_value
        delta = rewards[t] + gamma * next_value * nonterminal - values[t]
        lastgaelam = delta + gamma * lam * nonterminal * lastgaelam
        adv[t] = lastgaelam
    return adv, adv + values[:T]


class ReturnNormalizer:
    """Adaptive normalization of value targets with critic re-projection.

    The critic is trained on (ret - mean) / std with exponentially moving
    statistics, and its final linear layer is rescaled whenever the
    statistics move so de-normalized predictions are preserved. Early
    returns here are four orders of magnitude larger than converged ones;
    a fixed or all-history scale would crush the late value signal.
    """

    def __init__(self, beta=0.9):
        self.beta = beta
        self.mean = 0.0
        self.sq = 1.0
        self.initialized = False

    @property
    def std(self):
        return max(np.sqrt(max(self.sq - self.mean**2, 0.0)), 1e-4)

    def update(self, batch, critic_out: nn.Linear):
        batch = np.asarray(batch, dtype=float).ravel()
        if batch.size == 0:
            return
        old_mean, old_std = self.mean, self.std
        b_mean = float(batch.mean())
        b_sq = float((batch**2).mean())
        if not self.initialized:
            self.mean, self.sq = b_mean, max(b_sq, 1e-8)
            self.initialized = True
        else:
            self.mean = self.beta * self.mean + (1.0 - self.beta) * b_mean
            self.sq = self.beta * self.sq + (1.0 - self.beta) * b_sq
        new_mean, new_std = self.mean, self.std
        with torch.no_grad():
            critic_out.weight.mul_(old_std / new_std)
            critic_out.bias.mul_(old_std / new_std)
            critic_out.bias.add_((old_mean - new_mean) / new_std)

    def normalize(self, x):
        return (x - self.mean) / self.std

    def denormalize(self, x):
        return x * self.std + self.mean


def ppo_loss(model: ActorCritic, batch, clip, vf_coef, ent_coef, normalize_adv=True):
    """Clipped surrogate + value MSE + entropy bonus on one minibatch."""
    logp, entropy, value = model.evaluate(batch["state"], batch["window"], batch["action"])
    adv = batch["adv"]
    if normalize_adv and len(adv) > 1:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    ratio = torch.exp(logp - batch["logp_old"])
    unclipped = ratio * adv
    clipped = torch.clamp(ratio, 1.0 - clip, 1.0 + clip) * adv
    policy_loss = -torch.min(unclipped, clipped).mean()
    value_loss = torch.mean((value - batch["ret"]) ** 2)
    loss = policy_loss + vf_coef * value_loss - ent_coef * entropy.mean()
    return loss, policy_loss, value_loss


class PPOTrainer:
    def __init__(self, cfg: TrainConfig, sim_cfg: dyn.SimConfig = None):
        self.cfg = cfg
        self.sim_cfg = sim_cfg or dyn.SimConfig()
        torch.manual_seed(cfg.seed)
        # tiny nets: intra-op thread sync costs far more than it saves
        torch.set_num_threads(1)
        self.model = ActorCritic(cfg.obs_conf, log_std_init=cfg.log_std_init,
                                 log_std_floor=cfg.log_std_floor)
        self.optimizer = torch.optim.Adam(self.model.parameters(), lr=cfg.lr, eps=1e-5)
        self.env = VecTrackingEnv(
            cfg.n_envs, self.sim_cfg, cfg.obs_conf,
            seed=cfg.seed,
            curriculum_steps=cfg.curriculum_steps,
            kinds=cfg.kinds, fixed_kind=cfg.fixed_kind, fixed_seed=cfg.fixed_seed,
            altitude=cfg.altitude,
            episode_len=cfg.episode_len,
            disturbance=cfg.disturbance,
            adapt_input=cfg.adapt_input,
            init_noise_p=cfg.init_noise_p,
            init_noise_v=cfg.init_noise_v,
        )
        self.ret_norm = ReturnNormalizer()
        self.log_rows = []
        self.global_step = 0
        self.best_eval = np.inf
        self.best_state = None
        kind = cfg.fixed_kind if cfg.fixed_kind in cfg.kinds else cfg.kinds[0]
        from .. import trajectories as trj

        self.eval_bank = trj.make_bank(kind, cfg.eval_episodes, cfg.eval_bank_seed,
                                       altitude=cfg.altitude)

    def bundle(self):
        return export_bundle(self.model, self.sim_cfg.f_max, self.sim_cfg.omega_max)

    def _checkpoint(self, tag):
        os.makedirs(self.cfg.out_dir, exist_ok=True)
        path = os.path.join(self.cfg.out_dir, f"{self.cfg.run_name}_{tag}.bin")
        pol.save_bundle(self.bundle(), path)
        return path

    def train(self, progress=False):
        cfg = self.cfg
        n_steps = cfg.n_steps
        state, window = self.env.reset_all()
        next_log = cfg.log_every
        next_ckpt = cfg.checkpoint_every if cfg.checkpoint_every else None
        t_start = time.time()

        while self.global_step < cfg.total_steps:
            if cfg.lr_schedule == "linear":
                frac = 1.0 - 0.9 * (self.global_step / cfg.total_steps)
                for group in self.optimizer.param_groups:
                    group["lr"] = cfg.lr * frac
            buf = {
                "state": np.zeros((n_steps, cfg.n_envs, cfg.obs_conf.state_dim), dtype=np.float32),
                "window": np.zeros((n_steps, cfg.n_envs, 3, cfg.count), dtype=np.float32),
                "action": np.zeros((n_steps, cfg.n_envs, 4), dtype=np.float32),
                "logp": np.zeros((n_steps, cfg.n_envs), dtype=np.float32),
                "reward": np.zeros((n_steps, cfg.n_envs), dtype=np.float32),
                "done": np.zeros((n_steps, cfg.n_envs), dtype=np.float32),
                "value": np.zeros((n_steps, cfg.n_envs), dtype=np.float32),
            }
            for t in range(n_steps):
                st = torch.from_numpy(state)
                wt = torch.from_numpy(window)
                action, logp, value = self.model.act_batch(st, wt)
                a = action.numpy()
                buf["state"][t] = state
                buf["window"][t] = window
                buf["action"][t] = a
                buf["logp"][t] = logp.numpy()
                buf["value"][t] = self.ret_norm.denormalize(value.numpy())
                state, window, rewards, dones = self.env.step(a.astype(np.float64))
                buf["reward"][t] = rewards
                buf["done"][t] = dones
            self.global_step += n_steps * cfg.n_envs

            with torch.no_grad():
                _, last_value = self.model(torch.from_numpy(state), torch.from_numpy(window))
            adv, ret = gae_advantages(
                buf["reward"], buf["value"], buf["done"], self.ret_norm.denormalize(last_value.numpy()),
                cfg.gamma, cfg.gae_lambda,
            )
            self.ret_norm.update(ret, self.model.critic.layers[-1])

            flat = {
                "state": torch.from_numpy(buf["state"].reshape(-1, cfg.obs_conf.state_dim)),
                "window": torch.from_numpy(buf["window"].reshape(-1, 3, cfg.count)),
                "action": torch.from_numpy(buf["action"].reshape(-1, 4)),
                "logp_old": torch.from_numpy(buf["logp"].reshape(-1)),
                "adv": torch.from_numpy(adv.reshape(-1)),
                "ret": torch.from_numpy(self.ret_norm.normalize(ret).reshape(-1).astype(np.float32)),
            }
            n_total = flat["adv"].shape[0]
            rng = np.random.default_rng(cfg.seed + self.global_step)
            for _ in range(cfg.epochs):
                order = rng.permutation(n_total)
                for start in range(0, n_total, cfg.minibatch):
                    idx = torch.from_numpy(order[start:start + cfg.minibatch].copy())
                    batch = {k: v[idx] for k, v in flat.items()}
                    loss, policy_loss, value_loss = ppo_loss(
                        self.model, batch, cfg.clip, cfg.vf_coef, cfg.ent_coef
                    )
                    if not torch.isfinite(loss):
                        path = self._checkpoint(f"diverged_{self.global_step}")
                        raise TrainingDiverged(
                            f"non-finite loss at step {self.global_step}; checkpoint saved to {path}"
                        )
                    self.optimizer.zero_grad()
                    loss.backward()
                    nn.utils.clip_grad_norm_(self.model.parameters(), cfg.max_grad_norm)
                    self.optimizer.step()

            if self.global_step >= next_log:
                returns, errors = self.env.drain_episode_stats()
                row = {
                    "step": self.global_step,
                    "mean_return": float(np.mean(returns)) if returns else np.nan,
                    "mean_tracking_error": float(np.mean(errors)) if errors else np.nan,
                    "det_eval_error": self._deterministic_eval(),
                }
                self.log_rows.append(row)
                self._maybe_keep_best(row)
                if progress:
                    el = time.time() - t_start
                    # buf["value"] already holds de-normalized predictions
                    ev = 1.0 - np.var(ret - buf["value"]) / max(np.var(ret), 1e-8)
                    stds = self.model.std().detach().numpy()
                    print(
                        f"step {row['step']:>9d}  return {row['mean_return']:9.1f}  "
                        f"err {row['mean_tracking_error']:7.3f}  det {row['det_eval_error']:7.3f}  "
                        f"ev {ev:5.2f}  std {np.array2string(stds, precision=2)}  [{el:6.0f}s]",
                        flush=True,
                    )
                next_log += cfg.log_every
            if next_ckpt and self.global_step >= next_ckpt:
                self._checkpoint(f"step{self.global_step}")
                next_ckpt += cfg.checkpoint_every

        if self.best_state is not None:
            self.model.load_state_dict(self.best_state)
        return self.bundle()

    @torch.no_grad()
    def _deterministic_eval(self):
        """Mean tracking error of the deterministic policy over the
        held-out selection bank, no disturbance; drives checkpoint
        selection."""
        from .env import TrackingEnv

        errors = []
        for traj in self.eval_bank:
            env = TrackingEnv(
                self.sim_cfg, self.cfg.obs_conf, episode_len=self.cfg.episode_len,
                disturbance=False, adapt_input=False,
                init_noise_p=0.0, init_noise_v=0.0,
                rng=np.random.default_rng(0),
            )
            obs = env.reset(traj)
            ep = []
            for _ in range(self.cfg.episode_len):
                st = torch.from_numpy(obs.state_block[None].astype(np.float32))
                wt = torch.from_numpy(obs.window[None].astype(np.float32))
                mean, _ = self.model(st, wt)
                obs, _, done, info = env.step(mean[0].numpy().astype(np.float64))
                ep.append(info["tracking_error"])
                if done:
                    break
            errors.append(np.mean(ep))
        return float(np.mean(errors))

    def _maybe_keep_best(self, row):
        """Snapshot the weights with the best held-out deterministic error,
        considering only the phase after the curriculum switch (the
        fixed-reference phase trains on a different distribution)."""
        in_final_phase = (
            self.global_step > self.cfg.curriculum_steps
            or self.cfg.curriculum_steps >= self.cfg.total_steps
        )
        if not in_final_phase or not np.isfinite(row["det_eval_error"]):
            return
        if row["det_eval_error"] < self.best_eval:
            self.best_eval = row["det_eval_error"]
            self.best_state = {k: v.detach().clone() for k, v in self.model.state_dict().items()}

    def write_log(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(
                fh, fieldnames=["step", "mean_return", "mean_tracking_error", "det_eval_error"]
            )
            writer.writeheader()
            for row in self.log_rows:
                writer.writerow(row)


def train_ppo(cfg: TrainConfig, sim_cfg=None, progress=False):
    """Train and return (bundle, trainer). The trainer exposes the learning
    curve rows and checkpointing."""
    trainer = PPOTrainer(cfg, sim_cfg)
    bundle = trainer.train(progress=progress)
    return bundle, trainer
