"""Supervised adaptation baseline: regress the force disturbance from a
history of state-action pairs.

The adaptation net consumes the previous 50 pairs as a (features, 50)
sequence through three kernel-8 1-D convolutions (64 channels) and three
fully connected layers, and outputs the world-frame disturbance estimate.
Training rolls out the frozen tracking policy closed-loop with the net's
own estimate feeding the policy, then regresses toward the ground truth.
"""

import csv
from collections import deque
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .. import dynamics as dyn
from .. import policy as pol
from .. import trajectories as trj

FEATURES = 15  # v(3) + q(4) + omega(3) + f(1) + action(4)


@dataclass
class RmaConfig:
    history_len: int = 50
    channels: int = 64
    kernel: int = 8
    fc_width: int = 32
    iterations: int = 10_000
    rollout_len: int = 500
    lr: float = 1e-3
    batch: int = 64
    epochs_per_rollout: int = 2
    seed: int = 0
    kinds: tuple = ("zigzag", "poly5", "chained")
    altitude: float = 1.0
    d_max: float = 3.5
    d_sigma: float = 0.01

    def __post_init__(self):
        self.kinds = tuple(self.kinds)
        # three valid convolutions must leave a positive length
        if self.history_len < 3 * (self.kernel - 1) + 1:
            raise ValueError("history_len shorter than the receptive field")


class AdaptationNet(nn.Module):
    def __init__(self, cfg: RmaConfig):
        super().__init__()
        self.cfg = cfg
        k, ch = cfg.kernel, cfg.channels
        self.convs = nn.ModuleList([
            nn.Conv1d(FEATURES, ch, k),
            nn.Conv1d(ch, ch, k),
            nn.Conv1d(ch, ch, k),
        ])
        conv_out = cfg.history_len - 3 * (k - 1)
        self.fc = nn.ModuleList([
            nn.Linear(ch * conv_out, cfg.fc_width),
            nn.Linear(cfg.fc_width, cfg.fc_width),
            nn.Linear(cfg.fc_width, 3),
        ])

    def forward(self, hist):
        x = hist
        for c in self.convs:
            x = torch.relu(c(x))
        x = x.flatten(1)
        for l in self.fc[:-1]:
            x = torch.relu(l(x))
        return self.fc[-1](x)


def pair_features(state: dyn.QuadState, cmd: dyn.ControlCommand):
    return np.concatenate([state.v, state.q, state.omega, [state.f_sigma], [cmd.f_des], cmd.omega_des])


class RmaEstimator:
    """Ring-buffer wrapper used in the control loop; zero-padded before the
    first history_len steps of an episode."""

    def __init__(self, net: AdaptationNet):
        self.net = net
        self.net.eval()
        self.history = deque(maxlen=net.cfg.history_len)

    def reset(self):
        self.history.clear()

    def d_hat(self):
        n = self.net.cfg.history_len
        if not self.history:
            feats = np.zeros((n, FEATURES), dtype=np.float32)
        else:
            stack = np.asarray(self.history, dtype=np.float32)
            feats = np.zeros((n, FEATURES), dtype=np.float32)
            feats[n - len(stack):] = stack
        with torch.no_grad():
            out = self.net(torch.from_numpy(feats.T[None]))
        return out[0].numpy().astype(float)

    def push(self, state, cmd):
        self.history.append(pair_features(state, cmd))


def _rollout(bundle, net, cfg: RmaConfig, sim_cfg: dyn.SimConfig, rng):
    """One closed-loop episode with the net's estimate feeding the policy.
    Returns (histories, targets) training pairs."""
    kind = cfg.kinds[int(rng.integers(len(cfg.kinds)))]
    traj = trj.GENERATORS[kind](rng, altitude=cfg.altitude)
    dist = dyn.sample_initial_disturbance(rng, max_magnitude=cfg.d_max, sigma=cfg.d_sigma, cap=sim_cfg.d_cap)
    state = dyn.QuadState.hover(sim_cfg, p=traj.eval(0.0))
    est = RmaEstimator(net)
    histories, targets = [], []
    n = cfg.history_len
    for k in range(cfg.rollout_len):
        t = k * sim_cfg.dt
        d_hat = est.d_hat()
        obs = pol.build_observation(state, traj, t, d_hat, bundle.obs)
        cmd = pol.act(obs, bundle, deterministic=True)
        est.push(state, cmd)
        stack = np.asarray(est.history, dtype=np.float32)
        feats = np.zeros((n, FEATURES), dtype=np.float32)
        feats[n - len(stack):] = stack
        histories.append(feats.T)
        targets.append(dist.d.astype(np.float32))
        state = dyn.step(state, cmd, dist, sim_cfg)
        dist = dyn.evolve_disturbance(dist, sim_cfg.dt, rng)
        if dyn.is_crashed(state, traj.eval(t + sim_cfg.dt), sim_cfg):
            break
    return np.asarray(histories, dtype=np.float32), np.asarray(targets, dtype=np.float32)


def train_rma(bundle, cfg: RmaConfig, sim_cfg: dyn.SimConfig = None, progress=False):
    """Iterate rollout + regression; returns (net, loss rows)."""
    sim_cfg = sim_cfg or dyn.SimConfig()
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    net = AdaptationNet(cfg)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    rows = []
    for it in range(cfg.iterations):
        hist, targ = _rollout(bundle, net, cfg, sim_cfg, rng)
        ht = torch.from_numpy(hist)
        tt = torch.from_numpy(targ)
        net.train()
        losses = []
        for _ in range(cfg.epochs_per_rollout):
            order = torch.from_numpy(rng.permutation(len(ht)))
            for s in range(0, len(ht), cfg.batch):
                idx = order[s:s + cfg.batch]
                pred = net(ht[idx])
                loss = torch.mean(torch.sum((pred - tt[idx]) ** 2, dim=-1))
                if not torch.isfinite(loss):
                    raise RuntimeError(f"adaptation loss diverged at iteration {it}")
                opt.zero_grad()
                loss.backward()
                opt.step()
                losses.append(float(loss))
        net.eval()
        rows.append({"iteration": it, "loss": float(np.mean(losses))})
        if progress and (it + 1) % 50 == 0:
            print(f"rma iter {it + 1:5d}  loss {rows[-1]['loss']:.4f}", flush=True)
    return net, rows


def save_rma(net: AdaptationNet, path):
    torch.save({"cfg": net.cfg.__dict__, "state": net.state_dict()}, path)


def load_rma(path) -> AdaptationNet:
    blob = torch.load(path, weights_only=False)
    net = AdaptationNet(RmaConfig(**blob["cfg"]))
    net.load_state_dict(blob["state"])
    net.eval()
    return net


def write_loss_csv(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["iteration", "loss"])
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
