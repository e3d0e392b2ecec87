import numpy as np
import pytest
import torch

import quadtrack as qt
from quadtrack import policy as pol
from quadtrack import trajectories as trj
from quadtrack.training.env import TrackingEnv, decode_raw_action, reward
from quadtrack.training.ppo import (
    ActorCritic,
    ReturnNormalizer,
    TrainConfig,
    export_bundle,
    gae_advantages,
    import_bundle,
    ppo_loss,
    train_ppo,
)
from quadtrack.training.rma import AdaptationNet, RmaConfig, RmaEstimator, load_rma, save_rma


CFG = qt.SimConfig()


def constant_ref(p):
    return trj.ReferenceTrajectory(
        kind="custom", duration=10.0,
        knots=np.array([0.0, 10.0]),
        waypoints=np.array([p, p], dtype=float),
    )


class TestReward:
    def test_perfect_tracking_zero(self):
        traj = constant_ref([0.0, 0.0, 1.0])
        s = qt.QuadState.hover(CFG, p=[0.0, 0.0, 1.0])
        assert reward(s, None, traj, 3.0) == 0.0

    def test_unit_error_with_velocity(self):
        traj = constant_ref([0.0, 0.0, 1.0])
        s = qt.QuadState.hover(CFG, p=[1.0, 0.0, 1.0])
        s.v = np.array([2.0, 0.0, 0.0])
        assert abs(reward(s, None, traj, 0.0) - (-1.2)) < 1e-12

    def test_yaw_only(self):
        from quadtrack import rotations as rot

        traj = constant_ref([0.0, 0.0, 1.0])
        s = qt.QuadState.hover(CFG, p=[0.0, 0.0, 1.0])
        s.q = rot.from_yaw(np.pi / 2)
        assert abs(reward(s, None, traj, 0.0) - (-0.5 * np.pi / 2)) < 1e-12


def test_decode_raw_action_midrange():
    cmd = decode_raw_action(np.zeros(4), CFG)
    assert abs(cmd.f_des - 0.5 * CFG.f_max) < 1e-12
    np.testing.assert_array_equal(cmd.omega_des, 0.0)
    big = decode_raw_action(np.array([50.0, 50.0, -50.0, 0.0]), CFG)
    assert big.f_des <= CFG.f_max and abs(big.omega_des[0]) <= CFG.omega_max


class TestGae:
    r = np.array([[1.0], [2.0], [3.0]])
    v = np.array([[0.5], [1.0], [1.5]])
    dones = np.array([[0.0], [0.0], [1.0]])
    last = np.array([2.0])

    def test_lambda_zero_is_one_step_td(self):
        adv, _ = gae_advantages(self.r, self.v, self.dones, self.last, 0.9, 0.0)
        expected = np.array([1.0 + 0.9 * 1.0 - 0.5, 2.0 + 0.9 * 1.5 - 1.0, 3.0 - 1.5])
        np.testing.assert_allclose(adv[:, 0], expected, rtol=1e-12)

    def test_lambda_one_is_discounted_mc_residual(self):
        adv, ret = gae_advantages(self.r, self.v, self.dones, self.last, 0.9, 1.0)
        mc0 = 1.0 + 0.9 * 2.0 + 0.81 * 3.0 - 0.5
        mc1 = 2.0 + 0.9 * 3.0 - 1.0
        mc2 = 3.0 - 1.5
        np.testing.assert_allclose(adv[:, 0], [mc0, mc1, mc2], rtol=1e-12)
        np.testing.assert_allclose(ret[:, 0], adv[:, 0] + self.v[:, 0], rtol=1e-12)

    def test_done_cuts_bootstrap(self):
        dones = np.array([[1.0], [0.0], [0.0]])
        adv, _ = gae_advantages(self.r, self.v, dones, self.last, 0.9, 0.95)
        # step 0 ends an episode: neither v[1] nor later advantages leak in
        assert abs(adv[0, 0] - (1.0 - 0.5)) < 1e-12


def _tiny_batch(model, n=8, seed=0):
    g = torch.Generator().manual_seed(seed)
    state = torch.randn(n, model.obs_conf.state_dim, generator=g, dtype=torch.float64)
    window = torch.randn(n, 3, model.obs_conf.count, generator=g, dtype=torch.float64)
    action = torch.randn(n, 4, generator=g, dtype=torch.float64)
    with torch.no_grad():
        logp_old, _, _ = model.evaluate(state, window, action)
    return {
        "state": state, "window": window, "action": action,
        "logp_old": logp_old,
        "adv": torch.randn(n, generator=g, dtype=torch.float64),
        "ret": torch.randn(n, generator=g, dtype=torch.float64),
    }


class TestPpoLoss:
    def test_gradient_matches_central_differences(self):
        torch.manual_seed(0)
        model = ActorCritic(pol.ObsConfig()).double()
        batch = _tiny_batch(model)
        loss, _, _ = ppo_loss(model, batch, 0.2, 0.5, 0.0, normalize_adv=False)
        loss.backward()
        params = list(model.parameters())
        rng = np.random.default_rng(0)
        checked = 0
        for p in params:
            if p.grad is None:
                continue
            flat = p.detach().view(-1)
            gflat = p.grad.view(-1)
            for idx in rng.choice(flat.numel(), size=min(3, flat.numel()), replace=False):
                if abs(gflat[idx]) < 1e-8:
                    continue
                eps = 1e-6
                with torch.no_grad():
                    flat[idx] += eps
                    up, _, _ = ppo_loss(model, batch, 0.2, 0.5, 0.0, normalize_adv=False)
                    flat[idx] -= 2 * eps
                    down, _, _ = ppo_loss(model, batch, 0.2, 0.5, 0.0, normalize_adv=False)
                    flat[idx] += eps
                fd = (up - down).item() / (2 * eps)
                rel = abs(fd - gflat[idx].item()) / max(abs(fd), abs(gflat[idx].item()))
                assert rel < 1e-4, f"gradient mismatch: {fd} vs {gflat[idx].item()}"
                checked += 1
        assert checked >= 20

    def test_inside_band_equals_unclipped_gradient(self):
        # ratio == 1 is inside the clip band: the clipped objective's
        # gradient must equal the plain policy-gradient term
        torch.manual_seed(1)
        model = ActorCritic(pol.ObsConfig()).double()
        batch = _tiny_batch(model, seed=1)
        actor_params = (
            list(model.encoder.parameters()) + list(model.actor.parameters()) + [model.log_std]
        )
        loss, _, _ = ppo_loss(model, batch, 0.2, 0.0, 0.0, normalize_adv=False)
        grads_clipped = torch.autograd.grad(loss, actor_params)

        logp, _, _ = model.evaluate(batch["state"], batch["window"], batch["action"])
        plain = -(torch.exp(logp - batch["logp_old"]) * batch["adv"]).mean()
        grads_plain = torch.autograd.grad(plain, actor_params)
        for gc, gp in zip(grads_clipped, grads_plain):
            np.testing.assert_allclose(gc.numpy(), gp.numpy(), rtol=1e-10, atol=1e-12)


def test_popart_update_preserves_predictions():
    torch.manual_seed(2)
    model = ActorCritic(pol.ObsConfig())
    norm = ReturnNormalizer()
    state = torch.randn(16, model.obs_conf.state_dim)
    window = torch.randn(16, 3, 10)
    with torch.no_grad():
        _, before = model(state, window)
    before_env = norm.denormalize(before.numpy())
    norm.update(np.random.default_rng(0).normal(-500.0, 120.0, size=256), model.critic.layers[-1])
    with torch.no_grad():
        _, after = model(state, window)
    after_env = norm.denormalize(after.numpy())
    np.testing.assert_allclose(after_env, before_env, rtol=1e-4, atol=1e-3)


def test_bundle_export_matches_torch_forward():
    torch.manual_seed(3)
    model = ActorCritic(pol.ObsConfig())
    bundle = export_bundle(model, CFG.f_max, CFG.omega_max)
    rng = np.random.default_rng(0)
    traj = qt.gen_zigzag(np.random.default_rng(1))
    from quadtrack import rotations as rot

    for _ in range(20):
        q = rot.normalize(rng.standard_normal(4))
        s = qt.QuadState(p=rng.uniform(-2, 2, 3), v=rng.uniform(-2, 2, 3), q=q,
                         omega=rng.uniform(-3, 3, 3), f_sigma=9.0)
        obs = pol.build_observation(s, traj, rng.uniform(0, 10), rng.uniform(-1, 1, 3), bundle.obs)
        h = pol.encode(obs.window, bundle)
        raw_np = pol.mlp((obs.full_vector(h) / bundle.obs_scale).astype(np.float32), bundle.pi_w, bundle.pi_b)
        with torch.no_grad():
            mean, value_t = model(
                torch.from_numpy(obs.state_block[None].astype(np.float32)),
                torch.from_numpy(obs.window[None].astype(np.float32)),
            )
        np.testing.assert_allclose(raw_np, mean[0].numpy(), atol=1e-5)
        np.testing.assert_allclose(pol.value(obs, bundle), value_t.item(), atol=1e-5)
    model2 = import_bundle(bundle)
    for p1, p2 in zip(model.parameters(), model2.parameters()):
        np.testing.assert_array_equal(p1.detach().numpy().astype(np.float32), p2.detach().numpy())


def test_env_reward_matches_public_op():
    env = TrackingEnv(CFG, pol.ObsConfig(), rng=np.random.default_rng(0))
    traj = qt.gen_zigzag(np.random.default_rng(2))
    env.reset(traj)
    rng = np.random.default_rng(1)
    for _ in range(20):
        _, r, _, _ = env.step(rng.normal(0, 1, 4))
        assert abs(r - reward(env.state, None, traj, env.k * CFG.dt)) < 1e-12


def test_env_episode_length_and_reset():
    env = TrackingEnv(CFG, pol.ObsConfig(), episode_len=500, rng=np.random.default_rng(0))
    traj = qt.gen_zigzag(np.random.default_rng(0))
    env.reset(traj)
    done_at = None
    for k in range(500):
        _, _, done, _ = env.step(np.zeros(4))
        if done:
            done_at = k
            break
    assert done_at == 499


@pytest.mark.slow
def test_training_deterministic_given_seed():
    kwargs = dict(total_steps=8192, curriculum_steps=8192, n_envs=4,
                  n_steps=512, log_every=2048, seed=11)
    b1, t1 = train_ppo(TrainConfig(**kwargs))
    b2, t2 = train_ppo(TrainConfig(**kwargs))
    assert t1.log_rows == t2.log_rows
    for (k1, a1), (k2, a2) in zip(sorted(b1.arrays().items()), sorted(b2.arrays().items())):
        assert k1 == k2
        np.testing.assert_array_equal(a1, a2)


class TestRma:
    def test_net_shapes_and_padding(self):
        cfg = RmaConfig(iterations=1)
        net = AdaptationNet(cfg)
        est = RmaEstimator(net)
        out = est.d_hat()  # empty history: zero-padded input, defined output
        assert out.shape == (3,) and np.all(np.isfinite(out))
        s = qt.QuadState.hover(CFG)
        cmd = qt.ControlCommand(9.81, np.zeros(3))
        for _ in range(60):
            est.push(s, cmd)
        out2 = est.d_hat()
        assert out2.shape == (3,) and np.all(np.isfinite(out2))
        assert len(est.history) == cfg.history_len

    def test_history_shorter_than_receptive_field_rejected(self):
        with pytest.raises(ValueError):
            RmaConfig(history_len=10, kernel=8)

    def test_save_load_roundtrip(self, tmp_path):
        torch.manual_seed(0)
        net = AdaptationNet(RmaConfig(iterations=1))
        path = tmp_path / "rma.pt"
        save_rma(net, path)
        back = load_rma(path)
        x = torch.randn(2, 15, 50)
        with torch.no_grad():
            np.testing.assert_allclose(net(x).numpy(), back(x).numpy(), atol=0)
