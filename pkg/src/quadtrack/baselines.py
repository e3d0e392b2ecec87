"""Classical tracking controllers: differential-flatness PID with
tilt-prioritized attitude, and sampling-based model predictive control
(MPPI), both optionally fed a disturbance estimate."""

from dataclasses import dataclass, field

import numpy as np

from . import rotations as rot
from . import dynamics as dyn
from . import trajectories as trj


@dataclass
class FlatnessGains:
    """Position-loop and attitude gains. K_R has a zero yaw entry because
    yaw is corrected separately through K_yaw."""

    K_P: np.ndarray = field(default_factory=lambda: np.array([6.0, 6.0, 6.0]))
    K_I: np.ndarray = field(default_factory=lambda: np.array([1.5, 1.5, 1.5]))
    K_D: np.ndarray = field(default_factory=lambda: np.array([4.0, 4.0, 4.0]))
    K_R: np.ndarray = field(default_factory=lambda: np.array([120.0, 120.0, 0.0]))
    K_yaw: float = 13.75
    integral_clamp: float = 2.0

    def __post_init__(self):
        for name in ("K_P", "K_I", "K_D", "K_R"):
            val = np.asarray(getattr(self, name), dtype=float).reshape(3)
            if np.any(val < 0.0):
                raise ValueError(f"{name} must be non-negative")
            setattr(self, name, val)


def reference_derivatives(traj, t, dt):
    """Velocity and acceleration of the reference: analytic when the
    trajectory is smooth, central finite differences otherwise. At the knots
    of a piecewise-linear reference the difference quotient produces the
    large feedforward spikes that make such references hard to track; this
    is intentional and preserved."""
    if traj.smooth:
        return traj.velocity(t), traj.acceleration(t)
    p_m = traj.eval(t - dt)
    p_0 = traj.eval(t)
    p_p = traj.eval(t + dt)
    v = (p_p - p_m) / (2.0 * dt)
    a = (p_p - 2.0 * p_0 + p_m) / (dt * dt)
    return v, a


def flatness_control(
    state: dyn.QuadState,
    traj,
    t,
    d_hat,
    gains: FlatnessGains,
    integral,
    cfg: dyn.SimConfig,
    yaw_ref=0.0,
):
    """Differential-flatness tracking step.

    Returns (ControlCommand, updated integral). `integral` carries
    int(p - p_ref) dt with anti-windup such that K_I * integral stays inside
    +-integral_clamp per axis.
    """
    p_ref = traj.eval(t)
    v_ref, a_ref = reference_derivatives(traj, t, cfg.dt)
    e_p = state.p - p_ref
    e_v = state.v - v_ref

    integral = integral + e_p * cfg.dt
    limit = np.where(gains.K_I > 0.0, gains.integral_clamp / np.maximum(gains.K_I, 1e-12), np.inf)
    integral = np.clip(integral, -limit, limit)

    a_fb = (
        -gains.K_P * e_p
        - gains.K_D * e_v
        - gains.K_I * integral
        + a_ref
        - cfg.g
        - np.asarray(d_hat, dtype=float)
    )

    z = rot.body_z(state.q)
    norm = np.linalg.norm(a_fb)
    if norm < 1e-6:
        # Free-fall command: keep the thrust axis pointing against gravity.
        z_fb = -cfg.g / cfg.g_norm
        f_sigma = float(a_fb @ z)
    else:
        z_fb = a_fb / norm
        f_sigma = float(a_fb @ z)

    psi = rot.yaw(state.q)
    psi_fb = -gains.K_yaw * rot.wrap_angle(psi - yaw_ref)
    omega_des = -gains.K_R * np.cross(z_fb, z) + psi_fb * z

    cmd = dyn.ControlCommand(f_des=f_sigma, omega_des=omega_des).clipped(cfg)
    return cmd, integral


class FlatnessController:
    """Stateful adapter holding the integral term between steps."""

    def __init__(self, gains=None, cfg=None, yaw_ref=0.0):
        self.gains = gains or FlatnessGains()
        self.cfg = cfg or dyn.SimConfig()
        self.yaw_ref = yaw_ref
        self.integral = np.zeros(3)

    def reset(self):
        self.integral = np.zeros(3)

    def command(self, state, traj, t, d_hat):
        cmd, self.integral = flatness_control(
            state, traj, t, d_hat, self.gains, self.integral, self.cfg, self.yaw_ref
        )
        return cmd


@dataclass
class MppiConfig:
    """Sampling MPC settings: 8192 samples over a 40-step horizon at the
    control dt, softmax temperature 0.05 on the summed position-error cost.

    noise_omega is per body axis. The yaw channel defaults to zero because
    yaw never enters the position cost; exploring it only injects an
    unpenalized random walk that eventually tumbles the vehicle.
    """

    samples: int = 8192
    horizon: int = 40
    dt: float = 0.02
    temperature: float = 0.05
    noise_f: float = 2.0
    noise_omega: tuple = (1.0, 1.0, 0.0)

    def __post_init__(self):
        if self.samples < 1:
            raise ValueError("samples must be >= 1")
        if self.temperature <= 0.0:
            raise ValueError("temperature must be positive")
        self.noise_omega = tuple(np.broadcast_to(np.asarray(self.noise_omega, dtype=float), (3,)))

    @property
    def noise_std(self):
        return np.array([self.noise_f, *self.noise_omega])


def softmax_weights(costs, temperature):
    """exp(-cost/T) normalized; shift-invariant; NaN costs get zero weight."""
    costs = np.asarray(costs, dtype=float)
    costs = np.where(np.isnan(costs), np.inf, costs)
    finite = np.isfinite(costs)
    if not np.any(finite):
        raise dyn.SimulationFault("all sampled rollouts diverged")
    shifted = costs - np.min(costs[finite])
    w = np.where(finite, np.exp(-shifted / temperature), 0.0)
    return w / w.sum()


def rollout_cost(state: dyn.QuadState, ctrl_seq, traj, t, d, cfg: dyn.SimConfig):
    """Sum of position error norms stepping the full simulator through the
    control sequence. Rollouts that diverge or leave the tilt envelope of
    the crash detector cost +inf: the position-only cost says nothing about
    attitude, so without the envelope the optimizer happily commands flips
    the detector would score as crashes."""
    ctrl_seq = np.asarray(ctrl_seq, dtype=float)
    if not np.all(np.isfinite(ctrl_seq)):
        raise ValueError("non-finite control sequence")
    tilt_max = np.deg2rad(cfg.crash_tilt_deg)
    dist = dyn.DisturbanceState(d=d)
    s = state
    cost = 0.0
    for i in range(len(ctrl_seq)):
        cmd = dyn.ControlCommand(f_des=ctrl_seq[i, 0], omega_des=ctrl_seq[i, 1:4])
        try:
            s = dyn.step(s, cmd, dist, cfg)
        except dyn.SimulationFault:
            return np.inf
        if rot.tilt_angle(s.q) > tilt_max:
            return np.inf
        cost += float(np.linalg.norm(s.p - traj.eval(t + (i + 1) * cfg.dt)))
    return cost


def _batch_rollout_costs(state, seqs, traj, t, d, cfg, dt):
    """Vectorized rollout of (S, H, 4) control sequences; returns (S,) costs.

    Same dynamics as dynamics.step_arrays with the quaternion algebra
    inlined on component arrays; this loop dominates MPPI compute.
    """
    S, H, _ = seqs.shape
    k = cfg.delay_fraction(dt)
    cos_tilt_min = np.cos(np.deg2rad(cfg.crash_tilt_deg))
    gx, gy, gz = cfg.g + d
    px = np.full(S, state.p[0]); py = np.full(S, state.p[1]); pz = np.full(S, state.p[2])
    vx = np.full(S, state.v[0]); vy = np.full(S, state.v[1]); vz = np.full(S, state.v[2])
    qw = np.full(S, state.q[0]); qx = np.full(S, state.q[1]); qy = np.full(S, state.q[2]); qz = np.full(S, state.q[3])
    wx = np.full(S, state.omega[0]); wy = np.full(S, state.omega[1]); wz = np.full(S, state.omega[2])
    f = np.full(S, state.f_sigma)
    refs = traj.eval(t + dt * np.arange(1, H + 1))
    costs = np.zeros(S)
    for i in range(H):
        wx += k * (seqs[:, i, 1] - wx)
        wy += k * (seqs[:, i, 2] - wy)
        wz += k * (seqs[:, i, 3] - wz)
        f += k * (seqs[:, i, 0] - f)
        np.clip(f, 0.0, cfg.f_max, out=f)
        # thrust axis = third column of R(q)
        bx = 2.0 * (qx * qz + qw * qy)
        by = 2.0 * (qy * qz - qw * qx)
        bz = 1.0 - 2.0 * (qx * qx + qy * qy)
        vx += (gx + bx * f) * dt
        vy += (gy + by * f) * dt
        vz += (gz + bz * f) * dt
        px += vx * dt
        py += vy * dt
        pz += vz * dt
        # q <- q * exp(omega * dt)
        ang = 0.5 * dt * np.sqrt(wx * wx + wy * wy + wz * wz)
        s = np.where(ang < 1e-12, 0.5 * dt, np.sin(ang) / np.maximum(2.0 * ang / dt, 1e-300))
        ew = np.cos(ang)
        ex = s * wx; ey = s * wy; ez = s * wz
        nqw = qw * ew - qx * ex - qy * ey - qz * ez
        nqx = qw * ex + qx * ew + qy * ez - qz * ey
        nqy = qw * ey - qx * ez + qy * ew + qz * ex
        nqz = qw * ez + qx * ey - qy * ex + qz * ew
        norm = np.sqrt(nqw * nqw + nqx * nqx + nqy * nqy + nqz * nqz)
        qw = nqw / norm; qx = nqx / norm; qy = nqy / norm; qz = nqz / norm
        dx = px - refs[i, 0]; dy = py - refs[i, 1]; dz = pz - refs[i, 2]
        costs += np.sqrt(dx * dx + dy * dy + dz * dz)
        # bz is one step stale here; recompute for the envelope check
        tilt_ok = 1.0 - 2.0 * (qx * qx + qy * qy) >= cos_tilt_min
        costs = np.where(tilt_ok, costs, np.inf)
    finite = np.isfinite(px) & np.isfinite(py) & np.isfinite(pz)
    return np.where(finite, costs, np.inf)


def mppi_control(
    state: dyn.QuadState,
    traj,
    t,
    d_hat,
    mcfg: MppiConfig,
    cfg: dyn.SimConfig,
    nominal,
    rng: np.random.Generator,
):
    """One MPPI update.

    Samples Gaussian perturbations of the nominal (H, 4) sequence
    [f, omega_x, omega_y, omega_z], rolls out the simulator model with the
    disturbance pinned to d_hat, softmax-weights by summed position error,
    and returns (first command, time-shifted updated nominal).
    """
    nominal = np.asarray(nominal, dtype=float)
    if nominal.shape != (mcfg.horizon, 4):
        raise ValueError(f"nominal sequence must be ({mcfg.horizon}, 4)")
    noise = rng.standard_normal((mcfg.samples, mcfg.horizon, 4))
    noise *= mcfg.noise_std
    seqs = nominal + noise
    seqs[..., 0] = np.clip(seqs[..., 0], 0.0, cfg.f_max)
    seqs[..., 1:] = np.clip(seqs[..., 1:], -cfg.omega_max, cfg.omega_max)

    costs = _batch_rollout_costs(state, seqs, traj, t, np.asarray(d_hat, dtype=float), cfg, mcfg.dt)
    weights = softmax_weights(costs, mcfg.temperature)
    new_nominal = np.einsum("s,shc->hc", weights, seqs)

    cmd = dyn.ControlCommand(f_des=new_nominal[0, 0], omega_des=new_nominal[0, 1:4]).clipped(cfg)
    shifted = np.roll(new_nominal, -1, axis=0)
    shifted[-1] = new_nominal[-1]
    return cmd, shifted


def hover_nominal(mcfg: MppiConfig, cfg: dyn.SimConfig):
    nominal = np.zeros((mcfg.horizon, 4))
    nominal[:, 0] = cfg.g_norm
    return nominal


class MppiController:
    """Stateful adapter: warm-started nominal sequence plus its own rng
    stream. `use_d_hat` pins the rollout model's disturbance to the estimate
    (the adaptive-MPC variant); otherwise the model assumes zero."""

    def __init__(self, mcfg=None, cfg=None, seed=0, use_d_hat=False):
        self.mcfg = mcfg or MppiConfig()
        self.cfg = cfg or dyn.SimConfig()
        self.seed = seed
        self.use_d_hat = use_d_hat
        self.rng = np.random.default_rng(seed)
        self.nominal = hover_nominal(self.mcfg, self.cfg)

    def reset(self):
        self.rng = np.random.default_rng(self.seed)
        self.nominal = hover_nominal(self.mcfg, self.cfg)

    def command(self, state, traj, t, d_hat):
        d_model = d_hat if self.use_d_hat else np.zeros(3)
        cmd, self.nominal = mppi_control(
            state, traj, t, d_model, self.mcfg, self.cfg, self.nominal, self.rng
        )
        return cmd
