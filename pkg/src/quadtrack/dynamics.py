"""Quadrotor rigid-body simulator at the body-rate control level.

The vehicle is driven by a collective mass-normalized thrust and body-rate
command. An inner rate loop is abstracted by a first-order delay on both
channels, translation integrates semi-implicit Euler, and attitude integrates
on the manifold through the quaternion exponential map. A slowly varying
mass-normalized force disturbance (Brownian walk) enters the translational
acceleration only.

Units: positions m, velocities m/s, thrust and disturbance m/s^2
(mass-normalized), body rates rad/s.
"""

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from . import rotations as rot

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib


class SimulationFault(RuntimeError):
    """Raised when integration produces a non-finite state."""


def _vec3(x):
    # no defensive copy: state constructors are on the hot simulation path
    return np.asarray(x, dtype=float).reshape(3)


@dataclass
class SimConfig:
    """Simulator constants.

    dt: step length [s]; the control loop runs at 1/dt.
    k_delay: first-order delay fraction per reference step (delay_ref_dt);
        the applied fraction is rescaled as 1 - (1-k)^(dt/delay_ref_dt) so
        refining dt refines the same continuous plant.
    mass: vehicle mass [kg] (bookkeeping only; all forces are mass-normalized).
    g: gravity vector in the world frame [m/s^2].
    f_max: collective thrust ceiling [m/s^2] (about twice hover for the
        reference platform).
    omega_max: per-axis body-rate command limit [rad/s].
    d_cap: disturbance magnitude cap [m/s^2], guards long rollouts.
    seed: default seed for rng streams derived from this config.
    """

    dt: float = 0.02
    k_delay: float = 0.4
    delay_ref_dt: float = 0.02
    mass: float = 0.04
    g: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -9.81]))
    f_max: float = 2.0 * 9.81
    omega_max: float = 10.0
    d_cap: float = 10.0
    crash_pos_err: float = 5.0
    crash_tilt_deg: float = 85.0
    seed: int = 0

    def __post_init__(self):
        self.g = _vec3(self.g)
        if not self.dt > 0.0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if not 0.0 < self.k_delay <= 1.0:
            raise ValueError(f"k_delay must be in (0, 1], got {self.k_delay}")

    @property
    def g_norm(self):
        return float(np.linalg.norm(self.g))

    def delay_fraction(self, dt=None):
        dt = self.dt if dt is None else dt
        if self.k_delay >= 1.0:
            return 1.0
        return 1.0 - (1.0 - self.k_delay) ** (dt / self.delay_ref_dt)

    @classmethod
    def from_file(cls, path):
        """Load from a TOML key-value file; unknown keys are rejected."""
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
        known = set(cls.__dataclass_fields__)
        bad = set(data) - known
        if bad:
            raise ValueError(f"unknown SimConfig keys: {sorted(bad)}")
        return cls(**data)


@dataclass
class QuadState:
    """Ground-truth vehicle state.

    p, v: position / velocity in the world frame.
    q: unit quaternion (w, x, y, z), world-from-body.
    omega: body angular velocity.
    f_sigma: current collective mass-normalized thrust actually applied.
    """

    p: np.ndarray
    v: np.ndarray
    q: np.ndarray
    omega: np.ndarray
    f_sigma: float

    def __post_init__(self):
        self.p = _vec3(self.p)
        self.v = _vec3(self.v)
        self.q = np.asarray(self.q, dtype=float).reshape(4)
        self.omega = _vec3(self.omega)
        self.f_sigma = float(self.f_sigma)

    @classmethod
    def hover(cls, cfg: SimConfig, p=(0.0, 0.0, 0.0)):
        """Equilibrium state: thrust exactly cancels gravity."""
        return cls(p=p, v=np.zeros(3), q=rot.IDENTITY.copy(), omega=np.zeros(3), f_sigma=cfg.g_norm)

    def is_finite(self):
        # a sum is non-finite iff any term is (inf cancellation yields nan)
        total = self.p.sum() + self.v.sum() + self.q.sum() + self.omega.sum() + self.f_sigma
        return bool(np.isfinite(total))

    def copy(self):
        return QuadState(self.p, self.v, self.q, self.omega, self.f_sigma)


@dataclass
class ControlCommand:
    """Desired collective thrust [m/s^2] and body rates [rad/s]."""

    f_des: float
    omega_des: np.ndarray

    def __post_init__(self):
        self.f_des = float(self.f_des)
        self.omega_des = _vec3(self.omega_des)

    def clipped(self, cfg: SimConfig):
        return ControlCommand(
            f_des=float(np.clip(self.f_des, 0.0, cfg.f_max)),
            omega_des=np.clip(self.omega_des, -cfg.omega_max, cfg.omega_max),
        )

    def is_finite(self):
        return bool(np.isfinite(self.f_des) and np.all(np.isfinite(self.omega_des)))


@dataclass
class DisturbanceState:
    """Mass-normalized force disturbance and its Brownian-walk parameters.

    d: current disturbance vector, world frame [m/s^2].
    sigma: diffusion matrix; step increments are N(0, sigma * dt).
    cap: magnitude bound applied after every update.
    """

    d: np.ndarray = field(default_factory=lambda: np.zeros(3))
    sigma: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    cap: float = 10.0

    def __post_init__(self):
        self.d = _cap_vector(_vec3(self.d), self.cap)
        self.sigma = np.asarray(self.sigma, dtype=float).reshape(3, 3)

    @classmethod
    def zero(cls):
        return cls()


def _cap_vector(d, cap):
    n = np.linalg.norm(d)
    if n > cap:
        return d * (cap / n)
    return d


def step_arrays(p, v, q, omega, f, f_des, omega_des, d, cfg: SimConfig, dt=None):
    """Vectorized single integration step over leading batch axes.

    Returns (p, v, q, omega, f) one step ahead. Shared by the scalar `step`
    and the sampling-based MPC rollouts so both follow identical dynamics.
    """
    dt = cfg.dt if dt is None else dt
    k = cfg.delay_fraction(dt)

    omega_new = omega + k * (np.clip(omega_des, -cfg.omega_max, cfg.omega_max) - omega)
    f_new = f + k * (np.clip(f_des, 0.0, cfg.f_max) - f)
    f_new = np.clip(f_new, 0.0, cfg.f_max)

    accel = cfg.g + rot.body_z(q) * f_new[..., None] + d
    v_new = v + accel * dt
    p_new = p + v_new * dt
    q_new = rot.normalize(rot.multiply(q, rot.from_rotvec(omega_new * dt)))
    return p_new, v_new, q_new, omega_new, f_new


def step(state: QuadState, cmd: ControlCommand, dist: DisturbanceState, cfg: SimConfig) -> QuadState:
    """Advance the vehicle one control period.

    Applies the first-order delay to both command channels, integrates
    translation semi-implicitly with acceleration g + R e3 f + d, and the
    attitude on the manifold with the delayed body rate.

    Raises ValueError on non-finite inputs and SimulationFault if the
    integrated state is non-finite (treated as a crash by callers).
    """
    if not state.is_finite():
        raise ValueError("non-finite state passed to step()")
    if not cmd.is_finite():
        raise ValueError(f"non-finite command passed to step(): {cmd}")

    p, v, q, omega, f = step_arrays(
        state.p, state.v, state.q, state.omega, np.asarray(state.f_sigma),
        np.asarray(cmd.f_des), cmd.omega_des, dist.d, cfg,
    )
    new = QuadState(p=p, v=v, q=q, omega=omega, f_sigma=float(f))
    if not new.is_finite():
        raise SimulationFault("integration produced a non-finite state")
    return new


def evolve_disturbance(dist: DisturbanceState, dt: float, rng: np.random.Generator) -> DisturbanceState:
    """Brownian-walk update: d += eps, eps ~ N(0, sigma*dt), then cap."""
    if not dt > 0.0:
        raise ValueError(f"dt must be positive, got {dt}")
    s = dist.sigma
    if not s.any():
        return dist
    if s[0, 1] == 0.0 and s[0, 2] == 0.0 and s[1, 0] == 0.0 and s[1, 2] == 0.0 and s[2, 0] == 0.0 and s[2, 1] == 0.0:
        eps = np.sqrt(s.diagonal() * dt) * rng.standard_normal(3)
    else:
        eps = np.linalg.cholesky(s * dt) @ rng.standard_normal(3)
    return replace(dist, d=_cap_vector(dist.d + eps, dist.cap))


def sample_initial_disturbance(
    rng: np.random.Generator,
    max_magnitude: float = 3.5,
    sigma: float = 0.01,
    cap: float = 10.0,
) -> DisturbanceState:
    """Random direction, magnitude uniform in [0, max_magnitude]."""
    direction = rng.standard_normal(3)
    n = np.linalg.norm(direction)
    if n < 1e-12:
        direction, n = np.array([1.0, 0.0, 0.0]), 1.0
    magnitude = rng.uniform(0.0, max_magnitude)
    return DisturbanceState(d=direction * (magnitude / n), sigma=sigma * np.eye(3), cap=cap)


def is_crashed(state: QuadState, p_ref, cfg: SimConfig) -> bool:
    """Divergence detector: large position error, extreme tilt, or NaN."""
    if not state.is_finite():
        return True
    if np.linalg.norm(state.p - np.asarray(p_ref)) > cfg.crash_pos_err:
        return True
    if rot.tilt_angle(state.q) > np.deg2rad(cfg.crash_tilt_deg):
        return True
    return False


ROLLOUT_COLUMNS = (
    "t",
    "p_x", "p_y", "p_z",
    "v_x", "v_y", "v_z",
    "q_w", "q_x", "q_y", "q_z",
    "omega_x", "omega_y", "omega_z",
    "f",
    "d_x", "d_y", "d_z",
)


class RolloutLog:
    """Accumulates per-step rows and writes the rollout CSV.

    Base columns follow ROLLOUT_COLUMNS; callers may register extra columns
    (reference position, disturbance estimate, ...) appended in order.
    Values are written with repr-exact formatting so downstream recomputation
    from the file reproduces in-memory metrics.
    """

    def __init__(self, extra_columns=()):
        self.extra_columns = tuple(extra_columns)
        self.rows = []

    def append(self, t, state: QuadState, dist: DisturbanceState, extras=()):
        row = [
            t,
            *state.p, *state.v, *state.q, *state.omega, state.f_sigma,
            *dist.d,
            *extras,
        ]
        if len(extras) != len(self.extra_columns):
            raise ValueError("extras length does not match registered columns")
        self.rows.append(row)

    @property
    def columns(self):
        return ROLLOUT_COLUMNS + self.extra_columns

    def as_array(self):
        return np.array(self.rows, dtype=float)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.columns)
            for row in self.rows:
                writer.writerow([f"{x:.17g}" for x in row])


def read_rollout_csv(path):
    """Read a rollout CSV back as (columns, array)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        data = np.array([[float(x) for x in row] for row in reader])
    return header, data
