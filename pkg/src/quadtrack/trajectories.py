"""Reference trajectory generators and evaluation.

Two families share one container: piecewise-linear references (random
zigzags, stars, triangles, resampled logs) and piecewise degree-5
polynomials (single quintics and chained quintics with C3 joints). All
references are xy-planar at a fixed altitude; evaluation clamps beyond the
duration to the terminal point. Generators are pure functions of the rng.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from . import rotations as rot

PIECEWISE_LINEAR_KINDS = {"zigzag", "star", "triangle", "custom"}
POLY_KINDS = {"poly5", "chained"}


@dataclass
class ReferenceTrajectory:
    """Time-parameterized desired position.

    For piecewise-linear kinds `knots` (K,) and `waypoints` (K, 3) define
    exact linear interpolation. For polynomial kinds `seg_times` (S+1,) and
    `coeffs` (S, 3, 6) store ascending-power coefficients per segment in
    local time (t - seg_start).
    """

    kind: str
    duration: float
    knots: np.ndarray = None
    waypoints: np.ndarray = None
    seg_times: np.ndarray = None
    coeffs: np.ndarray = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind in PIECEWISE_LINEAR_KINDS:
            self.knots = np.asarray(self.knots, dtype=float)
            self.waypoints = np.asarray(self.waypoints, dtype=float)
        elif self.kind in POLY_KINDS:
            self.seg_times = np.asarray(self.seg_times, dtype=float)
            self.coeffs = np.asarray(self.coeffs, dtype=float)
        else:
            raise ValueError(f"unknown trajectory kind {self.kind!r}")

    @property
    def smooth(self):
        return self.kind in POLY_KINDS

    def eval(self, t):
        """Position at time t (scalar or array); clamped to [0, duration]."""
        t = np.clip(np.asarray(t, dtype=float), 0.0, self.duration)
        if self.kind in PIECEWISE_LINEAR_KINDS:
            return np.stack(
                [np.interp(t, self.knots, self.waypoints[:, i]) for i in range(3)],
                axis=-1,
            )
        return self._eval_poly(t, order=0)

    def velocity(self, t):
        """Analytic first derivative (polynomial kinds only)."""
        self._require_smooth()
        return self._eval_poly(np.asarray(t, dtype=float), order=1)

    def acceleration(self, t):
        self._require_smooth()
        return self._eval_poly(np.asarray(t, dtype=float), order=2)

    def _require_smooth(self):
        if not self.smooth:
            raise ValueError(f"{self.kind} trajectories expose no analytic derivatives")

    def _eval_poly(self, t, order):
        t = np.clip(t, 0.0, self.duration)
        idx = np.clip(np.searchsorted(self.seg_times, t, side="right") - 1, 0, len(self.coeffs) - 1)
        tau = t - self.seg_times[idx]
        scalar = np.isscalar(idx) or idx.ndim == 0
        idx = np.atleast_1d(idx)
        tau = np.atleast_1d(tau)
        out = np.empty((len(idx), 3))
        for j, (i, x) in enumerate(zip(idx, tau)):
            for axis in range(3):
                c = np.polynomial.polynomial.polyder(self.coeffs[i, axis], m=order) if order else self.coeffs[i, axis]
                out[j, axis] = np.polynomial.polynomial.polyval(x, c)
        return out[0] if scalar else out

    def to_json_dict(self):
        d = {"kind": self.kind, "duration": self.duration, "meta": self.meta}
        if self.kind in PIECEWISE_LINEAR_KINDS:
            d["knots"] = self.knots.tolist()
            d["waypoints"] = self.waypoints.tolist()
        else:
            d["seg_times"] = self.seg_times.tolist()
            d["coeffs"] = self.coeffs.tolist()
        return d

    def save_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=2)

    @classmethod
    def from_json_dict(cls, d):
        return cls(**d)

    @classmethod
    def load_json(cls, path):
        with open(path) as fh:
            return cls.from_json_dict(json.load(fh))

    def save_csv(self, path, dt=0.02):
        ts = np.arange(0.0, self.duration + dt / 2, dt)
        pos = self.eval(ts)
        with open(path, "w") as fh:
            fh.write("t,x,y,z\n")
            for t, p in zip(ts, pos):
                fh.write(f"{t:.17g},{p[0]:.17g},{p[1]:.17g},{p[2]:.17g}\n")

    @classmethod
    def load_csv(cls, path):
        data = np.loadtxt(path, delimiter=",", skiprows=1)
        return cls(kind="custom", duration=float(data[-1, 0]), knots=data[:, 0], waypoints=data[:, 1:4])


def gen_zigzag(rng, duration=10.0, altitude=1.0, xy_range=1.0, interval=(0.5, 1.5)):
    """Random piecewise-linear reference: knot spacing U(0.5, 1.5) s,
    waypoints uniform in the +-xy_range square at fixed altitude. The first
    waypoint sits at the origin so episodes start on the reference."""
    knots = [0.0]
    while knots[-1] < duration:
        knots.append(knots[-1] + rng.uniform(*interval))
    knots = np.array(knots)
    waypoints = np.column_stack(
        [
            rng.uniform(-xy_range, xy_range, size=len(knots)),
            rng.uniform(-xy_range, xy_range, size=len(knots)),
            np.full(len(knots), altitude),
        ]
    )
    waypoints[0, :2] = 0.0
    return ReferenceTrajectory(
        kind="zigzag", duration=duration, knots=knots, waypoints=waypoints,
        meta={"altitude": altitude, "xy_range": xy_range},
    )


def _quintic_boundary(T, p0, v0, a0, pT, vT, aT):
    """Coefficients (ascending) of the quintic with those endpoint values."""
    rows = [
        [1, 0, 0, 0, 0, 0],
        [0, 1, 0, 0, 0, 0],
        [0, 0, 2, 0, 0, 0],
        [1, T, T**2, T**3, T**4, T**5],
        [0, 1, 2 * T, 3 * T**2, 4 * T**3, 5 * T**4],
        [0, 0, 2, 6 * T, 12 * T**2, 20 * T**3],
    ]
    return np.linalg.solve(np.array(rows, dtype=float), np.array([p0, v0, a0, pT, vT, aT], dtype=float))


def _quintic_c3(T, p0, v0, a0, j0, pT, vT):
    """Quintic pinned by full start state up to jerk plus end position/velocity."""
    rows = [
        [1, 0, 0, 0, 0, 0],
        [0, 1, 0, 0, 0, 0],
        [0, 0, 2, 0, 0, 0],
        [0, 0, 0, 6, 0, 0],
        [1, T, T**2, T**3, T**4, T**5],
        [0, 1, 2 * T, 3 * T**2, 4 * T**3, 5 * T**4],
    ]
    return np.linalg.solve(np.array(rows, dtype=float), np.array([p0, v0, a0, j0, pT, vT], dtype=float))


def gen_poly5(rng, duration=10.0, altitude=1.0, v_range=2.0, a_range=2.0):
    """Random degree-5 polynomial per axis starting and ending at the origin
    (xy) with boundary velocity/acceleration sampled uniformly."""
    coeffs = np.zeros((1, 3, 6))
    for axis in range(2):
        v0, vT = rng.uniform(-v_range, v_range, size=2)
        a0, aT = rng.uniform(-a_range, a_range, size=2)
        coeffs[0, axis] = _quintic_boundary(duration, 0.0, v0, a0, 0.0, vT, aT)
    coeffs[0, 2, 0] = altitude
    return ReferenceTrajectory(
        kind="poly5", duration=duration, seg_times=np.array([0.0, duration]), coeffs=coeffs,
        meta={"altitude": altitude},
    )


def gen_chained(rng, duration=10.0, altitude=1.0, node_gap=(1.5, 3.5), xy_range=1.0, v_range=2.0):
    """Chain of random quintics with position, velocity, acceleration, and
    jerk continuous at every interior node. Node positions are uniform in
    the xy square; node velocities sampled, higher derivatives carried over."""
    times = [0.0]
    while times[-1] < duration:
        times.append(times[-1] + rng.uniform(*node_gap))
    times[-1] = duration
    times = np.array(times)
    n_seg = len(times) - 1

    coeffs = np.zeros((n_seg, 3, 6))
    coeffs[:, 2, 0] = altitude
    for axis in range(2):
        p0, v0, a0, j0 = 0.0, 0.0, 0.0, 0.0
        for s in range(n_seg):
            T = times[s + 1] - times[s]
            pT = rng.uniform(-xy_range, xy_range)
            vT = rng.uniform(-v_range, v_range)
            c = _quintic_c3(T, p0, v0, a0, j0, pT, vT)
            coeffs[s, axis] = c
            dc = np.polynomial.polynomial.polyder
            p0 = np.polynomial.polynomial.polyval(T, c)
            v0 = np.polynomial.polynomial.polyval(T, dc(c, m=1))
            a0 = np.polynomial.polynomial.polyval(T, dc(c, m=2))
            j0 = np.polynomial.polynomial.polyval(T, dc(c, m=3))
    return ReferenceTrajectory(
        kind="chained", duration=duration, seg_times=times, coeffs=coeffs,
        meta={"altitude": altitude},
    )


def _circuit(vertices, duration, altitude, kind):
    """Closed constant-speed piecewise-linear circuit through vertices."""
    pts = np.vstack([vertices, vertices[:1]])
    seg_len = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    knots = np.concatenate([[0.0], np.cumsum(seg_len)]) * (duration / seg_len.sum())
    waypoints = np.column_stack([pts, np.full(len(pts), altitude)])
    return ReferenceTrajectory(kind=kind, duration=duration, knots=knots, waypoints=waypoints)


def gen_star(points=5, radius=1.0, duration=10.0, altitude=1.0):
    """Closed star polygon: vertices on the circumscribed circle, visited
    every-other-vertex so edges cross (the classic five-pointed star)."""
    if points < 3:
        raise ValueError("a star needs at least 3 points")
    if radius <= 0:
        raise ValueError("radius must be positive")
    skip = max(2, (points - 1) // 2) if points >= 5 else 1
    angles = np.pi / 2 + 2.0 * np.pi * np.arange(points) / points
    ring = np.column_stack([radius * np.cos(angles), radius * np.sin(angles)])
    order = (np.arange(points) * skip) % points
    return _circuit(ring[order], duration, altitude, "star")


def gen_triangle(side=1.0, duration=10.0, altitude=1.0):
    """Equilateral triangle circuit centered on the origin."""
    if side <= 0:
        raise ValueError("side must be positive")
    r = side / np.sqrt(3.0)
    angles = np.pi / 2 + 2.0 * np.pi * np.arange(3) / 3
    verts = np.column_stack([r * np.cos(angles), r * np.sin(angles)])
    return _circuit(verts, duration, altitude, "triangle")


GENERATORS = {
    "zigzag": gen_zigzag,
    "poly5": gen_poly5,
    "chained": gen_chained,
}


def make_bank(kind, count, seed, **kwargs):
    """Seeded bank of trajectories; episode i uses child seed i."""
    if kind in ("star", "triangle"):
        fn = gen_star if kind == "star" else gen_triangle
        return [fn(**kwargs) for _ in range(count)]
    gen = GENERATORS[kind]
    seqs = np.random.SeedSequence(seed).spawn(count)
    return [gen(np.random.default_rng(s), **kwargs) for s in seqs]


@dataclass
class FeedforwardWindow:
    """Body-frame offsets from the vehicle to N future reference points,
    evenly spaced on [t, t + horizon]."""

    horizon: float
    count: int
    offsets: np.ndarray  # (N, 3)


def window_times(t, horizon, count):
    if count < 1:
        raise ValueError("count must be >= 1")
    if count == 1:
        return np.array([t])
    return t + horizon * np.arange(count) / (count - 1)


def feedforward_window(traj, t, state, horizon=0.6, count=10):
    """R^T (p - p_ref(t_i)) for the evenly spaced window times."""
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    refs = traj.eval(window_times(t, horizon, count))
    offsets = rot.rotate_inverse(state.q, state.p - refs)
    return FeedforwardWindow(horizon=horizon, count=count, offsets=offsets)
