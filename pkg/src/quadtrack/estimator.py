"""L1 adaptive disturbance estimator.

A closed-loop velocity predictor with Hurwitz feedback A_s drives a
piecewise-constant adaptation law; the published estimate is low-pass
filtered. The adaptation output is the exact discrete expression

    d_raw = -(e^{A_s dt} - I)^{-1} A_s e^{A_s dt} (v_hat - v)

which, fed back into the predictor, cancels the propagated prediction error
each step. Sampling at dt leaves a known zero-order-hold factor e^{A_s dt}
on the recovered constant disturbance, so the filter input is compensated
by e^{-A_s dt}; a constant disturbance is then recovered without bias.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from . import rotations as rot


def _as_matrix(A):
    A = np.asarray(A, dtype=float)
    if A.ndim == 0:
        return float(A) * np.eye(3)
    if A.shape == (3,):
        return np.diag(A)
    return A.reshape(3, 3)


def adaptation_gains(A_s, dt):
    """(M, C): adaptation matrix M with d_raw = M (v_hat - v), and the
    zero-order-hold compensation C = e^{-A_s dt} applied at the filter input.

    Diagonal A_s takes the scalar per-axis path; anything else goes through
    the dense matrix exponential. Both agree to machine precision.
    """
    A = _as_matrix(A_s)
    off = A - np.diag(np.diag(A))
    if not np.any(off):
        a = np.diag(A)
        if np.any(a >= 0.0):
            raise ValueError("A_s must be Hurwitz (negative diagonal)")
        e = np.exp(a * dt)
        M = np.diag(-a * e / (e - 1.0))
        C = np.diag(1.0 / e)
        return M, C
    if np.any(np.real(np.linalg.eigvals(A)) >= 0.0):
        raise ValueError("A_s must be Hurwitz")
    eA = scipy.linalg.expm(A * dt)
    M = -np.linalg.solve(eA - np.eye(3), A @ eA)
    C = scipy.linalg.expm(-A * dt)
    return M, C


@dataclass
class L1State:
    """Estimator state: velocity prediction and filtered disturbance estimate.

    A_s must be Hurwitz; lpf_tau is the first-order filter time constant in
    seconds (0 disables filtering).
    """

    v_hat: np.ndarray = field(default_factory=lambda: np.zeros(3))
    d_hat: np.ndarray = field(default_factory=lambda: np.zeros(3))
    A_s: np.ndarray = field(default_factory=lambda: -5.0 * np.eye(3))
    lpf_tau: float = 0.2

    def __post_init__(self):
        self.v_hat = np.asarray(self.v_hat, dtype=float).reshape(3).copy()
        self.d_hat = np.asarray(self.d_hat, dtype=float).reshape(3).copy()
        self.A_s = _as_matrix(self.A_s)


def l1_update(est: L1State, v, q, f, dt, g=(0.0, 0.0, -9.81)) -> L1State:
    """One estimator step from measured velocity, attitude, applied thrust.

    All quantities mass-normalized; g is the gravity vector used by the
    predictor model.
    """
    if not dt > 0.0:
        raise ValueError("dt must be positive")
    v = np.asarray(v, dtype=float)
    g = np.asarray(g, dtype=float)
    if not (np.all(np.isfinite(v)) and np.isfinite(f)):
        raise ValueError("non-finite estimator inputs")

    M, C = adaptation_gains(est.A_s, dt)
    v_tilde = est.v_hat - v
    d_raw = M @ v_tilde
    d_new = C @ d_raw
    alpha = dt / (dt + est.lpf_tau) if est.lpf_tau > 0.0 else 1.0
    d_hat = est.d_hat + alpha * (d_new - est.d_hat)

    accel = g + rot.body_z(q) * f + d_raw + est.A_s @ v_tilde
    v_hat = est.v_hat + dt * accel
    return L1State(v_hat=v_hat, d_hat=d_hat, A_s=est.A_s, lpf_tau=est.lpf_tau)


class L1Estimator:
    """Stateful wrapper used by control loops: owns one L1State and
    initializes the velocity prediction from the first measurement."""

    def __init__(self, A_s=None, lpf_tau=0.2, g=(0.0, 0.0, -9.81)):
        self.A_s = -5.0 * np.eye(3) if A_s is None else _as_matrix(A_s)
        self.lpf_tau = lpf_tau
        self.g = np.asarray(g, dtype=float)
        self.state = None

    def reset(self, v0=None):
        self.state = L1State(
            v_hat=np.zeros(3) if v0 is None else v0,
            d_hat=np.zeros(3),
            A_s=self.A_s,
            lpf_tau=self.lpf_tau,
        )

    @property
    def d_hat(self):
        return self.state.d_hat if self.state is not None else np.zeros(3)

    def update(self, v, q, f, dt):
        if self.state is None:
            self.reset(v0=v)
        self.state = l1_update(self.state, v, q, f, dt, g=self.g)
        return self.state.d_hat
