"""Quaternion helpers, scalar-first (w, x, y, z), world-from-body convention.

All functions broadcast over leading axes so the same code serves a single
state and a batch of sampled rollouts.
"""

import numpy as np

IDENTITY = np.array([1.0, 0.0, 0.0, 0.0])


def normalize(q):
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def canonical(q):
    """Flip sign so the scalar part is >= 0 (double-cover disambiguation)."""
    sign = np.where(q[..., :1] < 0.0, -1.0, 1.0)
    return q * sign


def multiply(q1, q2):
    w1, x1, y1, z1 = (q1[..., i] for i in range(4))
    w2, x2, y2, z2 = (q2[..., i] for i in range(4))
    return np.stack(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ],
        axis=-1,
    )


def conjugate(q):
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def rotate(q, v):
    """Rotate body-frame vector v into the world frame: R(q) v."""
    v = np.asarray(v, dtype=float)
    w = q[..., 0]
    qx, qy, qz = q[..., 1], q[..., 2], q[..., 3]
    vx, vy, vz = v[..., 0], v[..., 1], v[..., 2]
    # t = 2 q_v x v, result = v + w t + q_v x t, written out component-wise
    tx = 2.0 * (qy * vz - qz * vy)
    ty = 2.0 * (qz * vx - qx * vz)
    tz = 2.0 * (qx * vy - qy * vx)
    out = np.empty(np.broadcast(v[..., 0], w).shape + (3,))
    out[..., 0] = vx + w * tx + qy * tz - qz * ty
    out[..., 1] = vy + w * ty + qz * tx - qx * tz
    out[..., 2] = vz + w * tz + qx * ty - qy * tx
    return out


def rotate_inverse(q, v):
    """World-frame vector into the body frame: R(q)^T v."""
    return rotate(conjugate(q), v)


def from_rotvec(phi):
    """Exponential map: rotation vector (axis * angle) to quaternion."""
    angle = np.linalg.norm(phi, axis=-1, keepdims=True)
    half = 0.5 * angle
    small = angle < 1e-12
    # sin(x)/x -> 1 as x -> 0; the guard keeps the division finite.
    axis_scale = np.where(small, 0.5, np.sin(half) / np.where(small, 1.0, angle))
    return np.concatenate([np.cos(half), axis_scale * phi], axis=-1)


def to_matrix(q):
    w, x, y, z = (q[..., i] for i in range(4))
    row = lambda *cols: np.stack(cols, axis=-1)
    return np.stack(
        [
            row(1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)),
            row(2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)),
            row(2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)),
        ],
        axis=-2,
    )


def yaw(q):
    """Yaw angle in (-pi, pi] of the world-from-body rotation."""
    w, x, y, z = (q[..., i] for i in range(4))
    return np.arctan2(2.0 * (w * z + x * y), 1.0 - 2.0 * (y * y + z * z))


def body_z(q):
    """Third column of R(q): the thrust axis in the world frame."""
    w, x, y, z = (q[..., i] for i in range(4))
    return np.stack([2 * (x * z + w * y), 2 * (y * z - w * x), 1 - 2 * (x * x + y * y)], axis=-1)


def tilt_angle(q):
    """Angle between the body z axis and the world vertical, radians."""
    cz = np.clip(body_z(q)[..., 2], -1.0, 1.0)
    return np.arccos(cz)


def from_yaw(psi):
    psi = np.asarray(psi, dtype=float)
    half = 0.5 * psi
    zeros = np.zeros_like(half)
    return np.stack([np.cos(half), zeros, zeros, np.sin(half)], axis=-1)


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    return np.pi - np.mod(np.pi - a, 2.0 * np.pi)
