"""Tracking policy: feedforward reference encoder plus actor MLP.

Inference is plain numpy over float32 weights so deployed evaluation does
not need a deep-learning runtime. The encoder is three kernel-3
same-padding 1-D convolutions (16 filters) over the body-frame reference
window, flattened and projected to a 32-dim embedding. The actor is a
3x64 ReLU MLP whose raw 4-vector output is tanh-squashed and affinely
mapped to [0, f_max] thrust and +-omega_max body rates; zero raw output
decodes to hover thrust and zero rates.
"""

import io
import json
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from . import rotations as rot
from . import dynamics as dyn
from . import trajectories as trj

SCHEMA_VERSION = 1
MAGIC = b"QTPB"

EMBED_DIM = 32
CONV_FILTERS = 16
CONV_KERNEL = 3
HIDDEN = 64


@dataclass
class ObsConfig:
    """Observation layout switches; the ablation variants flip these."""

    horizon: float = 0.6
    count: int = 10
    body_frame: bool = True
    use_feedback: bool = True

    @property
    def state_dim(self):
        return 16 if self.use_feedback else 13

    @property
    def obs_dim(self):
        return self.state_dim + EMBED_DIM


@dataclass
class Observation:
    """State block plus the raw feedforward window feeding the encoder."""

    state_block: np.ndarray  # (state_dim,)
    window: np.ndarray       # (3, N) channels-first

    def full_vector(self, embedding):
        return np.concatenate([self.state_block, embedding])


def build_observation(state: dyn.QuadState, traj, t, d_hat, conf: ObsConfig) -> Observation:
    """Assemble the policy input.

    Body-frame blocks: position, velocity, quaternion (canonical sign),
    feedback error to the current reference point, disturbance estimate,
    plus the N-point feedforward window. With body_frame off everything but
    the quaternion stays in the world frame (ablation variant).
    """
    q = rot.canonical(state.q)
    d_hat = np.asarray(d_hat, dtype=float)
    refs = traj.eval(np.concatenate([[t], trj.window_times(t, conf.horizon, conf.count)]))
    ref_now, window_refs = refs[0], refs[1:]

    # rotate everything in one batched call
    stack = np.empty((4 + conf.count, 3))
    stack[0] = state.p
    stack[1] = state.v
    stack[2] = state.p - ref_now
    stack[3] = d_hat
    stack[4:] = state.p - window_refs
    if conf.body_frame:
        stack = rot.rotate_inverse(q, stack)

    parts = [stack[0], stack[1], q]
    if conf.use_feedback:
        parts.append(stack[2])
    parts.append(stack[3])
    return Observation(state_block=np.concatenate(parts), window=stack[4:].T.copy())


def _he_scale(fan_in):
    return np.sqrt(2.0 / fan_in)


@dataclass
class PolicyBundle:
    """Serializable weights for the actor tower, plus the value tower used
    only during training.

    Arrays are float32. conv_w[i] has shape (out, in, kernel); dense weights
    are (out, in). log_std parameterizes the exploration Gaussian on the raw
    action; deterministic inference ignores it.
    """

    obs: ObsConfig
    conv_w: list
    conv_b: list
    proj_w: np.ndarray
    proj_b: np.ndarray
    pi_w: list
    pi_b: list
    vf_w: list
    vf_b: list
    log_std: np.ndarray
    vf_conv_w: list = None
    vf_conv_b: list = None
    vf_proj_w: np.ndarray = None
    vf_proj_b: np.ndarray = None
    f_max: float = 2.0 * 9.81
    omega_max: float = 10.0
    obs_scale: np.ndarray = None

    def __post_init__(self):
        if self.obs_scale is None:
            self.obs_scale = np.ones(self.obs.obs_dim, dtype=np.float32)
        self.validate()

    def validate(self):
        arrays = self.arrays()
        for name, a in arrays.items():
            if not np.all(np.isfinite(a)):
                raise ValueError(f"non-finite weights in {name}")
        if self.proj_w.shape != (EMBED_DIM, CONV_FILTERS * self.obs.count):
            raise ValueError("projection shape inconsistent with window length")
        if self.pi_w[0].shape[1] != self.obs.obs_dim:
            raise ValueError("actor input width inconsistent with observation layout")

    def arrays(self):
        out = {}
        for i, (w, b) in enumerate(zip(self.conv_w, self.conv_b)):
            out[f"conv{i}_w"], out[f"conv{i}_b"] = w, b
        out["proj_w"], out["proj_b"] = self.proj_w, self.proj_b
        for i, (w, b) in enumerate(zip(self.pi_w, self.pi_b)):
            out[f"pi{i}_w"], out[f"pi{i}_b"] = w, b
        for i, (w, b) in enumerate(zip(self.vf_w, self.vf_b)):
            out[f"vf{i}_w"], out[f"vf{i}_b"] = w, b
        if self.vf_conv_w is not None:
            for i, (w, b) in enumerate(zip(self.vf_conv_w, self.vf_conv_b)):
                out[f"vfconv{i}_w"], out[f"vfconv{i}_b"] = w, b
            out["vfproj_w"], out["vfproj_b"] = self.vf_proj_w, self.vf_proj_b
        out["log_std"] = self.log_std
        out["obs_scale"] = self.obs_scale
        return out

    @classmethod
    def random(cls, rng, obs=None, f_max=2.0 * 9.81, omega_max=10.0):
        """He-initialized bundle (the torch trainer exports real weights;
        this constructor serves tests and cold starts)."""
        obs = obs or ObsConfig()
        f32 = lambda a: np.asarray(a, dtype=np.float32)
        conv_w, conv_b = [], []
        ch_in = 3
        for _ in range(3):
            conv_w.append(f32(rng.standard_normal((CONV_FILTERS, ch_in, CONV_KERNEL)) * _he_scale(ch_in * CONV_KERNEL)))
            conv_b.append(f32(np.zeros(CONV_FILTERS)))
            ch_in = CONV_FILTERS
        flat = CONV_FILTERS * obs.count
        proj_w = f32(rng.standard_normal((EMBED_DIM, flat)) * _he_scale(flat))
        proj_b = f32(np.zeros(EMBED_DIM))
        dims = [obs.obs_dim, HIDDEN, HIDDEN, HIDDEN]
        pi_w = [f32(rng.standard_normal((dims[i + 1], dims[i])) * _he_scale(dims[i])) for i in range(3)]
        pi_w.append(f32(rng.standard_normal((4, HIDDEN)) * 0.01))
        pi_b = [f32(np.zeros(d)) for d in (HIDDEN, HIDDEN, HIDDEN, 4)]
        vf_w = [f32(rng.standard_normal((dims[i + 1], dims[i])) * _he_scale(dims[i])) for i in range(3)]
        vf_w.append(f32(rng.standard_normal((1, HIDDEN)) * _he_scale(HIDDEN)))
        vf_b = [f32(np.zeros(d)) for d in (HIDDEN, HIDDEN, HIDDEN, 1)]
        vf_conv_w = [f32(rng.standard_normal(w.shape) * _he_scale(w.shape[1] * CONV_KERNEL)) for w in conv_w]
        vf_conv_b = [f32(np.zeros(CONV_FILTERS)) for _ in range(3)]
        vf_proj_w = f32(rng.standard_normal((EMBED_DIM, flat)) * _he_scale(flat))
        vf_proj_b = f32(np.zeros(EMBED_DIM))
        return cls(
            obs=obs, conv_w=conv_w, conv_b=conv_b, proj_w=proj_w, proj_b=proj_b,
            pi_w=pi_w, pi_b=pi_b, vf_w=vf_w, vf_b=vf_b,
            vf_conv_w=vf_conv_w, vf_conv_b=vf_conv_b, vf_proj_w=vf_proj_w, vf_proj_b=vf_proj_b,
            log_std=f32(np.zeros(4)), f_max=f_max, omega_max=omega_max,
        )


def _conv_stack(window, conv_w, conv_b, proj_w, proj_b, count):
    x = np.asarray(window, dtype=np.float32)
    if x.shape != (3, count):
        raise ValueError(f"window shape {x.shape} does not match trained count {count}")
    for w, b in zip(conv_w, conv_b):
        xp = np.pad(x, ((0, 0), (1, 1)))
        # y[o, i] = sum_k w[o, :, k] @ xp[:, i+k]; unrolled over the 3 taps.
        y = w[:, :, 0] @ xp[:, :-2] + w[:, :, 1] @ xp[:, 1:-1] + w[:, :, 2] @ xp[:, 2:]
        x = np.maximum(y + b[:, None], 0.0)
    return proj_w @ x.reshape(-1) + proj_b


def encode(window, bundle: PolicyBundle):
    """Feedforward embedding of a (3, N) window: three same-padded kernel-3
    convolutions with ReLU, flatten, linear projection."""
    return _conv_stack(window, bundle.conv_w, bundle.conv_b, bundle.proj_w, bundle.proj_b, bundle.obs.count)


def mlp(x, weights, biases):
    for w, b in zip(weights[:-1], biases[:-1]):
        x = np.maximum(w @ x + b, 0.0)
    return weights[-1] @ x + biases[-1]


def decode_action(raw, bundle: PolicyBundle):
    """tanh squash then affine: raw zero maps to hover-scale thrust and
    zero body rates."""
    y = np.tanh(raw)
    f = 0.5 * (y[0] + 1.0) * bundle.f_max
    omega = y[1:4] * bundle.omega_max
    return dyn.ControlCommand(f_des=f, omega_des=omega)


def act(obs: Observation, bundle: PolicyBundle, deterministic=True, rng=None):
    """Policy forward pass. Deterministic mode decodes the raw mean; the
    stochastic mode perturbs the raw action with the bundle's log_std."""
    h = encode(obs.window, bundle)
    x = (obs.full_vector(h) / bundle.obs_scale).astype(np.float32)
    raw = mlp(x, bundle.pi_w, bundle.pi_b)
    if not np.all(np.isfinite(raw)):
        raise ValueError("non-finite policy activations")
    if not deterministic:
        raw = raw + np.exp(bundle.log_std) * rng.standard_normal(4)
    return decode_action(raw, bundle)


def value(obs: Observation, bundle: PolicyBundle):
    if bundle.vf_conv_w is not None:
        h = _conv_stack(obs.window, bundle.vf_conv_w, bundle.vf_conv_b,
                        bundle.vf_proj_w, bundle.vf_proj_b, bundle.obs.count)
    else:
        h = encode(obs.window, bundle)
    x = (obs.full_vector(h) / bundle.obs_scale).astype(np.float32)
    return float(mlp(x, bundle.vf_w, bundle.vf_b)[0])


class PolicyController:
    """Harness adapter around a bundle; stateless between steps."""

    def __init__(self, bundle: PolicyBundle):
        self.bundle = bundle
        self.last_inference_s = None

    def reset(self):
        pass

    def command(self, state, traj, t, d_hat):
        t0 = time.perf_counter()
        obs = build_observation(state, traj, t, d_hat, self.bundle.obs)
        cmd = act(obs, self.bundle, deterministic=True)
        self.last_inference_s = time.perf_counter() - t0
        return cmd


def save_bundle(bundle: PolicyBundle, path):
    """Versioned binary container: magic, schema version, JSON header with
    config and ordered array specs, then raw little-endian payloads."""
    arrays = bundle.arrays()
    header = {
        "schema": SCHEMA_VERSION,
        "obs": {
            "horizon": bundle.obs.horizon,
            "count": bundle.obs.count,
            "body_frame": bundle.obs.body_frame,
            "use_feedback": bundle.obs.use_feedback,
        },
        "f_max": bundle.f_max,
        "omega_max": bundle.omega_max,
        "arrays": [{"name": k, "shape": list(v.shape)} for k, v in arrays.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", SCHEMA_VERSION, len(blob)))
        fh.write(blob)
        for v in arrays.values():
            fh.write(np.ascontiguousarray(v, dtype="<f4").tobytes())


class BundleFormatError(ValueError):
    pass


def load_bundle(path) -> PolicyBundle:
    with open(path, "rb") as fh:
        data = fh.read()
    buf = io.BytesIO(data)
    if buf.read(4) != MAGIC:
        raise BundleFormatError("not a policy bundle file")
    version, hlen = struct.unpack("<II", buf.read(8))
    if version != SCHEMA_VERSION:
        raise BundleFormatError(f"unsupported bundle schema {version}")
    header = json.loads(buf.read(hlen).decode())
    arrays = {}
    for spec in header["arrays"]:
        shape = tuple(spec["shape"])
        nbytes = int(np.prod(shape)) * 4
        raw = buf.read(nbytes)
        if len(raw) != nbytes:
            raise BundleFormatError(f"truncated payload for {spec['name']}")
        arrays[spec["name"]] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    if buf.read(1):
        raise BundleFormatError("trailing bytes after declared payload")

    obs = ObsConfig(**header["obs"])

    def take(prefix):
        ws, bs, i = [], [], 0
        while f"{prefix}{i}_w" in arrays:
            ws.append(arrays[f"{prefix}{i}_w"])
            bs.append(arrays[f"{prefix}{i}_b"])
            i += 1
        return ws, bs

    conv_w, conv_b = take("conv")
    pi_w, pi_b = take("pi")
    vf_w, vf_b = take("vf")
    vf_conv_w, vf_conv_b = take("vfconv")
    return PolicyBundle(
        obs=obs,
        conv_w=conv_w, conv_b=conv_b,
        proj_w=arrays["proj_w"], proj_b=arrays["proj_b"],
        pi_w=pi_w, pi_b=pi_b, vf_w=vf_w, vf_b=vf_b,
        vf_conv_w=vf_conv_w or None, vf_conv_b=vf_conv_b or None,
        vf_proj_w=arrays.get("vfproj_w"), vf_proj_b=arrays.get("vfproj_b"),
        log_std=arrays["log_std"],
        f_max=header["f_max"], omega_max=header["omega_max"],
        obs_scale=arrays["obs_scale"],
    )
