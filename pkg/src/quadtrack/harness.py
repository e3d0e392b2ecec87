"""Experiment runner: closed-loop evaluation of any controller over seeded
trajectory banks, metric aggregation, and result persistence.

The control loop per step is: estimator update (when the controller is an
adaptive variant) -> controller command -> simulator step -> disturbance
evolution. Results are written as delimited files plus a JSON summary in a
directory content-addressed by the experiment spec; wall-clock timing goes
to its own file so the result files are byte-stable across runs.
"""

import csv
import dataclasses
import hashlib
import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import dynamics as dyn
from . import figures
from . import policy as pol
from . import trajectories as trj
from .baselines import FlatnessController, MppiConfig, MppiController
from .estimator import L1Estimator

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib

CONTROLLER_IDS = (
    "flatness",
    "l1-flatness",
    "mppi",
    "l1-mppc",
    "datt",
    "datt-noadapt",
    "datt-rma",
)


@dataclass
class ExperimentSpec:
    controller: str
    bank_kind: str = "zigzag"
    bank_count: int = 10
    bank_seed: int = 1000
    disturbance: str = "none"          # none | constant | brownian
    episode_steps: int = 500
    seed: int = 0
    v_noise_std: float = 0.0
    altitude: float = 1.0
    d_max: float = 3.5
    d_sigma: float = 0.01
    policy_path: str = None
    rma_path: str = None
    mppi: dict = field(default_factory=dict)
    sim: dict = field(default_factory=dict)
    out_dir: str = "results"

    def __post_init__(self):
        if self.controller not in CONTROLLER_IDS + ("oracle",):
            raise ValueError(f"unknown controller {self.controller!r}")
        if self.disturbance not in ("none", "constant", "brownian"):
            raise ValueError(f"unknown disturbance regime {self.disturbance!r}")
        if self.bank_count < 1:
            raise ValueError("bank_count must be >= 1")
        if self.controller.startswith("datt") and not self.policy_path:
            raise ValueError(f"controller {self.controller} needs policy_path")
        if self.controller == "datt-rma" and not self.rma_path:
            raise ValueError("datt-rma needs rma_path")
        for name in ("policy_path", "rma_path"):
            p = getattr(self, name)
            if p and not os.path.exists(p):
                raise ValueError(f"{name} does not exist: {p}")

    @classmethod
    def from_file(cls, path):
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
        known = set(cls.__dataclass_fields__)
        bad = set(data) - known
        if bad:
            raise ValueError(f"unknown ExperimentSpec keys: {sorted(bad)}")
        return cls(**data)

    def content_hash(self):
        blob = dict(dataclasses.asdict(self))
        blob.pop("out_dir")
        # hash what the referenced files contain, not where they live
        for name in ("policy_path", "rma_path"):
            p = blob.pop(name)
            if p:
                with open(p, "rb") as fh:
                    blob[name + "_sha"] = hashlib.sha256(fh.read()).hexdigest()
        canonical = json.dumps(blob, sort_keys=True)
        return hashlib.sha256(canonical.encode()).hexdigest()[:12]

    def sim_config(self):
        return dyn.SimConfig(**self.sim)


class _ZeroEstimator:
    def reset(self, v0=None):
        pass

    def update(self, v, q, f, dt):
        return np.zeros(3)


class _L1Wrapper:
    def __init__(self, g):
        self.inner = L1Estimator(g=g)

    def reset(self, v0=None):
        self.inner.reset(v0=v0)

    def update(self, v, q, f, dt):
        return self.inner.update(v, q, f, dt)


class _RmaWrapper:
    """Feeds the adaptation net; history is pushed by the harness loop after
    the command is known."""

    def __init__(self, net):
        from .training.rma import RmaEstimator

        self.est = RmaEstimator(net)

    def reset(self, v0=None):
        self.est.reset()

    def update(self, v, q, f, dt):
        return self.est.d_hat()

    def push(self, state, cmd):
        self.est.push(state, cmd)


class OracleController:
    """Test-only: run_episode teleports the state onto the reference each
    step, so tracking error reflects harness plumbing alone."""

    teleport = True

    def reset(self):
        pass

    def command(self, state, traj, t, d_hat):
        return dyn.ControlCommand(f_des=9.81, omega_des=np.zeros(3))


def build_controller(spec: ExperimentSpec, seed):
    """(controller, estimator, uses_rma_history) for one episode."""
    cfg = spec.sim_config()
    cid = spec.controller
    if cid == "oracle":
        return OracleController(), _ZeroEstimator(), False
    if cid in ("flatness", "l1-flatness"):
        ctrl = FlatnessController(cfg=cfg)
        est = _L1Wrapper(cfg.g) if cid == "l1-flatness" else _ZeroEstimator()
        return ctrl, est, False
    if cid in ("mppi", "l1-mppc"):
        mcfg = MppiConfig(**spec.mppi)
        ctrl = MppiController(mcfg=mcfg, cfg=cfg, seed=seed, use_d_hat=(cid == "l1-mppc"))
        est = _L1Wrapper(cfg.g) if cid == "l1-mppc" else _ZeroEstimator()
        return ctrl, est, False
    bundle = pol.load_bundle(spec.policy_path)
    ctrl = pol.PolicyController(bundle)
    if cid == "datt":
        return ctrl, _L1Wrapper(cfg.g), False
    if cid == "datt-noadapt":
        return ctrl, _ZeroEstimator(), False
    from .training.rma import load_rma

    return ctrl, _RmaWrapper(load_rma(spec.rma_path)), True


def initial_disturbance(spec: ExperimentSpec, rng, cfg):
    if spec.disturbance == "none":
        return dyn.DisturbanceState.zero()
    dist = dyn.sample_initial_disturbance(rng, max_magnitude=spec.d_max, sigma=spec.d_sigma, cap=cfg.d_cap)
    if spec.disturbance == "constant":
        dist.sigma = np.zeros((3, 3))
    return dist


@dataclass
class EpisodeResult:
    index: int
    mean_error: float
    crashed: bool
    steps: int
    ctrl_time_mean: float
    ctrl_time_max: float
    log: dyn.RolloutLog = None


def run_episode(spec: ExperimentSpec, controller, estimator, traj, episode_seed, keep_log=False, rma_history=False):
    """One closed-loop episode; returns an EpisodeResult row."""
    cfg = spec.sim_config()
    rng = np.random.default_rng(episode_seed)
    state = dyn.QuadState.hover(cfg, p=traj.eval(0.0))
    dist = initial_disturbance(spec, rng, cfg)
    controller.reset()
    estimator.reset(v0=state.v)
    teleport = getattr(controller, "teleport", False)

    log = dyn.RolloutLog(extra_columns=("ref_x", "ref_y", "ref_z", "dhat_x", "dhat_y", "dhat_z"))
    errors = []
    times = []
    crashed = False
    k = 0
    for k in range(spec.episode_steps):
        t = k * cfg.dt
        v_meas = state.v if spec.v_noise_std == 0.0 else state.v + rng.normal(0.0, spec.v_noise_std, 3)
        d_hat = estimator.update(v_meas, state.q, state.f_sigma, cfg.dt)
        t0 = time.perf_counter()
        cmd = controller.command(state, traj, t, d_hat)
        times.append(time.perf_counter() - t0)
        if rma_history:
            estimator.push(state, cmd)
        try:
            state = dyn.step(state, cmd, dist, cfg)
        except dyn.SimulationFault:
            crashed = True
            break
        t_next = (k + 1) * cfg.dt
        ref = traj.eval(t_next)
        if teleport:
            state = dyn.QuadState.hover(cfg, p=ref.copy())
        dist = dyn.evolve_disturbance(dist, cfg.dt, rng)
        err = float(np.linalg.norm(state.p - ref))
        errors.append(err)
        log.append(t_next, state, dist, extras=(*ref, *d_hat))
        if dyn.is_crashed(state, ref, cfg):
            crashed = True
            break
    return EpisodeResult(
        index=0,
        mean_error=float(np.mean(errors)) if errors else float("nan"),
        crashed=crashed,
        steps=k + 1,
        ctrl_time_mean=float(np.mean(times)),
        ctrl_time_max=float(np.max(times)),
        log=log if keep_log else None,
    )


@dataclass
class BankResult:
    spec_hash: str
    controller: str
    rows: list
    mean_error: float
    std_error: float
    crash_count: int
    out_dir: str = None

    def ok_errors(self):
        return [r.mean_error for r in self.rows if not r.crashed]


def make_spec_bank(spec: ExperimentSpec):
    kwargs = {"altitude": spec.altitude} if spec.bank_kind in trj.GENERATORS else {}
    return trj.make_bank(spec.bank_kind, spec.bank_count, spec.bank_seed, **kwargs)


def run_bank(spec: ExperimentSpec, keep_logs=False, use_cache=True, plot=True, progress=False):
    """Evaluate the controller over the seeded bank; write results.csv,
    summary.json, timings.csv, and figures under a content-addressed
    directory. A cached summary with the same hash short-circuits the run."""
    spec_hash = spec.content_hash()
    out_dir = os.path.join(spec.out_dir, f"{spec.controller}-{spec_hash}")
    summary_path = os.path.join(out_dir, "summary.json")
    if use_cache and os.path.exists(summary_path):
        with open(summary_path) as fh:
            summary = json.load(fh)
        if summary.get("spec_hash") == spec_hash:
            rows = [EpisodeResult(**{**r, "log": None}) for r in summary["rows"]]
            return BankResult(
                spec_hash=spec_hash, controller=spec.controller, rows=rows,
                mean_error=summary["mean_error"], std_error=summary["std_error"],
                crash_count=summary["crash_count"], out_dir=out_dir,
            )

    bank = make_spec_bank(spec)
    episode_seeds = np.random.SeedSequence(spec.seed).spawn(len(bank))
    rows = []
    for i, traj in enumerate(bank):
        controller, estimator, rma_hist = build_controller(spec, seed=spec.seed + 7919 * i)
        row = run_episode(
            spec, controller, estimator, traj, episode_seeds[i],
            keep_log=keep_logs or (plot and i == 0), rma_history=rma_hist,
        )
        row.index = i
        rows.append(row)
        if progress:
            status = "crash" if row.crashed else f"{row.mean_error:.3f} m"
            print(f"  [{spec.controller}] traj {i}: {status}", flush=True)

    ok = [r.mean_error for r in rows if not r.crashed]
    result = BankResult(
        spec_hash=spec_hash,
        controller=spec.controller,
        rows=rows,
        mean_error=float(np.mean(ok)) if ok else float("nan"),
        std_error=float(np.std(ok)) if ok else float("nan"),
        crash_count=sum(r.crashed for r in rows),
        out_dir=out_dir,
    )
    _write_bank(spec, result, keep_logs=keep_logs, plot=plot)
    return result


def _write_bank(spec, result: BankResult, keep_logs, plot):
    os.makedirs(result.out_dir, exist_ok=True)
    with open(os.path.join(result.out_dir, "results.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "mean_error", "crashed", "steps"])
        for r in result.rows:
            writer.writerow([r.index, f"{r.mean_error:.17g}", int(r.crashed), r.steps])
    with open(os.path.join(result.out_dir, "timings.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "ctrl_time_mean_s", "ctrl_time_max_s"])
        for r in result.rows:
            writer.writerow([r.index, f"{r.ctrl_time_mean:.6g}", f"{r.ctrl_time_max:.6g}"])
    summary = {
        "spec_hash": result.spec_hash,
        "controller": result.controller,
        "mean_error": result.mean_error,
        "std_error": result.std_error,
        "crash_count": result.crash_count,
        "rows": [
            {
                "index": r.index,
                "mean_error": r.mean_error,
                "crashed": r.crashed,
                "steps": r.steps,
                "ctrl_time_mean": r.ctrl_time_mean,
                "ctrl_time_max": r.ctrl_time_max,
            }
            for r in result.rows
        ],
        "spec": {k: v for k, v in dataclasses.asdict(spec).items() if k != "out_dir"},
    }
    with open(os.path.join(result.out_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    for r in result.rows:
        if r.log is not None:
            log_path = os.path.join(result.out_dir, f"rollout_{r.index:03d}.csv")
            r.log.write_csv(log_path)
            if plot:
                figures.plot_rollout(
                    r.log.as_array(), r.log.columns,
                    os.path.join(result.out_dir, f"rollout_{r.index:03d}.png"),
                    title=f"{result.controller} / trajectory {r.index}",
                )
            if not keep_logs:
                r.log = None
    if plot:
        figures.plot_bank(
            summary["rows"],
            os.path.join(result.out_dir, "bank.png"),
            title=f"{result.controller} on {spec.bank_kind} bank (seed {spec.bank_seed})",
        )


def recompute_error_from_csv(path):
    """Tracking error recomputed from a rollout log; replay path and the
    aggregate-consistency checks use this."""
    header, data = dyn.read_rollout_csv(path)
    col = {name: i for i, name in enumerate(header)}
    p = data[:, [col["p_x"], col["p_y"], col["p_z"]]]
    ref = data[:, [col["ref_x"], col["ref_y"], col["ref_z"]]]
    return float(np.mean(np.linalg.norm(p - ref, axis=1)))


# `base` is the unablated reference variant (horizon 10, body frame,
# feedback on, curriculum on); every axis shares its artifact.
ABLATION_AXES = {
    "horizon": [
        ("horizon_1", {"count": 1, "horizon": 0.02}),
        ("horizon_5", {"count": 5, "horizon": 0.3}),
        ("base", {}),
        ("horizon_15", {"count": 15, "horizon": 0.9}),
        ("horizon_20", {"count": 20, "horizon": 1.2}),
    ],
    "curriculum": [
        ("base", {}),
        ("no_fixed_initial", {"curriculum_steps": 0}),
    ],
    "feedback": [
        ("base", {}),
        ("no_feedback", {"use_feedback": False}),
    ],
    "frame": [
        ("base", {}),
        ("world_frame", {"body_frame": False}),
    ],
}

FAILED_ERROR_THRESHOLD = 1.0  # m; mean error beyond this counts as diverged


def variant_status(result: BankResult):
    if result.crash_count > len(result.rows) / 2:
        return "failed"
    if not np.isfinite(result.mean_error) or result.mean_error > FAILED_ERROR_THRESHOLD:
        return "failed"
    return "ok"


def ablation_sweep(axis, train_preset="ablation", bank=None, out_dir="results/ablations",
                   artifacts_dir="artifacts/ablations", seed=0, progress=False, plot=True):
    """Train (or load) the variants along one axis and evaluate each on the
    fixed bank. Returns table rows shaped like the ablation comparison:
    (name, mean, std, crashes, status)."""
    from .training.ppo import TrainConfig, TrainingDiverged, train_ppo

    if axis not in ABLATION_AXES:
        raise ValueError(f"unknown ablation axis {axis!r}; choose from {sorted(ABLATION_AXES)}")
    os.makedirs(artifacts_dir, exist_ok=True)
    bank = bank or {"bank_kind": "zigzag", "bank_count": 10, "bank_seed": 1000}
    table = []
    for name, overrides in ABLATION_AXES[axis]:
        bundle_path = os.path.join(artifacts_dir, f"{name}.bin")
        if not os.path.exists(bundle_path):
            cfg = TrainConfig.preset(
                train_preset, seed=seed, disturbance=False, adapt_input=False,
                run_name=name, out_dir=artifacts_dir, **overrides,
            )
            if progress:
                print(f"training ablation variant {name} ({cfg.total_steps} steps)", flush=True)
            try:
                bundle, trainer = train_ppo(cfg, progress=progress)
                pol.save_bundle(bundle, bundle_path)
                trainer.write_log(os.path.join(artifacts_dir, f"{name}_log.csv"))
            except TrainingDiverged:
                table.append({"name": name, "mean": None, "std": None, "crashes": None, "status": "failed"})
                continue
        spec = ExperimentSpec(
            controller="datt-noadapt", policy_path=bundle_path,
            disturbance="none", out_dir=out_dir, **bank,
        )
        result = run_bank(spec, progress=progress, plot=plot)
        table.append({
            "name": name,
            "mean": result.mean_error,
            "std": result.std_error,
            "crashes": result.crash_count,
            "status": variant_status(result),
        })
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, f"ablation_{axis}.csv"), "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["name", "mean", "std", "crashes", "status"])
        writer.writeheader()
        for row in table:
            writer.writerow(row)
    if plot:
        figures.plot_comparison(
            table, os.path.join(out_dir, f"ablation_{axis}.png"), title=f"ablation: {axis}"
        )
    return table
