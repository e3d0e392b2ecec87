"""Command-line entry points.

Subcommands: gen-traj, train, train-rma, eval, ablate, replay. Evaluation
and replay write delimited results plus rendered figures next to them
(--no-plot to skip the figures).
"""

import argparse
import json
import os
import sys

import numpy as np


def _add_gen_traj(sub):
    p = sub.add_parser("gen-traj", help="generate a reference trajectory")
    p.add_argument("--kind", required=True, choices=["zigzag", "poly5", "chained", "star", "triangle"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output JSON path")
    p.add_argument("--csv", help="also write sampled CSV here")
    p.add_argument("--duration", type=float, default=10.0)
    p.add_argument("--altitude", type=float, default=1.0)
    p.add_argument("--points", type=int, default=5, help="star points")
    p.add_argument("--radius", type=float, default=1.0, help="star radius [m]")
    p.add_argument("--side", type=float, default=1.0, help="triangle side [m]")


def _add_train(sub):
    p = sub.add_parser("train", help="train the tracking policy")
    p.add_argument("--config", help="TOML training config")
    p.add_argument("--preset", choices=["smoke", "ablation", "desk", "paper"])
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="output policy bundle path")
    p.add_argument("--log-csv", help="learning curve CSV path (default: <out>.log.csv)")
    p.add_argument("--no-plot", action="store_true")
    p.add_argument("--quiet", action="store_true")


def _add_train_rma(sub):
    p = sub.add_parser("train-rma", help="train the adaptation network against a policy")
    p.add_argument("--policy", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--iterations", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--loss-csv")
    p.add_argument("--quiet", action="store_true")


def _add_eval(sub):
    p = sub.add_parser("eval", help="evaluate a controller on a trajectory bank")
    p.add_argument("--spec", help="experiment spec TOML (overrides the flags below)")
    p.add_argument("--controller",
                   choices=["flatness", "l1-flatness", "mppi", "l1-mppc", "datt", "datt-noadapt", "datt-rma"])
    p.add_argument("--bank", default="zigzag:10:1000", help="kind:count:seed")
    p.add_argument("--dist", default="none", choices=["none", "constant", "brownian"])
    p.add_argument("--policy", help="policy bundle for datt variants")
    p.add_argument("--rma", help="adaptation net for datt-rma")
    p.add_argument("--out-dir", default="results")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--v-noise", type=float, default=0.0, help="velocity measurement noise std [m/s]")
    p.add_argument("--save-rollouts", action="store_true")
    p.add_argument("--no-cache", action="store_true")
    p.add_argument("--no-plot", action="store_true")


def _add_ablate(sub):
    p = sub.add_parser("ablate", help="train + evaluate ablation variants along one axis")
    p.add_argument("--axis", required=True, choices=["horizon", "curriculum", "feedback", "frame"])
    p.add_argument("--preset", default="ablation", choices=["smoke", "ablation", "desk", "paper"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", default="results/ablations")
    p.add_argument("--artifacts-dir", default="artifacts/ablations")
    p.add_argument("--no-plot", action="store_true")


def _add_replay(sub):
    p = sub.add_parser("replay", help="recompute metrics and render figures from a rollout log")
    p.add_argument("--log", required=True)
    p.add_argument("--out-dir", help="figure output directory (default: alongside the log)")
    p.add_argument("--no-plot", action="store_true")


def cmd_gen_traj(args):
    from . import trajectories as trj

    rng = np.random.default_rng(args.seed)
    if args.kind == "star":
        traj = trj.gen_star(points=args.points, radius=args.radius, duration=args.duration, altitude=args.altitude)
    elif args.kind == "triangle":
        traj = trj.gen_triangle(side=args.side, duration=args.duration, altitude=args.altitude)
    else:
        traj = trj.GENERATORS[args.kind](rng, duration=args.duration, altitude=args.altitude)
    traj.save_json(args.out)
    if args.csv:
        traj.save_csv(args.csv)
    print(f"wrote {args.out}" + (f" and {args.csv}" if args.csv else ""))


def cmd_train(args):
    from . import figures
    from .training.ppo import TrainConfig, train_ppo

    if args.config:
        cfg = TrainConfig.from_file(args.config)
    elif args.preset:
        cfg = TrainConfig.preset(args.preset)
    else:
        sys.exit("train needs --config or --preset")
    if args.seed is not None:
        cfg.seed = args.seed
    from . import policy as pol

    bundle, trainer = train_ppo(cfg, progress=not args.quiet)
    pol.save_bundle(bundle, args.out)
    log_csv = args.log_csv or args.out + ".log.csv"
    trainer.write_log(log_csv)
    if not args.no_plot and trainer.log_rows:
        figures.plot_learning_curve(trainer.log_rows, os.path.splitext(log_csv)[0] + ".png")
    print(f"wrote {args.out} and {log_csv}")


def cmd_train_rma(args):
    from . import policy as pol
    from .training.rma import RmaConfig, save_rma, train_rma, write_loss_csv

    bundle = pol.load_bundle(args.policy)
    cfg = RmaConfig(iterations=args.iterations, seed=args.seed)
    net, rows = train_rma(bundle, cfg, progress=not args.quiet)
    save_rma(net, args.out)
    if args.loss_csv:
        write_loss_csv(rows, args.loss_csv)
    print(f"wrote {args.out}; final loss {rows[-1]['loss']:.4f}")


def parse_bank(text):
    try:
        kind, count, seed = text.split(":")
        return kind, int(count), int(seed)
    except ValueError:
        sys.exit(f"bad --bank {text!r}; expected kind:count:seed")


def cmd_eval(args):
    from .harness import ExperimentSpec, run_bank

    if args.spec:
        spec = ExperimentSpec.from_file(args.spec)
    else:
        if not args.controller:
            sys.exit("eval needs --controller (or --spec)")
        kind, count, seed = parse_bank(args.bank)
        spec = ExperimentSpec(
            controller=args.controller,
            bank_kind=kind, bank_count=count, bank_seed=seed,
            disturbance=args.dist,
            policy_path=args.policy, rma_path=args.rma,
            out_dir=args.out_dir, seed=args.seed,
            v_noise_std=args.v_noise,
        )
    result = run_bank(
        spec, keep_logs=args.save_rollouts,
        use_cache=not args.no_cache, plot=not args.no_plot, progress=True,
    )
    crash = f", {result.crash_count} crash(es)" if result.crash_count else ""
    if np.isfinite(result.mean_error):
        print(f"{spec.controller}: {result.mean_error:.3f} +- {result.std_error:.3f} m{crash}")
    else:
        print(f"{spec.controller}: crash (all trajectories)")
    print(f"results in {result.out_dir}")


def cmd_ablate(args):
    from .harness import ablation_sweep

    table = ablation_sweep(
        args.axis, train_preset=args.preset, seed=args.seed,
        out_dir=args.out_dir, artifacts_dir=args.artifacts_dir,
        progress=True, plot=not args.no_plot,
    )
    width = max(len(r["name"]) for r in table)
    for r in table:
        if r["status"] == "failed" or r["mean"] is None:
            print(f"{r['name']:<{width}}  failed")
        else:
            print(f"{r['name']:<{width}}  {r['mean']:.3f} +- {r['std']:.3f} m  ({r['crashes']} crashes)")


def cmd_replay(args):
    from . import dynamics as dyn
    from . import figures
    from .harness import recompute_error_from_csv

    err = recompute_error_from_csv(args.log)
    print(f"mean tracking error: {err:.6f} m")
    if not args.no_plot:
        out_dir = args.out_dir or os.path.dirname(os.path.abspath(args.log))
        os.makedirs(out_dir, exist_ok=True)
        header, data = dyn.read_rollout_csv(args.log)
        out = os.path.join(out_dir, os.path.splitext(os.path.basename(args.log))[0] + "_replay.png")
        figures.plot_rollout(data, header, out, title=os.path.basename(args.log))
        print(f"wrote {out}")


def main(argv=None):
    parser = argparse.ArgumentParser(prog="quadtrack", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    _add_gen_traj(sub)
    _add_train(sub)
    _add_train_rma(sub)
    _add_eval(sub)
    _add_ablate(sub)
    _add_replay(sub)
    args = parser.parse_args(argv)
    {
        "gen-traj": cmd_gen_traj,
        "train": cmd_train,
        "train-rma": cmd_train_rma,
        "eval": cmd_eval,
        "ablate": cmd_ablate,
        "replay": cmd_replay,
    }[args.command](args)


if __name__ == "__main__":
    main()
