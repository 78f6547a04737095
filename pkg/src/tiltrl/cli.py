"""Command-line entry point.

Exit codes: 0 success, 1 configuration error, 2 data error (missing or
corrupt checkpoint, unusable logs), 3 numeric fault during training.
"""
import argparse
import json
import logging
import math
import os
import sys

import numpy as np

from tiltrl.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from tiltrl.config import ConfigError, RunConfig, load_config
from tiltrl.env import HoverReference
from tiltrl.experiments import (
    POWER_COLUMNS,
    STEP_COLUMNS,
    SWEEP_COLUMNS,
    PolicyController,
    alpha_sweep,
    gnuplot_script,
    hover_state,
    power_compare,
    step_response,
    write_table_csv,
    write_trajectory_csv,
)
from tiltrl.frames import GoalFrame
from tiltrl.ppo import NumericFault
from tiltrl.replay import DataError, read_flight_log, record_flight, replay_finetune, write_flight_log
from tiltrl.train import train

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
log = logging.getLogger("tiltrl")


def _floats(text):
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _resolve_config(args):
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.training.seed = args.seed
    return cfg


def _load_agent(path):
    if not os.path.exists(path):
        raise DataError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def _setup(args):
    cfg = _resolve_config(args)
    params = cfg.platform_params()
    hover = HoverReference(params)
    amap = hover.action_map(cfg.episode.action_scale, cfg.episode.action_basis)
    os.makedirs(args.out, exist_ok=True)
    return cfg, params, hover, amap


def _write_script(out, name, text):
    with open(os.path.join(out, name), "w") as fh:
        fh.write(text)


def cmd_train(args):
    cfg = _resolve_config(args)
    if args.total_steps is not None:
        cfg.training.total_steps = args.total_steps
    if args.final_stage is not None:
        cfg.training.final_stage = args.final_stage

    def progress(row):
        log.info("iter %d steps %d stage %d return %.2f reward %.4f", row["iteration"], row["steps"],
                 row["stage"], row["mean_return"], row["mean_reward"])

    state = train(cfg, args.out, resume=args.resume, max_iterations=args.iterations, progress=progress)
    _write_script(args.out, "metrics.gp",
                  gnuplot_script("metrics.csv", "learning curve", "steps", ["mean_return"], "mean episode return"))
    print(json.dumps({"iterations": state.iteration, "steps": state.steps, "stage": state.stage}))
    return EXIT_OK


def cmd_eval_alpha(args):
    cfg, params, hover, amap = _setup(args)
    ckpt = _load_agent(args.checkpoint)
    ctrl = PolicyController(ckpt.agent.policy, amap)
    traj, segments = alpha_sweep(ctrl, params, hover, args.alphas, args.hold, cfg.reward)
    write_trajectory_csv(os.path.join(args.out, "alpha_sweep_trajectory.csv"), traj, cfg.hash())
    write_table_csv(os.path.join(args.out, "alpha_sweep_summary.csv"), [s.as_dict() for s in segments],
                    SWEEP_COLUMNS, cfg.hash())
    _write_script(args.out, "alpha_sweep.gp",
                  gnuplot_script("alpha_sweep_trajectory.csv", "tilt sweep", "t", ["pz", "alpha"], "m / rad"))
    for s in segments:
        print(json.dumps(s.as_dict()))
    return EXIT_OK


def cmd_step_response(args):
    cfg, params, hover, amap = _setup(args)
    ckpt = _load_agent(args.checkpoint)
    ctrl = PolicyController(ckpt.agent.policy, amap)
    rows = []
    for a in args.alphas:
        traj, metrics = step_response(ctrl, params, hover, a, args.axis, args.magnitude, args.duration, cfg.reward)
        name = f"step_{args.axis}_alpha{a:g}.csv"
        write_trajectory_csv(os.path.join(args.out, name), traj, cfg.hash())
        _write_script(args.out, name.replace(".csv", ".gp"),
                      gnuplot_script(name, f"step response, alpha {a:g} deg", "t", ["p" + args.axis], "m"))
        rows.append(metrics.as_dict())
        print(json.dumps(metrics.as_dict()))
    write_table_csv(os.path.join(args.out, "step_summary.csv"), rows, STEP_COLUMNS, cfg.hash())
    return EXIT_OK


def cmd_power_compare(args):
    cfg, params, hover, amap = _setup(args)
    a = PolicyController(_load_agent(args.checkpoint).agent.policy, amap)
    b = PolicyController(_load_agent(args.baseline).agent.policy, amap)
    rows = power_compare(a, b, params, hover, args.alphas, args.hold, cfg.reward)
    write_table_csv(os.path.join(args.out, "power_compare.csv"), rows, POWER_COLUMNS, cfg.hash())
    _write_script(args.out, "power_compare.gp",
                  gnuplot_script("power_compare.csv", "hover power", "alpha_deg", ["power_a", "power_b"], "W"))
    for r in rows:
        print(json.dumps(r))
    return EXIT_OK


def cmd_record_log(args):
    cfg, params, hover, amap = _setup(args)
    ckpt = _load_agent(args.checkpoint)
    rng = np.random.default_rng(cfg.training.seed) if args.stochastic else None
    trajs, t0 = [], 0.0
    for k in range(args.episodes):
        alpha = math.radians(args.alphas[k % len(args.alphas)])
        start = hover_state(hover, alpha)
        traj = record_flight(ckpt.agent.policy, amap, params, start, GoalFrame(), alpha, args.steps, rng, t0)
        trajs.append(traj)
        t0 = traj.t[-1] + 1.0
    path = os.path.join(args.out, "flight_log.csv")
    write_flight_log(path, trajs, cfg.hash())
    print(json.dumps({"log": path, "rows": int(sum(len(t) for t in trajs))}))
    return EXIT_OK


def cmd_replay_finetune(args):
    cfg, params, hover, amap = _setup(args)
    ckpt = _load_agent(args.checkpoint)
    trajs, skipped = [], 0
    for path in args.logs:
        t, s = read_flight_log(path)
        trajs.extend(t)
        skipped += s
    if skipped:
        log.warning("skipped %d malformed log rows", skipped)
    if not trajs:
        raise DataError("flight logs contain no usable trajectory")
    agent = ckpt.agent
    if args.lr is not None:
        agent.policy_opt.lr = args.lr
        agent.value_opt.lr = args.lr
    rng = np.random.default_rng(cfg.training.seed)
    agent, history, consumed = replay_finetune(agent, trajs, cfg.ppo, amap, params, cfg.reward, rng,
                                               args.iterations, not args.no_augment)
    ckpt.agent = agent
    ckpt.extra = dict(ckpt.extra, finetune_samples=consumed)
    out = os.path.join(args.out, "finetuned.ckpt")
    save_checkpoint(out, ckpt)
    print(json.dumps({"checkpoint": out, "trajectories": len(trajs), "skipped_rows": skipped,
                      "samples": consumed}))
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="tiltrl", description="Tilting-rotor hover policy training and evaluation.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML run configuration (defaults when omitted)")
        p.add_argument("--seed", type=int, help="override training.seed")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    p = common(sub.add_parser("train", help="curriculum PPO training"))
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--iterations", type=int, help="stop after this many iterations")
    p.add_argument("--total-steps", type=int, help="override training.total_steps (extends a resumed run)")
    p.add_argument("--final-stage", type=int, help="override training.final_stage (extends a resumed run)")
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("eval-alpha", help="hold position while sweeping the tilt angle"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--alphas", type=_floats, default=[0.0, 30.0, 60.0, 90.0, 110.0], help="degrees")
    p.add_argument("--hold", type=float, default=10.0, help="seconds per tilt angle")
    p.set_defaults(func=cmd_eval_alpha)

    p = common(sub.add_parser("step-response", help="goal position steps at fixed tilt angles"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--alphas", type=_floats, default=[0.0, 60.0, 110.0], help="degrees")
    p.add_argument("--axis", choices=("x", "y", "z"), default="x")
    p.add_argument("--magnitude", type=float, default=1.0, help="metres")
    p.add_argument("--duration", type=float, default=6.0, help="seconds")
    p.set_defaults(func=cmd_step_response)

    p = common(sub.add_parser("power-compare", help="hover power of two policies over a tilt sweep"))
    p.add_argument("--checkpoint", required=True, help="power-aware policy")
    p.add_argument("--baseline", required=True, help="policy trained without the power term")
    p.add_argument("--alphas", type=_floats, default=[0.0, 30.0, 60.0], help="degrees")
    p.add_argument("--hold", type=float, default=5.0)
    p.set_defaults(func=cmd_power_compare)

    p = common(sub.add_parser("record-log", help="write a simulated flight log of a policy"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--episodes", type=int, default=4)
    p.add_argument("--steps", type=int, default=1200)
    p.add_argument("--alphas", type=_floats, default=[0.0], help="degrees, cycled over episodes")
    p.add_argument("--stochastic", action="store_true", help="sample actions instead of flying the mean")
    p.set_defaults(func=cmd_record_log)

    p = common(sub.add_parser("replay-finetune", help="PPO fine-tuning on logged trajectories"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--logs", nargs="+", required=True)
    p.add_argument("--iterations", type=int, default=1)
    p.add_argument("--lr", type=float, help="learning rate for the fine-tuning updates")
    p.add_argument("--no-augment", action="store_true", help="skip mirror augmentation")
    p.set_defaults(func=cmd_replay_finetune)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CheckpointError, DataError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericFault as exc:
        print(f"numeric fault: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
