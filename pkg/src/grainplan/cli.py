"""Command-line entry point.

Exit codes: 0 success, 1 task failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import textio
from .sim import Embodiment, SimParams
from .terrain import ACTIONS, Action, ConfigError, RobotGeometry

log = logging.getLogger("grainplan")


class UsageError(Exception):
    pass


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=None, help="master random seed")
    p.add_argument("--config", type=Path, default=None, help="simulator parameter file (key = value)")
    p.add_argument("--out", type=Path, default=None, help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _predictor_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--predictor", choices=("oracle", "learned"), default="oracle")
    p.add_argument("--f-e", type=Path, help="f_e checkpoint (learned predictor)")
    p.add_argument("--f-r", type=Path, help="f_r checkpoint (learned predictor)")
    p.add_argument("--no-eaa", action="store_true", help="disable Effective Action Adjustment")
    p.add_argument("--horizon", type=int, default=None, help="planning horizon (default 4)")


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="grainplan", parents=[common],
                                     description="Granular-terrain simulation, learning and planning.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="run an action sequence in the simulator")
    p.add_argument("--scenario", type=Path, required=True)
    p.add_argument("--actions", required=True, help="comma-separated actions, e.g. FP,AF,LP")
    p.add_argument("--embodiment", choices=[e.value for e in Embodiment], default="robot")

    p = sub.add_parser("gen-data", parents=[common], help="generate a training dataset")
    p.add_argument("--embodiment", choices=[e.value for e in Embodiment], required=True)
    p.add_argument("--steps", type=int, default=10)
    p.add_argument("--scale", type=int, default=1, help="multiplier on the desk-scale trial counts")

    p = sub.add_parser("train", parents=[common], help="train f_e or f_r")
    p.add_argument("model", choices=("f_e", "f_r"))
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--base-channels", type=int, default=16)
    p.add_argument("--res-blocks", type=int, default=None, help="residual blocks per level (default 2)")
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--augment", action="store_true", help="paste synthetic obstacles into f_r inputs")

    p = sub.add_parser("plan", parents=[common], help="run the planner on one scenario")
    p.add_argument("--scenario", type=Path, required=True)
    _predictor_args(p)

    p = sub.add_parser("eval", parents=[common], help="evaluate the planner on a scenario set")
    p.add_argument("--scenarios", type=Path, nargs="*", default=[], help="scenario files")
    p.add_argument("--suite", type=int, default=0, help="generate this many seeded scenarios")
    p.add_argument("--baseline", action="store_true", help="also run the uniform-random policy")
    _predictor_args(p)

    sub.add_parser("calibrate", parents=[common], help="fit obstacle mobility and flux blocking")

    p = sub.add_parser("sweep", parents=[common], help="interference or action-effect sweep")
    p.add_argument("kind", choices=("interference", "actions"))

    p = sub.add_parser("render", parents=[common], help="render a scenario's start state")
    p.add_argument("--scenario", type=Path, required=True)
    p.add_argument("--action", choices=[a.value for a in ACTIONS], default=None)
    return parser


def _params(args) -> SimParams:
    base = SimParams(rng_seed=args.seed) if args.seed is not None else SimParams()
    return textio.read_params(args.config, base) if args.config else base


def _out(args, default: str) -> Path:
    out = args.out or Path(default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _predictor(args, params: SimParams, geom: RobotGeometry, slope: float):
    if args.predictor == "oracle":
        from .surrogate.predictors import OraclePredictor

        return OraclePredictor(params.noiseless(), geom, slope_angle=slope)
    if not (args.f_e and args.f_r):
        raise UsageError("--predictor learned needs --f-e and --f-r checkpoints")
    from .surrogate.checkpoint import load_checkpoint
    from .surrogate.predictors import LearnedPredictor
    from .surrogate.schedule import DiffusionConfig

    f_e, cfg_e = load_checkpoint(args.f_e)
    f_r, _ = load_checkpoint(args.f_r)
    return LearnedPredictor(f_e, f_r, cfg_e.get("diffusion", DiffusionConfig()), geom, seed=args.seed or 0)


def _weights(args):
    from .planning import CostWeights

    return CostWeights(horizon=args.horizon) if args.horizon else CostWeights()


def cmd_simulate(args) -> int:
    from .encoding import render_depth
    from .imageio import write_depth
    from .sim import sim_step

    sc = textio.read_scenario(args.scenario)
    params, geom = _params(args), RobotGeometry()
    try:
        actions = [Action(a.strip()) for a in args.actions.split(",") if a.strip()]
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = _out(args, "simulate_out")
    rng = np.random.default_rng(sc.rng_seed if args.seed is None else args.seed)
    hf, robot, obs = sc.heightfield, sc.robot_start, sc.obstacles
    emb = Embodiment(args.embodiment)
    lines = ["step,action,robot_x,robot_y,robot_phi,volume,events"]
    for i, a in enumerate(actions):
        res = sim_step(hf, robot, obs, a, geom, params, rng, emb)
        hf, robot, obs = res.next_heightfield, res.next_robot, res.next_obstacles
        lines.append(f"{i},{a.value},{robot.x:.6f},{robot.y:.6f},{robot.phi:.6f},{hf.volume():.6f},"
                     f"{';'.join(res.events)}")
        write_depth(out / f"step{i:03d}.pgm", render_depth(hf, robot if emb is Embodiment.ROBOT else None, obs, geom))
    (out / "simulate.csv").write_text("\n".join(lines) + "\n")
    print(f"{len(actions)} steps written to {out}")
    return 0


def cmd_gen_data(args) -> int:
    from .harness import desk_manifest, gen_dataset

    out = _out(args, f"data_{args.embodiment}")
    index = gen_dataset(desk_manifest(args.embodiment, out, args.seed or 0, args.steps, args.scale), _params(args))
    print(f"dataset index: {index}")
    return 0


def cmd_train(args) -> int:
    from dataclasses import replace

    from .harness import load_dataset
    from .surrogate import checkpoint
    from .surrogate.schedule import DiffusionConfig
    from .surrogate.training import F_E_TRAIN_PAPER, F_R_TRAIN_PAPER, train_f_e, train_f_r
    from .surrogate.unet import F_E_PAPER, F_R_PAPER

    out = _out(args, "train_out")
    seed = args.seed or 0
    if args.model == "f_e":
        data = load_dataset(args.data, "env")
        ucfg = replace(F_E_PAPER, base_channels=args.base_channels)
        tcfg = replace(F_E_TRAIN_PAPER, epochs=args.epochs, rng_seed=seed)
    else:
        data = load_dataset(args.data, "robot")
        ucfg = replace(F_R_PAPER, base_channels=args.base_channels)
        tcfg = replace(F_R_TRAIN_PAPER, epochs=args.epochs, rng_seed=seed)
    if args.res_blocks:
        ucfg = replace(ucfg, res_blocks_per_level=args.res_blocks)
    if args.lr:
        tcfg = replace(tcfg, learning_rate=args.lr)
    if args.batch_size:
        tcfg = replace(tcfg, batch_size=args.batch_size)
    diff = DiffusionConfig()
    if args.model == "f_e":
        res = train_f_e(data, ucfg, diff, tcfg)
    else:
        res = train_f_r(data, ucfg, tcfg, augment=args.augment)
    checkpoint.save_checkpoint(out / f"{args.model}.gpck", res.model, args.model,
                               diff if args.model == "f_e" else None)
    res.write_loss_csv(out / f"{args.model}_loss.csv")
    print(f"{args.model}: final train loss {res.train_loss[-1]:.6g}; checkpoint in {out}")
    return 0


def cmd_plan(args) -> int:
    from .planning import execute_policy

    sc = textio.read_scenario(args.scenario)
    params, geom = _params(args), RobotGeometry()
    if args.seed is not None:
        from dataclasses import replace

        sc = replace(sc, rng_seed=args.seed)
    pred = _predictor(args, params, geom, sc.heightfield.slope_angle)
    trace = execute_policy(sc, pred, _weights(args), not args.no_eaa, params, geom)
    out = _out(args, "plan_out")
    trace.write_csv(out / "trace.csv")
    trace.write_images(out / "images")
    print(f"{sc.name}: {trace.termination} after {trace.steps} steps, final MAE {trace.final_mae:.3f} cm")
    return 0 if trace.success else 1


def cmd_eval(args) -> int:
    from .harness import evaluate
    from .planning import random_policy
    from .scenarios import scenario_suite

    params, geom = _params(args), RobotGeometry()
    scenarios = [textio.read_scenario(p) for p in args.scenarios]
    if args.suite:
        scenarios += [s.scenario for s in scenario_suite(args.suite, args.seed or 0, params, geom)]
    if not scenarios:
        raise UsageError("eval needs --scenarios files or --suite N")
    pred = _predictor(args, params, geom, scenarios[0].heightfield.slope_angle)
    out = _out(args, "eval_out")
    report = evaluate(scenarios, pred, _weights(args), not args.no_eaa, params, geom)
    report.write_csv(out / "report.csv")
    print("planner:", report.summary())
    if args.baseline:
        base = evaluate(scenarios, pred, _weights(args), not args.no_eaa, params, geom, policy=random_policy)
        base.write_csv(out / "baseline.csv")
        print("random :", base.summary())
    return 0


def cmd_calibrate(args) -> int:
    from .calibration import calibrate_interference

    params = calibrate_interference(_params(args))
    out = _out(args, "calibrate_out")
    textio.save_params(out / "params.txt", params)
    ratios = params.metadata["calibrated_ratios"]
    print(f"mobility={params.obstacle_mobility:g} flux_block={params.flux_block:g} "
          + " ".join(f"r({k:g})={v:.3f}" for k, v in sorted(ratios.items())))
    return 0


def cmd_sweep(args) -> int:
    from .harness import sweep_actions, sweep_interference

    out = _out(args, "sweep_out")
    if args.kind == "interference":
        sweep_interference(_params(args), out)
    else:
        sweep_actions(_params(args), out)
    print(f"{args.kind} sweep written to {out}")
    return 0


def cmd_render(args) -> int:
    from .encoding import render_action, render_depth
    from .imageio import write_action, write_depth

    sc = textio.read_scenario(args.scenario)
    geom = RobotGeometry()
    out = _out(args, "render_out")
    img = render_depth(sc.heightfield, sc.robot_start, sc.obstacles, geom)
    write_depth(out / "depth.pgm", img)
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.imsave(out / "depth.png", img.values, cmap="viridis", vmin=-1, vmax=1, origin="lower",
               metadata={"Software": None})
    if args.action:
        a = render_action(sc.robot_start, geom, Action(args.action), img.shape, img.cm_per_px)
        write_action(out / "action.ppm", a, img.cm_per_px)
        plt.imsave(out / "action.png", a.values, origin="lower", metadata={"Software": None})
    print(f"rendered {sc.name} to {out}")
    return 0


COMMANDS = {"simulate": cmd_simulate, "gen-data": cmd_gen_data, "train": cmd_train, "plan": cmd_plan,
            "eval": cmd_eval, "calibrate": cmd_calibrate, "sweep": cmd_sweep, "render": cmd_render}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 2
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # task failure: report and signal
        log.debug("task failed", exc_info=True)
        print(f"failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
