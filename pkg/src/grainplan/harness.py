"""Dataset generation, evaluation and the sweep experiments."""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .calibration import SPACINGS, interference_ratios
from .encoding import DeltaImage, extract_robot, render_action, render_depth
from .imageio import read_action, read_delta, read_depth, write_action, write_delta, write_depth
from .planning import CostWeights, PlanTrace, execute_policy
from .scenarios import standard_field
from .sim import Embodiment, SimParams, sim_step
from .surrogate.training import TripletDataset
from .terrain import ACTIONS, Action, Mode, Obstacle, RobotGeometry, RobotState, Scenario

ORIENTATIONS = (0, 15, 30)
INDEX_COLUMNS = ("trial", "step", "embodiment", "action", "depth_in", "action_img", "env_delta", "robot_delta")
FORMAT_VERSION = 1
INCOMPLETE_MARKER = "INCOMPLETE"

# Image counts of a full-size collection, for comparison with desk manifests.
REFERENCE_COUNTS = {"manipulator": {"trials": 240, "images": 24590}, "robot": {"trials": 60, "images": 13480}}


@dataclass(frozen=True)
class TrialSpec:
    orientation_deg: int
    actions: tuple[Action, ...]
    seed: int
    trials: int
    steps: int = 10

    def __post_init__(self) -> None:
        if self.orientation_deg not in ORIENTATIONS:
            raise ValueError(f"orientation must be one of {ORIENTATIONS}")
        if not self.actions or self.trials < 1 or self.steps < 1:
            raise ValueError("trial spec needs actions, trials and steps")
        object.__setattr__(self, "actions", tuple(Action(a) for a in self.actions))


@dataclass(frozen=True)
class DatasetManifest:
    embodiment: Embodiment
    specs: tuple[TrialSpec, ...]
    out_dir: Path
    version: int = FORMAT_VERSION

    @property
    def total_trials(self) -> int:
        return sum(s.trials for s in self.specs)


def desk_manifest(embodiment: Embodiment, out_dir: str | Path, seed: int = 0, steps: int = 10,
                  scale: int = 1) -> DatasetManifest:
    """Desk-scale split: 24 manipulator or 12 robot trials at ``scale`` 1.

    Manipulator trials cover the two-leg patterns at each orientation plus
    single-leg runs; robot trials use every action.
    """
    emb = Embodiment(embodiment)
    if emb is Embodiment.MANIPULATOR:
        specs = [TrialSpec(o, (Action.FP, Action.LP, Action.RP, Action.AF), seed + 10 * i, 6 * scale, steps)
                 for i, o in enumerate(ORIENTATIONS)]
        specs += [TrialSpec(0, (Action.LFE,), seed + 100, 3 * scale, steps),
                  TrialSpec(0, (Action.RFE,), seed + 101, 3 * scale, steps)]
    else:
        specs = [TrialSpec(o, ACTIONS, seed + 10 * i, 4 * scale, steps) for i, o in enumerate(ORIENTATIONS)]
    return DatasetManifest(emb, tuple(specs), Path(out_dir))


def _trial_rng(spec_seed: int, trial: int) -> np.random.Generator:
    return np.random.default_rng([spec_seed, trial])


def _trial_start(rng: np.random.Generator, orientation_deg: int, geom: RobotGeometry):
    sign = -1.0 if rng.random() < 0.5 else 1.0
    robot = RobotState(float(rng.uniform(24, 36)), float(rng.uniform(30, 42)), sign * math.radians(orientation_deg))
    obstacles = []
    for i in range(int(rng.integers(0, 3))):
        side = -1.0 if rng.random() < 0.5 else 1.0
        x, y = robot.to_world(side * 0.5 * geom.leg_track, -float(rng.uniform(12, 22)))
        x += float(rng.uniform(-2, 2))
        if 3 < x < 57 and 3 < y < 57 and all(math.hypot(x - o.x, y - o.y) > 5 for o in obstacles):
            obstacles.append(Obstacle(i, x, y))
    return robot, tuple(obstacles)


def gen_dataset(manifest: DatasetManifest, params: SimParams | None = None,
                geom: RobotGeometry | None = None) -> Path:
    """Roll random action sequences and store (image, action, deltas) tuples.

    Manipulator frames carry no robot body and zero robot deltas.  The
    environment delta is zeroed on the robot's pixels; the robot delta is the
    body moving over an unchanged environment.  Returns the index path.
    """
    params = params or SimParams()
    geom = geom or RobotGeometry()
    emb = Embodiment(manifest.embodiment)
    out = Path(manifest.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    marker = out / INCOMPLETE_MARKER
    marker.write_text("dataset generation in progress\n")
    index = out / "index.csv"
    rows = []
    trial_id = 0
    for spec in manifest.specs:
        for k in range(spec.trials):
            rng = _trial_rng(spec.seed, k)
            hf = standard_field()
            robot, obstacles = _trial_start(rng, spec.orientation_deg, geom)
            for step in range(spec.steps):
                action = spec.actions[int(rng.integers(len(spec.actions)))]
                shown = robot if emb is Embodiment.ROBOT else None
                img = render_depth(hf, shown, obstacles, geom)
                a_img = render_action(robot, geom, action, img.shape, img.cm_per_px)
                res = sim_step(hf, robot, obstacles, action, geom, params, rng, emb)
                env_next = render_depth(res.next_heightfield, shown, res.next_obstacles, geom)
                env = env_next.values - img.values
                if shown is not None:
                    env[extract_robot(img, geom).pixels] = 0.0
                    robot_next = render_depth(hf, res.next_robot, obstacles, geom)
                    rd = robot_next.values - img.values
                else:
                    rd = np.zeros(img.shape)
                stem = f"t{trial_id:04d}_s{step:03d}"
                files = (f"{stem}_depth.pgm", f"{stem}_action.ppm", f"{stem}_env.pgm", f"{stem}_robot.pgm")
                write_depth(out / files[0], img)
                write_action(out / files[1], a_img, img.cm_per_px)
                write_delta(out / files[2], DeltaImage(env), img.cm_per_px)
                write_delta(out / files[3], DeltaImage(rd), img.cm_per_px)
                rows.append((trial_id, step, emb.value, action.value) + files)
                hf, robot, obstacles = res.next_heightfield, res.next_robot, res.next_obstacles
                if "robot-left-bounds" in res.events:
                    break
            trial_id += 1
    with open(index, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(INDEX_COLUMNS)
        w.writerows(rows)
    (out / "manifest.txt").write_text(
        f"version = {manifest.version}\nembodiment = {emb.value}\ntrials = {manifest.total_trials}\n"
        f"rows = {len(rows)}\n")
    marker.unlink()
    return index


def load_dataset(directory: str | Path, target: str = "env") -> TripletDataset:
    """Load an index into arrays; ``target`` picks the env or robot delta."""
    d = Path(directory)
    if (d / INCOMPLETE_MARKER).exists():
        raise OSError(f"dataset in {d} is incomplete")
    col = {"env": "env_delta", "robot": "robot_delta"}[target]
    depth, action, delta = [], [], []
    cm = 1.0
    with open(d / "index.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            img = read_depth(d / row["depth_in"])
            cm = img.cm_per_px
            depth.append(img.values)
            action.append(read_action(d / row["action_img"]).channels_first())
            delta.append(read_delta(d / row[col]).values)
    return TripletDataset(np.array(depth), np.array(action), np.array(delta), cm)


def dataset_digest(directory: str | Path) -> str:
    """Hash of every file in a dataset, for reproducibility checks."""
    h = hashlib.sha256()
    for p in sorted(Path(directory).iterdir()):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


# -- evaluation --------------------------------------------------------------


@dataclass
class TrialResult:
    scenario: str
    termination: str
    final_mae: float
    steps: int
    robot_error: float | None = None
    obstacle_error: float | None = None


@dataclass
class EvalReport:
    trials: list[TrialResult] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    @property
    def successes(self) -> int:
        return sum(t.termination == "success" for t in self.trials)

    @property
    def success_rate(self) -> float:
        return 100.0 * self.successes / len(self.trials) if self.trials else 0.0

    @property
    def mae_mean(self) -> float:
        return float(np.mean([t.final_mae for t in self.trials])) if self.trials else math.nan

    @property
    def mae_std(self) -> float:
        return float(np.std([t.final_mae for t in self.trials])) if self.trials else math.nan

    def summary(self) -> str:
        return (f"trials={len(self.trials)} success={self.successes} ({self.success_rate:.0f}%) "
                f"MAE={self.mae_mean:.2f} (+/- {self.mae_std:.2f}) cm")

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["scenario", "termination", "final_mae", "steps", "robot_error", "obstacle_error"])
            for t in sorted(self.trials, key=lambda t: t.scenario):
                w.writerow([t.scenario, t.termination, f"{t.final_mae:.6f}", t.steps,
                            "" if t.robot_error is None else f"{t.robot_error:.6f}",
                            "" if t.obstacle_error is None else f"{t.obstacle_error:.6f}"])
            w.writerow([])
            w.writerow(["# " + self.summary()])
            for n in self.notes:
                w.writerow(["# " + n])


def trial_result(trace: PlanTrace) -> TrialResult:
    return TrialResult(trace.scenario, trace.termination, trace.final_mae, trace.steps, trace.robot_error,
                       trace.obstacle_error)


def evaluate(scenarios: Sequence[Scenario], predictor, weights: CostWeights | None = None, use_eaa: bool = True,
             params: SimParams | None = None, geom: RobotGeometry | None = None, policy=None,
             traces: list | None = None) -> EvalReport:
    if not scenarios:
        raise ValueError("no scenarios to evaluate")
    for sc in scenarios:
        if sc.mode in (Mode.MANIPULATION, Mode.LOCO_MANIPULATION) and not sc.obstacles:
            raise ValueError(f"scenario {sc.name} has no obstacles to manipulate")
    report = EvalReport()
    for sc in scenarios:
        tr = execute_policy(sc, predictor, weights, use_eaa, params, geom, policy)
        if traces is not None:
            traces.append(tr)
        report.trials.append(trial_result(tr))
    return report


# -- sweeps ------------------------------------------------------------------


def _bar_plot(path: Path, groups: dict[str, dict], ylabel: str, title: str, errors: dict | None = None) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 3.5), dpi=100)
    names = list(groups)
    keys = list(next(iter(groups.values())))
    width = 0.8 / len(names)
    x = np.arange(len(keys))
    for i, n in enumerate(names):
        vals = [groups[n][k] for k in keys]
        err = [errors[n][k] for k in keys] if errors else None
        ax.bar(x + i * width - 0.4 + width / 2, vals, width, yerr=err, label=n, capsize=3)
    ax.set_xticks(x)
    ax.set_xticklabels([str(k) for k in keys])
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def sweep_interference(params: SimParams, out_dir: str | Path, seeds: int = 5) -> dict[str, dict[float, np.ndarray]]:
    """Fore-aft and lateral displacement ratios at each spacing."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    res = {d: interference_ratios(params, direction=d, seeds=seeds) for d in ("fore-aft", "lateral")}
    with open(out / "interference.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["direction", "spacing_cm", "ratio_mean", "ratio_std"] + [f"seed{i}" for i in range(seeds)])
        for d, table in res.items():
            for s in SPACINGS:
                v = table[s]
                w.writerow([d, f"{s:g}", f"{v.mean():.6f}", f"{v.std():.6f}"] + [f"{x:.6f}" for x in v])
    _bar_plot(out / "interference.png",
              {d: {f"{s:g} cm": float(t[s].mean()) for s in SPACINGS} for d, t in res.items()},
              "displacement ratio", "Obstacle interference",
              {d: {f"{s:g} cm": float(t[s].std()) for s in SPACINGS} for d, t in res.items()})
    return res


def action_effects(params: SimParams, seeds: int = 3, start: RobotState | None = None,
                   geom: RobotGeometry | None = None) -> dict[Action, np.ndarray]:
    """Body-frame (dx, dy, dphi) per action from one step on the standard field."""
    geom = geom or RobotGeometry()
    start = start or RobotState(30.0, 30.0, 0.0)
    hf = standard_field()
    out = {}
    for a in ACTIONS:
        rows = []
        for s in range(seeds):
            rng = np.random.default_rng([params.rng_seed, a.index, s])
            res = sim_step(hf, start, (), a, geom, params, rng, Embodiment.ROBOT)
            r = res.next_robot
            dxw, dyw = r.x - start.x, r.y - start.y
            right, fwd = start.right(), start.forward()
            rows.append((dxw * right[0] + dyw * right[1], dxw * fwd[0] + dyw * fwd[1], r.phi - start.phi))
        out[a] = np.array(rows)
    return out


def sweep_actions(params: SimParams, out_dir: str | Path, seeds: int = 3) -> dict[Action, np.ndarray]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    eff = action_effects(params, seeds)
    with open(out / "actions.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["action", "dx_mean", "dx_std", "dy_mean", "dy_std", "dphi_mean", "dphi_std"])
        for a, v in eff.items():
            m, s = v.mean(axis=0), v.std(axis=0)
            w.writerow([a.value] + [f"{x:.6f}" for pair in zip(m, s) for x in pair])
    comps = ("dx", "dy", "dphi")
    _bar_plot(out / "actions.png",
              {c: {a.value: float(eff[a][:, i].mean()) for a in ACTIONS} for i, c in enumerate(comps)},
              "body-frame change (cm, rad)", "Action effects",
              {c: {a.value: float(eff[a][:, i].std()) for a in ACTIONS} for i, c in enumerate(comps)})
    return eff
