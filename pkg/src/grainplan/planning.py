"""Costs, Effective Action Adjustment and the exhaustive receding-horizon planner.

All planning happens in image space: a predictor proposes the robot and
environment deltas for an action image, the deltas are composed into the
next depth image and the states the costs need are extracted from it.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .encoding import (ActionImage, CompositionError, DepthImage, ExtractionError, compose_next,
                       extract_obstacles, extract_robot, render_action, render_depth)
from .sim import Embodiment, SimParams, sim_step
from .terrain import (ACTIONS, Action, Mode, Obstacle, RobotGeometry, RobotState, Scenario, Target,
                      circular_midpoint, normalize_angle)

MIN_OBSTACLE_DISTANCE = 0.5  # cm; regularizes the 1/distance term
NO_IMPROVEMENT_PATIENCE = 3


@dataclass(frozen=True)
class CostWeights:
    w1: float = 0.6
    w2: float = 0.4
    w3: float = 0.8
    w4: float = 0.2
    w5: float = 0.4
    w6: float = 0.6
    alpha: float = 4.0
    beta: float = math.pi / 4
    gamma: float = 0.8
    horizon: int = 4

    def __post_init__(self) -> None:
        ws = (self.w1, self.w2, self.w3, self.w4, self.w5, self.w6)
        if any(w < 0 for w in ws):
            raise ValueError("weights must be non-negative")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if self.horizon < 1:
            raise ValueError("horizon must be positive")

    def check_partition(self) -> None:
        """The paper's weight pairs each sum to one; scaled copies need not."""
        for a, b in ((self.w1, self.w2), (self.w3, self.w4), (self.w5, self.w6)):
            if not math.isclose(a + b, 1.0, abs_tol=1e-12):
                raise ValueError("each weight pair must sum to 1")

    def scaled(self, k: float) -> CostWeights:
        return CostWeights(self.w1 * k, self.w2 * k, self.w3 * k, self.w4 * k, self.w5 * k, self.w6 * k,
                           self.alpha, self.beta, self.gamma, self.horizon)


# -- costs -------------------------------------------------------------------


def cost_rt(x_p, d_r) -> float:
    """Distance from the robot centre to its target point."""
    return math.hypot(float(x_p[0]) - float(d_r[0]), float(x_p[1]) - float(d_r[1]))


def ang_factor(delta: float, alpha: float, beta: float) -> float:
    """Exponential penalty for bearings inside the frontal danger zone."""
    d = abs(delta)
    return math.exp(alpha * (beta - d)) if d <= beta else 1.0


def heading_bearing(robot: RobotState) -> float:
    """Heading expressed as an ``atan2`` bearing (x axis = 0, CCW positive)."""
    return normalize_angle(robot.phi + math.pi / 2)


def cost_rs(robot: RobotState, obstacles: Sequence[Obstacle], weights: CostWeights | None = None,
            events: list[str] | None = None) -> float:
    """Safety cost: inverse distance to each obstacle, amplified when it lies ahead."""
    w = weights or CostWeights()
    total = 0.0
    head = heading_bearing(robot)
    for o in obstacles:
        dx, dy = o.x - robot.x, o.y - robot.y
        dist = math.hypot(dx, dy)
        if dist < MIN_OBSTACLE_DISTANCE:
            dist = MIN_OBSTACLE_DISTANCE
            if events is not None:
                events.append(f"obstacle-distance-clamped:{o.id}")
        delta = normalize_angle(math.atan2(dy, dx) - head)
        total += ang_factor(delta, w.alpha, w.beta) / dist
    return total


def cost_o(obstacles: Sequence[Obstacle], targets: Sequence[Target]) -> float:
    """Summed distance of each obstacle to its own target."""
    if len(obstacles) != len(targets):
        raise ValueError(f"{len(obstacles)} obstacles but {len(targets)} targets")
    return float(sum(t.distance((o.x, o.y)) for o, t in zip(obstacles, targets)))


@dataclass(frozen=True)
class CostTerms:
    c_rt: float
    c_rs: float
    c_o: float
    total: float


def manipulated_obstacles(obstacles: Sequence[Obstacle], scenario: Scenario) -> list[Obstacle]:
    by_id = {o.id: o for o in obstacles}
    missing = [i for i in scenario.manipulated if i not in by_id]
    if missing:
        raise ExtractionError(f"manipulated obstacles {missing} not found")
    return [by_id[i] for i in scenario.manipulated]


def cost_terms(mode: Mode, robot: RobotState, obstacles: Sequence[Obstacle], scenario: Scenario,
               weights: CostWeights, events: list[str] | None = None) -> CostTerms:
    mode = Mode(mode)
    c_rs = cost_rs(robot, obstacles, weights, events)
    c_rt = scenario.robot_target.distance((robot.x, robot.y)) if scenario.robot_target else 0.0
    c_o = (cost_o(manipulated_obstacles(obstacles, scenario), scenario.obstacle_targets)
           if scenario.obstacle_targets else 0.0)
    c_l = weights.w1 * c_rt + weights.w2 * c_rs
    c_m = weights.w3 * c_o + weights.w4 * c_rs
    if mode is Mode.LOCOMOTION:
        total = c_l
    elif mode is Mode.MANIPULATION:
        total = c_m
    else:
        total = weights.w5 * c_l + weights.w6 * c_m
    return CostTerms(c_rt, c_rs, c_o, total)


def mode_cost(mode: Mode, robot: RobotState, obstacles: Sequence[Obstacle], scenario: Scenario,
              weights: CostWeights) -> float:
    return cost_terms(mode, robot, obstacles, scenario, weights).total


def discounted_sum(costs: Sequence[float], gamma: float) -> float:
    total = 0.0
    for t, c in enumerate(costs):
        total += gamma**t * c
    return total


# -- effective action adjustment --------------------------------------------


def eaa_midpoint(x0: RobotState, x2: RobotState) -> RobotState:
    return RobotState(0.5 * (x0.x + x2.x), 0.5 * (x0.y + x2.y), circular_midpoint(x0.phi, x2.phi))


def eaa_adjust(x0: RobotState, x2: RobotState, geom: RobotGeometry, action: Action,
               shape: tuple[int, int], cm_per_px: float) -> ActionImage:
    """Action image re-rendered at the robot's mid-stroke pose."""
    return render_action(eaa_midpoint(x0, x2), geom, action, shape, cm_per_px)


# -- rollouts ----------------------------------------------------------------


@dataclass(frozen=True)
class Node:
    """A predicted state in image space."""

    image: DepthImage
    robot: RobotState
    obstacles: tuple[Obstacle, ...]
    robot_pixels: np.ndarray


@dataclass(frozen=True)
class Transition:
    action: Action
    node: Node | None
    terms: CostTerms | None
    action_image: ActionImage | None
    events: tuple[str, ...] = ()

    @property
    def cost(self) -> float:
        return math.inf if self.terms is None else self.terms.total


def observe(img: DepthImage, geom: RobotGeometry, previous: Sequence[Obstacle] | None = None) -> Node:
    """Extract robot and obstacles from an image, keeping lost obstacles in place."""
    ext = extract_robot(img, geom)
    return Node(img, ext.robot, _track(img, ext.pixels, previous, geom), ext.pixels)


def _track(img: DepthImage, robot_pixels: np.ndarray, previous, geom) -> tuple[Obstacle, ...]:
    found = extract_obstacles(img, robot_pixels, previous=previous, geom=geom)
    if previous is None:
        return tuple(found)
    ids = {o.id for o in found}
    # An obstacle hidden under the body keeps its last known position.
    kept = [o for o in previous if o.id not in ids]
    return tuple(sorted(found + kept, key=lambda o: o.id))


@dataclass
class PlanContext:
    predictor: object
    scenario: Scenario
    weights: CostWeights
    geom: RobotGeometry = field(default_factory=RobotGeometry)
    use_eaa: bool = True


def _in_field(robot: RobotState, img: DepthImage) -> bool:
    h, w = img.shape
    s = img.cm_per_px
    return 0.0 <= robot.x <= w * s and 0.0 <= robot.y <= h * s


def expand(ctx: PlanContext, nodes: Sequence[Node], actions: Sequence[Action]) -> list[Transition]:
    """Apply ``actions[i]`` to ``nodes[i]``; predictor calls are batched."""
    geom = ctx.geom
    out: list[Transition | None] = [None] * len(nodes)
    a_imgs = [render_action(n.robot, geom, a, n.image.shape, n.image.cm_per_px) for n, a in zip(nodes, actions)]
    robot_deltas = ctx.predictor.predict_robot_batch([n.image for n in nodes], a_imgs)
    env_actions = []
    for i, (n, a, a_img, rd) in enumerate(zip(nodes, actions, a_imgs, robot_deltas)):
        if ctx.use_eaa:
            try:
                x2 = extract_robot(n.image.plus(rd), geom).robot
            except ExtractionError:
                out[i] = Transition(a, None, None, None, ("robot-extraction-failed",))
                env_actions.append(a_img)
                continue
            env_actions.append(eaa_adjust(n.robot, x2, geom, a, n.image.shape, n.image.cm_per_px))
        else:
            env_actions.append(a_img)
    live = [i for i in range(len(nodes)) if out[i] is None]
    env_deltas = ctx.predictor.predict_env_batch([nodes[i].image for i in live], [env_actions[i] for i in live])
    for i, ed in zip(live, env_deltas):
        n, a = nodes[i], actions[i]
        try:
            img, _, ext_n = compose_next(n.image, ed, robot_deltas[i], geom, n.robot_pixels)
        except CompositionError:
            out[i] = Transition(a, None, None, env_actions[i], ("composition-failed",))
            continue
        if not _in_field(ext_n.robot, img):
            out[i] = Transition(a, None, None, env_actions[i], ("robot-left-field",))
            continue
        events: list[str] = []
        obstacles = _track(img, ext_n.pixels, n.obstacles, geom)
        child = Node(img, ext_n.robot, obstacles, ext_n.pixels)
        try:
            terms = cost_terms(ctx.scenario.mode, child.robot, obstacles, ctx.scenario, ctx.weights, events)
        except ExtractionError:
            out[i] = Transition(a, None, None, env_actions[i], ("obstacle-lost",))
            continue
        out[i] = Transition(a, child, terms, env_actions[i], tuple(events))
    return out  # type: ignore[return-value]


def rollout(ctx: PlanContext, start: Node, sequence: Sequence[Action]) -> tuple[float, list[Transition]]:
    """Discounted cost of one action sequence, one step at a time."""
    total = 0.0
    trace: list[Transition] = []
    node = start
    for t, a in enumerate(sequence):
        tr = expand(ctx, [node], [Action(a)])[0]
        trace.append(tr)
        if tr.node is None:
            return math.inf, trace
        total += ctx.weights.gamma**t * tr.cost
        node = tr.node
    return total, trace


@dataclass
class PlanResult:
    action: Action | None
    sequence: tuple[Action, ...] | None
    cost: float
    table: dict[tuple[Action, ...], float]
    first_step: dict[Action, Transition]


def plan_step(ctx: PlanContext, start: Node) -> PlanResult:
    """Evaluate every action sequence of the horizon and pick the cheapest.

    Sequences sharing a prefix share its predictions, level by level; the
    accumulated cost follows the same operation order as :func:`rollout`, so
    the two agree bit for bit with a deterministic predictor.
    """
    H = ctx.weights.horizon
    gamma = ctx.weights.gamma
    frontier: list[tuple[tuple[Action, ...], Node | None, float]] = [((), start, 0.0)]
    first: dict[Action, Transition] = {}
    for t in range(H):
        pairs = [(seq, node, acc, a) for seq, node, acc in frontier for a in ACTIONS]
        live = [p for p in pairs if p[1] is not None and math.isfinite(p[2])]
        results = iter(expand(ctx, [p[1] for p in live], [p[3] for p in live]))
        nxt = []
        for seq, node, acc, a in pairs:
            if node is None or not math.isfinite(acc):
                nxt.append((seq + (a,), None, math.inf))
                continue
            tr = next(results)
            if t == 0:
                first[a] = tr
            if tr.node is None:
                nxt.append((seq + (a,), None, math.inf))
            else:
                nxt.append((seq + (a,), tr.node, acc + gamma**t * tr.cost))
        frontier = nxt
    table = {seq: acc for seq, _, acc in frontier}
    best_seq, best = None, math.inf
    for seq in itertools.product(ACTIONS, repeat=H):
        c = table[seq]
        if c < best:
            best_seq, best = seq, c
    return PlanResult(best_seq[0] if best_seq else None, best_seq, best, table, first)


# -- policy execution --------------------------------------------------------


TERMINATIONS = ("success", "max_steps", "out_of_bounds", "no_improvement")


@dataclass
class StepRecord:
    step: int
    action: Action
    planned_cost: float
    predicted_image: DepthImage | None
    predicted_robot: RobotState | None
    predicted_obstacles: tuple[Obstacle, ...]
    action_image: ActionImage | None
    terms: CostTerms
    robot: RobotState
    obstacles: tuple[Obstacle, ...]
    events: tuple[str, ...] = ()


@dataclass
class PlanTrace:
    scenario: str
    records: list[StepRecord] = field(default_factory=list)
    termination: str = "max_steps"
    final_robot: RobotState | None = None
    final_obstacles: tuple[Obstacle, ...] = ()
    robot_error: float | None = None
    obstacle_error: float | None = None

    @property
    def steps(self) -> int:
        return len(self.records)

    @property
    def success(self) -> bool:
        return self.termination == "success"

    @property
    def final_mae(self) -> float:
        """Mean of the mode's final errors (robot and/or obstacles), in cm."""
        errs = [e for e in (self.robot_error, self.obstacle_error) if e is not None]
        return float(np.mean(errs)) if errs else 0.0

    def write_csv(self, path: str | Path, n_obstacles: int | None = None) -> None:
        ids = sorted({o.id for r in self.records for o in r.obstacles} | {o.id for o in self.final_obstacles})
        header = ["step", "action", "C_rt", "C_rs", "C_o", "mode_cost", "robot_x", "robot_y", "robot_phi"]
        for i in ids:
            header += [f"obstacle{i}_x", f"obstacle{i}_y"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for r in self.records:
                pos = {o.id: o for o in r.obstacles}
                row = [r.step, r.action.value] + [f"{v:.6f}" for v in (r.terms.c_rt, r.terms.c_rs, r.terms.c_o,
                                                                      r.terms.total, r.robot.x, r.robot.y,
                                                                      r.robot.phi)]
                for i in ids:
                    row += [f"{pos[i].x:.6f}", f"{pos[i].y:.6f}"] if i in pos else ["", ""]
                w.writerow(row)

    def write_images(self, directory: str | Path) -> None:
        from .imageio import write_action, write_depth

        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for r in self.records:
            if r.predicted_image is not None:
                write_depth(d / f"step{r.step:03d}_predicted.pgm", r.predicted_image)
                if r.action_image is not None:
                    write_action(d / f"step{r.step:03d}_action.ppm", r.action_image, r.predicted_image.cm_per_px)


def robot_error(scenario: Scenario, robot: RobotState) -> float | None:
    return scenario.robot_target.distance((robot.x, robot.y)) if scenario.robot_target else None


def obstacle_errors(scenario: Scenario, obstacles: Sequence[Obstacle]) -> list[float]:
    by_id = {o.id: o for o in obstacles}
    return [t.distance((by_id[i].x, by_id[i].y)) for i, t in zip(scenario.manipulated, scenario.obstacle_targets)]


def is_success(scenario: Scenario, robot: RobotState, obstacles: Sequence[Obstacle]) -> bool:
    r = scenario.success_radius
    ok = True
    if scenario.mode in (Mode.LOCOMOTION, Mode.LOCO_MANIPULATION):
        ok &= robot_error(scenario, robot) <= r
    if scenario.mode in (Mode.MANIPULATION, Mode.LOCO_MANIPULATION):
        ok &= all(e <= r for e in obstacle_errors(scenario, obstacles))
    return bool(ok)


def _finish(trace: PlanTrace, scenario: Scenario, robot: RobotState, obstacles, reason: str) -> PlanTrace:
    trace.termination = reason
    trace.final_robot = robot
    trace.final_obstacles = tuple(obstacles)
    trace.robot_error = robot_error(scenario, robot) if scenario.mode is not Mode.MANIPULATION else None
    if scenario.mode is not Mode.LOCOMOTION:
        trace.obstacle_error = float(np.mean(obstacle_errors(scenario, obstacles)))
    return trace


def execute_policy(
    scenario: Scenario,
    predictor,
    weights: CostWeights | None = None,
    use_eaa: bool = True,
    params: SimParams | None = None,
    geom: RobotGeometry | None = None,
    policy=None,
) -> PlanTrace:
    """Closed loop: plan in image space, act in the simulator, re-observe.

    ``policy(node, step, rng) -> Action`` replaces the planner when given
    (used for baselines and scripted runs).
    """
    weights = weights or CostWeights()
    params = params or SimParams()
    geom = geom or RobotGeometry()
    ctx = PlanContext(predictor, scenario, weights, geom, use_eaa)
    rng = np.random.default_rng(scenario.rng_seed)
    hf, robot, obstacles = scenario.heightfield, scenario.robot_start, tuple(scenario.obstacles)
    trace = PlanTrace(scenario.name)
    if is_success(scenario, robot, obstacles):
        return _finish(trace, scenario, robot, obstacles, "success")
    true_cost = cost_terms(scenario.mode, robot, obstacles, scenario, weights).total
    best_cost, stale = true_cost, 0
    seen = tuple(obstacles)
    for step in range(scenario.max_steps):
        img = render_depth(hf, robot, obstacles, geom)
        try:
            node = observe(img, geom, seen)
        except ExtractionError:
            return _finish(trace, scenario, robot, obstacles, "no_improvement")
        seen = node.obstacles
        if policy is not None:
            action, planned, first = Action(policy(node, step, rng)), math.nan, None
        else:
            plan = plan_step(ctx, node)
            if plan.action is None:
                return _finish(trace, scenario, robot, obstacles, "no_improvement")
            action, planned, first = plan.action, plan.cost, plan.first_step.get(plan.action)
        res = sim_step(hf, robot, obstacles, action, geom, params, rng, Embodiment.ROBOT)
        hf, robot, obstacles = res.next_heightfield, res.next_robot, res.next_obstacles
        terms = cost_terms(scenario.mode, robot, obstacles, scenario, weights)
        pn = first.node if first is not None else None
        trace.records.append(StepRecord(
            step, action, planned, pn.image if pn else None, pn.robot if pn else None,
            pn.obstacles if pn else (), first.action_image if first else None, terms, robot,
            tuple(obstacles), res.events))
        left = "robot-left-bounds" in res.events or any(
            e == f"obstacle-left-bounds:{i}" for e in res.events for i in scenario.manipulated)
        if left:
            return _finish(trace, scenario, robot, obstacles, "out_of_bounds")
        if is_success(scenario, robot, obstacles):
            return _finish(trace, scenario, robot, obstacles, "success")
        if terms.total < best_cost - 1e-9:
            best_cost, stale = terms.total, 0
        else:
            stale += 1
            if stale >= NO_IMPROVEMENT_PATIENCE:
                return _finish(trace, scenario, robot, obstacles, "no_improvement")
    return _finish(trace, scenario, robot, obstacles, "max_steps")


def random_policy(node: Node, step: int, rng: np.random.Generator) -> Action:
    """Uniform-random baseline."""
    return ACTIONS[int(rng.integers(len(ACTIONS)))]
