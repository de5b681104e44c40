"""Seeded scenario generation with feasibility by construction.

Targets come from replaying a scripted action sequence in the simulator, so
every generated scenario has a known sequence that reaches success.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .sim import Embodiment, SimParams, sim_step
from .terrain import (ACTIONS, Action, Heightfield, Mode, Obstacle, RobotGeometry, RobotState, Scenario,
                      Target, make_inclined_field)

FIELD_CELLS = 64
FIELD_EXTENT = 60.0
SLOPE_DEG = 20.0
BASE_DEPTH = 2.5


def standard_field(depth: float = BASE_DEPTH, slope_deg: float = SLOPE_DEG) -> Heightfield:
    return make_inclined_field(FIELD_CELLS, FIELD_CELLS, FIELD_EXTENT / FIELD_CELLS, math.radians(slope_deg), depth)


@dataclass(frozen=True)
class ScriptedScenario:
    scenario: Scenario
    script: tuple[Action, ...]


def replay(scenario: Scenario, script, params: SimParams, geom: RobotGeometry):
    """Run ``script`` from the scenario start with the scenario's noise stream."""
    rng = np.random.default_rng(scenario.rng_seed)
    hf, robot, obs = scenario.heightfield, scenario.robot_start, tuple(scenario.obstacles)
    events: list[str] = []
    for a in script:
        res = sim_step(hf, robot, obs, a, geom, params, rng, Embodiment.ROBOT)
        hf, robot, obs = res.next_heightfield, res.next_robot, res.next_obstacles
        events.extend(res.events)
    return hf, robot, obs, events


def loco_manipulation_scenario(
    seed: int,
    params: SimParams | None = None,
    geom: RobotGeometry | None = None,
    script_length: tuple[int, int] = (5, 7),
    min_travel: float = 6.0,
    max_tries: int = 50,
) -> ScriptedScenario:
    """A robot facing uphill with one obstacle downhill behind a leg.

    The obstacle target and robot target are the end states of a random
    script; scripts that move the obstacle or robot less than ``min_travel``
    are redrawn.
    """
    params = params or SimParams()
    geom = geom or RobotGeometry()
    rng = np.random.default_rng(seed)
    hf = standard_field()
    for _ in range(max_tries):
        robot = RobotState(float(rng.uniform(24, 36)), float(rng.uniform(30, 38)), float(rng.uniform(-0.15, 0.15)))
        side = -1.0 if rng.random() < 0.5 else 1.0
        lx, ly = robot.to_world(side * 0.5 * geom.leg_track, 0.0)
        ob = Obstacle(0, lx + float(rng.uniform(-1.0, 1.0)), ly - float(rng.uniform(16.0, 20.0)))
        n = int(rng.integers(script_length[0], script_length[1] + 1))
        weights = np.array([1, 1, 1, 1, 2, 2], float)
        script = tuple(ACTIONS[i] for i in rng.choice(len(ACTIONS), size=n, p=weights / weights.sum()))
        base = Scenario(Mode.LOCO_MANIPULATION, hf, robot, (ob,), (Target(0.0, 0.0),), Target(0.0, 0.0),
                        rng_seed=seed, name=f"loco-manip-{seed:03d}")
        _, end_robot, end_obs, events = replay(base, script, params, geom)
        if events:
            continue
        moved_o = math.hypot(end_obs[0].x - ob.x, end_obs[0].y - ob.y)
        moved_r = math.hypot(end_robot.x - robot.x, end_robot.y - robot.y)
        if moved_o < min_travel or moved_r < min_travel:
            continue
        sc = replace(base, obstacle_targets=(Target(end_obs[0].x, end_obs[0].y),),
                     robot_target=Target(end_robot.x, end_robot.y))
        return ScriptedScenario(sc, script)
    raise RuntimeError(f"no feasible scenario for seed {seed}")


def scenario_suite(n: int = 10, base_seed: int = 0, params: SimParams | None = None,
                   geom: RobotGeometry | None = None) -> list[ScriptedScenario]:
    return [loco_manipulation_scenario(base_seed + i, params, geom) for i in range(n)]
