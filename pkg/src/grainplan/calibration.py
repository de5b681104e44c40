"""Two-obstacle interference experiment and the grid search that tunes it.

A fixed excavation (front pair of legs) runs uphill of a measured obstacle.
A second obstacle sits either downhill of it (fore-aft) or beside it
(lateral) at a given edge-to-edge spacing.  The measured obstacle's
displacement divided by its isolated displacement is the interference
ratio.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .sim import Embodiment, SimParams, advect_obstacles, excavate, relax
from .terrain import Action, Heightfield, Obstacle, RobotGeometry, RobotState, make_inclined_field

SPACINGS = (0.0, 2.0, 4.0, 8.0)
TARGET_RATIOS = {0.0: 0.42, 2.0: 0.67}
DEFAULT_MOBILITY_GRID = (4.0, 5.0, 6.0, 7.0, 8.0)
DEFAULT_BLOCK_GRID = tuple(np.round(np.arange(0.5, 1.0001, 0.05), 2))


class CalibrationError(RuntimeError):
    pass


@dataclass(frozen=True)
class InterferenceLayout:
    """Canonical layout on the standard 64 x 64 field."""

    cells: int = 64
    extent: float = 60.0
    slope_deg: float = 20.0
    depth: float = 2.5
    excavator: tuple[float, float] = (30.0, 46.0)
    measured: tuple[float, float] = (22.5, 34.0)
    radius: float = 2.0
    jitter: float = 0.3

    def field(self) -> Heightfield:
        return make_inclined_field(self.cells, self.cells, self.extent / self.cells,
                                   math.radians(self.slope_deg), self.depth)

    def pair(self, spacing: float, direction: str, offset: tuple[float, float]) -> tuple[Obstacle, Obstacle]:
        mx, my = self.measured[0] + offset[0], self.measured[1] + offset[1]
        gap = 2 * self.radius + spacing
        if direction == "fore-aft":
            other = (mx, my - gap)
        elif direction == "lateral":
            other = (mx - gap, my)
        else:
            raise ValueError(f"unknown direction {direction!r}")
        return Obstacle(0, mx, my, self.radius), Obstacle(1, *other, self.radius)


def _flux_cases(layout: InterferenceLayout, params: SimParams, seeds: int, geom: RobotGeometry):
    """One relaxed flux map per seed; the layout is jittered per seed."""
    hf = layout.field()
    robot = RobotState(*layout.excavator)
    dug = excavate(hf, robot, geom, Action.FP, params)
    rel = relax(dug, params)
    cases = []
    for s in range(seeds):
        rng = np.random.default_rng(s)
        off = tuple(rng.uniform(-layout.jitter, layout.jitter, 2)) if s else (0.0, 0.0)
        cases.append((rel.heightfield, rel.flux_map, off))
    return cases


def _displacement(obstacles, flux, hf, params) -> float:
    moved, _ = advect_obstacles(obstacles, flux, params, hf)
    return math.hypot(moved[0].x - obstacles[0].x, moved[0].y - obstacles[0].y)


def interference_ratios(
    params: SimParams,
    layout: InterferenceLayout | None = None,
    direction: str = "fore-aft",
    spacings=SPACINGS,
    seeds: int = 5,
    geom: RobotGeometry | None = None,
    cases=None,
) -> dict[float, np.ndarray]:
    """Per-seed displacement ratios keyed by spacing."""
    layout = layout or InterferenceLayout()
    geom = geom or RobotGeometry()
    cases = cases or _flux_cases(layout, params, seeds, geom)
    out = {}
    for sp in spacings:
        vals = []
        for hf, flux, off in cases:
            measured, other = layout.pair(sp, direction, off)
            alone = _displacement((measured,), flux, hf, params)
            if alone <= 0:
                raise CalibrationError("isolated obstacle does not move; check the layout")
            vals.append(_displacement((measured, other), flux, hf, params) / alone)
        out[float(sp)] = np.array(vals)
    return out


def monotone(ratios: dict[float, float], tol: float = 1e-9) -> bool:
    r = [ratios[s] for s in SPACINGS]
    return r[0] < r[1] < r[2] <= r[3] + tol and r[3] <= 1.0 + tol


def calibrate_interference(
    params: SimParams,
    mobility_grid=DEFAULT_MOBILITY_GRID,
    block_grid=DEFAULT_BLOCK_GRID,
    seeds: int = 5,
    layout: InterferenceLayout | None = None,
    geom: RobotGeometry | None = None,
) -> SimParams:
    """Grid-search mobility and flux blocking against the fore-aft targets.

    Only parameter pairs whose mean ratios are strictly ordered in spacing
    are eligible.  The achieved ratios are stored in ``metadata``.
    """
    layout = layout or InterferenceLayout()
    geom = geom or RobotGeometry()
    cases = _flux_cases(layout, params, seeds, geom)
    best = None
    for eta in mobility_grid:
        for b in block_grid:
            trial = replace(params, obstacle_mobility=float(eta), flux_block=float(b))
            means = {s: float(v.mean()) for s, v in
                     interference_ratios(trial, layout, cases=cases, geom=geom).items()}
            if not monotone(means):
                continue
            err = sum((means[s] - t) ** 2 for s, t in TARGET_RATIOS.items())
            if best is None or err < best[0]:
                best = (err, float(eta), float(b), means)
    if best is None:
        raise CalibrationError("no (mobility, flux_block) pair gives monotone interference ratios")
    err, eta, b, means = best
    meta = dict(params.metadata)
    meta.update({"calibrated_ratios": means, "calibration_sse": err})
    return replace(params, obstacle_mobility=eta, flux_block=b, metadata=meta)
