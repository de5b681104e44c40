"""Ground-truth granular slope dynamics.

A sandpile-style relaxation moves material to the steepest downhill
neighbour whenever the effective slope (bed tilt plus local gradient)
exceeds the angle of repose.  Legs excavate a pit and dump the spoil a few
cells downhill; the resulting flux drags obstacles downhill, and obstacles
intercept flux so that close neighbours interfere with each other.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numba
import numpy as np

from .terrain import (
    ACTIONS,
    Action,
    Heightfield,
    Obstacle,
    RobotGeometry,
    RobotState,
)

# (dx_right, dy_forward, dphi, std_x, std_y, std_phi) in the body frame.
DEFAULT_ACTION_TABLE: dict[Action, tuple[float, float, float, float, float, float]] = {
    Action.LFE: (0.15, 0.3, -0.06, 0.05, 0.1, 0.01),
    Action.RFE: (-0.15, 0.3, 0.06, 0.05, 0.1, 0.01),
    Action.LP: (0.8, 0.5, -0.30, 0.15, 0.15, 0.03),
    Action.RP: (-0.8, 0.5, 0.30, 0.15, 0.15, 0.03),
    Action.FP: (0.0, 0.6, 0.0, 0.05, 0.1, 0.01),
    Action.AF: (0.0, 3.0, 0.0, 0.15, 0.3, 0.02),
}


class Embodiment(str, enum.Enum):
    ROBOT = "robot"
    MANIPULATOR = "manipulator"


@dataclass(frozen=True)
class SimParams:
    repose_tan: float = math.tan(math.radians(21.0))
    relax_fraction: float = 0.5
    max_relax_passes: int = 20000
    relax_tol: float = 1e-6
    dig_depth: float = 0.8
    deposit_offset: int = 2
    obstacle_mobility: float = 8.0  # from calibrate_interference on the canonical layout
    flux_block: float = 1.0
    backwater_length: float = 6.0
    advect_substeps: int = 4
    action_table: dict = field(default_factory=lambda: dict(DEFAULT_ACTION_TABLE))
    rng_seed: int = 0
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        if not self.repose_tan > 0:
            raise ValueError("repose_tan must be positive")
        if not 0 < self.relax_fraction <= 1:
            raise ValueError("relax_fraction must lie in (0, 1]")
        if not 0 <= self.flux_block <= 1:
            raise ValueError("flux_block must lie in [0, 1]")
        if self.max_relax_passes < 1 or self.advect_substeps < 1:
            raise ValueError("pass and substep counts must be positive")
        table = {Action(k): tuple(float(v) for v in vals) for k, vals in self.action_table.items()}
        if set(table) != set(ACTIONS) or any(len(v) != 6 for v in table.values()):
            raise ValueError("action_table needs six entries of (dx, dy, dphi, sx, sy, sphi)")
        object.__setattr__(self, "action_table", table)

    def noiseless(self) -> SimParams:
        table = {a: v[:3] + (0.0, 0.0, 0.0) for a, v in self.action_table.items()}
        return replace(self, action_table=table)


@dataclass(frozen=True)
class StepResult:
    next_heightfield: Heightfield
    next_obstacles: tuple[Obstacle, ...]
    next_robot: RobotState
    flux_map: np.ndarray
    events: tuple[str, ...] = ()
    relax_passes: int = 0
    converged: bool = True


@dataclass(frozen=True)
class RelaxResult:
    heightfield: Heightfield
    flux_map: np.ndarray
    passes: int
    converged: bool


@numba.njit(cache=True)
def _relax_kernel(h, dx, tilt, repose, frac, max_passes, tol, flux):
    nr, nc = h.shape
    active = np.ones((nr, nc), dtype=np.bool_)
    pending = np.zeros((nr, nc), dtype=np.bool_)
    # Bounding box of cells to visit in the current pass.
    r_lo, r_hi, c_lo, c_hi = 0, nr - 1, 0, nc - 1
    for p in range(max_passes):
        moved = False
        n_lo, n_hi, m_lo, m_hi = nr, -1, nc, -1
        # Uphill rows first so shed material can run downhill within one pass.
        for r in range(r_hi, r_lo - 1, -1):
            for c in range(c_lo, c_hi + 1):
                if not active[r, c]:
                    continue
                active[r, c] = False
                hc = h[r, c]
                if hc <= 0.0:
                    continue
                best = repose + tol
                br = -1
                bc = -1
                if r > 0:
                    s = (hc - h[r - 1, c]) / dx + tilt
                    if s > best:
                        best = s
                        br = r - 1
                        bc = c
                if r < nr - 1:
                    s = (hc - h[r + 1, c]) / dx - tilt
                    if s > best:
                        best = s
                        br = r + 1
                        bc = c
                if c > 0:
                    s = (hc - h[r, c - 1]) / dx
                    if s > best:
                        best = s
                        br = r
                        bc = c - 1
                if c < nc - 1:
                    s = (hc - h[r, c + 1]) / dx
                    if s > best:
                        best = s
                        br = r
                        bc = c + 1
                if br < 0:
                    continue
                q = frac * (best - repose) * dx * 0.5
                if q > hc:
                    q = hc
                h[r, c] = hc - q
                h[br, bc] += q
                flux[r, c] += q
                moved = True
                lo_r = min(r, br) - 1
                hi_r = max(r, br) + 1
                lo_c = min(c, bc) - 1
                hi_c = max(c, bc) + 1
                if lo_r < 0:
                    lo_r = 0
                if hi_r > nr - 1:
                    hi_r = nr - 1
                if lo_c < 0:
                    lo_c = 0
                if hi_c > nc - 1:
                    hi_c = nc - 1
                for rr in range(lo_r, hi_r + 1):
                    for cc in range(lo_c, hi_c + 1):
                        pending[rr, cc] = True
                n_lo = min(n_lo, lo_r)
                n_hi = max(n_hi, hi_r)
                m_lo = min(m_lo, lo_c)
                m_hi = max(m_hi, hi_c)
        if not moved:
            return p + 1, True
        active, pending = pending, active
        r_lo, r_hi, c_lo, c_hi = n_lo, n_hi, m_lo, m_hi
    return max_passes, False


def effective_slope(hf: Heightfield) -> np.ndarray:
    """Largest effective downhill slope out of every cell (bed tilt included)."""
    h = hf.heights
    dx = hf.cell_size
    tilt = math.tan(hf.slope_angle)
    out = np.full(h.shape, -np.inf)
    out[1:, :] = np.maximum(out[1:, :], (h[1:, :] - h[:-1, :]) / dx + tilt)
    out[:-1, :] = np.maximum(out[:-1, :], (h[:-1, :] - h[1:, :]) / dx - tilt)
    out[:, 1:] = np.maximum(out[:, 1:], (h[:, 1:] - h[:, :-1]) / dx)
    out[:, :-1] = np.maximum(out[:, :-1], (h[:, :-1] - h[:, 1:]) / dx)
    # An empty cell has nothing to shed.
    out[h <= 0.0] = -np.inf
    return out


def relax(hf: Heightfield, params: SimParams) -> RelaxResult:
    """Relax the field until every cell is at or below the angle of repose.

    The flux map holds the volume (cm^3) shed by each cell.  Boundaries are
    closed, so total volume is conserved up to rounding.
    """
    h = np.array(hf.heights, dtype=np.float64)
    flux = np.zeros_like(h)
    passes, converged = _relax_kernel(
        h, float(hf.cell_size), math.tan(hf.slope_angle), float(params.repose_tan),
        float(params.relax_fraction), int(params.max_relax_passes), float(params.relax_tol), flux,
    )
    np.maximum(h, 0.0, out=h)
    return RelaxResult(hf.with_heights(h), flux * hf.cell_size**2, int(passes), bool(converged))


def leg_footprint(
    robot: RobotState, geom: RobotGeometry, action: Action, shape: tuple[int, int], cell_size: float
) -> list[tuple[tuple[int, int], float]]:
    """Cells swept by the active legs, with the sweep phase of each cell.

    Each leg sweeps a ``sweep_length`` x ``leg_width`` rectangle centred on the
    hip and aligned with the heading.  Phase 0 is the front end of the sweep,
    phase 1 the back.  A cell belongs to the footprint when its centre lies
    inside the rectangle.
    """
    out: list[tuple[tuple[int, int], float]] = []
    for leg in Action(action).legs:
        out.extend(_leg_cells(robot, geom, leg, shape, cell_size))
    return out


def _leg_cells(robot, geom, leg, shape, cell_size):
    nr, nc = shape
    cx, cy = robot.to_world(*geom.leg_offset(leg))
    fwd = robot.forward()
    rgt = robot.right()
    half_l = 0.5 * geom.sweep_length
    half_w = 0.5 * geom.leg_width
    reach = math.hypot(half_l, half_w)
    c0 = max(int(math.floor((cx - reach) / cell_size)), 0)
    c1 = min(int(math.ceil((cx + reach) / cell_size)), nc - 1)
    r0 = max(int(math.floor((cy - reach) / cell_size)), 0)
    r1 = min(int(math.ceil((cy + reach) / cell_size)), nr - 1)
    if c0 > c1 or r0 > r1:
        return []
    cols = np.arange(c0, c1 + 1)
    rows = np.arange(r0, r1 + 1)
    px, py = np.meshgrid((cols + 0.5) * cell_size - cx, (rows + 0.5) * cell_size - cy)
    along = px * fwd[0] + py * fwd[1]
    across = px * rgt[0] + py * rgt[1]
    inside = (np.abs(along) <= half_l) & (np.abs(across) <= half_w)
    rr, cc = np.nonzero(inside)
    phase = (half_l - along[rr, cc]) / geom.sweep_length
    return [((int(rows[i]), int(cols[j])), float(ph)) for i, j, ph in zip(rr, cc, phase)]


def footprint_mask(cells: list[tuple[tuple[int, int], float]], shape: tuple[int, int]) -> np.ndarray:
    mask = np.zeros(shape, dtype=bool)
    for (r, c), _ in cells:
        mask[r, c] = True
    return mask


def excavate_mask(hf: Heightfield, mask: np.ndarray, params: SimParams) -> Heightfield:
    """Dig ``dig_depth`` out of every masked cell and dump it downhill.

    The spoil lands on the footprint shifted ``deposit_offset`` rows downhill
    (cells of the footprint itself excluded).  If that region falls off the
    field the spoil stays in place.
    """
    h = np.array(hf.heights, dtype=np.float64)
    if not mask.any():
        return hf
    removed = np.minimum(h[mask], params.dig_depth)
    total = float(removed.sum())
    if total <= 0.0:
        return hf
    h[mask] -= removed
    k = int(params.deposit_offset)
    dep = np.zeros_like(mask)
    if k > 0:
        dep[:-k, :] = mask[k:, :]
    dep &= ~mask
    if not dep.any():
        dep = mask
    h[dep] += total / int(dep.sum())
    np.maximum(h, 0.0, out=h)
    return hf.with_heights(h)


def excavate(
    hf: Heightfield, robot: RobotState, geom: RobotGeometry, action: Action, params: SimParams
) -> Heightfield:
    cells = leg_footprint(robot, geom, action, hf.heights.shape, hf.cell_size)
    return excavate_mask(hf, footprint_mask(cells, hf.heights.shape), params)


def _ramp(dist: np.ndarray, edge: float, width: float) -> np.ndarray:
    """1 inside ``edge``, 0 outside, linear across one ``width`` centred on it."""
    return np.clip((edge - dist) / width + 0.5, 0.0, 1.0)


def obstacle_mask(ob: Obstacle, xs: np.ndarray, ys: np.ndarray, cell_size: float) -> np.ndarray:
    """Soft footprint weights; smooth in the obstacle position."""
    return _ramp(np.hypot(xs - ob.x, ys - ob.y), ob.radius, cell_size)


def interception_profile(ob: Obstacle, xs: np.ndarray, ys: np.ndarray, backwater: float,
                         cell_size: float) -> np.ndarray:
    """Fraction of flux an obstacle intercepts at every cell, before ``flux_block`` scaling.

    Full interception across the obstacle's columns from its uphill edge
    down to the bottom of the field; above the uphill edge the blockage backs
    up and fades linearly over ``backwater`` cm.
    """
    in_cols = _ramp(np.abs(xs - ob.x), ob.radius, cell_size)
    top = ob.y + ob.radius
    above = ys - top
    if backwater > 0:
        w = np.clip(1.0 - above / backwater, 0.0, 1.0)
    else:
        w = (above <= 0).astype(float)
    return in_cols * w


def advect_obstacles(
    obstacles: tuple[Obstacle, ...] | list[Obstacle],
    flux_map: np.ndarray,
    params: SimParams,
    hf: Heightfield,
) -> tuple[tuple[Obstacle, ...], list[str]]:
    """Move obstacles downhill in proportion to the flux they sit in.

    Obstacles are handled from uphill to downhill; each one sees the flux map
    attenuated by every other obstacle's interception profile.  Motion is
    split into substeps so gaps that open during the step weaken the coupling.
    """
    events: list[str] = []
    obs = sorted(obstacles, key=lambda o: (-o.y, o.id))
    if not obs or not np.any(flux_map > 0):
        return tuple(obstacles), events
    xs, ys = hf.cell_centers()
    n_sub = params.advect_substeps
    b = params.flux_block
    pos = [[o.x, o.y] for o in obs]
    for _ in range(n_sub):
        current = [o.moved(p[0], p[1]) for o, p in zip(obs, pos)]
        profiles = [b * interception_profile(o, xs, ys, params.backwater_length, hf.cell_size)
                    for o in current]
        steps = []
        for i, o in enumerate(current):
            mask = obstacle_mask(o, xs, ys, hf.cell_size)
            total = mask.sum()
            if total <= 0:
                steps.append(0.0)
                continue
            att = np.ones_like(flux_map)
            for j, prof in enumerate(profiles):
                if j != i:
                    att *= 1.0 - prof
            steps.append(params.obstacle_mobility * float((flux_map * att * mask).sum() / total) / n_sub)
        for p, s in zip(pos, steps):
            p[1] -= s
    moved = {}
    w, l = hf.extent
    for o, (x, y) in zip(obs, pos):
        if not (0.0 <= y <= l and 0.0 <= x <= w):
            events.append(f"obstacle-left-bounds:{o.id}")
            x = min(max(x, 0.0), w)
            y = min(max(y, 0.0), l)
        moved[o.id] = o.moved(x, y)
    return tuple(moved[o.id] for o in obstacles), events


def robot_kinematics(
    robot: RobotState, action: Action, params: SimParams, rng: np.random.Generator | None
) -> RobotState:
    """Apply the noisy per-action body-frame displacement."""
    dx, dy, dphi, sx, sy, sphi = params.action_table[Action(action)]
    if rng is not None:
        dx += rng.normal(0.0, sx) if sx > 0 else 0.0
        dy += rng.normal(0.0, sy) if sy > 0 else 0.0
        dphi += rng.normal(0.0, sphi) if sphi > 0 else 0.0
    x, y = robot.to_world(dx, dy)
    return RobotState(x, y, robot.phi + dphi)


def sim_step(
    hf: Heightfield,
    robot: RobotState,
    obstacles: tuple[Obstacle, ...] | list[Obstacle],
    action: Action,
    geom: RobotGeometry,
    params: SimParams,
    rng: np.random.Generator | None,
    embodiment: Embodiment = Embodiment.ROBOT,
    footprint: np.ndarray | None = None,
) -> StepResult:
    """Excavate, relax, advect obstacles and (robot only) move the body.

    ``footprint`` overrides the cells dug by the action; the oracle predictor
    uses it to excavate exactly where an action image is painted.
    """
    events: list[str] = []
    if footprint is None:
        cells = leg_footprint(robot, geom, action, hf.heights.shape, hf.cell_size)
        footprint = footprint_mask(cells, hf.heights.shape)
    if not footprint.any():
        events.append("footprint-out-of-bounds")
    dug = excavate_mask(hf, footprint, params)
    rel = relax(dug, params)
    if not rel.converged:
        events.append("relax-not-converged")
    moved, adv_events = advect_obstacles(obstacles, rel.flux_map, params, rel.heightfield)
    events.extend(adv_events)
    next_robot = robot
    if Embodiment(embodiment) is Embodiment.ROBOT:
        next_robot = robot_kinematics(robot, action, params, rng)
        if not hf.contains(next_robot.x, next_robot.y):
            events.append("robot-left-bounds")
            w, l = hf.extent
            next_robot = RobotState(min(max(next_robot.x, 0.0), w),
                                    min(max(next_robot.y, 0.0), l), next_robot.phi)
    return StepResult(rel.heightfield, moved, next_robot, rel.flux_map, tuple(events),
                      rel.passes, rel.converged)
