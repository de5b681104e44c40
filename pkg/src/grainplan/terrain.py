"""Domain types and geometry shared by the simulator, encoder and planner.

Coordinates: ``x`` is lateral (columns), ``y`` is fore-aft and increases
uphill (rows).  Cell ``(row, col)`` has its centre at
``((col + 0.5) * cell_size, (row + 0.5) * cell_size)``.  A heading of
``phi = 0`` faces uphill; positive ``phi`` turns counter-clockwise.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

MAX_OBSTACLES = 5
MAX_SLOPE_DEG = 35.0


class DomainError(ValueError):
    """Raised for inputs outside an operation's domain."""


class ConfigError(ValueError):
    """Raised for invalid configuration values."""


class Action(str, enum.Enum):
    """The six multi-leg excavation patterns, in tie-break order."""

    LFE = "LFE"
    RFE = "RFE"
    LP = "LP"
    RP = "RP"
    FP = "FP"
    AF = "AF"

    @property
    def legs(self) -> tuple[str, ...]:
        return ACTION_LEGS[self]

    @property
    def index(self) -> int:
        return ACTIONS.index(self)


ACTIONS: tuple[Action, ...] = tuple(Action)

ACTION_LEGS: dict[Action, tuple[str, ...]] = {
    Action.LFE: ("LF",),
    Action.RFE: ("RF",),
    Action.LP: ("LF", "LH"),
    Action.RP: ("RF", "RH"),
    Action.FP: ("LF", "RF"),
    Action.AF: ("LF", "RF", "LH", "RH"),
}


def normalize_angle(phi: float) -> float:
    """Wrap ``phi`` into ``(-pi, pi]``."""
    if not math.isfinite(phi):
        raise DomainError(f"angle must be finite, got {phi!r}")
    wrapped = math.fmod(phi + math.pi, 2.0 * math.pi)
    if wrapped <= 0.0:
        wrapped += 2.0 * math.pi
    return wrapped - math.pi


def circular_midpoint(a: float, b: float) -> float:
    """Midpoint of two headings along the shorter arc."""
    return normalize_angle(a + 0.5 * normalize_angle(b - a))


@dataclass(frozen=True)
class Heightfield:
    """Sand depth (cm) above an inclined rigid bed.

    ``heights[row, col]``; rows run uphill.  The array is made read-only on
    construction so instances can be shared freely.
    """

    heights: np.ndarray
    cell_size: float
    slope_angle: float

    def __post_init__(self) -> None:
        h = np.array(self.heights, dtype=np.float64, copy=True)
        if h.ndim != 2 or h.shape[0] < 8 or h.shape[1] < 8:
            raise DomainError(f"heightfield must be at least 8x8, got shape {h.shape}")
        if not np.all(np.isfinite(h)):
            raise DomainError("heights must be finite")
        if np.any(h < 0.0):
            raise DomainError("heights must be non-negative")
        if not self.cell_size > 0:
            raise DomainError("cell_size must be positive")
        h.flags.writeable = False
        object.__setattr__(self, "heights", h)

    @property
    def height_cells(self) -> int:
        return self.heights.shape[0]

    @property
    def width_cells(self) -> int:
        return self.heights.shape[1]

    @property
    def extent(self) -> tuple[float, float]:
        """Physical (width, length) in cm."""
        return self.width_cells * self.cell_size, self.height_cells * self.cell_size

    def volume(self) -> float:
        return float(self.heights.sum()) * self.cell_size**2

    def contains(self, x: float, y: float) -> bool:
        w, l = self.extent
        return 0.0 <= x <= w and 0.0 <= y <= l

    def cell_of(self, x: float, y: float) -> tuple[int, int]:
        row = min(max(int(math.floor(y / self.cell_size)), 0), self.height_cells - 1)
        col = min(max(int(math.floor(x / self.cell_size)), 0), self.width_cells - 1)
        return row, col

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(xs, ys)`` grids of cell-centre coordinates."""
        cols = (np.arange(self.width_cells) + 0.5) * self.cell_size
        rows = (np.arange(self.height_cells) + 0.5) * self.cell_size
        return np.meshgrid(cols, rows)

    def with_heights(self, heights: np.ndarray) -> Heightfield:
        return Heightfield(heights, self.cell_size, self.slope_angle)


def make_inclined_field(
    width_cells: int, height_cells: int, cell_size: float, slope_angle: float, depth: float = 0.0
) -> Heightfield:
    """A uniform field of sand ``depth`` on a bed tilted by ``slope_angle`` radians."""
    if not 0.0 <= slope_angle <= math.radians(MAX_SLOPE_DEG) + 1e-12:
        raise ConfigError(f"slope angle must lie in [0, {MAX_SLOPE_DEG}] degrees")
    if depth < 0:
        raise ConfigError("depth must be non-negative")
    return Heightfield(np.full((height_cells, width_cells), float(depth)), cell_size, slope_angle)


def local_slope(hf: Heightfield, cell: tuple[int, int]) -> float:
    """Largest absolute height gradient to a 4-neighbour, ignoring the bed tilt."""
    r, c = cell
    nr, nc = hf.heights.shape
    if not (0 <= r < nr and 0 <= c < nc):
        raise DomainError(f"cell {cell} outside {nr}x{nc} grid")
    h = hf.heights
    best = 0.0
    for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
        rr, cc = r + dr, c + dc
        if 0 <= rr < nr and 0 <= cc < nc:
            best = max(best, abs(h[r, c] - h[rr, cc]) / hf.cell_size)
    return best


@dataclass(frozen=True)
class RobotGeometry:
    """Robot dimensions in cm.  Leg positions are in the body frame (right, forward)."""

    leg_track: float = 15.0
    wheel_base: float = 15.0
    leg_diameter: float = 6.0
    leg_width: float = 1.5
    sweep_length: float = 12.0
    body_length: float = 18.0
    body_width: float = 10.0
    body_height: float = 4.0
    marker_length: float = 1.875
    marker_height: float = 0.5

    def __post_init__(self) -> None:
        for name in ("leg_track", "wheel_base", "leg_diameter", "leg_width", "sweep_length",
                     "body_length", "body_width", "body_height"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")

    def leg_offset(self, leg: str) -> tuple[float, float]:
        side = -0.5 if leg[0] == "L" else 0.5
        fore = 0.5 if leg[1] == "F" else -0.5
        return side * self.leg_track, fore * self.wheel_base


def _check_inside(hf: Heightfield | None, x: float, y: float, what: str) -> None:
    if not (math.isfinite(x) and math.isfinite(y)):
        raise DomainError(f"{what} position must be finite")
    if hf is not None and not hf.contains(x, y):
        raise DomainError(f"{what} at ({x:.3f}, {y:.3f}) lies outside the field")


@dataclass(frozen=True)
class RobotState:
    x: float
    y: float
    phi: float = 0.0

    def __post_init__(self) -> None:
        _check_inside(None, self.x, self.y, "robot")
        object.__setattr__(self, "phi", normalize_angle(self.phi))

    @classmethod
    def inside(cls, hf: Heightfield, x: float, y: float, phi: float = 0.0) -> RobotState:
        _check_inside(hf, x, y, "robot")
        return cls(x, y, phi)

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])

    def forward(self) -> np.ndarray:
        return np.array([-math.sin(self.phi), math.cos(self.phi)])

    def right(self) -> np.ndarray:
        return np.array([math.cos(self.phi), math.sin(self.phi)])

    def to_world(self, bx: float, by: float) -> tuple[float, float]:
        """Map a body-frame offset (right, forward) to world coordinates."""
        c, s = math.cos(self.phi), math.sin(self.phi)
        return self.x + bx * c - by * s, self.y + bx * s + by * c


@dataclass(frozen=True)
class Obstacle:
    id: int
    x: float
    y: float
    radius: float = 2.0
    height: float = 2.0

    def __post_init__(self) -> None:
        if not (self.radius > 0 and self.height > 0):
            raise DomainError("obstacle radius and height must be positive")
        _check_inside(None, self.x, self.y, "obstacle")

    @classmethod
    def inside(cls, hf: Heightfield, id: int, x: float, y: float, radius: float = 2.0,
               height: float = 2.0) -> Obstacle:
        _check_inside(hf, x, y, f"obstacle {id}")
        return cls(id, x, y, radius, height)

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])

    def moved(self, x: float, y: float) -> Obstacle:
        return Obstacle(self.id, x, y, self.radius, self.height)


class Mode(str, enum.Enum):
    MANIPULATION = "manipulation"
    LOCOMOTION = "locomotion"
    LOCO_MANIPULATION = "loco-manipulation"


@dataclass(frozen=True)
class Target:
    """A goal point; with ``half_plane`` set, success means ``y <= self.y``."""

    x: float
    y: float
    half_plane: bool = False

    def distance(self, p: np.ndarray | tuple[float, float]) -> float:
        if self.half_plane:
            return max(0.0, float(p[1]) - self.y)
        return math.hypot(float(p[0]) - self.x, float(p[1]) - self.y)


@dataclass(frozen=True)
class Scenario:
    mode: Mode
    heightfield: Heightfield
    robot_start: RobotState
    obstacles: tuple[Obstacle, ...] = ()
    obstacle_targets: tuple[Target, ...] = ()
    robot_target: Target | None = None
    success_radius: float = 3.0
    max_steps: int = 30
    rng_seed: int = 0
    name: str = "scenario"
    manipulated: tuple[int, ...] = field(default=())

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", Mode(self.mode))
        object.__setattr__(self, "obstacles", tuple(self.obstacles))
        object.__setattr__(self, "obstacle_targets", tuple(self.obstacle_targets))
        if len(self.obstacles) > MAX_OBSTACLES:
            raise ConfigError(f"at most {MAX_OBSTACLES} obstacles supported")
        if not self.manipulated:
            object.__setattr__(self, "manipulated",
                               tuple(o.id for o in self.obstacles[: len(self.obstacle_targets)]))
        if len(self.manipulated) != len(self.obstacle_targets):
            raise ConfigError("one target is required per manipulated obstacle")
        ids = {o.id for o in self.obstacles}
        if len(ids) != len(self.obstacles):
            raise ConfigError("obstacle ids must be unique")
        if not set(self.manipulated) <= ids:
            raise ConfigError("manipulated ids must name existing obstacles")
        needs_obstacles = self.mode in (Mode.MANIPULATION, Mode.LOCO_MANIPULATION)
        needs_robot = self.mode in (Mode.LOCOMOTION, Mode.LOCO_MANIPULATION)
        if needs_obstacles and not self.obstacle_targets:
            raise ConfigError(f"{self.mode.value} requires obstacle targets")
        if needs_robot and self.robot_target is None:
            raise ConfigError(f"{self.mode.value} requires a robot target")
        if self.max_steps < 1:
            raise ConfigError("max_steps must be positive")
        if not self.success_radius > 0:
            raise ConfigError("success_radius must be positive")
        hf = self.heightfield
        _check_inside(hf, self.robot_start.x, self.robot_start.y, "robot")
        for o in self.obstacles:
            _check_inside(hf, o.x, o.y, f"obstacle {o.id}")

    def target_for(self, obstacle_id: int) -> Target:
        return self.obstacle_targets[self.manipulated.index(obstacle_id)]
