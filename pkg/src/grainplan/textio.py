"""Plain ``key = value`` text files for scenarios and simulator parameters.

Floats are written with ``repr`` so a round trip is exact.  ``#`` starts a
comment.  Repeated keys (``obstacle``, ``obstacle_target``) accumulate.
"""

from __future__ import annotations

import math
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from .sim import SimParams
from .terrain import ACTIONS, Action, ConfigError, Heightfield, Mode, Obstacle, RobotState, Scenario, Target

REPEATED = {"obstacle", "obstacle_target"}


def parse_kv(text: str) -> dict[str, list[str]]:
    out: dict[str, list[str]] = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in out and key not in REPEATED:
            raise ConfigError(f"line {n}: duplicate key {key!r}")
        out.setdefault(key, []).append(value)
    return out


def _floats(value: str, n: int | None = None, key: str = "") -> list[float]:
    try:
        vals = [float(v) for v in value.split()]
    except ValueError as exc:
        raise ConfigError(f"{key}: not a number list: {value!r}") from exc
    if n is not None and len(vals) != n:
        raise ConfigError(f"{key}: expected {n} numbers, got {len(vals)}")
    return vals


def _fmt(*vals) -> str:
    return " ".join(repr(float(v)) if not isinstance(v, (int, np.integer)) or isinstance(v, bool) else str(v)
                    for v in vals)


# -- simulator parameters ----------------------------------------------------

_SCALAR = ("repose_tan", "relax_fraction", "max_relax_passes", "relax_tol", "dig_depth", "deposit_offset",
           "obstacle_mobility", "flux_block", "backwater_length", "advect_substeps", "rng_seed")


def dump_params(params: SimParams) -> str:
    lines = ["# simulator parameters"]
    for name in _SCALAR:
        v = getattr(params, name)
        lines.append(f"{name} = {v!r}")
    for a in ACTIONS:
        lines.append(f"action.{a.value} = {_fmt(*params.action_table[a])}")
    ratios = params.metadata.get("calibrated_ratios")
    if ratios:
        body = " ".join(f"{k:g}:{v:.6f}" for k, v in sorted(ratios.items()))
        lines.append(f"# calibrated fore-aft ratios {body}")
        lines.append(f"# calibration sse {params.metadata.get('calibration_sse', math.nan):.6g}")
    return "\n".join(lines) + "\n"


def load_params(text: str, base: SimParams | None = None) -> SimParams:
    kv = parse_kv(text)
    base = base or SimParams()
    types = {f.name: f.type for f in fields(SimParams)}
    updates: dict = {}
    table = dict(base.action_table)
    for key, (value, *_) in kv.items():
        if key.startswith("action."):
            try:
                a = Action(key.split(".", 1)[1])
            except ValueError as exc:
                raise ConfigError(f"unknown action in {key!r}") from exc
            table[a] = tuple(_floats(value, 6, key))
        elif key in _SCALAR:
            updates[key] = int(value) if types[key] in ("int", int) else float(value)
        else:
            raise ConfigError(f"unknown parameter {key!r}")
    try:
        return replace(base, action_table=table, **updates)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def save_params(path: str | Path, params: SimParams) -> None:
    Path(path).write_text(dump_params(params))


def read_params(path: str | Path, base: SimParams | None = None) -> SimParams:
    return load_params(Path(path).read_text(), base)


# -- scenarios ---------------------------------------------------------------


def dump_scenario(sc: Scenario, heights_file: str | None = None) -> str:
    hf = sc.heightfield
    lines = ["# scenario", f"name = {sc.name}", f"mode = {sc.mode.value}",
             f"field.cells = {hf.width_cells} {hf.height_cells}",
             f"field.cell_size = {hf.cell_size!r}", f"field.slope_deg = {math.degrees(hf.slope_angle)!r}"]
    h = hf.heights
    if heights_file is None:
        if not np.all(h == h.flat[0]):
            raise ConfigError("non-uniform heightfield needs a heights file")
        lines.append(f"field.depth = {float(h.flat[0])!r}")
    else:
        lines.append(f"field.heights_file = {heights_file}")
    r = sc.robot_start
    lines.append(f"robot = {_fmt(r.x, r.y, r.phi)}")
    for o in sc.obstacles:
        lines.append(f"obstacle = {o.id} {_fmt(o.x, o.y, o.radius, o.height)}")
    for i, t in zip(sc.manipulated, sc.obstacle_targets):
        lines.append(f"obstacle_target = {i} {_fmt(t.x, t.y)} {int(t.half_plane)}")
    if sc.robot_target is not None:
        t = sc.robot_target
        lines.append(f"robot_target = {_fmt(t.x, t.y)} {int(t.half_plane)}")
    lines += [f"success_radius = {sc.success_radius!r}", f"max_steps = {sc.max_steps}",
              f"rng_seed = {sc.rng_seed}"]
    return "\n".join(lines) + "\n"


def load_scenario(text: str, base_dir: str | Path = ".") -> Scenario:
    kv = parse_kv(text)

    def one(key, default=None):
        if key not in kv:
            if default is None:
                raise ConfigError(f"missing key {key!r}")
            return default
        return kv[key][0]

    known = {"name", "mode", "field.cells", "field.cell_size", "field.slope_deg", "field.depth",
             "field.heights_file", "robot", "obstacle", "obstacle_target", "robot_target", "success_radius",
             "max_steps", "rng_seed"}
    unknown = set(kv) - known
    if unknown:
        raise ConfigError(f"unknown scenario keys {sorted(unknown)}")
    w, h = (int(v) for v in _floats(one("field.cells"), 2, "field.cells"))
    cs = float(one("field.cell_size"))
    slope = math.radians(float(one("field.slope_deg")))
    if "field.heights_file" in kv:
        from .imageio import decode_gray

        heights, _ = decode_gray((Path(base_dir) / one("field.heights_file")).read_bytes())
        if heights.shape != (h, w):
            raise ConfigError("heights file shape does not match field.cells")
    else:
        heights = np.full((h, w), float(one("field.depth", "0")))
    hf = Heightfield(heights, cs, slope)
    rx, ry, rphi = _floats(one("robot"), 3, "robot")
    obstacles = []
    for v in kv.get("obstacle", []):
        vals = v.split()
        if len(vals) not in (3, 5):
            raise ConfigError("obstacle = id x y [radius height]")
        obstacles.append(Obstacle(int(vals[0]), *(float(x) for x in vals[1:])))
    manipulated, targets = [], []
    for v in kv.get("obstacle_target", []):
        vals = v.split()
        if len(vals) not in (3, 4):
            raise ConfigError("obstacle_target = id x y [half_plane]")
        manipulated.append(int(vals[0]))
        targets.append(Target(float(vals[1]), float(vals[2]), len(vals) == 4 and vals[3] == "1"))
    robot_target = None
    if "robot_target" in kv:
        vals = one("robot_target").split()
        robot_target = Target(float(vals[0]), float(vals[1]), len(vals) == 3 and vals[2] == "1")
    try:
        mode = Mode(one("mode"))
    except ValueError as exc:
        raise ConfigError(f"unknown mode {one('mode')!r}") from exc
    return Scenario(mode, hf, RobotState(rx, ry, rphi), tuple(obstacles), tuple(targets), robot_target,
                    success_radius=float(one("success_radius", "3.0")), max_steps=int(one("max_steps", "30")),
                    rng_seed=int(one("rng_seed", "0")), name=one("name", "scenario"),
                    manipulated=tuple(manipulated))


def save_scenario(path: str | Path, sc: Scenario) -> None:
    path = Path(path)
    h = sc.heightfield.heights
    heights_file = None
    if not np.all(h == h.flat[0]):
        from .imageio import encode_gray

        heights_file = path.with_suffix(".heights.pgm").name
        hi = max(float(h.max()), 1e-9)
        (path.parent / heights_file).write_bytes(encode_gray(h, 0.0, hi, sc.heightfield.cell_size))
    path.write_text(dump_scenario(sc, heights_file))


def read_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    return load_scenario(path.read_text(), path.parent)
