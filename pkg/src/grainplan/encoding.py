"""Depth/action image rendering, state extraction and next-frame composition.

Images share the simulator grid: pixel ``(r, c)`` is cell ``(r, c)``, so row
0 is the downhill edge.  Depth values map heights in ``[0, h_max]`` cm to
``[-1, 1]``.  Robots and obstacles are drawn additively on top of the sand
surface with anti-aliased (supersampled) edges, which lets extraction
recover sub-pixel poses from coverage-weighted moments.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.optimize import linear_sum_assignment

from .terrain import (
    Action,
    Heightfield,
    Obstacle,
    RobotGeometry,
    RobotState,
)
from .sim import leg_footprint

H_MAX = 8.0
SUPERSAMPLE = 8
ROBOT_CORE = 0.75  # fraction of body height that seeds the robot component
OBSTACLE_CORE = 0.5
EDGE_PROMINENCE = 0.05  # cm; partial-coverage pixels above this join the robot set
TRACK_GATE = 5.0  # cm


class ExtractionError(RuntimeError):
    """No robot could be found in a depth image."""


class AmbiguityError(ExtractionError):
    """Several equally plausible robot regions were found."""


class CompositionError(RuntimeError):
    pass


@dataclass(frozen=True)
class DepthImage:
    values: np.ndarray
    cm_per_px: float
    h_max: float = H_MAX

    def __post_init__(self) -> None:
        v = np.array(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError("depth image must be 2-D")
        if not np.all(np.isfinite(v)) or v.min() < -1.0 or v.max() > 1.0:
            raise ValueError("depth values must lie in [-1, 1]")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def heights_cm(self) -> np.ndarray:
        return (self.values + 1.0) * 0.5 * self.h_max

    @classmethod
    def from_cm(cls, cm: np.ndarray, cm_per_px: float, h_max: float = H_MAX) -> DepthImage:
        return cls(np.clip(2.0 * np.asarray(cm) / h_max - 1.0, -1.0, 1.0), cm_per_px, h_max)

    def plus(self, delta: DeltaImage) -> DepthImage:
        """``clamp(self + delta)``."""
        return DepthImage(np.clip(self.values + delta.values, -1.0, 1.0), self.cm_per_px, self.h_max)


@dataclass(frozen=True)
class DeltaImage:
    values: np.ndarray

    def __post_init__(self) -> None:
        v = np.array(self.values, dtype=np.float64)
        if v.ndim != 2 or not np.all(np.isfinite(v)):
            raise ValueError("delta image must be a finite 2-D array")
        if v.min() < -2.0 or v.max() > 2.0:
            raise ValueError("delta values must lie in [-2, 2]")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @classmethod
    def between(cls, before: DepthImage, after: DepthImage) -> DeltaImage:
        return cls(after.values - before.values)

    @classmethod
    def zeros(cls, shape: tuple[int, int]) -> DeltaImage:
        return cls(np.zeros(shape))


@dataclass(frozen=True)
class ActionImage:
    """RGB action image, ``values[r, c, ch]`` in ``[0, 1]``."""

    values: np.ndarray

    def __post_init__(self) -> None:
        v = np.array(self.values, dtype=np.float64)
        if v.ndim != 3 or v.shape[2] != 3:
            raise ValueError("action image must be H x W x 3")
        if v.min() < 0.0 or v.max() > 1.0:
            raise ValueError("action values must lie in [0, 1]")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape[:2]

    def footprint(self) -> np.ndarray:
        return self.values.max(axis=2) > 0.0

    def channels_first(self) -> np.ndarray:
        return np.moveaxis(self.values, 2, 0)


# -- rasterisation -----------------------------------------------------------


def _coverage(shape, cm_per_px, bbox, inside_fn, ss=SUPERSAMPLE):
    """Fraction of each pixel covered by a shape, evaluated on an ss x ss lattice."""
    nr, nc = shape
    x0, x1, y0, y1 = bbox
    c0 = max(int(math.floor(x0 / cm_per_px)), 0)
    c1 = min(int(math.ceil(x1 / cm_per_px)), nc - 1)
    r0 = max(int(math.floor(y0 / cm_per_px)), 0)
    r1 = min(int(math.ceil(y1 / cm_per_px)), nr - 1)
    out = np.zeros(shape)
    if c0 > c1 or r0 > r1:
        return out
    sub = (np.arange(ss) + 0.5) / ss
    xs = ((np.arange(c0, c1 + 1)[:, None] + sub[None, :]).ravel()) * cm_per_px
    ys = ((np.arange(r0, r1 + 1)[:, None] + sub[None, :]).ravel()) * cm_per_px
    px, py = np.meshgrid(xs, ys)
    ins = inside_fn(px, py).astype(np.float64)
    cov = ins.reshape(r1 - r0 + 1, ss, c1 - c0 + 1, ss).mean(axis=(1, 3))
    out[r0 : r1 + 1, c0 : c1 + 1] = cov
    return out


def disc_coverage(shape, cm_per_px, x, y, radius):
    def inside(px, py):
        return (px - x) ** 2 + (py - y) ** 2 <= radius**2

    return _coverage(shape, cm_per_px, (x - radius, x + radius, y - radius, y + radius), inside)


def _rect_coverage(shape, cm_per_px, robot: RobotState, length, width, fwd_lo=None):
    """Coverage of an oriented rectangle centred on the robot.

    With ``fwd_lo`` set only the part of the rectangle with forward
    coordinate ``>= fwd_lo`` counts (used for the front marker).
    """
    f = robot.forward()
    r = robot.right()
    hl, hw = 0.5 * length, 0.5 * width
    lo = -hl if fwd_lo is None else fwd_lo

    def inside(px, py):
        dx = px - robot.x
        dy = py - robot.y
        along = dx * f[0] + dy * f[1]
        across = dx * r[0] + dy * r[1]
        return (along >= lo) & (along <= hl) & (np.abs(across) <= hw)

    reach = math.hypot(hl, hw)
    return _coverage(shape, cm_per_px, (robot.x - reach, robot.x + reach, robot.y - reach, robot.y + reach), inside)


def robot_overlay(shape, cm_per_px, robot: RobotState, geom: RobotGeometry) -> np.ndarray:
    """Height (cm) the robot body adds on top of the surface."""
    body = _rect_coverage(shape, cm_per_px, robot, geom.body_length, geom.body_width)
    marker = _rect_coverage(shape, cm_per_px, robot, geom.body_length, geom.body_width,
                            fwd_lo=0.5 * geom.body_length - geom.marker_length)
    return geom.body_height * body + geom.marker_height * marker


def overlay_edges(shape, cm_per_px, robot: RobotState | None, obstacles, geom: RobotGeometry) -> np.ndarray:
    """Pixels within one pixel of a robot body, marker or obstacle outline."""
    covers = [disc_coverage(shape, cm_per_px, o.x, o.y, o.radius) for o in obstacles]
    if robot is not None:
        covers.append(_rect_coverage(shape, cm_per_px, robot, geom.body_length, geom.body_width))
        covers.append(_rect_coverage(shape, cm_per_px, robot, geom.body_length, geom.body_width,
                                     fwd_lo=0.5 * geom.body_length - geom.marker_length))
    k = np.ones((3, 3), bool)
    out = np.zeros(shape, bool)
    for c in covers:
        # Everything within one pixel of the support boundary.
        out |= ndimage.binary_dilation(c > 0.0, k) & ~ndimage.binary_erosion(c >= 1.0, k)
    return out


def obstacle_overlay(shape, cm_per_px, obstacles) -> np.ndarray:
    out = np.zeros(shape)
    for o in obstacles:
        out += o.height * disc_coverage(shape, cm_per_px, o.x, o.y, o.radius)
    return out


def render_depth(
    hf: Heightfield,
    robot: RobotState | None,
    obstacles,
    geom: RobotGeometry,
    h_max: float = H_MAX,
) -> DepthImage:
    shape = hf.heights.shape
    cm = hf.heights + obstacle_overlay(shape, hf.cell_size, obstacles)
    if robot is not None:
        cm = cm + robot_overlay(shape, hf.cell_size, robot, geom)
    return DepthImage.from_cm(cm, hf.cell_size, h_max)


def render_action(
    robot: RobotState, geom: RobotGeometry, action: Action, shape: tuple[int, int], cm_per_px: float
) -> ActionImage:
    """Paint each active leg's sweep: blue at the front of the stroke, red at the back."""
    img = np.zeros(shape + (3,))
    for (r, c), phase in leg_footprint(robot, geom, action, shape, cm_per_px):
        img[r, c, 0] = phase
        img[r, c, 2] = 1.0 - phase
    return ActionImage(img)


# -- extraction --------------------------------------------------------------


def prominence(img: DepthImage, window_cm: float) -> np.ndarray:
    """Height above the local sand surface, estimated by a grey opening."""
    cm = img.heights_cm()
    k = int(math.ceil(window_cm / img.cm_per_px)) | 1
    return cm - ndimage.grey_opening(cm, size=(k, k), mode="nearest")


def _window(geom: RobotGeometry) -> float:
    return geom.body_width + 3.0


@dataclass(frozen=True)
class RobotExtraction:
    robot: RobotState
    pixels: np.ndarray  # boolean mask


def extract_robot(img: DepthImage, geom: RobotGeometry, prom: np.ndarray | None = None) -> RobotExtraction:
    """Locate the robot body: centroid, heading and pixel set."""
    if prom is None:
        prom = prominence(img, _window(geom))
    core = prom >= ROBOT_CORE * geom.body_height
    labels, n = ndimage.label(core)
    if n == 0:
        raise ExtractionError("no robot-height region in image")
    sizes = np.bincount(labels.ravel())[1:]
    order = np.argsort(-sizes, kind="stable")
    if n > 1 and sizes[order[0]] == sizes[order[1]]:
        raise AmbiguityError("several equally sized robot candidates")
    comp = labels == order[0] + 1
    region = ndimage.binary_dilation(comp, structure=np.ones((3, 3), bool))
    pixels = region & (prom > EDGE_PROMINENCE)
    w = np.clip(prom / geom.body_height, 0.0, 1.0) * region
    total = w.sum()
    rows, cols = np.nonzero(region)
    ww = w[rows, cols]
    px = (cols + 0.5) * img.cm_per_px
    py = (rows + 0.5) * img.cm_per_px
    mx = float(ww @ px / total)
    my = float(ww @ py / total)
    dx, dy = px - mx, py - my
    cov = np.array([[ww @ (dx * dx), ww @ (dx * dy)], [ww @ (dx * dy), ww @ (dy * dy)]]) / total
    evals, evecs = np.linalg.eigh(cov)
    axis = evecs[:, 1]
    mk = np.clip((prom[rows, cols] - geom.body_height) / geom.marker_height, 0.0, 1.0)
    if mk.sum() <= 1e-9:
        raise AmbiguityError("front marker not visible")
    fx = float(mk @ px / mk.sum()) - mx
    fy = float(mk @ py / mk.sum()) - my
    if axis[0] * fx + axis[1] * fy < 0:
        axis = -axis
    phi = math.atan2(-axis[0], axis[1])
    return RobotExtraction(RobotState(mx, my, phi), pixels)


def extract_obstacles(
    img: DepthImage,
    robot_pixels: np.ndarray | None,
    radius: float = 2.0,
    height: float = 2.0,
    previous=None,
    prom: np.ndarray | None = None,
    geom: RobotGeometry | None = None,
) -> list[Obstacle]:
    """Obstacle centroids from an image, optionally matched to a previous frame.

    Merged blobs (touching obstacles) are split by a watershed on the
    distance transform.  With ``previous`` given, ids are carried over by
    nearest-centroid matching inside a 5 cm gate; unmatched blobs get fresh
    ids.
    """
    if prom is None:
        prom = prominence(img, _window(geom or RobotGeometry()))
    excl = np.zeros(img.shape, bool) if robot_pixels is None else ndimage.binary_dilation(robot_pixels)
    core = (prom >= OBSTACLE_CORE * height) & ~excl
    labels, n = ndimage.label(core)
    if n == 0:
        return _track([], previous, radius, height)
    area1 = math.pi * (radius / img.cm_per_px) ** 2
    sizes = np.bincount(labels.ravel())
    parts = np.zeros_like(labels)
    next_label = 1
    for lab in range(1, n + 1):
        comp = labels == lab
        area = sizes[lab]
        if area < 0.3 * area1:
            continue
        k = int(round(area / area1))
        if k >= 2:
            sub = _split(comp, k)
            for s in range(1, sub.max() + 1):
                parts[sub == s] = next_label
                next_label += 1
        else:
            parts[comp] = next_label
            next_label += 1
    n_parts = next_label - 1
    if n_parts == 0:
        return _track([], previous, radius, height)
    # Grow each part by one pixel to pick up anti-aliased edges.
    grown = ndimage.grey_dilation(parts, size=(3, 3))
    grown = np.where(parts > 0, parts, grown)
    grown[excl] = 0
    w = np.clip(prom / height, 0.0, 1.0)
    rows, cols = np.indices(img.shape)
    px = (cols + 0.5) * img.cm_per_px
    py = (rows + 0.5) * img.cm_per_px
    idx = np.arange(1, n_parts + 1)
    wsum = ndimage.sum(w, grown, idx)
    cx = ndimage.sum(w * px, grown, idx) / wsum
    cy = ndimage.sum(w * py, grown, idx) / wsum
    found = [(float(x), float(y)) for x, y in zip(cx, cy)]
    found.sort(key=lambda p: (round(p[1], 6), round(p[0], 6)))
    return _track(found, previous, radius, height)


def _split(comp: np.ndarray, k: int) -> np.ndarray:
    """Watershed on the distance transform, seeded by k-means on the blob's pixels.

    Distance-transform peaks are unreliable for blobs only a few pixels
    wide, so markers come from k-means centres initialised along the
    principal axis instead.
    """
    from scipy.cluster.vq import kmeans2
    from skimage.segmentation import watershed

    rows, cols = np.nonzero(comp)
    pts = np.stack([rows, cols], axis=1).astype(np.float64)
    centre = pts.mean(axis=0)
    _, vecs = np.linalg.eigh(np.cov((pts - centre).T))
    axis = vecs[:, -1]
    proj = (pts - centre) @ axis
    qs = np.quantile(proj, (np.arange(k) + 0.5) / k)
    init = centre + qs[:, None] * axis[None, :]
    seeds, _ = kmeans2(pts, init, minit="matrix", iter=20)
    markers = np.zeros(comp.shape, int)
    for i, (r, c) in enumerate(seeds, start=1):
        # Snap each centre to the nearest blob pixel.
        j = int(np.argmin(np.hypot(rows - r, cols - c)))
        markers[rows[j], cols[j]] = i
    if len(np.unique(markers[markers > 0])) < 2:
        return comp.astype(int)
    dist = ndimage.distance_transform_edt(comp)
    return watershed(-dist, markers, mask=comp)


def _track(found, previous, radius, height) -> list[Obstacle]:
    if not previous:
        return [Obstacle(i, x, y, radius, height) for i, (x, y) in enumerate(found)]
    prev = list(previous)
    out: dict[int, Obstacle] = {}
    used = set()
    if found:
        cost = np.array([[math.hypot(x - p.x, y - p.y) for p in prev] for x, y in found])
        big = 1e6
        gated = np.where(cost <= TRACK_GATE, cost, big)
        ri, ci = linear_sum_assignment(gated)
        for i, j in zip(ri, ci):
            if gated[i, j] < big:
                x, y = found[i]
                out[prev[j].id] = Obstacle(prev[j].id, x, y, prev[j].radius, prev[j].height)
                used.add(i)
    next_id = max([p.id for p in prev] + [-1]) + 1
    result = [out[p.id] for p in prev if p.id in out]
    for i, (x, y) in enumerate(found):
        if i not in used:
            result.append(Obstacle(next_id, x, y, radius, height))
            next_id += 1
    return result


# -- composition -------------------------------------------------------------


def fill_holes(values: np.ndarray, holes: np.ndarray, known: np.ndarray) -> np.ndarray:
    """Fill ``holes`` outside-in with the mean of already-known 8-neighbours."""
    out = values.copy()
    known = known & ~holes
    todo = holes.copy()
    kernel = np.ones((3, 3))
    kernel[1, 1] = 0.0
    while todo.any():
        k = known.astype(np.float64)
        sums = ndimage.convolve(np.where(known, out, 0.0), kernel, mode="constant")
        counts = ndimage.convolve(k, kernel, mode="constant")
        ready = todo & (counts > 0)
        if not ready.any():
            fallback = out[known].mean() if known.any() else 0.0
            out[todo] = fallback
            break
        out[ready] = sums[ready] / counts[ready]
        known = known | ready
        todo &= ~ready
    return out


def compose_next(
    img_t: DepthImage,
    env_delta: DeltaImage,
    robot_delta: DeltaImage,
    geom: RobotGeometry,
    p_t: np.ndarray | None = None,
) -> tuple[DepthImage, RobotExtraction, RobotExtraction]:
    """Merge the environment and robot predictions into one next frame.

    Returns the composed image and the robot extractions of the current and
    robot-predicted frames.
    """
    if img_t.shape != env_delta.values.shape or img_t.shape != robot_delta.values.shape:
        raise CompositionError("image shapes differ")
    try:
        ext_t = extract_robot(img_t, geom)
        robot_img = img_t.plus(robot_delta)
        ext_n = extract_robot(robot_img, geom)
    except ExtractionError as exc:
        raise CompositionError(str(exc)) from exc
    pt, pn = ext_t.pixels, ext_n.pixels
    env = np.clip(img_t.values + env_delta.values, -1.0, 1.0)
    out = env.copy()
    out[pn] = robot_img.values[pn]
    holes = pt & ~pn
    if holes.any():
        out = fill_holes(out, holes, ~(pt | pn))
    return DepthImage(out, img_t.cm_per_px, img_t.h_max), ext_t, ext_n


# -- augmentation ------------------------------------------------------------


def paste_obstacle_augment(
    img: DepthImage,
    rng: np.random.Generator,
    geom: RobotGeometry,
    radius: float = 2.0,
    height: float = 2.0,
    exclusion: float = 6.0,
    max_attempts: int = 100,
    events: list[str] | None = None,
) -> DepthImage:
    """Stamp 1-3 synthetic obstacles at least ``exclusion`` cm from the robot."""
    try:
        robot_px = extract_robot(img, geom).pixels
    except ExtractionError:
        robot_px = np.zeros(img.shape, bool)
    nr, nc = img.shape
    s = img.cm_per_px
    rr, cc = np.nonzero(robot_px)
    rxy = np.stack([(cc + 0.5) * s, (rr + 0.5) * s], axis=1)
    want = int(rng.integers(1, 4))
    placed: list[tuple[float, float]] = []
    for _ in range(max_attempts):
        if len(placed) == want:
            break
        x = float(rng.uniform(radius, nc * s - radius))
        y = float(rng.uniform(radius, nr * s - radius))
        if len(rxy) and np.min(np.hypot(rxy[:, 0] - x, rxy[:, 1] - y)) < exclusion + radius:
            continue
        if any(math.hypot(x - px, y - py) < 2 * radius for px, py in placed):
            continue
        placed.append((x, y))
    if not placed:
        if events is not None:
            events.append("augment-no-placement")
        return img
    cm = img.heights_cm()
    for x, y in placed:
        cm = cm + height * disc_coverage(img.shape, s, x, y, radius)
    return DepthImage.from_cm(cm, s, img.h_max)
