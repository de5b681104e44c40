"""Predictors mapping (depth image, action image) to delta images.

Both implementations share one interface so the planner can run on the
simulator-backed oracle or on the trained networks interchangeably.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np
import torch

from ..encoding import (ActionImage, DeltaImage, DepthImage, ExtractionError, extract_obstacles,
                        extract_robot, fill_holes, obstacle_overlay, overlay_edges, render_action, render_depth,
                        robot_overlay)
from ..sim import Embodiment, SimParams, robot_kinematics, sim_step
from ..terrain import ACTIONS, Action, Heightfield, RobotGeometry, RobotState
from .diffusion import sample_f_e_batch
from .schedule import DiffusionConfig
from .unet import UNet


class PredictionError(RuntimeError):
    pass


class Predictor(Protocol):
    kind: str

    def predict_env(self, img: DepthImage, action: ActionImage) -> DeltaImage: ...

    def predict_robot(self, img: DepthImage, action: ActionImage) -> DeltaImage: ...

    def predict_env_batch(self, imgs: Sequence[DepthImage], actions: Sequence[ActionImage]) -> list[DeltaImage]: ...

    def predict_robot_batch(self, imgs: Sequence[DepthImage], actions: Sequence[ActionImage]) -> list[DeltaImage]: ...


def image_key(*arrays: np.ndarray) -> bytes:
    h = hashlib.blake2b(digest_size=16)
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.digest()


@dataclass(frozen=True)
class DecodedState:
    heightfield: Heightfield
    robot: RobotState | None
    robot_pixels: np.ndarray
    obstacles: tuple


@dataclass
class OraclePredictor:
    """Ground-truth stand-in: decodes the image, steps the simulator, re-renders.

    The environment step always uses the manipulator embodiment, digging
    exactly the painted action pixels.  ``embodiment`` only affects the
    robot prediction: a manipulator never moves, so its delta is zero.
    """

    params: SimParams
    geom: RobotGeometry = field(default_factory=RobotGeometry)
    embodiment: Embodiment = Embodiment.ROBOT
    slope_angle: float = 0.0
    kind: str = "oracle"
    _cache: dict = field(default_factory=dict, repr=False)

    def decode(self, img: DepthImage) -> DecodedState:
        key = image_key(img.values)
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        cm = img.heights_cm()
        try:
            ext = extract_robot(img, self.geom)
            robot, pix = ext.robot, ext.pixels
        except ExtractionError:
            robot, pix = None, np.zeros(img.shape, bool)
        obstacles = tuple(extract_obstacles(img, pix if robot is not None else None, geom=self.geom))
        surface = cm - obstacle_overlay(img.shape, img.cm_per_px, obstacles)
        if robot is not None:
            surface -= robot_overlay(img.shape, img.cm_per_px, robot, self.geom)
        edges = overlay_edges(img.shape, img.cm_per_px, robot, obstacles, self.geom)
        # Edge pixels carry most of the pose error; take them from the surroundings.
        if edges.any():
            surface = fill_holes(surface, edges, ~edges)
        hf = Heightfield(np.maximum(surface, 0.0), img.cm_per_px, self.slope_angle)
        state = DecodedState(hf, robot, pix, obstacles)
        if len(self._cache) > 4096:
            self._cache.clear()
        self._cache[key] = state
        return state

    def predict_env(self, img: DepthImage, action: ActionImage) -> DeltaImage:
        st = self.decode(img)
        robot = st.robot or RobotState(0.0, 0.0, 0.0)
        res = sim_step(st.heightfield, robot, st.obstacles, Action.FP, self.geom, self.params, None,
                       Embodiment.MANIPULATOR, footprint=action.footprint())
        before = render_depth(st.heightfield, st.robot, st.obstacles, self.geom, img.h_max)
        after = render_depth(res.next_heightfield, st.robot, res.next_obstacles, self.geom, img.h_max)
        delta = after.values - before.values
        delta[st.robot_pixels] = 0.0
        return DeltaImage(delta)

    def identify_action(self, robot: RobotState, action: ActionImage, cm_per_px: float) -> Action:
        """Recover the action tag by matching the painted footprint."""
        fp = action.footprint()
        best, best_iou = ACTIONS[0], -1.0
        for a in ACTIONS:
            ref = render_action(robot, self.geom, a, action.shape, cm_per_px).footprint()
            union = (fp | ref).sum()
            iou = (fp & ref).sum() / union if union else 0.0
            if iou > best_iou:
                best, best_iou = a, iou
        return best

    def predict_robot(self, img: DepthImage, action: ActionImage) -> DeltaImage:
        if Embodiment(self.embodiment) is Embodiment.MANIPULATOR:
            return DeltaImage.zeros(img.shape)
        st = self.decode(img)
        if st.robot is None:
            raise PredictionError("no robot in image")
        tag = self.identify_action(st.robot, action, img.cm_per_px)
        x2 = robot_kinematics(st.robot, tag, self.params, None)
        before = render_depth(st.heightfield, st.robot, st.obstacles, self.geom, img.h_max)
        after = render_depth(st.heightfield, x2, st.obstacles, self.geom, img.h_max)
        return DeltaImage(after.values - before.values)

    def predict_env_batch(self, imgs, actions):
        return [self.predict_env(i, a) for i, a in zip(imgs, actions)]

    def predict_robot_batch(self, imgs, actions):
        return [self.predict_robot(i, a) for i, a in zip(imgs, actions)]


def erase_robot(img: DepthImage, geom: RobotGeometry) -> tuple[DepthImage, np.ndarray]:
    """Replace the robot body with the surrounding surface level."""
    try:
        pix = extract_robot(img, geom).pixels
    except ExtractionError:
        return img, np.zeros(img.shape, bool)
    return DepthImage(fill_holes(img.values, pix, ~pix), img.cm_per_px, img.h_max), pix


@dataclass
class LearnedPredictor:
    """Trained f_e (diffusion) and f_r (regression) networks.

    f_e is trained on manipulator frames that carry no robot body, so the
    body is erased from its input and its output is zeroed on the robot
    pixels.  Sampling seeds derive from ``seed`` and the input bytes, which
    keeps predictions deterministic.
    """

    f_e: UNet
    f_r: UNet
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    geom: RobotGeometry = field(default_factory=RobotGeometry)
    seed: int = 0
    kind: str = "learned"

    def _seed(self, img: DepthImage, action: ActionImage) -> int:
        k = image_key(np.array([self.seed]), img.values, action.values)
        return int.from_bytes(k[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF

    def predict_env_batch(self, imgs, actions):
        erased = [erase_robot(i, self.geom) for i in imgs]
        seeds = [self._seed(i, a) for i, a in zip(imgs, actions)]
        out = sample_f_e_batch(self.f_e, [e[0] for e in erased], list(actions), self.diffusion, seeds)
        res = []
        for d, (_, pix) in zip(out, erased):
            v = d.values.copy()
            v[pix] = 0.0
            res.append(DeltaImage(v))
        return res

    def predict_env(self, img, action):
        return self.predict_env_batch([img], [action])[0]

    @torch.no_grad()
    def predict_robot_batch(self, imgs, actions):
        self.f_r.eval()
        x = torch.from_numpy(np.stack([
            np.concatenate([i.values[None], a.channels_first()], axis=0) for i, a in zip(imgs, actions)
        ]).astype(np.float32))
        out = self.f_r(x).numpy().astype(np.float64)[:, 0]
        return [DeltaImage(np.clip(o, -2.0, 2.0)) for o in out]

    def predict_robot(self, img, action):
        return self.predict_robot_batch([img], [action])[0]
