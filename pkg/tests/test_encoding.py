import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from grainplan.encoding import (
    ActionImage,
    CompositionError,
    DeltaImage,
    DepthImage,
    ExtractionError,
    compose_next,
    extract_obstacles,
    extract_robot,
    fill_holes,
    paste_obstacle_augment,
    render_action,
    render_depth,
)
from grainplan.scenarios import standard_field
from grainplan.terrain import ACTIONS, Action, Obstacle, RobotGeometry, RobotState

GEOM = RobotGeometry()
HF = standard_field()
S = HF.cell_size


def ang_err(a, b):
    return abs(math.remainder(a - b, 2 * math.pi))


class TestImageTypes:
    def test_depth_range(self):
        with pytest.raises(ValueError):
            DepthImage(np.full((4, 4), 1.5), 1.0)
        img = DepthImage.from_cm(np.full((4, 4), 100.0), 1.0)
        assert img.values.max() == 1.0

    def test_delta_range_and_plus_clamps(self):
        with pytest.raises(ValueError):
            DeltaImage(np.full((4, 4), 2.5))
        img = DepthImage(np.full((4, 4), 0.5), 1.0)
        out = img.plus(DeltaImage(np.full((4, 4), 2.0)))
        assert out.values.max() == 1.0

    def test_action_shape(self):
        with pytest.raises(ValueError):
            ActionImage(np.zeros((4, 4)))


class TestRenderDepth:
    def test_flat_constant(self):
        img = render_depth(HF, None, (), GEOM)
        assert np.ptp(img.values) == 0.0

    def test_one_obstacle_component(self):
        from scipy import ndimage

        base = render_depth(HF, None, (), GEOM).values
        img = render_depth(HF, None, (Obstacle(0, 30.3, 20.7),), GEOM).values
        raised = img > base + 1e-12
        labels, n = ndimage.label(raised)
        assert n == 1
        expect = math.pi * (2.0 / S) ** 2
        assert abs(raised.sum() - expect) / expect < 0.15 or abs(
            (img - base).sum() / (2.0 * 2 / 8.0) - expect) / expect < 0.15

    def test_obstacle_volume_matches_disc_area(self):
        base = render_depth(HF, None, (), GEOM).heights_cm()
        img = render_depth(HF, None, (Obstacle(0, 30.3, 20.7),), GEOM).heights_cm()
        area_px = (img - base).sum() / 2.0
        expect = math.pi * (2.0 / S) ** 2
        assert abs(area_px - expect) / expect < 0.05

    def test_injective_on_pose(self):
        for x in (25.0, 30.0, 35.0):
            for phi in (0.0, 0.7, -2.0):
                a = render_depth(HF, RobotState(x, 30.0, phi), (), GEOM).values
                for dx, dy, dp in ((1.0, 0, 0), (0, 1.0, 0), (0, 0, math.radians(5))):
                    b = render_depth(HF, RobotState(x + dx, 30.0 + dy, phi + dp), (), GEOM).values
                    assert not np.array_equal(a, b)

    def test_deterministic(self):
        r = RobotState(31.1, 29.4, 0.3)
        assert np.array_equal(render_depth(HF, r, (), GEOM).values, render_depth(HF, r, (), GEOM).values)


class TestRenderAction:
    @pytest.mark.parametrize("action,regions", [(Action.AF, 4), (Action.FP, 2), (Action.LFE, 1)])
    def test_region_counts(self, action, regions):
        from scipy import ndimage

        img = render_action(RobotState(30, 30, 0.2), GEOM, action, (64, 64), S)
        _, n = ndimage.label(img.footprint())
        assert n == regions

    def test_mirror_symmetry(self):
        # A robot facing +y with its centre on a pixel boundary mirrors exactly across x.
        r = RobotState(30.0, 30.0, 0.0)
        left = render_action(r, GEOM, Action.LFE, (64, 64), S).values
        right = render_action(r, GEOM, Action.RFE, (64, 64), S).values
        assert np.array_equal(left, right[:, ::-1])

    def test_gradient_monotone_along_sweep(self):
        for phi in (0.0, 1.0, -2.5):
            r = RobotState(30, 30, phi)
            img = render_action(r, GEOM, Action.AF, (64, 64), S).values
            rr, cc = np.nonzero(img.max(axis=2) > 0)
            pts = np.stack([(cc + 0.5) * S - r.x, (rr + 0.5) * S - r.y], axis=1)
            along = pts @ r.forward()
            order = np.argsort(along)
            red, blue = img[rr, cc, 0][order], img[rr, cc, 2][order]
            # For each leg separately: red falls and blue rises toward the front.
            across = pts @ r.right()
            for side in (-1, 1):
                for fore in (-1, 1):
                    m = (np.sign(across[order]) == side) & (np.sign(along[order] - 0) * fore > -10)
                    sel = m & (np.abs(along[order] - fore * 7.5) <= 6.5)
                    assert np.all(np.diff(red[sel]) <= 1e-12)
                    assert np.all(np.diff(blue[sel]) >= -1e-12)
            assert np.allclose(img[..., 0] + img[..., 2], img.max(axis=2) > 0)
            assert not img[..., 1].any()

    def test_footprint_out_of_field(self):
        img = render_action(RobotState(0.0, 0.0, math.pi), GEOM, Action.LFE, (64, 64), S)
        assert not img.values.any()


class TestExtractRobot:
    def test_round_trip_heading_zero(self):
        r = RobotState(30.4, 28.9, 0.0)
        ext = extract_robot(render_depth(HF, r, (), GEOM), GEOM)
        assert math.hypot(ext.robot.x - r.x, ext.robot.y - r.y) <= 0.5 * S
        assert ang_err(ext.robot.phi, r.phi) < math.radians(2)

    def test_pose_grid(self):
        worst_p, worst_a = 0.0, 0.0
        for x in np.linspace(18, 42, 5):
            for y in np.linspace(18, 42, 5):
                for phi in np.linspace(-math.pi, math.pi, 8, endpoint=False) + 0.1:
                    r = RobotState(float(x), float(y), float(phi))
                    ext = extract_robot(render_depth(HF, r, (), GEOM), GEOM)
                    worst_p = max(worst_p, math.hypot(ext.robot.x - r.x, ext.robot.y - r.y))
                    worst_a = max(worst_a, ang_err(ext.robot.phi, r.phi))
        assert worst_p < 1.0
        assert worst_a < math.radians(2)

    def test_empty_image(self):
        with pytest.raises(ExtractionError):
            extract_robot(render_depth(HF, None, (), GEOM), GEOM)


class TestExtractObstacles:
    def test_three_obstacles(self):
        obs = (Obstacle(0, 12.3, 10.1), Obstacle(1, 30.0, 14.6), Obstacle(2, 47.7, 9.2))
        found = extract_obstacles(render_depth(HF, None, obs, GEOM), None)
        assert len(found) == 3
        for o in obs:
            assert min(math.hypot(f.x - o.x, f.y - o.y) for f in found) < 0.5

    def test_touching_pair_is_split(self):
        obs = (Obstacle(0, 22.5, 34.0), Obstacle(1, 22.5, 30.0))
        found = extract_obstacles(render_depth(HF, None, obs, GEOM), None)
        assert len(found) == 2
        for o in obs:
            assert min(math.hypot(f.x - o.x, f.y - o.y) for f in found) < 1.5

    def test_empty_scene(self):
        assert extract_obstacles(render_depth(HF, None, (), GEOM), None) == []

    def test_robot_pixels_excluded(self):
        r = RobotState(30, 40)
        img = render_depth(HF, r, (Obstacle(0, 30, 15),), GEOM)
        found = extract_obstacles(img, extract_robot(img, GEOM).pixels)
        assert len(found) == 1

    def test_tracking_keeps_ids(self):
        prev = (Obstacle(7, 20.0, 20.0), Obstacle(3, 40.0, 20.0))
        moved = (Obstacle(0, 20.5, 18.0), Obstacle(1, 40.0, 17.5))
        found = extract_obstacles(render_depth(HF, None, moved, GEOM), None, previous=prev)
        ids = {o.id: o for o in found}
        assert set(ids) == {3, 7}
        assert ids[7].x == pytest.approx(20.5, abs=0.5)

    def test_tracking_gate(self):
        prev = (Obstacle(4, 20.0, 20.0),)
        found = extract_obstacles(render_depth(HF, None, (Obstacle(0, 20.0, 10.0),), GEOM), None,
                                  previous=prev)
        assert [o.id for o in found] == [5]


def _scene(x=30.0, y=32.0, phi=0.2):
    r = RobotState(x, y, phi)
    obs = (Obstacle(0, 20.0, 12.0),)
    return r, obs, render_depth(HF, r, obs, GEOM)


class TestCompose:
    def test_identity(self):
        _, _, img = _scene()
        z = DeltaImage.zeros(img.shape)
        out, _, _ = compose_next(img, z, z, GEOM)
        assert np.array_equal(out.values, img.values)

    @settings(max_examples=20, deadline=None)
    @given(st.floats(-2, 2), st.floats(0, 3), st.floats(-0.4, 0.4), st.integers(0, 2**31))
    def test_locality(self, dx, dy, dphi, seed):
        r, obs, img = _scene()
        moved = RobotState(r.x + dx, r.y + dy, r.phi + dphi)
        robot_delta = DeltaImage.between(img, render_depth(HF, moved, obs, GEOM))
        env = np.random.default_rng(seed).uniform(-0.1, 0.1, img.shape)
        out, ext_t, ext_n = compose_next(img, DeltaImage(env), robot_delta, GEOM)
        outside = ~(ext_t.pixels | ext_n.pixels)
        expect = np.clip(img.values + env, -1, 1)
        assert np.array_equal(out.values[outside], expect[outside])
        assert out.values.min() >= -1 and out.values.max() <= 1

    def test_vacated_pixels_filled_from_surroundings(self):
        r, obs, img = _scene()
        moved = RobotState(r.x, r.y + 3.0, r.phi)
        robot_delta = DeltaImage.between(img, render_depth(HF, moved, obs, GEOM))
        out, ext_t, ext_n = compose_next(img, DeltaImage.zeros(img.shape), robot_delta, GEOM)
        holes = ext_t.pixels & ~ext_n.pixels
        assert holes.any()
        ground = render_depth(HF, None, obs, GEOM).values
        assert np.abs(out.values[holes] - ground[holes]).max() < 0.05

    def test_failure_raises(self):
        img = render_depth(HF, None, (), GEOM)
        z = DeltaImage.zeros(img.shape)
        with pytest.raises(CompositionError):
            compose_next(img, z, z, GEOM)
        with pytest.raises(CompositionError):
            compose_next(img, DeltaImage.zeros((8, 8)), z, GEOM)


def test_fill_holes_outside_in():
    v = np.zeros((5, 5))
    v[:, :] = 1.0
    holes = np.zeros((5, 5), bool)
    holes[1:4, 1:4] = True
    v[holes] = 99.0
    out = fill_holes(v, holes, ~holes)
    assert np.allclose(out, 1.0)


class TestAugment:
    def test_deterministic(self):
        _, _, img = _scene()
        a = paste_obstacle_augment(img, np.random.default_rng(1), GEOM)
        b = paste_obstacle_augment(img, np.random.default_rng(1), GEOM)
        assert np.array_equal(a.values, b.values)
        assert not np.array_equal(a.values, img.values)

    def test_robot_pose_unchanged(self):
        for seed in range(20):
            _, _, img = _scene()
            aug = paste_obstacle_augment(img, np.random.default_rng(seed), GEOM)
            a, b = extract_robot(img, GEOM).robot, extract_robot(aug, GEOM).robot
            assert math.hypot(a.x - b.x, a.y - b.y) < 1e-9
            assert ang_err(a.phi, b.phi) < 1e-9

    def test_exclusion_sweep(self):
        r, _, img = _scene()
        px = extract_robot(img, GEOM).pixels
        rr, cc = np.nonzero(px)
        robot_xy = np.stack([(cc + 0.5) * S, (rr + 0.5) * S], axis=1)
        base = img.heights_cm()
        for seed in range(1000):
            aug = paste_obstacle_augment(img, np.random.default_rng(seed), GEOM)
            added = aug.heights_cm() - base > 1e-9
            ar, ac = np.nonzero(added)
            pts = np.stack([(ac + 0.5) * S, (ar + 0.5) * S], axis=1)
            d = np.hypot(pts[:, None, 0] - robot_xy[None, :, 0], pts[:, None, 1] - robot_xy[None, :, 1])
            # Disc pixels reach at most radius + half a pixel diagonal beyond the centre.
            assert d.min() >= 6.0 - 0.5 * S * math.sqrt(2)

    def test_no_room_returns_input(self):
        _, _, img = _scene()
        events = []
        out = paste_obstacle_augment(img, np.random.default_rng(0), GEOM, exclusion=100.0, events=events)
        assert out is img
        assert events == ["augment-no-placement"]
