"""Acceptance criteria, one printed PASS/FAIL line each.

Run on its own with ``pytest tests/test_acceptance.py -v``; the lines are
printed even without ``-s``.  The learned end-to-end criterion is reported
but never asserted: it rides on a short training run, and the invariant
checks above are what gate acceptance.
"""

import itertools
import math
import os
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
import torch

from grainplan.calibration import SPACINGS, calibrate_interference
from grainplan.encoding import (
    CompositionError,
    DeltaImage,
    ExtractionError,
    compose_next,
    extract_obstacles,
    extract_robot,
    overlay_edges,
    render_action,
    render_depth,
)
from grainplan.harness import desk_manifest, evaluate, gen_dataset, load_dataset, sweep_actions
from grainplan.planning import (
    CostWeights,
    PlanContext,
    ang_factor,
    discounted_sum,
    eaa_midpoint,
    expand,
    mode_cost,
    observe,
    plan_step,
    random_policy,
)
from grainplan.scenarios import replay, scenario_suite, standard_field
from grainplan.sim import Embodiment, SimParams, sim_step
from grainplan.surrogate import LearnedPredictor, OraclePredictor
from grainplan.surrogate.diffusion import ddpm_sample, gaussian_eps
from grainplan.surrogate.gradcheck import assert_gradients, micro_config
from grainplan.surrogate.schedule import DiffusionConfig, noise_schedule
from grainplan.surrogate.training import TrainConfig, TripletDataset, train_f_e, train_f_r
from grainplan.surrogate.unet import F_E_PAPER, F_R_PAPER
from grainplan.terrain import (
    ACTIONS,
    Action,
    Heightfield,
    Mode,
    Obstacle,
    RobotGeometry,
    RobotState,
    Scenario,
    Target,
    normalize_angle,
)

GEOM = RobotGeometry()
PARAMS = SimParams()
W = CostWeights()
ORACLE_HORIZON = 2
LEARNED_HORIZON = 1
SUITE_SEED = 0


@pytest.fixture
def report(capsys):
    def emit(name: str, ok: bool, detail: str, seconds: float | None = None) -> None:
        took = f" [{seconds:.1f}s]" if seconds is not None else ""
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'}  {name}: {detail}{took}")

    return emit


def _oracle(params=PARAMS):
    return OraclePredictor(params.noiseless(), GEOM, slope_angle=standard_field().slope_angle)


@pytest.fixture(scope="module")
def suite():
    return scenario_suite(10, SUITE_SEED, PARAMS, GEOM)


# -- simulator ---------------------------------------------------------------


def test_conservation(report):
    t0 = time.time()
    rng = np.random.default_rng(1)
    base = standard_field()
    hf = Heightfield(base.heights + rng.uniform(0.0, 1.0, base.heights.shape), base.cell_size, base.slope_angle)
    v0 = hf.volume()
    worst = 0.0
    for _ in range(1000):
        robot = RobotState(float(rng.uniform(15, 45)), float(rng.uniform(15, 45)), float(rng.uniform(-math.pi, math.pi)))
        obstacles = tuple(Obstacle(i, float(rng.uniform(5, 55)), float(rng.uniform(5, 55)))
                          for i in range(int(rng.integers(0, 3))))
        action = ACTIONS[int(rng.integers(len(ACTIONS)))]
        emb = Embodiment.ROBOT if rng.random() < 0.5 else Embodiment.MANIPULATOR
        hf = sim_step(hf, robot, obstacles, action, GEOM, PARAMS, rng, emb).next_heightfield
        worst = max(worst, abs(hf.volume() - v0) / v0)
    dt = time.time() - t0
    ok = worst <= 1e-9 and dt < 60
    report("conservation", ok, f"max relative volume drift {worst:.2e} over 1000 steps (<= 1e-9)", dt)
    assert ok


def test_interference(report):
    t0 = time.time()
    p = calibrate_interference(replace(PARAMS, obstacle_mobility=6.0, flux_block=0.5))
    dt = time.time() - t0
    r = p.metadata["calibrated_ratios"]
    ok = (r[0.0] < r[2.0] < 1.0 and 0.27 <= r[0.0] <= 0.57 and 0.52 <= r[2.0] <= 0.82 and dt < 120)
    ratios = " ".join(f"r({s:g})={r[s]:.3f}" for s in SPACINGS)
    report("interference", ok, f"{ratios}; mobility={p.obstacle_mobility:g} flux_block={p.flux_block:g}", dt)
    assert ok


def test_action_orderings(report, tmp_path):
    t0 = time.time()
    eff = sweep_actions(PARAMS, tmp_path, seeds=3)
    dt = time.time() - t0
    mean = {a: v.mean(axis=0) for a, v in eff.items()}
    others_dy = max(abs(mean[a][1]) for a in ACTIONS if a is not Action.AF)
    others_dphi = max(abs(mean[a][2]) for a in ACTIONS if a not in (Action.LP, Action.RP))
    af_largest = abs(mean[Action.AF][1]) > others_dy
    turns_largest = min(abs(mean[Action.LP][2]), abs(mean[Action.RP][2])) > others_dphi
    antisym = np.sign(mean[Action.LP][2]) == -np.sign(mean[Action.RP][2]) != 0
    ok = bool(af_largest and turns_largest and antisym and dt < 60)
    report("action orderings", ok,
           f"|dy| AF={abs(mean[Action.AF][1]):.2f} vs others<={others_dy:.2f}; "
           f"dphi LP={mean[Action.LP][2]:+.3f} RP={mean[Action.RP][2]:+.3f} vs others<={others_dphi:.3f}", dt)
    assert ok


# -- costs -------------------------------------------------------------------


def _ref_cost(mode, robot, obstacles, sc, w):
    """Straight-line restatement of the three mode costs."""
    head = normalize_angle(robot.phi + math.pi / 2)
    c_rs = 0.0
    for o in obstacles:
        dx, dy = o.x - robot.x, o.y - robot.y
        d = max(math.hypot(dx, dy), 0.5)
        off = abs(normalize_angle(math.atan2(dy, dx) - head))
        c_rs += (math.exp(w.alpha * (w.beta - off)) if off <= w.beta else 1.0) / d
    c_rt = 0.0
    if sc.robot_target is not None:
        t = sc.robot_target
        c_rt = max(0.0, robot.y - t.y) if t.half_plane else math.hypot(robot.x - t.x, robot.y - t.y)
    by_id = {o.id: o for o in obstacles}
    c_o = 0
    for i, t in zip(sc.manipulated, sc.obstacle_targets):
        o = by_id[i]
        c_o += max(0.0, o.y - t.y) if t.half_plane else math.hypot(o.x - t.x, o.y - t.y)
    loco = w.w1 * c_rt + w.w2 * c_rs
    manip = w.w3 * c_o + w.w4 * c_rs
    if mode is Mode.LOCOMOTION:
        return loco
    if mode is Mode.MANIPULATION:
        return manip
    return w.w5 * loco + w.w6 * manip


def test_cost_point_checks(report):
    e_pi = abs(ang_factor(0.0, 4.0, math.pi / 4) - math.exp(math.pi))
    b = math.pi / 4
    jump = abs(ang_factor(math.nextafter(b, 0), 4.0, b) - ang_factor(math.nextafter(b, 4), 4.0, b))
    rng = np.random.default_rng(7)
    hf = standard_field()
    mismatches = 0
    for k in range(20):
        mode = list(Mode)[k % 3]
        robot = RobotState(*(float(v) for v in rng.uniform(10, 50, 2)), float(rng.uniform(-math.pi, math.pi)))
        obs = tuple(Obstacle(i, *(float(v) for v in rng.uniform(5, 55, 2))) for i in range(int(rng.integers(1, 4))))
        targets = tuple(Target(*(float(v) for v in rng.uniform(5, 55, 2)), bool(rng.random() < 0.3)) for _ in obs)
        sc = Scenario(mode, hf, robot, obs, targets, Target(*(float(v) for v in rng.uniform(5, 55, 2))))
        moved = tuple(replace(o, x=o.x + float(rng.normal()), y=o.y + float(rng.normal())) for o in obs)
        if mode_cost(mode, robot, moved, sc, W) != _ref_cost(mode, robot, moved, sc, W):
            mismatches += 1
    ok = e_pi < 1e-9 and jump < 1e-12 and mismatches == 0
    report("cost point checks", ok,
           f"|f(0)-e^pi|={e_pi:.1e}, jump at beta={jump:.1e}, {mismatches}/20 bit-exact mismatches")
    assert ok


# -- planner -----------------------------------------------------------------


def _ref_expand(pred, img, robot, obstacles, pixels, action, sc, w):
    """One predicted step written out without the planner's batching."""
    a_img = render_action(robot, GEOM, action, img.shape, img.cm_per_px)
    rd = pred.predict_robot_batch([img], [a_img])[0]
    try:
        x2 = extract_robot(img.plus(rd), GEOM).robot
    except ExtractionError:
        return None
    mid = RobotState(0.5 * (robot.x + x2.x), 0.5 * (robot.y + x2.y),
                     normalize_angle(robot.phi + 0.5 * normalize_angle(x2.phi - robot.phi)))
    e_img = render_action(mid, GEOM, action, img.shape, img.cm_per_px)
    ed = pred.predict_env_batch([img], [e_img])[0]
    try:
        nxt, _, ext = compose_next(img, ed, rd, GEOM, pixels)
    except CompositionError:
        return None
    h, wd = img.shape
    r = ext.robot
    if not (0.0 <= r.x <= wd * img.cm_per_px and 0.0 <= r.y <= h * img.cm_per_px):
        return None
    found = extract_obstacles(nxt, ext.pixels, previous=obstacles, geom=GEOM)
    ids = {o.id for o in found}
    obs = tuple(sorted(list(found) + [o for o in obstacles if o.id not in ids], key=lambda o: o.id))
    if not set(sc.manipulated) <= {o.id for o in obs}:
        return None
    return nxt, r, obs, ext.pixels, _ref_cost(sc.mode, r, obs, sc, w)


def _ref_table(pred, sc, node, w, horizon):
    table = {}
    for seq in itertools.product(ACTIONS, repeat=horizon):
        img, robot, obs, pix, acc = node.image, node.robot, node.obstacles, node.robot_pixels, 0.0
        for t, a in enumerate(seq):
            step = _ref_expand(pred, img, robot, obs, pix, a, sc, w)
            if step is None:
                acc = math.inf
                break
            img, robot, obs, pix, c = step
            acc = acc + w.gamma**t * c
        table[seq] = acc
    best = min(table, key=lambda s: (table[s], list(table).index(s)))
    return table, best


def test_planner_exhaustive(report):
    t0 = time.time()
    w = replace(W, horizon=ORACLE_HORIZON)
    scenarios = [s.scenario for s in scenario_suite(10, 100, PARAMS, GEOM)]
    modes = list(Mode)
    agree, exact = 0, 0
    for k, sc in enumerate(scenarios):
        sc = replace(sc, mode=modes[k % 3])
        node = observe(render_depth(sc.heightfield, sc.robot_start, sc.obstacles, GEOM), GEOM, sc.obstacles)
        res = plan_step(PlanContext(_oracle(), sc, w, GEOM), node)
        table, best = _ref_table(_oracle(), sc, node, w, ORACLE_HORIZON)
        agree += res.sequence == best
        exact += all(res.table[s] == table[s] for s in table) and len(res.table) == 36
    ds = discounted_sum([1.7] * 4, 0.8)
    ds_err = abs(ds - 1.7 * (1 - 0.8**4) / 0.2)
    dt = time.time() - t0
    ok = agree == 10 and exact == 10 and ds_err < 1e-12 and abs(discounted_sum([1.0] * 4, 0.8) - 2.952) < 1e-12
    report("planner correctness", ok,
           f"argmin agrees {agree}/10, 36-entry tables bit-exact {exact}/10, discounted-sum error {ds_err:.1e}", dt)
    assert ok


# -- effective action adjustment ----------------------------------------------


def _lp_rp_scenarios(n=12):
    """Robot part-way through a turn, obstacle behind one leg."""
    rng = np.random.default_rng(0)
    hf = standard_field()
    out = []
    for k in range(n):
        robot = RobotState(float(rng.uniform(25, 35)), float(rng.uniform(30, 38)), float(rng.uniform(-0.6, 0.6)))
        side = 1 if k % 2 else -1
        x, y = robot.to_world(side * 7.5, -float(rng.uniform(14, 18)))
        tgt = Target(x + float(rng.uniform(-1, 1)), y - float(rng.uniform(3, 6)))
        out.append(Scenario(Mode.LOCO_MANIPULATION, hf, robot, (Obstacle(0, x, y),), (tgt,),
                            Target(*robot.to_world(side * 4, 3)), name=f"turn-{k}"))
    return out


def test_eaa(report):
    t0 = time.time()
    rng = np.random.default_rng(3)
    pos_exact, arc_ok = True, True
    for _ in range(1000):
        a, b = rng.uniform(-math.pi, math.pi, 2)
        p0, p2 = rng.uniform(0, 60, 2), rng.uniform(0, 60, 2)
        m = eaa_midpoint(RobotState(p0[0], p0[1], a), RobotState(p2[0], p2[1], b))
        pos_exact &= m.x == (p0[0] + p2[0]) / 2 and m.y == (p0[1] + p2[1]) / 2
        half = abs(math.remainder(b - a, 2 * math.pi)) / 2
        da, db = abs(math.remainder(m.phi - a, 2 * math.pi)), abs(math.remainder(m.phi - b, 2 * math.pi))
        arc_ok &= abs(da - half) < 1e-9 and abs(db - half) < 1e-9
    w = replace(W, horizon=1)
    changed = []
    for sc in _lp_rp_scenarios():
        node = observe(render_depth(sc.heightfield, sc.robot_start, sc.obstacles, GEOM), GEOM, sc.obstacles)
        on = plan_step(PlanContext(_oracle(), sc, w, GEOM, True), node).action
        off = plan_step(PlanContext(_oracle(), sc, w, GEOM, False), node).action
        if on is not off:
            changed.append(f"{sc.name}:{off.value}->{on.value}")
    dt = time.time() - t0
    ok = bool(pos_exact and arc_ok and changed)
    report("EAA", ok, f"positions exact={pos_exact}, shortest arc on 1000 pairs={arc_ok}, "
           f"ablation changes the action in {len(changed)}/12 ({', '.join(changed)})", dt)
    assert ok


# -- encoding ----------------------------------------------------------------


def test_encoding_round_trips(report):
    t0 = time.time()
    hf = standard_field()
    worst_p, worst_a = 0.0, 0.0
    for x in np.linspace(18, 42, 5):
        for y in np.linspace(18, 42, 5):
            for phi in np.linspace(-math.pi, math.pi, 8, endpoint=False) + 0.1:
                r = RobotState(float(x), float(y), float(phi))
                ext = extract_robot(render_depth(hf, r, (), GEOM), GEOM).robot
                worst_p = max(worst_p, math.hypot(ext.x - r.x, ext.y - r.y))
                worst_a = max(worst_a, abs(normalize_angle(ext.phi - r.phi)))
    img = render_depth(hf, RobotState(30.0, 30.0, 0.3), (Obstacle(0, 15.0, 12.0),), GEOM)
    zero = DeltaImage.zeros(img.shape)
    identity = np.array_equal(compose_next(img, zero, zero, GEOM)[0].values, img.values)
    patch = np.zeros(img.shape)
    patch[5:12, 40:50] = -0.05
    out = compose_next(img, DeltaImage(patch), zero, GEOM)[0].values
    locality = bool(np.all(out[patch == 0] == img.values[patch == 0]))

    orc = _oracle()
    p = PARAMS.noiseless()
    worst_off = 0.0
    for ss in scenario_suite(3, SUITE_SEED, PARAMS, GEOM):
        sc = ss.scenario
        r, obs = sc.robot_start, sc.obstacles
        img = render_depth(sc.heightfield, r, obs, GEOM)
        for a in ACTIONS:
            res = sim_step(sc.heightfield, r, obs, a, GEOM, p, None, Embodiment.ROBOT)
            truth = render_depth(res.next_heightfield, res.next_robot, res.next_obstacles, GEOM)
            a_img = render_action(r, GEOM, a, img.shape, img.cm_per_px)
            pred = compose_next(img, orc.predict_env(img, a_img), orc.predict_robot(img, a_img), GEOM)[0]
            band = (overlay_edges(img.shape, img.cm_per_px, r, obs, GEOM)
                    | overlay_edges(img.shape, img.cm_per_px, res.next_robot, res.next_obstacles, GEOM))
            worst_off = max(worst_off, float(np.abs(pred.values - truth.values)[~band].max()))
    dt = time.time() - t0
    ok = worst_p < 1.0 and worst_a < math.radians(2) and identity and locality and worst_off <= 0.05
    report("encoding round trips", ok,
           f"pose error <= {worst_p:.3f} cm / {math.degrees(worst_a):.2f} deg over 200 poses; identity={identity}, "
           f"locality={locality}; oracle composition off-band error {worst_off:.4f} (<= 0.05)", dt)
    assert ok


# -- neural ------------------------------------------------------------------


def test_neural_correctness(report):
    t0 = time.time()
    grad = max(assert_gradients(cfg=micro_config(te)).worst for te in (True, False))
    cfg = DiffusionConfig()
    _, ab = noise_schedule(cfg)
    x = ddpm_sample(gaussian_eps(0.5, 0.3, ab), (500,), cfg, torch.Generator().manual_seed(0), dtype=torch.float64)
    mean_err = abs(x.mean().item() - 0.5) / 0.5
    std_err = abs(x.std().item() - 0.3) / 0.3

    rng = np.random.default_rng(0)
    n = 32
    depth = np.tile(rng.uniform(-1, 0, (1, 64, 64)), (n, 1, 1))
    act = np.zeros((n, 3, 64, 64))
    act[:, 2, 20:30, 20:22] = 1
    target = np.zeros((n, 64, 64))
    target[:, 30:40, 20:30] = 0.3
    ucfg = replace(F_E_PAPER, base_channels=4, res_blocks_per_level=1, dropout=0.0)
    loss = train_f_e(TripletDataset(depth, act, target, 0.9375), ucfg, cfg,
                     TrainConfig(learning_rate=2e-3, weight_decay=0.0, batch_size=4, epochs=20)).train_loss
    drop = loss[19] / loss[0]

    configs = (F_E_PAPER.channel_multipliers == (1, 2, 4, 8, 16) and F_R_PAPER.channel_multipliers == (1, 2, 4, 8)
               and (cfg.num_steps, cfg.beta_start, cfg.beta_end, cfg.schedule) == (150, 1e-4, 0.025, "linear"))
    dt = time.time() - t0
    ok = grad < 1e-3 and mean_err < 0.1 and std_err < 0.1 and drop < 0.5 and configs and dt < 900
    report("neural correctness", ok,
           f"gradcheck max rel err {grad:.1e}; sampler mean/std rel err {mean_err:.3f}/{std_err:.3f}; "
           f"degenerate loss at epoch 20 = {100 * drop:.1f}% of epoch 1; configs={configs}", dt)
    assert ok


# -- end to end ----------------------------------------------------------------


@pytest.mark.slow
def test_end_to_end_oracle(report, suite):
    t0 = time.time()
    feasible = 0
    for s in suite:
        _, robot, obs, _ = replay(s.scenario, s.script, PARAMS, GEOM)
        sc = s.scenario
        feasible += (sc.robot_target.distance((robot.x, robot.y)) <= sc.success_radius
                     and sc.obstacle_targets[0].distance((obs[0].x, obs[0].y)) <= sc.success_radius)
    scenarios = [s.scenario for s in suite]
    w = replace(W, horizon=ORACLE_HORIZON)
    planner = evaluate(scenarios, _oracle(), w, True, PARAMS, GEOM)
    baseline = evaluate(scenarios, _oracle(), w, True, PARAMS, GEOM, policy=random_policy)
    dt = time.time() - t0
    ok = feasible == 10 and planner.successes >= 7 and planner.successes > baseline.successes and dt < 600
    report("end-to-end, oracle", ok,
           f"{feasible}/10 feasible by script; planner {planner.successes}/10 "
           f"(MAE {planner.mae_mean:.2f} cm), random {baseline.successes}/10", dt)
    assert ok


def _one_step_positions(pred, suite, use_eaa):
    nodes, acts = [], []
    for s in suite:
        sc = s.scenario
        node = observe(render_depth(sc.heightfield, sc.robot_start, sc.obstacles, GEOM), GEOM, sc.obstacles)
        for a in ACTIONS:
            nodes.append(node)
            acts.append(a)
    ctx = PlanContext(pred, suite[0].scenario, replace(W, horizon=1), GEOM, use_eaa)
    return [None if tr.node is None else {o.id: o for o in tr.node.obstacles} for tr in expand(ctx, nodes, acts)]


@pytest.mark.slow
def test_end_to_end_learned(report, suite, tmp_path_factory):
    """Best-effort: the outcome is printed and recorded, never asserted."""
    t0 = time.time()
    out = Path(os.environ.get("GRAINPLAN_ACCEPTANCE_OUT", tmp_path_factory.mktemp("learned")))
    out.mkdir(parents=True, exist_ok=True)
    gen_dataset(desk_manifest(Embodiment.MANIPULATOR, out / "data_manipulator"), PARAMS, GEOM)
    gen_dataset(desk_manifest(Embodiment.ROBOT, out / "data_robot"), PARAMS, GEOM)
    env, rob = load_dataset(out / "data_manipulator", "env"), load_dataset(out / "data_robot", "robot")
    f_r = train_f_r(rob, replace(F_R_PAPER, base_channels=8, res_blocks_per_level=1),
                    TrainConfig(learning_rate=1e-3, weight_decay=1e-4, batch_size=8, epochs=30, val_fraction=0.1),
                    augment=True).model
    f_e = train_f_e(env, replace(F_E_PAPER, base_channels=8, res_blocks_per_level=1), DiffusionConfig(),
                    TrainConfig(learning_rate=1e-3, weight_decay=1e-5, batch_size=8, epochs=30,
                                val_fraction=0.1)).model
    learned = LearnedPredictor(f_e, f_r, DiffusionConfig(), GEOM, seed=0)
    t_train = time.time() - t0

    # One-step obstacle positions on three scenarios times six actions.
    probe = suite[:3]
    floor, truth = [], []
    for s in probe:
        sc = s.scenario
        for a in ACTIONS:
            res = sim_step(sc.heightfield, sc.robot_start, sc.obstacles, a, GEOM, PARAMS.noiseless(), None,
                           Embodiment.ROBOT)
            img = render_depth(res.next_heightfield, res.next_robot, res.next_obstacles, GEOM)
            seen = {o.id: o for o in observe(img, GEOM, sc.obstacles).obstacles}
            floor += [math.hypot(seen[o.id].x - o.x, seen[o.id].y - o.y) for o in res.next_obstacles]
            truth.append({o.id: o for o in res.next_obstacles})
    noise_floor = float(np.mean(floor))
    ref = _one_step_positions(_oracle(), probe, use_eaa=False)
    got = _one_step_positions(learned, probe, use_eaa=False)
    vs_oracle, vs_truth, failed = [], [], 0
    for g, r, t in zip(got, ref, truth):
        if g is None or r is None:
            failed += 1
            continue
        vs_oracle += [math.hypot(g[i].x - r[i].x, g[i].y - r[i].y) for i in r if i in g]
        vs_truth += [math.hypot(g[i].x - t[i].x, g[i].y - t[i].y) for i in t if i in g]
    mae = float(np.mean(vs_oracle)) if vs_oracle else math.inf

    scenarios = [s.scenario for s in suite]
    rep = evaluate(scenarios, learned, replace(W, horizon=LEARNED_HORIZON), True, PARAMS, GEOM)
    e2e_ok = rep.successes >= 5
    mae_ok = mae < 2 * noise_floor
    if not e2e_ok:
        rep.notes.append(f"shortfall: {rep.successes}/10 successes against a target of 5/10")
    if not mae_ok:
        rep.notes.append(f"shortfall: one-step obstacle MAE vs oracle {mae:.3f} cm against "
                         f"2 x noise floor = {2 * noise_floor:.3f} cm")
    rep.notes.append(f"one-step obstacle MAE vs simulator truth {np.mean(vs_truth):.3f} cm; "
                     f"{failed} of {len(got)} one-step predictions failed")
    rep.write_csv(out / "learned_report.csv")
    dt = time.time() - t0
    report("end-to-end, learned (best effort)", e2e_ok and mae_ok,
           f"{rep.successes}/10 successes at horizon {LEARNED_HORIZON} (target >= 5); one-step obstacle MAE vs "
           f"oracle {mae:.3f} cm vs 2 x floor {2 * noise_floor:.3f} cm; training {t_train:.0f}s; "
           f"report {out / 'learned_report.csv'}", dt)
