"""Downstream task suite: scenes, batched rollouts, metrics, and reports.

Task analogs are desk-scale translations of the originals and are recorded
in each report header: perturbation forces become velocity impulses on the
point mass, and "falling" becomes penetrating an obstacle interior deeper
than 0.1 m or leaving the scene bounds.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import autodiff as ad
from . import dataset as dsmod
from . import rng as rngmod
from . import world
from .controller import ControllerConfig, RollingController, plan_consistency
from .denoiser import Denoiser
from .diffusion import make_schedule
from .guidance import (DEFAULT_C_STATIC, GuidanceSpec, GuidanceTerm,
                       TASK_WEIGHTS)
from .metrics import motion_stat_distance
from .world import DT, V_MAX, Box, Cylinder, Scene, SimState

TASKS = ("waypoint", "forest", "jump", "perturb", "inbetween", "rolling-compare")

GOAL_RADIUS = 0.5
TASK_CLIP = 2.0  # correction cap in the shipped task configs (ledgered)
PENETRATION_LIMIT = 0.1

ANALOG_NOTES = {
    "fall": "humanoid fall (head below 0.2 m) -> penetration deeper than "
            "0.1 m or leaving scene bounds",
    "perturb": "instantaneous 0-3000 N force on a humanoid -> velocity "
               "impulse uniform in [0, 3] m/s every second",
    "jump": "0.3-0.5 m box 1-2 m ahead; cost-only obstacle, cleared when "
            "height stays above the box over its footprint",
}


@dataclass
class EpisodeSetup:
    seed: int
    scene: Scene
    spec: GuidanceSpec
    start: SimState
    goal: np.ndarray | None
    max_steps: int
    keyframes: dict[int, np.ndarray] = field(default_factory=dict)
    impulses: dict[int, np.ndarray] = field(default_factory=dict)
    box: Box | None = None          # jump obstacle for clearance checks
    keyframe_waypoint: bool = False  # retarget waypoint at the next keyframe
    endurance: bool = False          # success = surviving to max_steps


@dataclass
class EpisodeResult:
    seed: int
    success: bool = False
    failure: str | None = None
    time_to_goal: float | None = None
    collisions: int = 0
    steps: int = 0
    sweeps: float = 0.0
    crossed_box: bool = False
    cleared_box: bool = True
    min_box_margin: float | None = None
    keyframe_errors: list[float] = field(default_factory=list)
    plan_change: float | None = None
    track: np.ndarray | None = None

    def record(self) -> dict:
        out = {
            "seed": self.seed,
            "success": bool(self.success),
            "failure": self.failure,
            "time_to_goal": self.time_to_goal,
            "collisions": int(self.collisions),
            "steps": int(self.steps),
            "mean_sweeps": round(float(self.sweeps), 4),
        }
        if self.min_box_margin is not None:
            out["crossed_box"] = bool(self.crossed_box)
            out["cleared_box"] = bool(self.cleared_box)
            out["min_box_margin"] = round(float(self.min_box_margin), 4)
        if self.keyframe_errors:
            out["keyframe_errors"] = [round(float(e), 4) for e in self.keyframe_errors]
        if self.plan_change is not None:
            out["plan_change"] = round(float(self.plan_change), 5)
        return out


def _simulate(model: Denoiser, norm, cc: ControllerConfig,
              episodes: list[EpisodeSetup], seed: int,
              collect_plans: bool = False) -> list[EpisodeResult]:
    """Advance all episodes in lockstep until each finishes."""
    schedule = make_schedule(model.cfg.K, model.cfg.schedule)
    ctl = RollingController(model, schedule, norm, cc,
                            [e.spec for e in episodes],
                            [e.scene for e in episodes], seed=seed,
                            keyframes=[{t: _world_state6(v) for t, v in
                                        e.keyframes.items()} for e in episodes],
                            agent_ids=[e.seed for e in episodes])
    states = [e.start for e in episodes]
    results = [EpisodeResult(seed=e.seed) for e in episodes]
    tracks: list[list[np.ndarray]] = [[_state_row(s)] for s in states]
    plans_hist: list[list[np.ndarray]] = [[] for _ in episodes]
    sweep_sums = np.zeros(len(episodes))
    active = list(range(len(episodes)))

    prev_checks = ad.set_finite_checks(False)
    try:
        step = 0
        while active:
            obs = np.stack([_state_row(states[i]) for i in active])
            info = ctl.advance(obs)
            done_local: list[int] = []
            for local, i in enumerate(active):
                ep, res = episodes[i], results[i]
                sweep_sums[i] += info.sweeps
                if collect_plans:
                    plans_hist[i].append(info.plans[local].copy())
                states[i] = world.step(states[i], info.actions[local])
                if step + 1 in ep.impulses:
                    s = states[i]
                    states[i] = SimState(s.p.copy(), s.v + ep.impulses[step + 1])
                if ep.keyframe_waypoint:
                    _point_waypoint_at_next_keyframe(ep, step + 1)
                tracks[i].append(_state_row(states[i]))
                res.steps = step + 1
                if _update_checks(ep, res, states[i], step + 1):
                    done_local.append(local)
            if done_local:
                keep = [local for local in range(len(active))
                        if local not in done_local]
                active = [active[local] for local in keep]
                if active:
                    ctl.select(np.array(keep))
            step += 1
    finally:
        ad.set_finite_checks(prev_checks)

    for i, res in enumerate(results):
        res.sweeps = sweep_sums[i] / max(res.steps, 1)
        res.track = np.asarray(tracks[i], dtype=np.float32)
        if collect_plans and len(plans_hist[i]) >= 2:
            res.plan_change = plan_consistency(plans_hist[i])
    return results


def _state_row(s: SimState) -> np.ndarray:
    return np.concatenate([s.p, s.v])


def _world_state6(v) -> np.ndarray:
    return np.asarray(v, dtype=np.float32).reshape(6)


def _point_waypoint_at_next_keyframe(ep: EpisodeSetup, step: int) -> None:
    upcoming = [t for t in sorted(ep.keyframes) if t >= step]
    target = ep.keyframes[upcoming[0]] if upcoming else ep.keyframes[max(ep.keyframes)]
    for term in ep.spec.terms:
        if term.kind == "waypoint":
            term.params["g"] = np.asarray(target[:2], dtype=np.float64)


def _update_checks(ep: EpisodeSetup, res: EpisodeResult, s: SimState,
                   step: int) -> bool:
    """Apply failure/success rules; True when the episode is finished."""
    p = s.p
    sdf = ep.scene.sdf(p)
    if sdf < -PENETRATION_LIMIT:
        res.collisions += 1
        res.failure = "collision"
        return True
    if not ep.scene.in_bounds(p):
        res.failure = "bounds"
        return True
    if np.linalg.norm(s.v) > 2 * V_MAX:
        res.failure = "speed"
        return True
    if ep.box is not None:
        b = ep.box
        inside = (abs(p[0] - b.center[0]) <= b.half_extents[0]
                  and abs(p[1] - b.center[1]) <= b.half_extents[1])
        if inside:
            res.crossed_box = True
            margin = p[2] - 2 * b.half_extents[2]
            res.min_box_margin = (margin if res.min_box_margin is None
                                  else min(res.min_box_margin, margin))
            if margin <= 0:
                res.cleared_box = False
    if step in ep.keyframes:
        res.keyframe_errors.append(
            float(np.linalg.norm(p - ep.keyframes[step][:3])))
    if ep.goal is not None and np.linalg.norm(p[:2] - ep.goal[:2]) < GOAL_RADIUS:
        if ep.box is None or (res.crossed_box and res.cleared_box):
            res.success = True
        res.time_to_goal = step * DT
        return True
    if step >= ep.max_steps:
        if ep.endurance and res.failure is None:
            res.success = True
        return True
    return False


# ---------------------------------------------------------------------------
# task builders


def _weights(task: str, guided: bool) -> dict[str, float]:
    return dict(TASK_WEIGHTS[task]) if guided else {}


def build_waypoint(seed: int, guided: bool = True) -> EpisodeSetup:
    gen = rngmod.stream("task", "waypoint", seed)
    ang = gen.uniform(0, 2 * np.pi)
    dist = gen.uniform(5.0, 8.0)
    goal = dist * np.array([np.cos(ang), np.sin(ang)])
    w = _weights("forest", guided)
    spec = GuidanceSpec(terms=[GuidanceTerm("waypoint", w.get("waypoint", 0.0),
                                            {"g": goal})] if guided else [],
                        clip=TASK_CLIP)
    return EpisodeSetup(seed=seed, scene=Scene(), spec=spec,
                        start=SimState.make(), goal=goal,
                        max_steps=int(30 / DT))


def build_forest(seed: int, guided: bool = True) -> EpisodeSetup:
    """15 cylinder pillars in an 8 x 9 m field between start and goal."""
    gen = rngmod.stream("task", "forest", seed)
    start_p = np.array([0.0, -1.0, 0.0])
    goal = np.array([0.0, 10.0])
    pillars = []
    while len(pillars) < 15:
        x = gen.uniform(-4.0, 4.0)
        y = gen.uniform(0.0, 9.0)
        r = gen.uniform(0.25, 0.45)
        if np.hypot(x - start_p[0], y - start_p[1]) < r + 0.8:
            continue
        if np.hypot(x - goal[0], y - goal[1]) < r + 0.8:
            continue
        pillars.append(Cylinder((x, y), r))
    scene = Scene(cylinders=pillars)
    w = _weights("forest", guided)
    terms = []
    if guided:
        terms = [GuidanceTerm("static-obstacle", w["static-obstacle"],
                              {"c": DEFAULT_C_STATIC}),
                 GuidanceTerm("waypoint", w["waypoint"], {"g": goal})]
    return EpisodeSetup(seed=seed, scene=scene,
                        spec=GuidanceSpec(terms=terms, clip=TASK_CLIP),
                        start=SimState(start_p, np.zeros(3)), goal=goal,
                        max_steps=int(30 / DT))


def build_jump(seed: int, guided: bool = True) -> EpisodeSetup:
    """A 0.3-0.5 m tall box 1-2 m ahead; goal on the far side."""
    gen = rngmod.stream("task", "jump", seed)
    height = gen.uniform(0.3, 0.5)
    dist = gen.uniform(1.0, 2.0)
    box = Box(center=(dist + 0.25, 0.0, height / 2),
              half_extents=(0.25, 2.0, height / 2))
    goal = np.array([dist + 3.0, 0.0])
    w = _weights("jump", guided)
    terms = []
    if guided:
        terms = [GuidanceTerm("penetration-only", w["penetration-only"],
                              {"c": DEFAULT_C_STATIC}),
                 GuidanceTerm("waypoint", w["waypoint"], {"g": goal})]
    return EpisodeSetup(seed=seed, scene=Scene(boxes=[box]),
                        spec=GuidanceSpec(terms=terms, clip=TASK_CLIP),
                        start=SimState.make(), goal=goal, box=box,
                        max_steps=int(10 / DT))


def build_perturb(seed: int, guided: bool = True,
                  horizon: int = 32) -> EpisodeSetup:
    """30 s walk with a velocity impulse every second."""
    gen = rngmod.stream("task", "perturb", seed)
    steps = int(30 / DT)
    impulses = {}
    per = int(round(1.0 / DT))
    for k in range(per, steps, per):
        mag = gen.uniform(0.0, 3.0)
        ang = gen.uniform(0, 2 * np.pi)
        impulses[k] = np.array([mag * np.cos(ang), mag * np.sin(ang), 0.0])
    w = _weights("walk-perturb", guided)
    terms = []
    if guided:
        keyframes = {i: [1.2, 0.0] for i in range(horizon)}
        terms = [GuidanceTerm("task-space", w["task-space"],
                              {"selector": "velocity", "keyframes": keyframes})]
    scene = Scene(bounds=60.0)
    return EpisodeSetup(seed=seed, scene=scene,
                        spec=GuidanceSpec(terms=terms, clip=TASK_CLIP),
                        start=SimState.make(), goal=None, impulses=impulses,
                        max_steps=steps, endurance=True)


def build_inbetween(seed: int, data: dsmod.Dataset,
                    guided: bool = True) -> EpisodeSetup:
    """Nine keyframes: three per source rollout at 1 s intervals, chained."""
    gen = rngmod.stream("task", "inbetween", seed)
    per = int(round(1.0 / DT))
    usable = [ep for ep in data.episodes if len(ep) > 3 * per + 1]
    picks = gen.choice(len(usable), size=3, replace=False)
    keyframes: dict[int, np.ndarray] = {}
    anchor = np.zeros(3)
    t_abs = 0
    for ep_idx in picks:
        ep = usable[int(ep_idx)]
        base = ep.states[0, :3]
        for j in range(1, 4):
            t_abs += per
            kf = ep.states[j * per].astype(np.float64).copy()
            kf[:3] = anchor + (kf[:3] - base)
            keyframes[t_abs] = kf
        anchor = keyframes[t_abs][:3].copy()
    w = _weights("inbetween", guided)
    terms = []
    if guided:
        terms = [GuidanceTerm("waypoint", w["waypoint"],
                              {"g": keyframes[per][:2].copy()})]
    return EpisodeSetup(seed=seed, scene=Scene(bounds=40.0),
                        spec=GuidanceSpec(terms=terms, clip=TASK_CLIP),
                        start=SimState.make(), goal=None,
                        keyframes=keyframes, keyframe_waypoint=guided,
                        max_steps=t_abs + per // 2, endurance=True)


BUILDERS = {
    "waypoint": build_waypoint,
    "forest": build_forest,
    "jump": build_jump,
    "perturb": build_perturb,
}


# ---------------------------------------------------------------------------
# reports


def sha256_file(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def sha256_json(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def _downsample_track(track: np.ndarray, every: int = 5) -> list[list[float]]:
    pts = track[::every, :3]
    return [[round(float(v), 3) for v in p] for p in pts]


def _aggregate(task: str, results: list[EpisodeResult]) -> dict:
    n = len(results)
    succ = sum(r.success for r in results)
    coll = sum(r.failure == "collision" for r in results)
    agg = {
        "episodes": n,
        "success_rate": round(succ / n, 4),
        "collision_failure_rate": round(coll / n, 4),
        "failure_counts": {},
        "mean_sweeps_per_step": round(float(np.mean([r.sweeps for r in results])), 3),
    }
    for r in results:
        if r.failure:
            agg["failure_counts"][r.failure] = agg["failure_counts"].get(r.failure, 0) + 1
    times = [r.time_to_goal for r in results if r.success and r.time_to_goal]
    if times:
        agg["mean_time_to_goal_s"] = round(float(np.mean(times)), 3)
    kf_errors = [e for r in results for e in r.keyframe_errors]
    if kf_errors:
        agg["mean_keyframe_root_error_m"] = round(float(np.mean(kf_errors)), 4)
    margins = [r.min_box_margin for r in results if r.min_box_margin is not None]
    if margins:
        agg["crossed_rate"] = round(float(np.mean(
            [r.crossed_box for r in results])), 4)
    changes = [r.plan_change for r in results if r.plan_change is not None]
    if changes:
        agg["plan_consistency"] = round(float(np.mean(changes)), 5)
    return agg


def _scene_dict(scene: Scene) -> dict:
    return {
        "cylinders": [[c.center[0], c.center[1], c.radius,
                       None if np.isinf(c.height) else c.height]
                      for c in scene.cylinders],
        "boxes": [[*b.center, *b.half_extents] for b in scene.boxes],
        "bounds": scene.bounds,
    }


def make_report(task: str, results: list[EpisodeResult], seed: int,
                checkpoint_hash: str, config_hash: str, episodes: list[EpisodeSetup],
                extra_aggregates: dict | None = None) -> dict:
    agg = _aggregate(task, results)
    if extra_aggregates:
        agg.update(extra_aggregates)
    report = {
        "version": 1,
        "task": task,
        "code_version": __version__,
        "seed": seed,
        "config_hash": config_hash,
        "checkpoint_hash": checkpoint_hash,
        "analog_notes": ANALOG_NOTES,
        "aggregates": agg,
        "records": [r.record() for r in results],
        "tracks_xyz": [_downsample_track(r.track) for r in results],
        "scenes": [_scene_dict(e.scene) for e in episodes],
        "goals": [None if e.goal is None else
                  [round(float(v), 3) for v in e.goal[:2]] for e in episodes],
    }
    return report


def write_report(report: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(report, sort_keys=True, indent=1) + "\n")


# ---------------------------------------------------------------------------
# entry point


def run_task(task: str, checkpoint: str | Path, episodes: int = 50,
             seed: int = 0, guided: bool = True, mode: str | None = None,
             dataset_path: str | Path | None = None, config_hash: str = "",
             controller: ControllerConfig | None = None, log=None) -> dict:
    """Evaluate one task; returns the report dict."""
    if task not in TASKS:
        raise ValueError(f"unknown task '{task}' (choose from {TASKS})")
    model, norm, _, _ = Denoiser.load(checkpoint)
    ckpt_hash = sha256_file(checkpoint)
    cc = controller or ControllerConfig()
    if mode:
        cc = dataclasses.replace(cc, mode=mode)
    seeds = [seed * 10000 + i for i in range(episodes)]

    if task == "rolling-compare":
        return _run_rolling_compare(model, norm, cc, seeds, seed,
                                    ckpt_hash, config_hash, log)

    if task == "inbetween":
        if dataset_path is None:
            raise ValueError("inbetween task needs the dataset for keyframes")
        data = dsmod.load(dataset_path)
        setups = [build_inbetween(s, data, guided) for s in seeds]
    elif task == "perturb":
        setups = [build_perturb(s, guided, horizon=model.cfg.H) for s in seeds]
    else:
        setups = [BUILDERS[task](s, guided) for s in seeds]

    results = _simulate(model, norm, cc, setups, seed)
    extra = {}
    if task == "perturb":
        if dataset_path is None:
            raise ValueError("perturb task needs the dataset for the FID analog")
        data = dsmod.load(dataset_path)
        ref = [ep.states for ep in data.episodes]
        gen_tracks = [r.track for r in results]
        half = len(ref) // 2
        self_d = motion_stat_distance(ref[:half], ref[half:])
        d = motion_stat_distance(gen_tracks, ref)
        extra = {
            "motion_stat_distance": round(float(d), 6),
            "dataset_self_distance": round(float(self_d), 6),
            "distance_ratio": round(float(d / max(self_d, 1e-12)), 3),
            "impulse_failure_rate": round(float(np.mean(
                [r.failure is not None for r in results])), 4),
        }
    report = make_report(task, results, seed, ckpt_hash, config_hash, setups)
    report["guided"] = bool(guided)
    report["mode"] = cc.mode
    if extra:
        report["aggregates"].update(extra)
    if log:
        log(f"{task}: {report['aggregates']}")
    return report


def _run_rolling_compare(model, norm, cc, seeds, seed, ckpt_hash,
                         config_hash, log) -> dict:
    """Jump task on paired seeds: rolling vs full-replan."""
    half = seeds[:max(len(seeds) // 2, 1)]
    out = {}
    for mode in ("rolling", "full-replan"):
        setups = [build_jump(s, guided=True) for s in half]
        results = _simulate(model, norm, dataclasses.replace(cc, mode=mode),
                            setups, seed, collect_plans=True)
        out[mode] = {
            "success_rate": float(np.mean([r.success for r in results])),
            "plan_consistency": float(np.mean(
                [r.plan_change for r in results if r.plan_change is not None])),
            "mean_sweeps_per_step": float(np.mean([r.sweeps for r in results])),
            "records": [r.record() for r in results],
        }
    agg = {
        "episodes": len(half),
        "modes": {m: {k: round(v, 5) for k, v in out[m].items() if k != "records"}
                  for m in out},
        "consistency_improved": out["rolling"]["plan_consistency"]
        < out["full-replan"]["plan_consistency"],
        "sweep_reduction": round(
            1.0 - out["rolling"]["mean_sweeps_per_step"]
            / out["full-replan"]["mean_sweeps_per_step"], 4),
        "success_drop_points": round(
            100 * (out["full-replan"]["success_rate"]
                   - out["rolling"]["success_rate"]), 2),
    }
    report = {
        "version": 1,
        "task": "rolling-compare",
        "code_version": __version__,
        "seed": seed,
        "config_hash": config_hash,
        "checkpoint_hash": ckpt_hash,
        "analog_notes": ANALOG_NOTES,
        "aggregates": agg,
        "records": {m: out[m]["records"] for m in out},
    }
    if log:
        log(f"rolling-compare: {agg}")
    return report
