"""Toy physics world: a 3D point-mass hopper over a flat ground plane.

The body is a 1 kg point mass driven by a commanded force. On the ground it
can push in any direction (downward thrust is ignored); in the air only a
fraction of horizontal authority remains and gravity applies. Scenes hold
capped cylinders and boxes with exact signed distance functions, goal
points, and keyframes. A scripted carrot-chasing PD expert provides the
demonstration data.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

DT = 1.0 / 30.0
GRAVITY = 9.81
MASS = 1.0
V_MAX = 8.0
# Liftoff happens in a single grounded step, so the max hop apex is
# (dt*(A_MAX-g))^2 / 2g; 120 N gives ~0.69 m, enough to clear 0.5 m boxes.
A_MAX = 120.0
AIR_CONTROL = 0.2
GROUND_EPS = 1e-6

STATE_DIM = 6   # (dx, dy, z, vx, vy, vz) in the policy frame
ACTION_DIM = 3  # commanded force (fx, fy, fz)


@dataclass(frozen=True)
class SimState:
    """World-frame position and velocity."""

    p: np.ndarray  # (3,)
    v: np.ndarray  # (3,)

    @staticmethod
    def make(p=(0.0, 0.0, 0.0), v=(0.0, 0.0, 0.0)) -> "SimState":
        return SimState(np.asarray(p, dtype=np.float64).copy(),
                        np.asarray(v, dtype=np.float64).copy())

    def grounded(self) -> bool:
        return self.p[2] <= GROUND_EPS and self.v[2] <= 0.0


def clamp_action(action: np.ndarray) -> np.ndarray:
    return np.clip(np.asarray(action, dtype=np.float64), -A_MAX, A_MAX)


def step(state: SimState, action: np.ndarray, dt: float = DT) -> SimState:
    """Semi-implicit Euler step: velocity update first, then position.

    Grounded: full horizontal authority, thrust only upward, ground
    support cancels penetration. Airborne: vertical force ignored,
    horizontal authority scaled by AIR_CONTROL, gravity applies.
    """
    if not (np.all(np.isfinite(state.p)) and np.all(np.isfinite(state.v))
            and np.all(np.isfinite(action))):
        raise ValueError("non-finite simulation input")
    f = clamp_action(action)
    p = state.p.copy()
    v = state.v.copy()
    if state.grounded():
        acc = np.array([f[0], f[1], max(f[2], 0.0)]) / MASS
        acc[2] -= GRAVITY
        v = v + dt * acc
        if p[2] + dt * v[2] < 0.0:
            v[2] = 0.0
            p[2] = 0.0
    else:
        acc = np.array([AIR_CONTROL * f[0], AIR_CONTROL * f[1], 0.0]) / MASS
        acc[2] = -GRAVITY
        v = v + dt * acc
    speed = np.linalg.norm(v)
    if speed > V_MAX:
        v = v * (V_MAX / speed)
    p = p + dt * v
    if p[2] < 0.0:
        p[2] = 0.0
        if v[2] < 0.0:
            v[2] = 0.0
    return SimState(p, v)


# ---------------------------------------------------------------------------
# scene geometry


@dataclass(frozen=True)
class Cylinder:
    """Capped cylinder standing on the ground; infinite height if height=inf."""

    center: tuple[float, float]
    radius: float
    height: float = math.inf

    def sdf(self, p: np.ndarray) -> float:
        d_xy = math.hypot(p[0] - self.center[0], p[1] - self.center[1]) - self.radius
        if math.isinf(self.height):
            return d_xy
        d_z = abs(p[2] - self.height / 2.0) - self.height / 2.0
        inside = min(max(d_xy, d_z), 0.0)
        outside = math.hypot(max(d_xy, 0.0), max(d_z, 0.0))
        return inside + outside


@dataclass(frozen=True)
class Box:
    """Axis-aligned box given by center and half-extents."""

    center: tuple[float, float, float]
    half_extents: tuple[float, float, float]

    def sdf(self, p: np.ndarray) -> float:
        q = np.abs(np.asarray(p, dtype=np.float64) - self.center) - self.half_extents
        inside = min(q.max(), 0.0)
        outside = float(np.linalg.norm(np.maximum(q, 0.0)))
        return inside + outside


@dataclass
class Scene:
    """Everything guidance costs and task checks read."""

    cylinders: list[Cylinder] = field(default_factory=list)
    boxes: list[Box] = field(default_factory=list)
    goals: list[np.ndarray] = field(default_factory=list)
    keyframes: list[tuple[int, np.ndarray, np.ndarray]] = field(default_factory=list)
    bounds: float = 20.0  # |x|,|y| limit; leaving it fails an episode

    def __post_init__(self):
        for c in self.cylinders:
            if c.radius <= 0 or c.height <= 0:
                raise ValueError("cylinder dimensions must be positive")
        for b in self.boxes:
            if any(h <= 0 for h in b.half_extents):
                raise ValueError("box half-extents must be positive")

    @property
    def obstacles(self) -> list:
        return list(self.cylinders) + list(self.boxes)

    def sdf_j(self, j: int, p: np.ndarray) -> float:
        return self.obstacles[j].sdf(np.asarray(p, dtype=np.float64))

    def sdf(self, p: np.ndarray) -> float:
        obs = self.obstacles
        if not obs:
            return math.inf
        p = np.asarray(p, dtype=np.float64)
        return min(o.sdf(p) for o in obs)

    def in_bounds(self, p: np.ndarray) -> bool:
        return abs(p[0]) <= self.bounds and abs(p[1]) <= self.bounds


# ---------------------------------------------------------------------------
# scripted expert

EXPERT_KP = 8.0
EXPERT_KD = 4.0
MODE_SPEEDS = {"walk": 1.2, "run": 3.0, "jump": 1.6}
JUMP_TRIGGER_RADIUS = 0.45
JUMP_COOLDOWN_STEPS = 20


@dataclass
class ExpertState:
    """Mutable bookkeeping for the scripted expert.

    ``triggers`` are planar points near which jump mode fires a hop;
    ``thrust`` scales the vertical burst so hop heights vary across hops.
    """

    triggers: np.ndarray | None = None  # (n, 2)
    cooldown: int = 0
    thrust: float = 1.0


def expert_policy(state: SimState, goal: np.ndarray, mode: str,
                  rng: np.random.Generator,
                  expert_state: ExpertState | None = None) -> np.ndarray:
    """PD force toward a moving carrot on the line to the goal.

    The carrot leads the body by Kp/Kd-scaled lookahead so the steady-state
    speed matches the mode. Jump mode additionally fires a vertical thrust
    burst when grounded, off cooldown, and near a trigger point (liftoff
    completes in one grounded step, so a single-step burst suffices).
    """
    if mode not in MODE_SPEEDS:
        raise ValueError(f"unknown expert mode '{mode}'")
    speed = MODE_SPEEDS[mode]
    lookahead = speed * EXPERT_KD / EXPERT_KP
    goal = np.asarray(goal, dtype=np.float64)
    to_goal = goal[:2] - state.p[:2]
    dist = np.linalg.norm(to_goal)
    if dist > 1e-9:
        carrot = state.p[:2] + to_goal / dist * min(lookahead, dist)
    else:
        carrot = goal[:2]
    f_xy = EXPERT_KP * (carrot - state.p[:2]) - EXPERT_KD * state.v[:2]
    f = np.array([f_xy[0], f_xy[1], 0.0])
    if mode == "jump" and expert_state is not None and state.grounded():
        if expert_state.cooldown > 0:
            expert_state.cooldown -= 1
        elif expert_state.triggers is not None and len(expert_state.triggers):
            near = np.linalg.norm(expert_state.triggers - state.p[:2], axis=1)
            if near.min() <= JUMP_TRIGGER_RADIUS:
                f[2] = expert_state.thrust * A_MAX
                expert_state.cooldown = JUMP_COOLDOWN_STEPS
                expert_state.thrust = float(rng.uniform(0.75, 1.0))
    return clamp_action(f)


# ---------------------------------------------------------------------------
# policy frame

GLOBAL_STATE_IDX = (0, 1, 2)  # planar displacement and height


def policy_state(state_p: np.ndarray, state_v: np.ndarray,
                 origin_xy: np.ndarray) -> np.ndarray:
    """(dx, dy, z, vx, vy, vz) relative to the window's current planar position."""
    return np.array([
        state_p[0] - origin_xy[0],
        state_p[1] - origin_xy[1],
        state_p[2],
        state_v[0], state_v[1], state_v[2],
    ], dtype=np.float32)


def to_policy_frame(positions: np.ndarray, velocities: np.ndarray,
                    current_index: int) -> tuple[np.ndarray, np.ndarray]:
    """Convert a window of world states to policy-frame vectors.

    Returns (states, origin_xy) where states[j] = (dx, dy, z, v) relative to
    the planar position at ``current_index``; map_root with the same origin
    is the exact inverse on positions.
    """
    positions = np.asarray(positions, dtype=np.float64)
    velocities = np.asarray(velocities, dtype=np.float64)
    origin_xy = positions[current_index, :2].copy()
    out = np.empty((len(positions), STATE_DIM), dtype=np.float32)
    out[:, 0] = positions[:, 0] - origin_xy[0]
    out[:, 1] = positions[:, 1] - origin_xy[1]
    out[:, 2] = positions[:, 2]
    out[:, 3:] = velocities
    return out, origin_xy


def map_root(policy_states: np.ndarray, origin_xy: np.ndarray) -> np.ndarray:
    """Root world positions (x, y, z) recovered from policy-frame states."""
    ps = np.asarray(policy_states, dtype=np.float64)
    out = np.empty((ps.shape[0], 3))
    out[:, 0] = ps[:, 0] + origin_xy[0]
    out[:, 1] = ps[:, 1] + origin_xy[1]
    out[:, 2] = ps[:, 2]
    return out
