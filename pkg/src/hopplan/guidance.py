"""Inference-time steering: guidance costs, their gradients, and inpainting.

Costs are built as autodiff graphs over the predicted clean states, through
the de-normalization and frame maps, so one backward pass yields the exact
gradient with respect to the (normalized) tokens the sampler manipulates.
Guidance touches state tokens only; actions follow through the attention
pathway over subsequent reverse steps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dataset import NormStats
from .world import Box, Cylinder, Scene

COST_KINDS = ("static-obstacle", "penetration-only", "waypoint",
              "dynamic-agents", "task-space")

# Appendix defaults: per-task weights for each cost term.
TASK_WEIGHTS = {
    "forest": {"static-obstacle": 1.0, "waypoint": 0.175},
    "jump": {"penetration-only": 1.0, "waypoint": 0.06},
    "dynamic-forest": {"static-obstacle": 1.0, "dynamic-agents": 1.0,
                       "waypoint": 0.175},
    "reaching": {"task-space": 0.2},
    "gamepad": {"task-space": 0.1},
    "walk-perturb": {"task-space": 0.1},
    "inbetween": {"waypoint": 0.08},
}
DEFAULT_C_STATIC = 5.0
DEFAULT_C_AGENTS = 2.0


@dataclass
class GuidanceTerm:
    kind: str
    weight: float
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in COST_KINDS:
            raise ValueError(f"unknown cost kind '{self.kind}'")
        if self.weight < 0:
            raise ValueError("guidance weights must be >= 0")


@dataclass
class GuidanceSpec:
    terms: list[GuidanceTerm] = field(default_factory=list)
    clip: float = 0.5  # per-token correction norm cap, policy-state units

    @staticmethod
    def from_config(entries: list[dict], clip: float = 0.5) -> "GuidanceSpec":
        terms = [GuidanceTerm(kind=e["kind"], weight=float(e["weight"]),
                              params=dict(e.get("params", {}))) for e in entries]
        return GuidanceSpec(terms=terms, clip=clip)


# ---------------------------------------------------------------------------
# in-graph signed distance functions


def _sq(t: Tensor) -> Tensor:
    return ad.mul(t, t)


def _axis_dist(pos: Tensor, axis: int, center: float) -> Tensor:
    """|p_axis - center| for each row of pos (n, 3), as an (n,) tensor."""
    comp = ad.slice_axis(pos, -1, axis, axis + 1)
    shifted = ad.add(comp, ad.constant(np.float32(-center)))
    return ad.sqrt(ad.square_norm(shifted, axis=-1))


def _sdf_cylinder(pos: Tensor, cyl: Cylinder) -> Tensor:
    """SDF of each row of pos (n, 3) to a capped cylinder, as an (n,) tensor."""
    xy = ad.slice_axis(pos, -1, 0, 2)
    center = ad.constant(np.asarray(cyl.center, dtype=np.float32))
    d_xy = ad.add(ad.sqrt(ad.square_norm(ad.add(xy, ad.neg(center)), axis=-1)),
                  ad.constant(np.float32(-cyl.radius)))
    if math.isinf(cyl.height):
        return d_xy
    half = cyl.height / 2.0
    d_z = ad.add(_axis_dist(pos, 2, half), ad.constant(np.float32(-half)))
    zero = ad.constant(np.zeros(d_xy.shape, dtype=np.float32))
    inside = ad.minimum(ad.maximum(d_xy, d_z), zero)
    outside = ad.sqrt(ad.add(_sq(ad.maximum(d_xy, zero)), _sq(ad.maximum(d_z, zero))))
    return ad.add(inside, outside)


def _sdf_box(pos: Tensor, box: Box) -> Tensor:
    q = []
    for axis in range(3):
        q.append(ad.add(_axis_dist(pos, axis, box.center[axis]),
                        ad.constant(np.float32(-box.half_extents[axis]))))
    qx, qy, qz = q
    qmax = ad.maximum(ad.maximum(qx, qy), qz)
    zero = ad.constant(np.zeros(qmax.shape, dtype=np.float32))
    inside = ad.minimum(qmax, zero)
    outside = ad.sqrt(ad.add(ad.add(_sq(ad.maximum(qx, zero)),
                                    _sq(ad.maximum(qy, zero))),
                             _sq(ad.maximum(qz, zero))))
    return ad.add(inside, outside)


def sdf_graph(pos: Tensor, obstacle) -> Tensor:
    if isinstance(obstacle, Cylinder):
        return _sdf_cylinder(pos, obstacle)
    if isinstance(obstacle, Box):
        return _sdf_box(pos, obstacle)
    raise TypeError(f"no SDF graph for {type(obstacle).__name__}")


# ---------------------------------------------------------------------------
# cost functions (each is >= 0 and exactly 0 on its satisfying set)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else ad.constant(np.asarray(x, dtype=np.float32))


def cost_static(positions, scene: Scene, c: float = DEFAULT_C_STATIC,
                clip_outside: bool = False) -> Tensor:
    """sum_j sum_t exp(-c * SDF_j(p_t)); clipped variant penalizes penetration only."""
    pos = _as_tensor(positions)
    if not scene.obstacles:
        return ad.constant(np.float32(0.0))
    total = None
    for obstacle in scene.obstacles:
        d = sdf_graph(pos, obstacle)
        if clip_outside:
            d = ad.minimum(d, ad.constant(np.zeros(d.shape, dtype=np.float32)))
        term = ad.sum_all(ad.exp(ad.scale(d, -c)))
        total = term if total is None else ad.add(total, term)
    return total


def cost_penetration(positions, scene: Scene, c: float = DEFAULT_C_STATIC) -> Tensor:
    return cost_static(positions, scene, c=c, clip_outside=True)


def cost_waypoint(positions, g) -> Tensor:
    """sum_t ||P_root(s_t) - g||^2 over the planar root position."""
    pos = _as_tensor(positions)
    g = np.asarray(g, dtype=np.float32).reshape(-1)[:2]
    xy = ad.slice_axis(pos, -1, 0, 2)
    return ad.sum_all(ad.square_norm(ad.add(xy, ad.constant(-g)), axis=-1))


def cost_dynamic(positions, plans_others: list[np.ndarray],
                 c: float = DEFAULT_C_AGENTS) -> Tensor:
    """sum_{j != i} sum_t exp(-c * ||p^i_t - p^j_t||^2), time-aligned plans."""
    pos = _as_tensor(positions)
    n = pos.shape[0]
    total = ad.constant(np.float32(0.0))
    for plan in plans_others:
        plan = np.asarray(plan, dtype=np.float32)
        if plan.shape[0] != n:
            raise ValueError(f"plan length {plan.shape[0]} != horizon {n}")
        xy = ad.slice_axis(pos, -1, 0, 2)
        diff = ad.add(xy, ad.constant(-plan[:, :2]))
        total = ad.add(total, ad.sum_all(ad.exp(ad.scale(
            ad.square_norm(diff, axis=-1), -c))))
    return total


SELECTORS = {"position": (0, 3), "height": (2, 3), "velocity": (3, 5),
              "position_xy": (0, 2)}


def cost_task_space(states, keyframes: dict[int, np.ndarray],
                    selector: str = "position") -> Tensor:
    """sum_{t in T} ||P_x(s_t) - g_t||^2 on selected state coordinates.

    ``states`` are world-frame (n, 6) rows aligned with plan offsets 0..n-1;
    keyframes maps offset -> target vector for the selector's coordinates
    (targets may cover a prefix of the selection, e.g. xy of a position).
    """
    if not keyframes:
        raise ValueError("task-space cost needs at least one keyframe")
    if selector not in SELECTORS:
        raise ValueError(f"unknown selector '{selector}'")
    lo, hi = SELECTORS[selector]
    st = _as_tensor(states)
    total = None
    for offset, target in sorted(keyframes.items()):
        if not (0 <= offset < st.shape[0]):
            raise ValueError(f"keyframe offset {offset} outside horizon")
        target = np.asarray(target, dtype=np.float32).reshape(-1)
        row = ad.slice_axis(st, 0, offset, offset + 1)
        sel = ad.slice_axis(row, -1, lo, min(lo + len(target), hi))
        term = ad.square_norm(ad.add(sel, ad.constant(-target[None, :])), axis=None)
        total = term if total is None else ad.add(total, term)
    return total


# ---------------------------------------------------------------------------
# guided update and inpainting


@dataclass
class GuidanceContext:
    """Everything needed to evaluate costs for one agent's plan."""

    scene: Scene
    norm: NormStats
    origin_xy: np.ndarray
    plans_others: list[np.ndarray] = field(default_factory=list)


def _world_states_graph(x0_states: Tensor, ctx: GuidanceContext) -> Tensor:
    """(H, 6) normalized policy tokens -> world-frame (x, y, z, vx, vy, vz)."""
    denorm = ad.add(ad.mul(x0_states, ad.constant(ctx.norm.state_std)),
                    ad.constant(ctx.norm.state_mean))
    shift = np.zeros(6, dtype=np.float32)
    shift[0], shift[1] = ctx.origin_xy[0], ctx.origin_xy[1]
    return ad.add(denorm, ad.constant(shift))


def _term_cost(term: GuidanceTerm, world_states: Tensor, ctx: GuidanceContext) -> Tensor:
    positions = ad.slice_axis(world_states, -1, 0, 3)
    kind = term.kind
    p = term.params
    if kind == "static-obstacle":
        return cost_static(positions, ctx.scene, c=p.get("c", DEFAULT_C_STATIC),
                           clip_outside=bool(p.get("clip_outside", False)))
    if kind == "penetration-only":
        return cost_penetration(positions, ctx.scene, c=p.get("c", DEFAULT_C_STATIC))
    if kind == "waypoint":
        return cost_waypoint(positions, p["g"])
    if kind == "dynamic-agents":
        return cost_dynamic(positions, ctx.plans_others, c=p.get("c", DEFAULT_C_AGENTS))
    if kind == "task-space":
        keyframes = {int(k): np.asarray(v, dtype=np.float32)
                     for k, v in p["keyframes"].items()}
        return cost_task_space(world_states, keyframes,
                               selector=p.get("selector", "position"))
    raise ValueError(f"unknown cost kind '{kind}'")


def guidance_gradient(x0_states: np.ndarray, spec: GuidanceSpec,
                      ctx: GuidanceContext) -> tuple[np.ndarray, dict[str, float], int]:
    """Weighted cost gradient w.r.t. the normalized state tokens.

    Returns (gradient, per-term cost values, skipped-term count). Terms
    whose gradient comes back non-finite are skipped and counted.
    """
    grad = np.zeros_like(x0_states, dtype=np.float32)
    costs: dict[str, float] = {}
    skipped = 0
    active = [t for t in spec.terms if t.weight > 0]
    if not active:
        return grad, costs, 0
    for term in active:
        leaf = ad.parameter(x0_states.copy())
        world = _world_states_graph(leaf, ctx)
        cost = _term_cost(term, world, ctx)
        costs[term.kind] = float(cost.data)
        try:
            ad.backward(cost)
        except ad.NonFiniteError:
            skipped += 1
            continue
        g = leaf.grad
        if g is None or not np.all(np.isfinite(g)):
            skipped += 1
            continue
        grad += term.weight * g
    return grad, costs, skipped


def guided_update(x0_states: np.ndarray, levels: np.ndarray, spec: GuidanceSpec,
                  ctx: GuidanceContext,
                  alpha_bar: np.ndarray | None = None
                  ) -> tuple[np.ndarray, dict[str, float], int]:
    """x0' = x0 - sum_terms w * s(k) * dG/dx0, clipped per token.

    s(k) = 1 - alpha_bar[k] scales the correction with the token's noise
    level, matching classifier guidance's posterior-variance weighting: the
    signal diminishes as k -> 0, so nearly clean tokens keep their
    dynamically consistent values while noisy ones absorb the steering.
    Level-0 rows are never touched. With ``alpha_bar`` omitted the scale is
    1 for every noisy token (the unscaled form).
    """
    levels = np.asarray(levels)
    grad, costs, skipped = guidance_gradient(x0_states, spec, ctx)
    correction = -grad
    if alpha_bar is not None:
        scale = (1.0 - alpha_bar[levels]).astype(np.float32)[:, None]
        correction = correction * scale
    if spec.clip > 0:
        norms = np.linalg.norm(correction, axis=-1, keepdims=True)
        factor = np.minimum(1.0, spec.clip / np.maximum(norms, 1e-12))
        correction = correction * factor
    correction[levels == 0] = 0.0
    return (x0_states + correction).astype(np.float32), costs, skipped


@dataclass
class Keyframe:
    """A pinned state at a window offset; coords is a boolean mask over dims."""

    offset: int
    value: np.ndarray               # normalized policy-frame state (6,)
    coords: np.ndarray | None = None  # None = full keyframe


def apply_inpainting(states: np.ndarray, k_s: np.ndarray,
                     keyframes: list[Keyframe], horizon: int,
                     n_history: int) -> tuple[np.ndarray, np.ndarray]:
    """Overwrite keyframe tokens and pin full keyframes at level 0.

    Offsets are plan offsets in (0, horizon]; partial keyframes overwrite
    only the selected coordinates and keep the token's level so the rest
    still evolves under denoising. Called before every reverse step.
    """
    states = states.copy()
    k_s = k_s.copy()
    for kf in keyframes:
        if not (0 < kf.offset <= horizon):
            raise ValueError(f"keyframe offset {kf.offset} outside (0, {horizon}]")
        j = n_history + kf.offset
        if kf.coords is None:
            states[j] = kf.value
            k_s[j] = 0
        else:
            mask = np.asarray(kf.coords, dtype=bool)
            states[j, mask] = np.asarray(kf.value, dtype=np.float32)[mask]
    return states, k_s
