"""Cost values, gradients against finite differences, and inpainting."""

import numpy as np
import pytest

from hopplan import autodiff as ad
from hopplan import rng as rngmod
from hopplan.dataset import NormStats
from hopplan.guidance import (GuidanceContext, GuidanceSpec, GuidanceTerm,
                              Keyframe, apply_inpainting, cost_dynamic,
                              cost_static, cost_task_space, cost_waypoint,
                              guidance_gradient, guided_update, sdf_graph)
from hopplan.world import Box, Cylinder, Scene


def identity_norm():
    return NormStats(state_mean=np.zeros(6, np.float32),
                     state_std=np.ones(6, np.float32),
                     action_mean=np.zeros(3, np.float32),
                     action_std=np.ones(3, np.float32))


def ctx_for(scene=None, plans=()):
    return GuidanceContext(scene=scene or Scene(), norm=identity_norm(),
                           origin_xy=np.zeros(2), plans_others=list(plans))


# -- cost values --


def test_static_cost_no_obstacles_zero():
    pos = np.zeros((4, 3), dtype=np.float32)
    assert float(cost_static(pos, Scene()).data) == 0.0


def test_static_cost_on_surface_contributes_one():
    scene = Scene(cylinders=[Cylinder((0, 0), 1.0)])
    pos = np.array([[1.0, 0.0, 0.0]], dtype=np.float32)
    assert float(cost_static(pos, scene, c=2.0).data) == pytest.approx(1.0)


def test_static_cost_two_states_arithmetic():
    scene = Scene(cylinders=[Cylinder((0, 0), 1.0)])
    pos = np.array([[1.5, 0, 0], [2.0, 0, 0]], dtype=np.float32)  # SDF 0.5, 1.0
    expected = np.exp(-1.0) + np.exp(-2.0)
    assert float(cost_static(pos, scene, c=2.0).data) == pytest.approx(expected,
                                                                       rel=1e-5)


def test_static_cost_clip_outside_zero_when_clear():
    scene = Scene(boxes=[Box((0, 0, 0.2), (0.5, 0.5, 0.2))])
    pos = np.array([[3.0, 0, 0], [0.0, 3.0, 0]], dtype=np.float32)
    clipped = float(cost_static(pos, scene, c=2.0, clip_outside=True).data)
    assert clipped == pytest.approx(len(pos) * 1.0)  # exp(0) per clear state
    inside = np.array([[0.0, 0.0, 0.2]], dtype=np.float32)
    assert float(cost_static(inside, scene, c=2.0, clip_outside=True).data) > 1.0


def test_waypoint_cost_values():
    g = np.array([1.0, 2.0])
    pos = np.tile(np.array([[1.0, 2.0, 0.0]], dtype=np.float32), (5, 1))
    assert float(cost_waypoint(pos, g).data) == 0.0
    pos1 = np.array([[2.0, 2.0, 0.0]], dtype=np.float32)
    assert float(cost_waypoint(pos1, g).data) == pytest.approx(1.0)
    H = 8
    posH = np.tile(np.array([[1.5, 2.0, 0.0]], dtype=np.float32), (H, 1))
    assert float(cost_waypoint(posH, g).data) == pytest.approx(0.25 * H)


def test_dynamic_cost_values():
    pos = np.zeros((3, 3), dtype=np.float32)
    assert float(cost_dynamic(pos, []).data) == 0.0
    same = [np.zeros((3, 3))]
    assert float(cost_dynamic(pos[:1], [np.zeros((1, 3))], c=1.0).data) == pytest.approx(1.0)
    plan = np.zeros((32, 3))
    plan[:, 0] = 1.0
    me = np.zeros((32, 3), dtype=np.float32)
    assert float(cost_dynamic(me, [plan], c=1.0).data) == pytest.approx(
        32 * np.exp(-1.0), rel=1e-5)
    with pytest.raises(ValueError):
        cost_dynamic(me, [np.zeros((5, 3))])


def test_task_space_cost_values():
    states = np.zeros((6, 6), dtype=np.float32)
    states[:, 3] = 1.0  # vx
    kf = {2: np.array([1.0, 0.0])}
    assert float(cost_task_space(states, kf, "velocity").data) == 0.0
    kf_err = {2: np.array([0.0, 0.0])}
    assert float(cost_task_space(states, kf_err, "velocity").data) == pytest.approx(1.0)
    kf2 = {1: np.array([0.3]), 4: np.array([0.4])}
    st = np.zeros((6, 6), dtype=np.float32)
    assert float(cost_task_space(st, kf2, "height").data) == pytest.approx(0.25)
    with pytest.raises(ValueError):
        cost_task_space(st, {}, "height")
    with pytest.raises(ValueError):
        cost_task_space(st, {99: np.zeros(1)}, "height")


def test_all_costs_nonnegative_random():
    gen = rngmod.stream("costs", 0)
    scene = Scene(cylinders=[Cylinder((1, 1), 0.5, 1.0)],
                  boxes=[Box((-1, 0, 0.25), (0.4, 0.4, 0.25))])
    for _ in range(20):
        pos = gen.uniform(-3, 3, size=(8, 3)).astype(np.float32)
        pos[:, 2] = np.abs(pos[:, 2])
        assert float(cost_static(pos, scene).data) >= 0.0
        assert float(cost_waypoint(pos, [0, 0]).data) >= 0.0


# -- sdf graph vs world sdf --


def test_sdf_graph_matches_world_sdf():
    gen = rngmod.stream("sdfg", 0)
    shapes = [Cylinder((0.5, -0.5), 0.7, 1.2), Cylinder((0, 0), 1.0),
              Box((1.0, 0.5, 0.3), (0.5, 0.3, 0.3))]
    pts = gen.uniform(-2.5, 2.5, size=(50, 3)).astype(np.float32)
    pts[:, 2] = np.abs(pts[:, 2])
    for shape in shapes:
        graph_vals = sdf_graph(ad.constant(pts), shape).data
        for i, p in enumerate(pts):
            assert graph_vals[i] == pytest.approx(shape.sdf(p.astype(np.float64)),
                                                  abs=1e-4)


# -- gradients: finite-difference oracle for every cost kind --


def fd_grad(f, x, eps=1e-3):
    g = np.zeros_like(x, dtype=np.float64)
    for idx in np.ndindex(*x.shape):
        xp = x.copy()
        xp[idx] += eps
        xm = x.copy()
        xm[idx] -= eps
        g[idx] = (f(xp) - f(xm)) / (2 * eps)
    return g


@pytest.mark.parametrize("kind,params,scene,plans", [
    ("static-obstacle", {"c": 2.0}, Scene(cylinders=[Cylinder((1.0, 0.5), 0.8)]), []),
    ("static-obstacle", {"c": 2.0, "clip_outside": True},
     Scene(boxes=[Box((0.5, 0.0, 0.3), (0.6, 0.6, 0.3))]), []),
    ("penetration-only", {"c": 3.0},
     Scene(boxes=[Box((0.0, 0.0, 0.3), (0.8, 0.8, 0.3))]), []),
    ("waypoint", {"g": [2.0, -1.0]}, Scene(), []),
    ("dynamic-agents", {"c": 1.5}, Scene(), [np.linspace(0, 1, 18).reshape(6, 3)]),
    ("task-space", {"selector": "velocity", "keyframes": {2: [1.0, 0.5]}},
     Scene(), []),
    ("task-space", {"selector": "height", "keyframes": {1: [0.4], 3: [0.2]}},
     Scene(), []),
    ("task-space", {"selector": "position", "keyframes": {4: [1.0, 1.0, 0.5]}},
     Scene(), []),
])
def test_guidance_gradient_matches_finite_differences(kind, params, scene, plans):
    gen = rngmod.stream("gfd", kind, len(params))
    x0 = gen.uniform(-1.5, 1.5, size=(6, 6)).astype(np.float32)
    x0[:, 2] = np.abs(x0[:, 2]) + 0.3  # keep points off SDF kinks
    spec = GuidanceSpec(terms=[GuidanceTerm(kind=kind, weight=1.0, params=params)])
    ctx = ctx_for(scene, plans)
    grad, costs, skipped = guidance_gradient(x0, spec, ctx)
    assert skipped == 0

    from hopplan.guidance import _term_cost, _world_states_graph

    def f(x):
        leaf = ad.constant(x.astype(np.float32))
        return float(_term_cost(spec.terms[0], _world_states_graph(leaf, ctx),
                                ctx).data)

    ref = fd_grad(f, x0.astype(np.float64))
    denom = max(np.abs(ref).max(), np.abs(grad).max(), 1e-6)
    assert np.abs(grad - ref).max() / denom < 1e-3


# -- guided update --


def test_guided_update_zero_weights_identity():
    x0 = rngmod.stream("gu", 0).standard_normal((5, 6)).astype(np.float32)
    spec = GuidanceSpec(terms=[GuidanceTerm("waypoint", 0.0, {"g": [1, 1]})])
    out, costs, skipped = guided_update(x0, np.ones(5, dtype=int), spec, ctx_for())
    assert np.array_equal(out, x0)


def test_guided_update_waypoint_hand_gradient():
    # one token at distance d along x from the goal: shift is -w * 2d (clip off)
    d, w = 0.7, 0.1
    x0 = np.zeros((1, 6), dtype=np.float32)
    x0[0, 0] = d
    spec = GuidanceSpec(terms=[GuidanceTerm("waypoint", w, {"g": [0.0, 0.0]})],
                        clip=0.0)
    out, _, _ = guided_update(x0, np.ones(1, dtype=int), spec, ctx_for())
    assert out[0, 0] == pytest.approx(d - w * 2 * d, rel=1e-5)
    assert np.all(out[0, 1:] == 0.0)


def test_guided_update_skips_level_zero_tokens():
    x0 = np.ones((3, 6), dtype=np.float32)
    spec = GuidanceSpec(terms=[GuidanceTerm("waypoint", 0.5, {"g": [5.0, 5.0]})])
    out, _, _ = guided_update(x0, np.array([0, 1, 0]), spec, ctx_for())
    assert np.array_equal(out[0], x0[0])
    assert np.array_equal(out[2], x0[2])
    assert not np.array_equal(out[1], x0[1])


def test_guided_update_weight_linearity():
    gen = rngmod.stream("gu", 2)
    x0 = gen.standard_normal((4, 6)).astype(np.float32)
    levels = np.ones(4, dtype=int)

    def correction(w):
        spec = GuidanceSpec(terms=[GuidanceTerm("waypoint", w, {"g": [1.0, -1.0]})],
                            clip=0.0)
        out, _, _ = guided_update(x0, levels, spec, ctx_for())
        return out - x0

    c1 = correction(0.01)
    c3 = correction(0.03)
    assert np.allclose(c3, 3 * c1, rtol=1e-4, atol=1e-6)


def test_guided_update_clip_caps_token_norm():
    x0 = np.zeros((2, 6), dtype=np.float32)
    x0[:, 0] = 100.0
    spec = GuidanceSpec(terms=[GuidanceTerm("waypoint", 1.0, {"g": [0.0, 0.0]})],
                        clip=0.5)
    out, _, _ = guided_update(x0, np.ones(2, dtype=int), spec, ctx_for())
    norms = np.linalg.norm(out - x0, axis=-1)
    assert np.all(norms <= 0.5 + 1e-5)


def test_guidance_gradient_through_normalization():
    """Gradients map through the whitening: d cost / d token = 2 d * std."""
    std = np.array([2.0, 1.0, 1.0, 1.0, 1.0, 1.0], dtype=np.float32)
    norm = NormStats(state_mean=np.zeros(6, np.float32), state_std=std,
                     action_mean=np.zeros(3, np.float32),
                     action_std=np.ones(3, np.float32))
    ctx = GuidanceContext(scene=Scene(), norm=norm, origin_xy=np.zeros(2))
    x0 = np.zeros((1, 6), dtype=np.float32)
    x0[0, 0] = 1.0  # world x = 2.0
    spec = GuidanceSpec(terms=[GuidanceTerm("waypoint", 1.0, {"g": [0.0, 0.0]})])
    grad, _, _ = guidance_gradient(x0, spec, ctx)
    assert grad[0, 0] == pytest.approx(2 * 2.0 * 2.0, rel=1e-5)  # 2 * world_d * std


# -- inpainting --


def test_inpainting_pins_full_keyframes():
    gen = rngmod.stream("inp", 0)
    states = gen.standard_normal((11, 6)).astype(np.float32)
    k_s = np.full(11, 7, dtype=np.int64)
    k_s[:5] = 0
    target = np.arange(6, dtype=np.float32)
    out_s, out_k = apply_inpainting(states, k_s, [Keyframe(3, target)],
                                    horizon=6, n_history=4)
    assert np.array_equal(out_s[7], target)
    assert out_k[7] == 0
    assert np.array_equal(out_s[8], states[8])


def test_inpainting_no_keyframes_identity():
    states = np.ones((7, 6), dtype=np.float32)
    k_s = np.arange(7)
    out_s, out_k = apply_inpainting(states, k_s, [], horizon=4, n_history=2)
    assert np.array_equal(out_s, states)
    assert np.array_equal(out_k, k_s)


def test_inpainting_partial_keeps_level_and_other_coords():
    states = np.zeros((8, 6), dtype=np.float32)
    k_s = np.full(8, 5, dtype=np.int64)
    coords = np.array([False, False, True, False, False, False])
    kf = Keyframe(2, np.array([0, 0, 0.9, 0, 0, 0], dtype=np.float32), coords)
    out_s, out_k = apply_inpainting(states, k_s, [kf], horizon=5, n_history=2)
    assert out_s[4, 2] == pytest.approx(0.9)
    assert out_k[4] == 5  # level kept: planar coords still evolve
    assert np.all(out_s[4, [0, 1, 3, 4, 5]] == 0.0)


def test_inpainting_rejects_out_of_horizon():
    states = np.zeros((8, 6), dtype=np.float32)
    k_s = np.zeros(8, dtype=np.int64)
    with pytest.raises(ValueError):
        apply_inpainting(states, k_s, [Keyframe(6, np.zeros(6))], horizon=5,
                         n_history=2)


def test_spec_from_config_rejects_bad_kind():
    with pytest.raises(ValueError):
        GuidanceSpec.from_config([{"kind": "teleport", "weight": 1.0}])
    with pytest.raises(ValueError):
        GuidanceTerm("waypoint", -0.1)
