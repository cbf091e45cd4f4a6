"""Receding-horizon execution over a rolling FIFO of noisy future tokens.

Each control step the window shifts by one: the executed observation enters
the history at level 0, a fresh pure-noise token pair is pushed at the tail,
and denoising sweeps run until every token returns to its per-position
target level. Position targets ramp with temporal distance (state levels up
to L_s, action levels up to L_a), so nearby tokens are nearly clean and
stable while distant ones stay noisy enough for guidance to act on.

A sweep is one denoiser forward pass; every token above its target takes
one guided reverse step per sweep, except freshly pushed tail tokens, which
catch up from level K to the ramp within their entry sweep by reusing that
sweep's clean prediction across the intermediate levels. Full-replan mode
(the ablation baseline) instead resets the whole future to pure noise and
denoises to level 0 every control step.

The controller is batched: it advances B independent agents in lockstep,
which turns per-episode evaluation into large matrix products. Results for
an episode do not depend on what else is in the batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import rng as rngmod
from .dataset import NormStats
from .denoiser import Denoiser
from .diffusion import NoiseSchedule, reverse_step, x0_to_eps
from .guidance import (GuidanceContext, GuidanceSpec, Keyframe,
                       apply_inpainting, guided_update)
from .world import A_MAX, Scene, map_root


@dataclass
class ControllerConfig:
    mode: str = "rolling"        # rolling | full-replan
    L_s: int = 14                # state rolling level (ramp maximum)
    L_a: int = 4                 # action rolling level
    max_sweeps: int | None = None
    entry_jump: bool = True      # big catch-up deficits reuse one prediction
    action_renoise: bool = True  # re-noise actions to L_a every control step
    renoise: bool = False        # ablation: re-noise states to the ramp too

    def __post_init__(self):
        if self.mode not in ("rolling", "full-replan"):
            raise ValueError(f"unknown controller mode '{self.mode}'")
        if not (0 <= self.L_a <= self.L_s):
            raise ValueError("need 0 <= L_a <= L_s")


def target_levels(cfg: ControllerConfig, H: int, H_a: int,
                  K: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-offset target levels (lambda_s, lambda_a), offsets 0..H.

    State targets ramp 0 -> L_s over the horizon and are floored at 1 for
    offsets >= 1 (so guidance stays active between control steps). Action
    targets ramp 0 -> L_a across the action horizon; beyond it they stay at
    pure noise K, because those predictions are outside the training loss
    and must not be committed into low-noise content. Full-replan mode
    targets level 0 everywhere.
    """
    i = np.arange(H + 1)
    if cfg.mode == "full-replan":
        return np.zeros(H + 1, dtype=np.int64), np.zeros(H + 1, dtype=np.int64)
    if cfg.L_s > H or cfg.L_a > K:
        raise ValueError("rolling levels exceed horizon/schedule")
    lam_s = np.round(cfg.L_s * i / H).astype(np.int64)
    if cfg.L_s >= 1:
        lam_s[1:] = np.maximum(lam_s[1:], 1)
    lam_s[0] = 0
    lam_a = np.round(cfg.L_a * np.minimum(i, H_a) / H_a).astype(np.int64)
    lam_a[H_a:] = K  # offsets >= H_a are loss-masked in training
    return lam_s, lam_a


def plan_consistency(plans: list[np.ndarray]) -> float:
    """Mean per-overlapping-token root distance between consecutive plans."""
    if len(plans) < 2:
        raise ValueError("need at least two consecutive plans")
    per_step = []
    for a, b in zip(plans[:-1], plans[1:]):
        overlap = min(len(a) - 1, len(b))
        d = np.linalg.norm(a[1:1 + overlap] - b[:overlap], axis=-1)
        per_step.append(float(d.mean()))
    return float(np.mean(per_step))


@dataclass
class AdvanceInfo:
    sweeps: int
    actions: np.ndarray                 # (B, action_dim) denormalized, clamped
    plans: np.ndarray                   # (B, H, 3) world-frame root positions
    costs: list[dict[str, float]]
    skipped_terms: int = 0
    emergencies: int = 0


class RollingController:
    """Lockstep receding-horizon controller for a batch of agents."""

    def __init__(self, model: Denoiser, schedule: NoiseSchedule, norm: NormStats,
                 cfg: ControllerConfig, specs: list[GuidanceSpec],
                 scenes: list[Scene], seed: int,
                 keyframes: list[dict[int, np.ndarray]] | None = None,
                 shared_scene_agents: bool = False,
                 agent_ids: list[int] | None = None):
        """``specs``/``scenes``/``keyframes`` are per agent. ``keyframes``
        maps absolute control-step time -> world-frame state (6,). With
        ``shared_scene_agents`` every agent treats the others' latest plans
        as dynamic obstacles. ``agent_ids`` key each agent's noise streams,
        so results do not depend on how agents are batched."""
        self.model = model
        self.schedule = schedule
        self.norm = norm
        self.cfg = cfg
        self.specs = specs
        self.scenes = scenes
        self.seed = seed
        self.B = len(specs)
        if len(scenes) != self.B:
            raise ValueError("one scene per agent required")
        self.agent_ids = list(agent_ids) if agent_ids is not None else list(range(self.B))
        if len(self.agent_ids) != self.B:
            raise ValueError("one agent id per agent required")
        self.keyframes = keyframes or [{} for _ in range(self.B)]
        self.shared_scene_agents = shared_scene_agents
        mc = model.cfg
        self.N, self.H, self.H_a, self.K = mc.N, mc.H, mc.H_a, mc.K
        self.T = mc.tokens_per_type
        lam_s, lam_a = target_levels(cfg, self.H, self.H_a, self.K)
        self.target_s = np.zeros(self.T, dtype=np.int64)
        self.target_a = np.zeros(self.T, dtype=np.int64)
        self.target_s[self.N:] = lam_s
        self.target_a[self.N:] = lam_a
        self.step_idx = 0
        self.incidents = 0
        self._initialized = False

    # -- helpers --

    def _noise(self, kind: str, agent_shape: tuple[int, ...], *key) -> np.ndarray:
        out = np.empty((self.B, *agent_shape), dtype=np.float32)
        for b, aid in enumerate(self.agent_ids):
            out[b] = rngmod.normal(agent_shape, "ctrl", kind, self.seed, aid, *key)
        return out

    def reset(self, observations: np.ndarray) -> None:
        """Fill history with the initial state at rest and the future with noise."""
        obs = np.asarray(observations, dtype=np.float64)
        self.origins = obs[:, :2].copy()
        pol = np.zeros((self.B, 6), dtype=np.float32)
        pol[:, 2:] = obs[:, 2:].astype(np.float32)
        tok = self.norm.norm_states(pol)
        self.states = np.repeat(tok[:, None, :], self.T, axis=1)
        self.actions = np.repeat(self.norm.norm_actions(
            np.zeros((self.B, 3), dtype=np.float32))[:, None, :], self.T, axis=1)
        self.k_s = np.zeros((self.B, self.T), dtype=np.int64)
        self.k_a = np.zeros((self.B, self.T), dtype=np.int64)
        fut_s = slice(self.N + 1, self.T)
        fut_a = slice(self.N, self.T)
        self.states[:, fut_s] = self._noise("init-s", (self.T - self.N - 1, 6))
        self.actions[:, fut_a] = self._noise("init-a", (self.T - self.N, 3))
        self.k_s[:, fut_s] = self.K
        self.k_a[:, fut_a] = self.K
        self.step_idx = 0
        self.plans = np.zeros((self.B, self.H, 3))
        self.last_action = np.zeros((self.B, 3), dtype=np.float32)
        self._cold_start = True
        self._initialized = True

    def _frame_shift(self, new_origin: np.ndarray) -> None:
        """Re-express all state tokens relative to the new planar origin.

        A noisy token's clean component shifts by delta, so the token value
        shifts by sqrt(alpha_bar[k]) * delta in normalized units.
        """
        delta = (new_origin - self.origins).astype(np.float32)  # (B, 2)
        scale = np.sqrt(self.schedule.alpha_bar[self.k_s]).astype(np.float32)
        shift = delta[:, None, :] / self.norm.state_std[:2]
        self.states[:, :, 0] -= scale * shift[:, :, 0]
        self.states[:, :, 1] -= scale * shift[:, :, 1]
        self.origins = new_origin.copy()

    def _renoise_up(self, arr: np.ndarray, levels: np.ndarray, to: np.ndarray,
                    key: str) -> np.ndarray:
        """Forward-noise tokens from their current level up to ``to``."""
        ab_from = self.schedule.alpha_bar[levels].astype(np.float32)[..., None]
        ab_to = self.schedule.alpha_bar[to].astype(np.float32)[..., None]
        ratio = np.clip(ab_to / ab_from, 0.0, 1.0)
        eps = self._noise(key, arr.shape[1:], self.step_idx)
        return (np.sqrt(ratio) * arr + np.sqrt(1.0 - ratio) * eps).astype(np.float32)

    def _current_keyframes(self, b: int) -> list[Keyframe]:
        out = []
        for t_abs, world_state in self.keyframes[b].items():
            offset = int(t_abs) - self.step_idx
            if 0 < offset <= self.H:
                pol = np.asarray(world_state, dtype=np.float32).copy()
                pol[0] -= self.origins[b, 0]
                pol[1] -= self.origins[b, 1]
                out.append(Keyframe(offset=offset, value=self.norm.norm_states(pol)))
        return out

    def _apply_inpainting(self) -> None:
        for b in range(self.B):
            kfs = self._current_keyframes(b)
            if kfs:
                self.states[b], self.k_s[b] = apply_inpainting(
                    self.states[b], self.k_s[b], kfs, self.H, self.N)

    def _contexts(self) -> list[GuidanceContext]:
        ctxs = []
        for b in range(self.B):
            others = []
            if self.shared_scene_agents:
                # immutable snapshot of the plans published last control step
                others = [self.plans[j].copy() for j in range(self.B) if j != b]
            ctxs.append(GuidanceContext(scene=self.scenes[b], norm=self.norm,
                                        origin_xy=self.origins[b],
                                        plans_others=others))
        return ctxs

    # -- the control step --

    def advance(self, observations: np.ndarray) -> AdvanceInfo:
        """Ingest observations, roll the buffer, denoise to targets, pop actions."""
        obs = np.asarray(observations, dtype=np.float64)
        if not self._initialized:
            self.reset(obs)
        else:
            self._shift(obs)
        self._apply_inpainting()
        info = self._sweep_loop()
        # pop the front action (offset 0 sits at window index N)
        act_norm = self.actions[:, self.N].copy()
        act = self.norm.denorm_actions(act_norm).astype(np.float64)
        bad = ~np.all(np.isfinite(act), axis=-1)
        if bad.any():
            act[bad] = 0.0
            self.incidents += int(bad.sum())
            info.emergencies = int(bad.sum())
        act = np.clip(act, -A_MAX, A_MAX)
        self.last_action = act.astype(np.float32)
        self.step_idx += 1
        self._cold_start = False
        info.actions = act
        info.plans = self.plans
        return info

    def _shift(self, obs: np.ndarray) -> None:
        self._frame_shift(obs[:, :2])
        pol = np.zeros((self.B, 6), dtype=np.float32)
        pol[:, 2:] = obs[:, 2:].astype(np.float32)
        self.states = np.roll(self.states, -1, axis=1)
        self.actions = np.roll(self.actions, -1, axis=1)
        self.k_s = np.roll(self.k_s, -1, axis=1)
        self.k_a = np.roll(self.k_a, -1, axis=1)
        # executed observation replaces the predicted current state
        self.states[:, self.N] = self.norm.norm_states(pol)
        self.k_s[:, self.N] = 0
        # executed (clamped) action into the last history slot
        self.actions[:, self.N - 1] = self.norm.norm_actions(self.last_action)
        self.k_a[:, self.N - 1] = 0
        # fresh pure-noise tail pair
        self.states[:, -1] = self._noise("tail-s", (6,), self.step_idx)
        self.actions[:, -1] = self._noise("tail-a", (3,), self.step_idx)
        self.k_s[:, -1] = self.K
        self.k_a[:, -1] = self.K
        if self.cfg.mode == "full-replan":
            fut_s, fut_a = slice(self.N + 1, self.T), slice(self.N, self.T)
            self.states[:, fut_s] = self._noise("replan-s", (self.T - self.N - 1, 6),
                                                self.step_idx)
            self.actions[:, fut_a] = self._noise("replan-a", (self.T - self.N, 3),
                                                 self.step_idx)
            self.k_s[:, fut_s] = self.K
            self.k_a[:, fut_a] = self.K
            return
        if self.cfg.action_renoise or self.cfg.L_a == 0:
            # actions are re-decided every step: lift them back to the rolling
            # level (stale low-noise content would otherwise just be copied
            # through by the denoiser) and let the sweeps re-denoise them
            fut_a = slice(self.N, self.T - 1)
            lift = self.cfg.L_a if self.cfg.L_a >= 1 else self.K
            up_a = np.maximum(self.k_a[:, fut_a], lift)
            self.actions[:, fut_a] = self._renoise_up(self.actions[:, fut_a],
                                                      self.k_a[:, fut_a], up_a, "rn-a")
            self.k_a[:, fut_a] = up_a
        if self.cfg.L_s == 0:
            fut_s = slice(self.N + 1, self.T)
            self.states[:, fut_s] = self._noise("replan-s", (self.T - self.N - 1, 6),
                                                self.step_idx)
            self.k_s[:, fut_s] = self.K
        elif self.cfg.renoise:
            fut_s = slice(self.N + 1, self.T - 1)
            to_s = np.broadcast_to(self.target_s[None, fut_s], self.k_s[:, fut_s].shape)
            up_s = np.maximum(self.k_s[:, fut_s], to_s)
            self.states[:, fut_s] = self._renoise_up(self.states[:, fut_s],
                                                     self.k_s[:, fut_s], up_s, "rn-s")
            self.k_s[:, fut_s] = up_s

    def _sweep_loop(self) -> AdvanceInfo:
        tgt_s = self.target_s[None, :]
        tgt_a = self.target_a[None, :]
        sweeps = 0
        costs: list[dict[str, float]] = [{} for _ in range(self.B)]
        skipped = 0
        ctxs = self._contexts()
        while np.any(self.k_s > tgt_s) or np.any(self.k_a > tgt_a):
            if self.cfg.max_sweeps is not None and sweeps >= self.cfg.max_sweeps:
                break
            sweeps += 1
            with ad.no_grad():
                s_hat_t, a_hat_t = self.model.forward(self.states, self.actions,
                                                      self.k_s, self.k_a)
            s_hat = s_hat_t.data.copy()
            a_hat = a_hat_t.data.copy()
            # guidance on predicted clean states (future tokens, level > 0)
            fut = slice(self.N + 1, self.T)
            for b in range(self.B):
                if not self.specs[b].terms:
                    continue
                corrected, term_costs, sk = guided_update(
                    s_hat[b, fut], self.k_s[b, fut], self.specs[b], ctxs[b],
                    alpha_bar=self.schedule.alpha_bar)
                s_hat[b, fut] = corrected
                costs[b] = term_costs
                skipped += sk
            self._step_tokens(s_hat, a_hat, sweeps)
            self._apply_inpainting()
            self._publish_plans(s_hat)
        if sweeps == 0:
            with ad.no_grad():
                s_hat_t, _ = self.model.forward(self.states, self.actions,
                                                self.k_s, self.k_a)
            self._publish_plans(s_hat_t.data)
        return AdvanceInfo(sweeps=sweeps, actions=np.zeros((self.B, 3)),
                           plans=self.plans, costs=costs, skipped_terms=skipped)

    def _step_tokens(self, s_hat: np.ndarray, a_hat: np.ndarray, sweep: int) -> None:
        """One reverse step for every above-target token. With entry_jump,
        tokens with a large catch-up deficit (a fresh tail pair, or an action
        crossing the trained-horizon boundary) collapse the whole deficit
        within this sweep, reusing the sweep's prediction across levels."""
        jump = (self.cfg.entry_jump and self.cfg.mode == "rolling"
                and not self._cold_start)
        threshold = max(self.cfg.L_a, 1)
        for kind in ("s", "a"):
            arr = self.states if kind == "s" else self.actions
            levels = self.k_s if kind == "s" else self.k_a
            target = self.target_s if kind == "s" else self.target_a
            hat = s_hat if kind == "s" else a_hat
            deficits = levels - target[None, :]
            active = deficits > 0
            jumpers = (deficits > threshold) if jump else np.zeros_like(active)
            micro = 0
            while active.any():
                eps_hat, _ = x0_to_eps(arr, hat, levels, self.schedule)
                z = self._noise(f"rev-{kind}", arr.shape[1:],
                                self.step_idx, sweep, micro)
                stepped = reverse_step(arr, eps_hat, levels, self.schedule, noise=z)
                arr[active] = stepped[active]
                levels[active] -= 1
                micro += 1
                active = active & jumpers & (levels > target[None, :])
                if micro > self.K + 1:
                    raise RuntimeError("sweep micro-loop failed to terminate")

    def _publish_plans(self, s_hat: np.ndarray) -> None:
        fut = slice(self.N + 1, self.T)
        for b in range(self.B):
            denorm = self.norm.denorm_states(s_hat[b, fut])
            self.plans[b] = map_root(denorm, self.origins[b])

    def select(self, keep: np.ndarray) -> None:
        """Drop agents not in ``keep`` (indices); used when episodes finish."""
        keep = np.asarray(keep, dtype=np.int64)
        self.specs = [self.specs[i] for i in keep]
        self.scenes = [self.scenes[i] for i in keep]
        self.keyframes = [self.keyframes[i] for i in keep]
        self.agent_ids = [self.agent_ids[i] for i in keep]
        self.B = len(keep)
        if self._initialized:
            for name in ("states", "actions", "k_s", "k_a",
                         "origins", "plans", "last_action"):
                setattr(self, name, getattr(self, name)[keep])
