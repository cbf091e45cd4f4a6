"""Expert rollout dataset: generation, binary container, and window access.

Episodes are obstacle-free expert rollouts at 30 Hz. During generation the
*executed* action is the expert action plus Gaussian noise, while the
*recorded* action is the expert's clean corrective action at the perturbed
state, so the data teaches recovery. A fraction of walk episodes also
receives velocity impulses, covering the perturbation-recovery regime.

File layout (version 2, little-endian):

    magic  b"HPDS"
    u32    version
    f64    dt
    u32    state_dim (6: px py pz vx vy vz, world frame)
    u32    action_dim (3)
    u32    n_episodes
    per episode: u32 length, u8 mode tag (0 walk, 1 run, 2 jump)
    per episode: float32 states (length x 6), clean actions (length x 3),
                 executed actions (length x 3)

Training windows use the executed actions as history (what actually drove
the state transitions) and the clean corrective actions as targets.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rng as rngmod
from . import world
from .world import ACTION_DIM, DT, STATE_DIM, ExpertState, SimState

MAGIC = b"HPDS"
VERSION = 2
MODE_TAGS = {"walk": 0, "run": 1, "jump": 2}
TAG_MODES = {v: k for k, v in MODE_TAGS.items()}


class DatasetError(ValueError):
    """Malformed or truncated dataset file; message names the section."""


@dataclass
class DatasetConfig:
    n_episodes: int = 400
    seconds: float = 10.0
    mode_weights: dict[str, float] = field(
        default_factory=lambda: {"walk": 0.5, "run": 0.25, "jump": 0.25})
    noise_std: float = 2.0
    impulse_prob: float = 0.5   # fraction of walk episodes with velocity kicks
    impulse_max: float = 3.0    # m/s, magnitude uniform in [0, impulse_max]
    impulse_every: float = 1.0  # seconds between kicks
    seed: int = 0


@dataclass
class Episode:
    states: np.ndarray    # (L, 6) world positions+velocities, float32
    actions: np.ndarray   # (L, 3) recorded clean corrective actions, float32
    executed: np.ndarray  # (L, 3) actions actually applied (clean + noise)
    mode: str

    def __len__(self) -> int:
        return len(self.states)


@dataclass
class Dataset:
    dt: float
    episodes: list[Episode]

    def __len__(self) -> int:
        return len(self.episodes)


def _roll_episode(cfg: DatasetConfig, index: int) -> Episode | None:
    """One noisy expert rollout; None if the character left bounds.

    Episodes are sequences of segments: idle at a spot, then head to a via
    point, repeat. That puts launches, stops, and turns densely into the
    data instead of only at episode boundaries, which downstream guidance
    relies on (a goal task starts from standstill and ends by stopping).
    """
    gen = rngmod.stream("dataset", cfg.seed, index)
    modes = sorted(cfg.mode_weights)
    weights = np.array([cfg.mode_weights[m] for m in modes])
    mode = modes[gen.choice(len(modes), p=weights / weights.sum())]
    steps = int(round(cfg.seconds / DT))

    pos = np.array([gen.uniform(-2, 2), gen.uniform(-2, 2), 0.0])
    expert_state = ExpertState(thrust=float(gen.uniform(0.75, 1.0)))
    kicks = mode == "walk" and gen.random() < cfg.impulse_prob
    kick_interval = max(int(round(cfg.impulse_every / DT)), 1)

    def next_goal(from_xy):
        heading = gen.uniform(0, 2 * np.pi)
        dist = gen.uniform(6.0, 14.0) if mode == "run" else gen.uniform(3.0, 8.0)
        g = np.array([from_xy[0] + dist * np.cos(heading),
                      from_xy[1] + dist * np.sin(heading), 0.0])
        # keep routes inside the working area
        g[:2] = np.clip(g[:2], -18.0, 18.0)
        if mode == "jump":
            span = np.linalg.norm(g[:2] - from_xy[:2])
            offsets = np.arange(1.5, max(span - 1.0, 1.6), 1.0)
            keep = offsets[gen.random(len(offsets)) < 0.4]
            direction = (g[:2] - from_xy[:2]) / max(span, 1e-9)
            expert_state.triggers = from_xy[None, :2] + keep[:, None] * direction[None]
        return g

    idle_left = int(gen.uniform(0.2, 1.2) / DT) if gen.random() < 0.6 else 0
    goal = next_goal(pos)
    state = SimState.make(pos)
    states = np.empty((steps, STATE_DIM), dtype=np.float32)
    actions = np.empty((steps, ACTION_DIM), dtype=np.float32)
    executed = np.empty((steps, ACTION_DIM), dtype=np.float32)
    bound = 40.0
    for i in range(steps):
        if kicks and i > 0 and i % kick_interval == 0:
            mag = gen.uniform(0.0, cfg.impulse_max)
            ang = gen.uniform(0, 2 * np.pi)
            v = state.v.copy()
            v[0] += mag * np.cos(ang)
            v[1] += mag * np.sin(ang)
            state = SimState(state.p.copy(), v)
        if idle_left > 0:
            idle_left -= 1
            target = np.array([state.p[0], state.p[1], 0.0])
            clean = world.expert_policy(state, target, mode, gen)
        else:
            clean = world.expert_policy(state, goal, mode, gen, expert_state)
            if np.linalg.norm(state.p[:2] - goal[:2]) < 0.3:
                if gen.random() < 0.5:
                    idle_left = int(gen.uniform(0.2, 0.8) / DT)
                goal = next_goal(state.p)
        states[i, :3] = state.p
        states[i, 3:] = state.v
        actions[i] = clean
        applied = world.clamp_action(clean + gen.normal(0.0, cfg.noise_std, size=3))
        executed[i] = applied
        state = world.step(state, applied)
        if abs(state.p[0]) > bound or abs(state.p[1]) > bound:
            return None
    return Episode(states=states, actions=actions, executed=executed, mode=mode)


def generate(cfg: DatasetConfig) -> Dataset:
    """Roll all episodes; out-of-bounds episodes are regenerated under new keys."""
    episodes: list[Episode] = []
    index = 0
    while len(episodes) < cfg.n_episodes:
        ep = _roll_episode(cfg, index)
        index += 1
        if ep is not None:
            episodes.append(ep)
        if index > cfg.n_episodes * 20:
            raise RuntimeError("too many discarded episodes; check world bounds")
    return Dataset(dt=DT, episodes=episodes)


def save(dataset: Dataset, path: str | Path) -> None:
    path = Path(path)
    parts = [MAGIC, struct.pack("<Id", VERSION, dataset.dt),
             struct.pack("<III", STATE_DIM, ACTION_DIM, len(dataset.episodes))]
    for ep in dataset.episodes:
        parts.append(struct.pack("<IB", len(ep), MODE_TAGS[ep.mode]))
    for ep in dataset.episodes:
        parts.append(np.ascontiguousarray(ep.states, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(ep.actions, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(ep.executed, dtype="<f4").tobytes())
    path.write_bytes(b"".join(parts))


def load(path: str | Path) -> Dataset:
    raw = Path(path).read_bytes()
    off = 0

    def take(n: int, section: str) -> bytes:
        nonlocal off
        if off + n > len(raw):
            raise DatasetError(f"truncated dataset file in section '{section}'")
        out = raw[off:off + n]
        off += n
        return out

    if take(4, "magic") != MAGIC:
        raise DatasetError("bad magic in section 'magic'")
    version, dt = struct.unpack("<Id", take(12, "header"))
    if version != VERSION:
        raise DatasetError(f"unsupported version {version} in section 'header'")
    sdim, adim, n_eps = struct.unpack("<III", take(12, "header"))
    if sdim != STATE_DIM or adim != ACTION_DIM:
        raise DatasetError(f"dimension mismatch ({sdim}, {adim}) in section 'header'")
    table = []
    for i in range(n_eps):
        length, tag = struct.unpack("<IB", take(5, f"episode table[{i}]"))
        if tag not in TAG_MODES:
            raise DatasetError(f"unknown mode tag {tag} in section 'episode table[{i}]'")
        table.append((length, TAG_MODES[tag]))
    episodes = []
    for i, (length, mode) in enumerate(table):
        sb = take(length * sdim * 4, f"episode {i} states")
        ab = take(length * adim * 4, f"episode {i} actions")
        xb = take(length * adim * 4, f"episode {i} executed actions")
        episodes.append(Episode(
            states=np.frombuffer(sb, dtype="<f4").reshape(length, sdim).copy(),
            actions=np.frombuffer(ab, dtype="<f4").reshape(length, adim).copy(),
            executed=np.frombuffer(xb, dtype="<f4").reshape(length, adim).copy(),
            mode=mode))
    if off != len(raw):
        raise DatasetError("trailing bytes in section 'payload'")
    return Dataset(dt=dt, episodes=episodes)


# ---------------------------------------------------------------------------
# windows and normalization


def policy_window(ep: Episode, t: int, N: int,
                  H: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Policy-frame window around timestep ``t``: (states, actions, origin_xy).

    The action rows mix the two recorded streams: history rows (before the
    current timestep) carry the executed actions, since those are what the
    controller will have in its history at inference time; current and
    future rows carry the clean corrective actions used as targets.
    Requires N history steps before and H steps after ``t`` within the episode.
    """
    if t < N or t + H >= len(ep):
        raise IndexError(f"window at t={t} outside episode of length {len(ep)}")
    sl = slice(t - N, t + H + 1)
    ps, origin = world.to_policy_frame(ep.states[sl, :3], ep.states[sl, 3:], N)
    acts = ep.actions[sl].astype(np.float32).copy()
    acts[:N] = ep.executed[t - N:t]
    return ps, acts, origin


@dataclass
class NormStats:
    """Per-dimension whitening statistics in the policy frame."""

    state_mean: np.ndarray
    state_std: np.ndarray
    action_mean: np.ndarray
    action_std: np.ndarray

    def norm_states(self, s: np.ndarray) -> np.ndarray:
        return ((s - self.state_mean) / self.state_std).astype(np.float32)

    def denorm_states(self, s: np.ndarray) -> np.ndarray:
        return (s * self.state_std + self.state_mean).astype(np.float32)

    def norm_actions(self, a: np.ndarray) -> np.ndarray:
        return ((a - self.action_mean) / self.action_std).astype(np.float32)

    def denorm_actions(self, a: np.ndarray) -> np.ndarray:
        return (a * self.action_std + self.action_mean).astype(np.float32)


def compute_norm_stats(dataset: Dataset, N: int, H: int, stride: int = 16) -> NormStats:
    """Whitening stats over a deterministic grid of policy-frame windows."""
    s_parts, a_parts = [], []
    for ep in dataset.episodes:
        last = len(ep) - H - 1
        for t in range(N, max(last + 1, N + 1), stride):
            if t + H >= len(ep):
                break
            ps, acts, _ = policy_window(ep, t, N, H)
            s_parts.append(ps)
            a_parts.append(acts)
    if not s_parts:
        raise DatasetError("dataset too short for the requested window size")
    s_all = np.concatenate(s_parts, axis=0)
    a_all = np.concatenate(a_parts, axis=0)
    return NormStats(
        state_mean=s_all.mean(axis=0).astype(np.float32),
        state_std=np.maximum(s_all.std(axis=0), 1e-3).astype(np.float32),
        action_mean=a_all.mean(axis=0).astype(np.float32),
        action_std=np.maximum(a_all.std(axis=0), 1e-3).astype(np.float32),
    )


def window_index(dataset: Dataset, N: int, H: int) -> list[tuple[int, int]]:
    """All valid (episode, t) window anchors."""
    out = []
    for e, ep in enumerate(dataset.episodes):
        for t in range(N, len(ep) - H):
            out.append((e, t))
    return out
