"""DDPM machinery with independent per-token noise levels.

States and actions in a trajectory window each carry their own discrete
noise level k in [0, K]; level 0 is clean (observations, inpainted tokens),
level K is pure noise. Noising, the x0 -> eps conversion, and the reverse
posterior step all operate per token at that token's own level, which is
what lets a rolling controller keep a ramp of noise levels inside one
window and lets inpainting pin tokens at level 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    """Precomputed beta/alpha tables for K discrete levels.

    Arrays are indexed by level k = 0..K; index 0 is the clean level with
    alpha_bar[0] == 1 and never takes a step. sigma[k] is the DDPM
    posterior standard deviation, 0 at k = 1 so the final step is
    deterministic.
    """

    K: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray
    kind: str = "cosine"

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("schedule needs at least one level")
        ab = self.alpha_bar
        if ab[0] != 1.0 or np.any(np.diff(ab) >= 0):
            raise ValueError("alpha_bar must start at 1 and decrease strictly")
        if np.any((self.beta[1:] <= 0) | (self.beta[1:] >= 1)):
            raise ValueError("beta out of (0, 1)")


def make_schedule(K: int, kind: str = "cosine") -> NoiseSchedule:
    """Build a K-level schedule with a cosine (default) or linear-beta profile."""
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    if kind == "cosine":
        s = 0.008
        ks = np.arange(K + 1, dtype=np.float64)
        f = np.cos((ks / K + s) / (1 + s) * np.pi / 2) ** 2
        alpha_bar = f / f[0]
        beta = np.empty(K + 1)
        beta[0] = 0.0
        beta[1:] = np.clip(1.0 - alpha_bar[1:] / alpha_bar[:-1], 1e-8, 0.999)
    elif kind == "linear":
        beta = np.empty(K + 1)
        beta[0] = 0.0
        beta[1:] = np.linspace(1e-4, 0.3, K)
    else:
        raise ValueError(f"unknown schedule kind '{kind}'")
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    alpha_bar[0] = 1.0
    # posterior variance beta_tilde; exactly 0 at k=1 because alpha_bar[0]=1
    sigma2 = np.zeros(K + 1)
    sigma2[1:] = (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:]) * beta[1:]
    return NoiseSchedule(K=K, beta=beta, alpha=alpha, alpha_bar=alpha_bar,
                         sigma=np.sqrt(sigma2), kind=kind)


@dataclass
class NoiseLevelVector:
    """Per-token levels for the states and actions of one window."""

    k_s: np.ndarray  # int levels, one per state token
    k_a: np.ndarray  # int levels, one per action token

    def validate(self, K: int, n_history: int) -> None:
        for name, k in (("k_s", self.k_s), ("k_a", self.k_a)):
            if np.any((k < 0) | (k > K)):
                raise ValueError(f"{name} outside [0, {K}]")
        if np.any(self.k_s[:n_history + 1] != 0) or np.any(self.k_a[:n_history] != 0):
            raise ValueError("history tokens must sit at level 0")

    def copy(self) -> "NoiseLevelVector":
        return NoiseLevelVector(self.k_s.copy(), self.k_a.copy())


@dataclass
class TrajectoryWindow:
    """One training/planning window: N history pairs, current state, H future pairs.

    Arrays are indexed by window time j = 0..N+H (absolute t-N..t+H); the
    current timestep sits at j = N. ``states``/``actions`` hold whatever the
    caller is diffusing (normalized policy-frame values during training and
    inference). Loss masks follow the contract: no history token is trained,
    future states all are, actions only within the action horizon.
    """

    states: np.ndarray   # (N+H+1, state_dim)
    actions: np.ndarray  # (N+H+1, action_dim)
    levels: NoiseLevelVector
    loss_mask_s: np.ndarray  # (N+H+1,) bool
    loss_mask_a: np.ndarray  # (N+H+1,) bool
    N: int
    H: int

    @staticmethod
    def empty(N: int, H: int, state_dim: int, action_dim: int) -> "TrajectoryWindow":
        T = N + H + 1
        return TrajectoryWindow(
            states=np.zeros((T, state_dim), dtype=np.float32),
            actions=np.zeros((T, action_dim), dtype=np.float32),
            levels=NoiseLevelVector(np.zeros(T, dtype=np.int64),
                                    np.zeros(T, dtype=np.int64)),
            loss_mask_s=np.zeros(T, dtype=bool),
            loss_mask_a=np.zeros(T, dtype=bool),
            N=N, H=H)


def make_loss_masks(N: int, H: int, H_a: int) -> tuple[np.ndarray, np.ndarray]:
    """State/action loss masks for window layout (N, H) and action horizon H_a."""
    T = N + H + 1
    mask_s = np.zeros(T, dtype=bool)
    mask_a = np.zeros(T, dtype=bool)
    mask_s[N + 1:] = True
    mask_a[N:N + H_a] = True
    return mask_s, mask_a


def add_noise(x0: np.ndarray, levels: np.ndarray, schedule: NoiseSchedule,
              rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Noise each token to its own level: sqrt(ab)*x0 + sqrt(1-ab)*eps.

    eps is drawn for every token regardless of level (level-0 tokens just
    multiply it by zero), so changing one token's level never perturbs the
    noise any other token receives from the same stream.
    """
    levels = np.asarray(levels)
    ab = schedule.alpha_bar[levels].astype(np.float32)[..., None]
    eps = rng.standard_normal(x0.shape, dtype=np.float32)
    x_k = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
    return x_k.astype(np.float32), eps


def x0_to_eps(x_k: np.ndarray, x0_hat: np.ndarray, levels: np.ndarray,
              schedule: NoiseSchedule) -> tuple[np.ndarray, np.ndarray]:
    """Invert the noising formula: the noise implied by a clean prediction.

    Level-0 tokens have no defined conversion; they are passed through as
    zero noise and flagged in the returned boolean mask.
    """
    levels = np.asarray(levels)
    invalid = levels == 0
    safe = np.where(invalid, schedule.K, levels)
    ab = schedule.alpha_bar[safe].astype(np.float32)[..., None]
    eps_hat = (x_k - np.sqrt(ab) * x0_hat) / np.sqrt(1.0 - ab)
    eps_hat = np.where(invalid[..., None], 0.0, eps_hat).astype(np.float32)
    return eps_hat, invalid


def reverse_step(x_k: np.ndarray, eps_hat: np.ndarray, levels: np.ndarray,
                 schedule: NoiseSchedule, rng: np.random.Generator | None = None,
                 noise: np.ndarray | None = None) -> np.ndarray:
    """One DDPM posterior step per token at its own level; level-0 tokens pass through.

    x_{k-1} = (x_k - beta_k / sqrt(1-alpha_bar_k) * eps_hat) / sqrt(alpha_k)
              + sigma_k * z, with sigma_1 = 0. ``noise`` overrides drawing z
    from ``rng`` (used for per-agent keyed streams).
    """
    levels = np.asarray(levels)
    active = levels > 0
    safe = np.where(active, levels, 1)
    beta = schedule.beta[safe].astype(np.float32)[..., None]
    alpha = schedule.alpha[safe].astype(np.float32)[..., None]
    ab = schedule.alpha_bar[safe].astype(np.float32)[..., None]
    sig = schedule.sigma[safe].astype(np.float32)[..., None]
    if noise is None:
        if rng is None:
            raise ValueError("reverse_step needs an rng or explicit noise")
        noise = rng.standard_normal(x_k.shape, dtype=np.float32)
    mean = (x_k - beta / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(alpha)
    stepped = mean + sig * noise
    return np.where(active[..., None], stepped, x_k).astype(np.float32)


def sample_levels(rng: np.random.Generator, N: int, H: int, K: int) -> NoiseLevelVector:
    """Training levels: history fixed at 0, every future token uniform on {1..K}."""
    T = N + H + 1
    k_s = np.zeros(T, dtype=np.int64)
    k_a = np.zeros(T, dtype=np.int64)
    k_s[N + 1:] = rng.integers(1, K + 1, size=H)
    k_a[N:] = rng.integers(1, K + 1, size=H + 1)
    return NoiseLevelVector(k_s=k_s, k_a=k_a)


def training_loss(x0_hat: np.ndarray, x0: np.ndarray, loss_mask: np.ndarray) -> float:
    """MSE over unmasked token entries only (plain-array reference form)."""
    loss_mask = np.asarray(loss_mask, dtype=bool)
    if x0_hat.shape != x0.shape:
        raise ValueError(f"shape mismatch {x0_hat.shape} vs {x0.shape}")
    if not loss_mask.any():
        raise ValueError("all tokens masked out of the loss")
    diff = (x0_hat - x0)[loss_mask]
    return float((diff ** 2).mean())
