"""Denoiser training: window sampling, per-token level draws, masked loss.

Every source of randomness (batch selection, noise levels, Gaussian noise,
dropout) is keyed by the global step, so resuming from a checkpoint
reproduces the continuation bit-exactly.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import dataset as dsmod
from . import rng as rngmod
from .dataset import Dataset, NormStats
from .denoiser import Denoiser, DenoiserConfig
from .diffusion import (add_noise, make_loss_masks, make_schedule,
                        sample_levels)
from .optim import AdamW, lr_schedule


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    steps: int = 2500
    batch_size: int = 32
    lr: float = 1e-4
    weight_decay: float = 1e-3
    warmup_steps: int = 500      # paper uses 10k at full scale; scaled down
    beta1: float = 0.9
    beta2: float = 0.999
    val_every: int = 200
    val_windows: int = 128
    val_fraction: float = 0.1    # episodes held out for validation
    checkpoint_every: int = 500
    seed: int = 0
    overfit_window: bool = False  # train on one fixed window (sanity oracle)
    time_budget_s: float | None = None
    stop_at_val_ratio: float | None = None  # early stop once val/initial <= ratio


@dataclass
class TrainResult:
    checkpoint: Path
    initial_val: float
    best_val: float
    final_loss: float
    steps_done: int
    history: list[dict] = field(default_factory=list)


def _split_episodes(n: int, frac: float, seed: int) -> tuple[list[int], list[int]]:
    order = rngmod.stream("split", seed).permutation(n)
    n_val = max(1, int(round(n * frac)))
    return sorted(order[n_val:].tolist()), sorted(order[:n_val].tolist())


def _batch_windows(data: Dataset, norm: NormStats, anchors, cfg: DenoiserConfig,
                   schedule, picks: np.ndarray, seed_parts) -> tuple[np.ndarray, ...]:
    B = len(picks)
    T = cfg.tokens_per_type
    S = np.empty((B, T, cfg.state_dim), dtype=np.float32)
    A = np.empty((B, T, cfg.action_dim), dtype=np.float32)
    S0 = np.empty_like(S)
    A0 = np.empty_like(A)
    KS = np.empty((B, T), dtype=np.int64)
    KA = np.empty((B, T), dtype=np.int64)
    for i, pick in enumerate(picks):
        e, t = anchors[pick]
        ps, acts, _ = dsmod.policy_window(data.episodes[e], t, cfg.N, cfg.H)
        s0 = norm.norm_states(ps)
        a0 = norm.norm_actions(acts)
        lv = sample_levels(rngmod.stream(*seed_parts, "levels", i),
                           cfg.N, cfg.H, cfg.K)
        noise_rng = rngmod.stream(*seed_parts, "noise", i)
        S[i], _ = add_noise(s0, lv.k_s, schedule, noise_rng)
        A[i], _ = add_noise(a0, lv.k_a, schedule, noise_rng)
        S0[i], A0[i] = s0, a0
        KS[i], KA[i] = lv.k_s, lv.k_a
    return S, A, S0, A0, KS, KA


def masked_loss_graph(s_hat: ad.Tensor, a_hat: ad.Tensor, s0: np.ndarray,
                      a0: np.ndarray, mask_s: np.ndarray,
                      mask_a: np.ndarray) -> ad.Tensor:
    """MSE over unmasked token entries of both streams, as one scalar graph."""
    ms = mask_s.astype(np.float32)[None, :, None]
    ma = mask_a.astype(np.float32)[None, :, None]
    B = s_hat.shape[0]
    count = B * (mask_s.sum() * s0.shape[-1] + mask_a.sum() * a0.shape[-1])
    ds = ad.mul(ad.add(s_hat, ad.constant(-s0)), ad.constant(ms))
    da = ad.mul(ad.add(a_hat, ad.constant(-a0)), ad.constant(ma))
    total = ad.add(ad.square_norm(ds, axis=None), ad.square_norm(da, axis=None))
    return ad.scale(total, 1.0 / float(count))


def _masked_loss_np(s_hat, a_hat, s0, a0, mask_s, mask_a) -> float:
    num = float((((s_hat - s0) ** 2) * mask_s[None, :, None]).sum()
                + (((a_hat - a0) ** 2) * mask_a[None, :, None]).sum())
    count = s_hat.shape[0] * (mask_s.sum() * s0.shape[-1] + mask_a.sum() * a0.shape[-1])
    return num / float(count)


def evaluate_loss(model: Denoiser, data: Dataset, norm: NormStats,
                  anchors, picks: np.ndarray, seed: int) -> float:
    """Masked loss on a fixed window set with frozen noise (dropout off)."""
    cfg = model.cfg
    schedule = make_schedule(cfg.K, cfg.schedule)
    S, A, S0, A0, KS, KA = _batch_windows(data, norm, anchors, cfg, schedule,
                                          picks, ("val", seed))
    mask_s, mask_a = make_loss_masks(cfg.N, cfg.H, cfg.H_a)
    with ad.no_grad():
        s_hat, a_hat = model.forward(S, A, KS, KA)
    return _masked_loss_np(s_hat.data, a_hat.data, S0, A0, mask_s, mask_a)


def train(data: Dataset, model_cfg: DenoiserConfig, cfg: TrainConfig,
          out_dir: str | Path, resume: str | Path | None = None,
          log=None) -> TrainResult:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    schedule = make_schedule(model_cfg.K, model_cfg.schedule)

    norm = dsmod.compute_norm_stats(data, model_cfg.N, model_cfg.H)
    train_eps, val_eps = _split_episodes(len(data.episodes), cfg.val_fraction,
                                         cfg.seed)
    anchors = [(e, t) for e in train_eps
               for t in range(model_cfg.N, len(data.episodes[e]) - model_cfg.H)]
    val_anchors = [(e, t) for e in val_eps
                   for t in range(model_cfg.N, len(data.episodes[e]) - model_cfg.H)]
    if not anchors or not val_anchors:
        raise TrainingError("dataset too small to build train/val windows")
    if cfg.overfit_window:
        anchors = anchors[:1]
        val_anchors = anchors

    start_step = 0
    if resume is not None:
        model, norm_loaded, extra, opt_arrays = Denoiser.load(resume)
        if norm_loaded is not None:
            norm = norm_loaded
        start_step = int(extra.get("train_step", 0))
        opt = AdamW(model.params, lr=cfg.lr, weight_decay=cfg.weight_decay,
                    beta1=cfg.beta1, beta2=cfg.beta2)
        if opt_arrays:
            opt.load_state_arrays(opt_arrays, start_step)
    else:
        model = Denoiser(model_cfg, init_seed=cfg.seed)
        opt = AdamW(model.params, lr=cfg.lr, weight_decay=cfg.weight_decay,
                    beta1=cfg.beta1, beta2=cfg.beta2)

    mask_s, mask_a = make_loss_masks(model_cfg.N, model_cfg.H, model_cfg.H_a)
    val_rng = rngmod.stream("valpick", cfg.seed)
    val_picks = val_rng.integers(0, len(val_anchors),
                                 size=min(cfg.val_windows, len(val_anchors)))

    history: list[dict] = []
    initial_val = evaluate_loss(model, data, norm, val_anchors, val_picks, cfg.seed)
    best_val = initial_val
    history.append({"step": start_step, "val": initial_val})
    ckpt = out_dir / "model.hpck"
    final_loss = float("nan")
    t0 = time.monotonic()

    for step in range(start_step, cfg.steps):
        picks = rngmod.stream("batch", cfg.seed, step).integers(
            0, len(anchors), size=cfg.batch_size)
        S, A, S0, A0, KS, KA = _batch_windows(data, norm, anchors, model_cfg,
                                              schedule, picks,
                                              ("train", cfg.seed, step))
        s_hat, a_hat = model.forward(S, A, KS, KA, train=True,
                                     rng=rngmod.stream("dropout", cfg.seed, step))
        loss = masked_loss_graph(s_hat, a_hat, S0, A0, mask_s, mask_a)
        final_loss = float(loss.data)
        if not np.isfinite(final_loss):
            (out_dir / "nan_batch.json").write_text(json.dumps(
                {"step": step, "anchors": [list(map(int, anchors[p])) for p in picks]}))
            raise TrainingError(f"non-finite loss at step {step}; batch persisted")
        opt.zero_grad()
        ad.backward(loss)
        opt.step(lr=lr_schedule(step, cfg.warmup_steps, cfg.steps, cfg.lr))

        done = step + 1
        out_of_time = (cfg.time_budget_s is not None
                       and time.monotonic() - t0 > cfg.time_budget_s)
        stop_early = False
        if done % cfg.val_every == 0 or done == cfg.steps or out_of_time:
            val = evaluate_loss(model, data, norm, val_anchors, val_picks, cfg.seed)
            history.append({"step": done, "val": val, "train": final_loss})
            if log:
                log(f"step {done} train {final_loss:.4f} val {val:.4f}")
            best_val = min(best_val, val)
            stop_early = (cfg.stop_at_val_ratio is not None
                          and best_val <= cfg.stop_at_val_ratio * initial_val)
        if (done % cfg.checkpoint_every == 0 or done == cfg.steps
                or out_of_time or stop_early):
            model.save(ckpt, norm=norm,
                       extra={"train_step": done, "initial_val": initial_val,
                              "best_val": best_val, "history": history},
                       opt_arrays=opt.state_arrays())
        if out_of_time or stop_early:
            return TrainResult(ckpt, initial_val, best_val, final_loss, done, history)

    if not ckpt.exists():
        model.save(ckpt, norm=norm,
                   extra={"train_step": cfg.steps, "initial_val": initial_val,
                          "best_val": best_val, "history": history},
                   opt_arrays=opt.state_arrays())
    return TrainResult(ckpt, initial_val, best_val, final_loss, cfg.steps, history)
