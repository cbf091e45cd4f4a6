"""Training loop behavior: overfit oracle, init loss, resume determinism."""

import numpy as np
import pytest

from hopplan import dataset as ds
from hopplan.denoiser import Denoiser, DenoiserConfig
from hopplan.training import TrainConfig, TrainingError, train

TINY_MODEL = dict(layers=1, heads=2, embed_dim=32, dropout=0.0, N=2, H=8,
                  H_a=4, K=8, emphasis_scale=2.0)


@pytest.fixture(scope="module")
def data():
    return ds.generate(ds.DatasetConfig(n_episodes=8, seconds=3.0, seed=3))


def test_one_window_overfit_reaches_tiny_loss(data, tmp_path):
    cfg = TrainConfig(steps=600, batch_size=4, lr=3e-3, weight_decay=0.0,
                      warmup_steps=20, val_every=100, checkpoint_every=600,
                      overfit_window=True, seed=1)
    res = train(data, DenoiserConfig(**TINY_MODEL), cfg, tmp_path / "overfit")
    assert res.best_val < 1e-3


def test_initial_loss_matches_target_variance_oracle(data, tmp_path):
    """At init the model predicts ~0, so the masked loss is ~E[target^2]."""
    import hopplan.dataset as dsm
    import hopplan.training as tr
    from hopplan import rng as rngmod
    from hopplan.diffusion import make_loss_masks, make_schedule

    mcfg = DenoiserConfig(**TINY_MODEL)
    cfg = TrainConfig(steps=1, batch_size=2, val_every=1, checkpoint_every=1,
                      val_windows=256, seed=0)
    res = train(data, mcfg, cfg, tmp_path / "init")

    # independent recomputation of the expected value: mean squared
    # normalized target over the same frozen validation windows
    norm = dsm.compute_norm_stats(data, mcfg.N, mcfg.H)
    _, val_eps = tr._split_episodes(len(data.episodes), cfg.val_fraction, cfg.seed)
    val_anchors = [(e, t) for e in val_eps
                   for t in range(mcfg.N, len(data.episodes[e]) - mcfg.H)]
    picks = rngmod.stream("valpick", cfg.seed).integers(
        0, len(val_anchors), size=min(cfg.val_windows, len(val_anchors)))
    schedule = make_schedule(mcfg.K, mcfg.schedule)
    _, _, S0, A0, _, _ = tr._batch_windows(data, norm, val_anchors, mcfg,
                                           schedule, picks, ("val", cfg.seed))
    mask_s, mask_a = make_loss_masks(mcfg.N, mcfg.H, mcfg.H_a)
    expected = tr._masked_loss_np(np.zeros_like(S0), np.zeros_like(A0),
                                  S0, A0, mask_s, mask_a)
    assert res.initial_val == pytest.approx(expected, rel=0.25)


def test_resume_reproduces_next_step_bit_exactly(data, tmp_path):
    mcfg = DenoiserConfig(**TINY_MODEL)
    straight = TrainConfig(steps=6, batch_size=4, lr=1e-3, val_every=100,
                           checkpoint_every=100, seed=7)
    res_a = train(data, mcfg, straight, tmp_path / "straight")
    first = TrainConfig(steps=3, batch_size=4, lr=1e-3, val_every=100,
                        checkpoint_every=3, seed=7)
    res_b1 = train(data, mcfg, first, tmp_path / "resumed")
    second = TrainConfig(steps=6, batch_size=4, lr=1e-3, val_every=100,
                         checkpoint_every=100, seed=7)
    res_b2 = train(data, mcfg, second, tmp_path / "resumed",
                   resume=res_b1.checkpoint)
    model_a, _, _, _ = Denoiser.load(res_a.checkpoint)
    model_b, _, _, _ = Denoiser.load(res_b2.checkpoint)
    for name, p in model_a.params.items():
        assert np.array_equal(p.data, model_b.params[name].data), name
    assert res_a.final_loss == res_b2.final_loss


def test_nan_abort_persists_batch(data, tmp_path, monkeypatch):
    mcfg = DenoiserConfig(**TINY_MODEL)
    cfg = TrainConfig(steps=3, batch_size=2, seed=0)
    import hopplan.training as tr

    real = tr.masked_loss_graph

    def poisoned(*args, **kw):
        out = real(*args, **kw)
        out.data = np.asarray(np.nan, dtype=np.float32)
        return out

    monkeypatch.setattr(tr, "masked_loss_graph", poisoned)
    with pytest.raises(TrainingError, match="step 0"):
        train(data, mcfg, cfg, tmp_path / "nan")
    assert (tmp_path / "nan" / "nan_batch.json").exists()


def test_checkpoint_carries_norm_stats_and_history(data, tmp_path):
    cfg = TrainConfig(steps=2, batch_size=2, val_every=1, checkpoint_every=2,
                      seed=0)
    res = train(data, DenoiserConfig(**TINY_MODEL), cfg, tmp_path / "ck")
    model, norm, extra, opt = Denoiser.load(res.checkpoint)
    assert norm is not None and norm.state_std.shape == (6,)
    assert extra["train_step"] == 2
    assert len(opt) > 0
    assert extra["history"][0]["step"] == 0


def test_stop_at_val_ratio(data, tmp_path):
    cfg = TrainConfig(steps=400, batch_size=4, lr=3e-3, warmup_steps=10,
                      val_every=50, checkpoint_every=400, seed=2,
                      overfit_window=True, stop_at_val_ratio=0.5)
    res = train(data, DenoiserConfig(**TINY_MODEL), cfg, tmp_path / "stop")
    assert res.best_val <= 0.5 * res.initial_val
    assert res.steps_done < 400
