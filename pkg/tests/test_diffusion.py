"""Schedule, noising/denoising, level sampling, and masked-loss properties."""

import numpy as np
import pytest

from hopplan import rng as rngmod
from hopplan.diffusion import (NoiseLevelVector, add_noise, make_loss_masks,
                               make_schedule, reverse_step, sample_levels,
                               training_loss, x0_to_eps)


@pytest.fixture(scope="module")
def sched():
    return make_schedule(20)


def test_schedule_rejects_zero_levels():
    with pytest.raises(ValueError):
        make_schedule(0)


def test_schedule_invariants(sched):
    assert sched.alpha_bar[0] == 1.0
    assert np.all(np.diff(sched.alpha_bar) < 0)
    assert np.all((sched.beta[1:] > 0) & (sched.beta[1:] < 1))
    assert sched.sigma[1] == 0.0
    assert np.all(sched.sigma[2:] > 0)


def test_cosine_terminal_level_noise_dominated(sched):
    assert sched.alpha_bar[20] < 0.05


def test_linear_schedule_available():
    lin = make_schedule(20, kind="linear")
    assert lin.kind == "linear"
    assert np.all(np.diff(lin.alpha_bar) < 0)


def test_add_noise_level_zero_identity(sched):
    x0 = rngmod.stream("an", 0).standard_normal((7, 6), dtype=np.float32)
    x_k, eps = add_noise(x0, np.zeros(7, dtype=int), sched, rngmod.stream("an", 1))
    assert np.array_equal(x_k, x0)
    assert eps.shape == x0.shape


def test_add_noise_matches_formula_by_hand(sched):
    x0 = np.full((1, 3), 2.0, dtype=np.float32)
    rng = rngmod.stream("an", 2)
    x_k, eps = add_noise(x0, np.array([20]), sched, rngmod.stream("an", 2))
    ref_eps = rng.standard_normal((1, 3), dtype=np.float32)
    ab = sched.alpha_bar[20]
    assert np.array_equal(eps, ref_eps)
    assert np.allclose(x_k, np.sqrt(ab) * x0 + np.sqrt(1 - ab) * ref_eps, atol=1e-6)


def test_add_noise_mixed_levels_leaves_clean_tokens(sched):
    x0 = np.ones((4, 3), dtype=np.float32)
    levels = np.array([5, 0, 5, 0])
    x_k, _ = add_noise(x0, levels, sched, rngmod.stream("an", 3))
    assert np.array_equal(x_k[1], x0[1])
    assert np.array_equal(x_k[3], x0[3])
    assert not np.array_equal(x_k[0], x0[0])


def test_per_token_independence(sched):
    """Changing one token's level never changes another token's noising."""
    x0 = rngmod.stream("ind", 0).standard_normal((6, 4), dtype=np.float32)
    la = np.array([3, 3, 3, 3, 3, 3])
    lb = np.array([3, 3, 17, 3, 3, 3])
    xa, _ = add_noise(x0, la, sched, rngmod.stream("ind", 1))
    xb, _ = add_noise(x0, lb, sched, rngmod.stream("ind", 1))
    others = [0, 1, 3, 4, 5]
    assert np.array_equal(xa[others], xb[others])


def test_roundtrip_eps_recovery(sched):
    x0 = rngmod.stream("rt", 0).standard_normal((9, 6), dtype=np.float32)
    levels = rngmod.stream("rt", 1).integers(1, 21, size=9)
    x_k, eps = add_noise(x0, levels, sched, rngmod.stream("rt", 2))
    eps_hat, invalid = x0_to_eps(x_k, x0, levels, sched)
    assert not invalid.any()
    assert np.abs(eps_hat - eps).max() < 1e-5


def test_x0_to_eps_level_zero_flagged(sched):
    x = np.ones((2, 3), dtype=np.float32)
    eps_hat, invalid = x0_to_eps(x, x, np.array([0, 4]), sched)
    assert invalid.tolist() == [True, False]
    assert np.all(eps_hat[0] == 0.0)


def test_x0_to_eps_halfway_formula():
    sched = make_schedule(20)
    k = int(np.argmin(np.abs(sched.alpha_bar - 0.25)))
    ab = sched.alpha_bar[k]
    x_k = np.full((1, 2), 3.0, dtype=np.float32)
    eps_hat, _ = x0_to_eps(x_k, x_k, np.array([k]), sched)
    assert np.allclose(eps_hat, (x_k - np.sqrt(ab) * x_k) / np.sqrt(1 - ab), atol=1e-6)


def test_x0_to_eps_zero_in_zero_out(sched):
    z = np.zeros((3, 2), dtype=np.float32)
    eps_hat, _ = x0_to_eps(z, z, np.array([5, 9, 20]), sched)
    assert np.all(eps_hat == 0.0)


def test_reverse_step_level_one_deterministic_exact(sched):
    x0 = rngmod.stream("rs", 0).standard_normal((5, 4), dtype=np.float32)
    levels = np.ones(5, dtype=int)
    x_1, _ = add_noise(x0, levels, sched, rngmod.stream("rs", 1))
    eps_hat, _ = x0_to_eps(x_1, x0, levels, sched)
    x_0 = reverse_step(x_1, eps_hat, levels, sched, rngmod.stream("rs", 2))
    assert np.abs(x_0 - x0).max() < 1e-4


def test_reverse_step_leaves_level_zero_untouched(sched):
    x = rngmod.stream("rs", 3).standard_normal((4, 3), dtype=np.float32)
    out = reverse_step(x, np.ones_like(x), np.zeros(4, dtype=int), sched,
                       rngmod.stream("rs", 4))
    assert np.array_equal(out, x)


def test_oracle_denoiser_full_reverse_recovers_x0(sched):
    """With the true x0 supplied every step, sampling converges to x0."""
    err = 0.0
    trials = 100
    for trial in range(trials):
        x0 = rngmod.stream("orc", trial, 0).standard_normal((3, 6), dtype=np.float32)
        x = rngmod.stream("orc", trial, 1).standard_normal((3, 6), dtype=np.float32)
        for k in range(20, 0, -1):
            levels = np.full(3, k)
            eps_hat, _ = x0_to_eps(x, x0, levels, sched)
            x = reverse_step(x, eps_hat, levels, sched, rngmod.stream("orc", trial, 2, k))
        err += np.abs(x - x0).mean() / trials
    assert err < 1e-3


def test_sample_levels_contract():
    lv = sample_levels(rngmod.stream("sl", 0), N=4, H=32, K=20)
    assert np.all(lv.k_s[:5] == 0)
    assert np.all(lv.k_a[:4] == 0)
    assert np.all((lv.k_s[5:] >= 1) & (lv.k_s[5:] <= 20))
    assert np.all((lv.k_a[4:] >= 1) & (lv.k_a[4:] <= 20))
    lv.validate(K=20, n_history=4)


def test_sample_levels_uniform_chi_square():
    """Empirical level distribution uniform within 1% per level over 1e5 draws."""
    draws = []
    for i in range(200):
        lv = sample_levels(rngmod.stream("slu", i), N=0, H=250, K=20)
        draws.append(lv.k_s[1:])
    counts = np.bincount(np.concatenate(draws), minlength=21)[1:]
    total = counts.sum()
    assert total == 200 * 250
    freq = counts / total
    assert np.abs(freq - 1 / 20).max() < 0.01 * 1.0  # within 1% absolute per level


def test_state_action_levels_independent():
    lv = sample_levels(rngmod.stream("sl", 5), N=2, H=40, K=20)
    assert np.any(lv.k_s[3:] != lv.k_a[3:])


def test_training_loss_zero_when_exact():
    x = rngmod.stream("tl", 0).standard_normal((5, 3), dtype=np.float32)
    mask = np.ones(5, dtype=bool)
    assert training_loss(x, x, mask) == 0.0


def test_training_loss_single_entry():
    x0 = np.zeros((1, 1), dtype=np.float32)
    xh = np.full((1, 1), 2.0, dtype=np.float32)
    assert training_loss(xh, x0, np.array([True])) == pytest.approx(4.0)


def test_training_loss_ignores_masked_positions():
    rng = rngmod.stream("tl", 1)
    x0 = rng.standard_normal((6, 3), dtype=np.float32)
    xh = x0 + 0.1
    mask = np.array([True, False, True, False, True, True])
    base = training_loss(xh, x0, mask)
    xh2 = xh.copy()
    xh2[1] += 100.0
    xh2[3] -= 50.0
    assert training_loss(xh2, x0, mask) == base


def test_training_loss_all_masked_rejected():
    x = np.zeros((3, 2), dtype=np.float32)
    with pytest.raises(ValueError):
        training_loss(x, x, np.zeros(3, dtype=bool))


def test_loss_masks_layout():
    mask_s, mask_a = make_loss_masks(N=4, H=32, H_a=16)
    assert not mask_s[:5].any()
    assert mask_s[5:].all()
    assert not mask_a[:4].any()
    assert mask_a[4:20].all()
    assert not mask_a[20:].any()


def test_levels_validate_rejects_noisy_history():
    lv = NoiseLevelVector(k_s=np.array([1, 0, 3]), k_a=np.array([0, 2, 2]))
    with pytest.raises(ValueError):
        lv.validate(K=20, n_history=1)
