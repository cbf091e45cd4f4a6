"""Dataset generation determinism, container round-trip, and window access."""

import numpy as np
import pytest

from hopplan import dataset as ds
from hopplan import world
from hopplan.dataset import DatasetConfig, DatasetError


@pytest.fixture(scope="module")
def small_ds():
    return ds.generate(DatasetConfig(n_episodes=6, seconds=4.0, seed=11))


def test_generation_deterministic_and_byte_identical(tmp_path, small_ds):
    again = ds.generate(DatasetConfig(n_episodes=6, seconds=4.0, seed=11))
    p1, p2 = tmp_path / "a.hpds", tmp_path / "b.hpds"
    ds.save(small_ds, p1)
    ds.save(again, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_roundtrip_exact(tmp_path, small_ds):
    path = tmp_path / "d.hpds"
    ds.save(small_ds, path)
    back = ds.load(path)
    assert back.dt == small_ds.dt
    assert len(back) == len(small_ds)
    for a, b in zip(back.episodes, small_ds.episodes):
        assert a.mode == b.mode
        assert np.array_equal(a.states, b.states)
        assert np.array_equal(a.actions, b.actions)


def test_truncated_file_names_section(tmp_path, small_ds):
    path = tmp_path / "d.hpds"
    ds.save(small_ds, path)
    raw = path.read_bytes()
    bad = tmp_path / "bad.hpds"
    bad.write_bytes(raw[:len(raw) // 2])
    with pytest.raises(DatasetError, match="section"):
        ds.load(bad)
    bad.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(DatasetError, match="magic"):
        ds.load(bad)


def test_noise_zero_executed_equals_recorded_replay():
    """At noise std 0 the recorded actions replay the episode exactly."""
    cfg = DatasetConfig(n_episodes=3, seconds=3.0, noise_std=0.0,
                        impulse_prob=0.0, seed=5)
    data = ds.generate(cfg)
    for ep in data.episodes:
        s = world.SimState.make(ep.states[0, :3], ep.states[0, 3:])
        drift = []
        for i in range(min(30, len(ep) - 1)):
            s = world.step(s, ep.actions[i])
            drift.append(np.linalg.norm(s.p - ep.states[i + 1, :3]))
        assert np.mean(drift) < 0.05


def test_modes_present_and_tagged(small_ds):
    assert set(ep.mode for ep in small_ds.episodes) <= {"walk", "run", "jump"}


def test_policy_window_layout(small_ds):
    ep = small_ds.episodes[0]
    ps, acts, origin = ds.policy_window(ep, t=10, N=4, H=20)
    assert ps.shape == (25, 6)
    assert acts.shape == (25, 3)
    assert ps[4, 0] == 0.0 and ps[4, 1] == 0.0
    assert np.allclose(origin, ep.states[10, :2])
    with pytest.raises(IndexError):
        ds.policy_window(ep, t=2, N=4, H=20)


def test_norm_stats_whiten_policy_frame(small_ds):
    stats = ds.compute_norm_stats(small_ds, N=4, H=20, stride=4)
    assert stats.state_std.shape == (6,)
    assert np.all(stats.state_std >= 1e-3)
    ep = small_ds.episodes[0]
    ps, acts, _ = ds.policy_window(ep, 10, 4, 20)
    z = stats.norm_states(ps)
    assert np.allclose(stats.denorm_states(z), ps, atol=1e-4)
    za = stats.norm_actions(acts)
    assert np.allclose(stats.denorm_actions(za), acts, atol=1e-3)


def test_window_index_covers_episodes(small_ds):
    idx = ds.window_index(small_ds, N=4, H=20)
    lengths = [len(ep) for ep in small_ds.episodes]
    assert len(idx) == sum(max(L - 20 - 4, 0) for L in lengths)
