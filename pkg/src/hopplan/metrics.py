"""Motion-statistics distance: Frechet distance between Gaussian feature fits.

Features summarize motion per non-overlapping 8-step window: mean and std
of the velocity components plus mean and std of height. Comparisons are
only ever made between two sets mapped through this same feature function.
"""

from __future__ import annotations

import numpy as np

FEATURE_WINDOW = 8


def motion_features(tracks: list[np.ndarray], window: int = FEATURE_WINDOW) -> np.ndarray:
    """(n_windows, 8) features from (L, 6) world-state tracks (p, v)."""
    rows = []
    for tr in tracks:
        tr = np.asarray(tr, dtype=np.float64)
        for start in range(0, len(tr) - window + 1, window):
            w = tr[start:start + window]
            v = w[:, 3:6]
            z = w[:, 2]
            rows.append(np.concatenate([v.mean(0), v.std(0),
                                        [z.mean()], [z.std()]]))
    if not rows:
        return np.zeros((0, 8))
    return np.asarray(rows)


def _sqrtm_psd(M: np.ndarray) -> np.ndarray:
    """Symmetric p.s.d. square root via eigendecomposition."""
    sym = (M + M.T) / 2.0
    vals, vecs = np.linalg.eigh(sym)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_gaussian(mu1, sigma1, mu2, sigma2) -> float:
    """d^2 = |mu1-mu2|^2 + tr(S1 + S2 - 2 (S1 S2)^{1/2})."""
    root1 = _sqrtm_psd(sigma1)
    cross = _sqrtm_psd(root1 @ sigma2 @ root1)
    d2 = float(((mu1 - mu2) ** 2).sum() + np.trace(sigma1 + sigma2 - 2 * cross))
    return max(d2, 0.0)


def motion_stat_distance(rollouts: list[np.ndarray], reference: list[np.ndarray],
                         min_windows: int = 100,
                         return_details: bool = False):
    """Frechet distance between Gaussian fits of motion features.

    Degenerate covariances are regularized by +1e-6 I and flagged in the
    details dict.
    """
    f1 = motion_features(rollouts)
    f2 = motion_features(reference)
    if len(f1) < min_windows or len(f2) < min_windows:
        raise ValueError(f"need >= {min_windows} feature windows per side, "
                         f"got {len(f1)} and {len(f2)}")
    mu1, mu2 = f1.mean(0), f2.mean(0)
    s1 = np.cov(f1, rowvar=False)
    s2 = np.cov(f2, rowvar=False)
    flagged = False
    eps = 1e-6
    for s in (s1, s2):
        if np.linalg.eigvalsh((s + s.T) / 2).min() < eps:
            flagged = True
    s1 = s1 + eps * np.eye(len(mu1))
    s2 = s2 + eps * np.eye(len(mu2))
    d2 = frechet_gaussian(mu1, s1, mu2, s2)
    if return_details:
        return d2, {"regularized": flagged, "windows": (len(f1), len(f2))}
    return d2
