"""Top-down trajectory overlays rendered from a task report."""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
from matplotlib.patches import Circle, Rectangle


def plot_report(report_path: str | Path, out_path: str | Path,
                max_episodes: int = 25) -> Path:
    """Render obstacle layout, goals, and rollout paths to a PNG."""
    report = json.loads(Path(report_path).read_text())
    if "tracks_xyz" not in report:
        raise ValueError("report has no trajectory data to plot")
    tracks = report["tracks_xyz"][:max_episodes]
    scenes = report.get("scenes", [])
    goals = report.get("goals", [])
    records = report.get("records", [])

    fig, ax = plt.subplots(figsize=(7, 7))
    if scenes:
        scene = scenes[0]
        for cx, cy, r, _h in scene.get("cylinders", []):
            ax.add_patch(Circle((cx, cy), r, facecolor="0.75", edgecolor="0.4"))
        for bx, by, _bz, hx, hy, _hz in scene.get("boxes", []):
            ax.add_patch(Rectangle((bx - hx, by - hy), 2 * hx, 2 * hy,
                                   facecolor="0.8", edgecolor="0.4"))
    for i, tr in enumerate(tracks):
        xs = [p[0] for p in tr]
        ys = [p[1] for p in tr]
        ok = bool(records[i]["success"]) if i < len(records) else True
        ax.plot(xs, ys, lw=0.9, alpha=0.8, color="tab:green" if ok else "tab:red")
        ax.plot(xs[0], ys[0], marker="^", ms=5, color="k")
    for i, g in enumerate(goals[:max_episodes]):
        if g is not None:
            ax.plot(g[0], g[1], marker="*", ms=10, color="tab:orange",
                    markeredgecolor="k")
    ax.set_aspect("equal")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.set_title(f"{report.get('task', '?')} (seed {report.get('seed')})")
    ax.grid(True, lw=0.3, alpha=0.5)
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=110, metadata={"Software": "hopplan"})
    plt.close(fig)
    return out_path
