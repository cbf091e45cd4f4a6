"""Command-line interface: gen-data, train, eval, serve, inspect, plot."""

from __future__ import annotations

import dataclasses
import json
import sys
from pathlib import Path

import click

from . import config as cfgmod
from . import dataset as dsmod


def _fail(message: str, code: int = 2):
    click.echo(json.dumps({"error": message}), err=True)
    sys.exit(code)


def _load_config(path: str | None) -> dict:
    if path is None:
        return cfgmod.validate({"version": 1})
    try:
        return cfgmod.load(path)
    except (cfgmod.ConfigError, FileNotFoundError, ValueError) as e:
        _fail(f"config: {e}")


@click.group()
def main():
    """Guided state-action diffusion control in a toy hopper world."""


@main.command("gen-data")
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--out", type=click.Path(), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--episodes", type=int, default=None)
def gen_data(config_path, out, seed, episodes):
    """Generate the expert rollout dataset."""
    cfg = _load_config(config_path)
    dcfg = cfgmod.dataset_config(cfg)
    if seed is not None:
        dcfg = dataclasses.replace(dcfg, seed=seed)
    if episodes is not None:
        dcfg = dataclasses.replace(dcfg, n_episodes=episodes)
    out = Path(out or cfg.get("dataset", {}).get("path") or "dataset.hpds")
    data = dsmod.generate(dcfg)
    out.parent.mkdir(parents=True, exist_ok=True)
    dsmod.save(data, out)
    click.echo(f"wrote {out} ({len(data)} episodes)")


@main.command("train")
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--out", type=click.Path(), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--resume", type=click.Path(), default=None)
def train_cmd(config_path, out, seed, resume):
    """Train the denoiser on a dataset."""
    from .training import TrainingError, train

    cfg = _load_config(config_path)
    data_path = cfg.get("dataset", {}).get("path")
    if not data_path:
        _fail("config: dataset.path is required for train")
    try:
        data = dsmod.load(data_path)
    except (dsmod.DatasetError, FileNotFoundError) as e:
        _fail(f"dataset: {e}")
    tcfg = cfgmod.train_config(cfg)
    if seed is not None:
        tcfg = dataclasses.replace(tcfg, seed=seed)
    extra = {k: v for k, v in cfg.get("train", {}).items()
             if k == "stop_at_val_ratio"}
    if extra:
        tcfg = dataclasses.replace(tcfg, **extra)
    out_dir = Path(out or cfg.get("out") or "runs/train")
    try:
        result = train(data, cfgmod.model_config(cfg), tcfg, out_dir,
                       resume=resume, log=click.echo)
    except TrainingError as e:
        _fail(f"training: {e}", code=3)
    click.echo(json.dumps({
        "checkpoint": str(result.checkpoint),
        "initial_val": result.initial_val,
        "best_val": result.best_val,
        "val_ratio": result.best_val / result.initial_val,
        "steps": result.steps_done,
    }))


@main.command("eval")
@click.argument("task")
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--checkpoint", type=click.Path(), default=None)
@click.option("--episodes", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--out", type=click.Path(), default=None)
@click.option("--unguided", is_flag=True, default=False)
@click.option("--mode", type=click.Choice(["rolling", "full-replan"]), default=None)
def eval_cmd(task, config_path, checkpoint, episodes, seed, out, unguided, mode):
    """Evaluate TASK (waypoint|forest|jump|perturb|inbetween|rolling-compare)."""
    from .tasks import TASKS, run_task, write_report

    cfg = _load_config(config_path)
    if task not in TASKS:
        _fail(f"unknown task '{task}' (choose from {', '.join(TASKS)})")
    ckpt = checkpoint or str(Path(cfg.get("out", "runs/train")) / "model.hpck")
    if not Path(ckpt).exists():
        _fail(f"checkpoint not found: {ckpt}")
    task_cfg = cfg.get("task", {})
    n = episodes if episodes is not None else task_cfg.get("episodes", 50)
    sd = seed if seed is not None else cfg.get("seed", 0)
    guided = (not unguided) and task_cfg.get("guided", True)
    mode = mode or task_cfg.get("mode")
    try:
        report = run_task(task, ckpt, episodes=n, seed=sd, guided=guided,
                          mode=mode, dataset_path=cfg.get("dataset", {}).get("path"),
                          config_hash=cfgmod.config_hash(cfg),
                          controller=cfgmod.controller_config(cfg), log=click.echo)
    except (ValueError, dsmod.DatasetError) as e:
        _fail(f"eval: {e}", code=3)
    out = Path(out or f"report-{task}-seed{sd}.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    write_report(report, out)
    click.echo(f"wrote {out}")


@main.command("serve")
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--checkpoint", type=click.Path(), required=True)
@click.option("--port", type=int, default=None)
@click.option("--host", default="127.0.0.1")
def serve_cmd(config_path, checkpoint, port, host):
    """Run the live steering service (websocket endpoint /ws)."""
    from .serve import serve

    cfg = _load_config(config_path)
    port = port or cfg.get("serve", {}).get("port", 8700)
    if not Path(checkpoint).exists():
        _fail(f"checkpoint not found: {checkpoint}")
    serve(checkpoint, cfg, host=host, port=port)


@main.command("inspect")
@click.argument("path", type=click.Path(exists=True))
def inspect_cmd(path):
    """Validate and summarize a dataset or checkpoint file."""
    from .denoiser import CheckpointError, load_checkpoint

    raw = Path(path).read_bytes()[:4]
    if raw == dsmod.MAGIC:
        try:
            data = dsmod.load(path)
        except dsmod.DatasetError as e:
            _fail(str(e), code=3)
        steps = sum(len(ep) for ep in data.episodes)
        modes = {}
        for ep in data.episodes:
            modes[ep.mode] = modes.get(ep.mode, 0) + 1
        click.echo(json.dumps({
            "kind": "dataset", "episodes": len(data), "steps": steps,
            "dt": data.dt, "seconds": round(steps * data.dt, 1), "modes": modes,
        }))
    elif raw == b"HPCK":
        try:
            header, arrays = load_checkpoint(path)
        except CheckpointError as e:
            _fail(str(e), code=3)
        n_params = sum(int(a.size) for name, a in arrays.items()
                       if not name.startswith("opt."))
        click.echo(json.dumps({
            "kind": "checkpoint", "config": header.get("config"),
            "train_step": header.get("extra", {}).get("train_step"),
            "tensors": len(arrays), "parameters": n_params,
        }))
    else:
        _fail(f"unrecognized file magic {raw!r}", code=3)


@main.command("plot")
@click.argument("report", type=click.Path(exists=True))
@click.option("--out", type=click.Path(), default=None)
def plot_cmd(report, out):
    """Render trajectory overlays from a task report to a PNG."""
    from .plots import plot_report

    out = out or (Path(report).with_suffix(".png"))
    try:
        path = plot_report(report, out)
    except (ValueError, KeyError) as e:
        _fail(f"plot: {e}", code=3)
    click.echo(f"wrote {path}")


if __name__ == "__main__":
    main()
