"""Command line: simulate -> assemble -> train -> eval, plus the policy comparison driver.

Every command writes into ``<out>/<hash>/`` where the hash covers the
command, its configuration and the content hashes of its inputs, and drops a
``manifest.json`` recording all three. The run directory is printed on stdout.
"""

from __future__ import annotations

import csv
import hashlib
import json
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Optional

import click

try:
    import tomllib
except ImportError:  # python < 3.11
    import tomli as tomllib

from . import experiment as ex
from .labels import ReportPolicy, assemble, read_samples, write_samples
from .metrics import auc, calibration_bias, gauc
from .model import (Catalog, Featurizer, default_model_config, init_params, load_checkpoint, predict_samples,
                    save_checkpoint, train_stream, write_trace)
from .sim import (TASKS, simulate, read_events, read_histories, write_events, write_ground_truth,
                  write_histories)


# ---------------------------------------------------------------------------
# config plumbing

def load_config(path: Optional[str]) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if p.suffix == ".toml":
        with open(p, "rb") as f:
            return tomllib.load(f)
    with open(p) as f:
        return json.load(f)


def apply_overrides(cfg: dict, pairs) -> dict:
    """``a.b=value`` assignments; values parse as JSON when they can."""
    for pair in pairs:
        key, sep, raw = pair.partition("=")
        if not sep:
            raise click.BadParameter(f"expected key=value, got {pair!r}", param_hint="--set")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = cfg
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return cfg


def run_config(path, sets, seed) -> ex.RunConfig:
    d = apply_overrides(load_config(path), sets)
    if seed is not None:
        d["seed"] = seed
    return ex.RunConfig.from_dict(d)


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def open_run(out: str, command: str, config: dict, inputs: dict) -> Path:
    input_hashes = {k: file_hash(v) for k, v in sorted(inputs.items()) if v is not None}
    key = ex.config_hash({"command": command, "config": config, "inputs": input_hashes})
    run = Path(out) / key
    run.mkdir(parents=True, exist_ok=True)
    manifest = {"command": command, "config_hash": key, "config": config,
                "inputs": {k: {"path": str(inputs[k]), "sha256": h} for k, h in input_hashes.items()}}
    (run / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return run


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# commands

class _Group(click.Group):
    """Turns library errors into a one-line diagnostic and exit code 1."""

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except (click.ClickException, click.exceptions.Exit, click.exceptions.Abort):
            raise
        except (ValueError, KeyError, OSError, ArithmeticError, RuntimeError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(1)


config_option = click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
                             help="JSON or TOML run configuration.")
set_option = click.option("--set", "sets", multiple=True, metavar="KEY=VALUE",
                          help="Override a config field, e.g. --set sim.num_users=500.")
seed_option = click.option("--seed", type=int, default=None, help="Seed for every stochastic component.")
out_option = click.option("--out", default="runs", show_default=True, help="Parent directory for run directories.")


@click.group(cls=_Group)
def main():
    """Live-stream CTR experiments under delayed feedback."""


@main.command("simulate")
@config_option
@set_option
@seed_option
@out_option
def simulate_cmd(config_path, sets, seed, out):
    """Simulate live rooms and write the event log, ground truth, histories and catalog."""
    rc = run_config(config_path, sets, seed)
    run = open_run(out, "simulate", rc.sim.to_dict(), {})
    res = simulate(rc.sim)
    write_events(res.events, run / "events.jsonl")
    write_ground_truth(res.ground_truth, run / "ground_truth.csv")
    write_histories(res.histories, run / "histories.jsonl")
    write_json(Catalog.from_sim(res).to_dict(), run / "catalog.json")
    write_json([asdict(r) for r in res.rooms], run / "rooms.json")
    write_json(rc.sim.to_dict(), run / "sim_config.json")
    click.echo(str(run))


@main.command("assemble")
@click.argument("events", type=click.Path(exists=True, dir_okay=False))
@click.option("--policy", type=click.Choice(["exit_report", "fast_slow", "realtime"]), required=True)
@click.option("--fast-window", type=float, default=300.0, show_default=True)
@click.option("--slow-window", type=float, default=3600.0, show_default=True)
@click.option("--tick", type=float, default=30.0, show_default=True)
@click.option("--realtime-cap", type=float, default=None)
@out_option
def assemble_cmd(events, policy, fast_window, slow_window, tick, realtime_cap, out):
    """Turn an event log into a training-sample stream."""
    pol = ReportPolicy(policy, fast_window, slow_window, tick, realtime_cap)
    run = open_run(out, "assemble", asdict(pol), {"events": events})
    samples = assemble(read_events(events), pol)
    write_samples(samples, run / "samples.jsonl")
    click.echo(str(run))


@main.command()
@click.argument("samples", type=click.Path(exists=True, dir_okay=False))
@click.option("--catalog", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--sim-config", type=click.Path(exists=True, dir_okay=False), required=True,
              help="sim_config.json written by simulate (vocabulary sizes).")
@click.option("--histories", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Needed when the model uses cross-domain sequences.")
@click.option("--mode", type=click.Choice(["fast_slow", "moment"]), required=True)
@config_option
@set_option
@seed_option
@out_option
def train(samples, catalog, sim_config, histories, mode, config_path, sets, seed, out):
    """Stream samples through the model; writes checkpoint.bin and trace.csv."""
    rc = run_config(config_path, sets, seed)
    sim_cfg = ex.SimConfig.from_dict(json.loads(Path(sim_config).read_text()))
    cat = Catalog.from_dict(json.loads(Path(catalog).read_text()))
    overrides = dict(rc.model)
    overrides.setdefault("seed", rc.seed if rc.seed is not None else sim_cfg.seed)
    cfg = default_model_config(sim_cfg, cat, **overrides)
    run = open_run(out, "train", {"mode": mode, "model": cfg.to_dict(), "batch_size": rc.batch_size},
                   {"samples": samples, "catalog": catalog, "sim_config": sim_config, "histories": histories})
    fz = Featurizer(cfg, cat, read_histories(histories) if histories else None)
    params = init_params(cfg)
    _, trace = train_stream(params, read_samples(samples), mode, cfg, fz, batch_size=rc.batch_size)
    save_checkpoint(params, cfg, run / "checkpoint.bin", {"mode": mode})
    write_trace(trace, run / "trace.csv")
    click.echo(str(run))


@main.command("eval")
@click.argument("checkpoint", type=click.Path(exists=True, dir_okay=False))
@click.option("--events", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--catalog", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--histories", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--after", type=float, default=0.0, show_default=True,
              help="Only score sessions entering at or after this time.")
@out_option
def eval_cmd(checkpoint, events, catalog, histories, after, out):
    """Score sessions of an event log with a checkpoint; writes metrics.json and metrics.csv."""
    params, cfg, _ = load_checkpoint(checkpoint)
    run = open_run(out, "eval", {"after": after},
                   {"checkpoint": checkpoint, "events": events, "catalog": catalog, "histories": histories})
    cat = Catalog.from_dict(json.loads(Path(catalog).read_text()))
    fz = Featurizer(cfg, cat, read_histories(histories) if histories else None)
    hold = ex.Holdout.from_events(read_events(events))
    keep = hold.enters >= after
    prob = predict_samples(params, hold.users[keep], hold.rooms[keep], hold.enters[keep], cfg, fz)
    y = hold.labels[keep]
    bias = calibration_bias(prob, y)
    rows = []
    for i, t in enumerate(TASKS):
        rows.append({"task": t, "auc": _r(auc(prob[:, i], y[:, i])),
                     "gauc": _r(gauc(hold.users[keep], prob[:, i], y[:, i])), "calibration_bias": _r(bias[t])})
    write_json({"sessions": int(keep.sum()), "tasks": rows}, run / "metrics.json")
    _write_rows(rows, run / "metrics.csv")
    click.echo(str(run))


@main.command("compare-policies")
@config_option
@set_option
@seed_option
@out_option
def compare_policies(config_path, sets, seed, out):
    """Run every configured policy on one simulated log; writes report.json and CTR series."""
    rc = run_config(config_path, sets, seed)
    run = open_run(out, "compare-policies", rc.to_dict(), {})
    sim = simulate(rc.sim)
    report, runs = ex.compare_policies(rc, sim)
    ex.write_report(report, run / "report.json")
    rooms = [r.room_id for r in sim.rooms]
    for kind, pr in runs.items():
        ex.write_series(pr, rooms, run / f"series_{kind}.csv")
    click.echo(str(run))


@main.command()
@click.argument("report_path", type=click.Path(exists=True))
def report(report_path):
    """Print a comparison report as a table and write report.csv next to it."""
    path = Path(report_path)
    if path.is_dir():
        path = path / "report.json"
    rep = json.loads(path.read_text())
    rows = []
    for kind, pol in rep["policies"].items():
        rows.append({"policy": kind, "samples": pol["samples"], "detection_lag": pol["detection_lag"],
                     **{f"auc_{t}": pol["auc"][t] for t in TASKS},
                     **{f"gauc_{t}": pol["gauc"][t] for t in TASKS}})
    _write_rows(rows, path.with_suffix(".csv"))
    click.echo(f"seed {rep['seed']}  sessions {rep['sessions']}  onsets {rep['highlight_onsets']}  "
               f"sample_volume_ratio {_fmt(rep.get('sample_volume_ratio'))}")
    click.echo(f"{'policy':<12} {'samples':>8} {'lag_s':>8} {'auc_click':>10} {'gauc_click':>10}")
    for r in rows:
        click.echo(f"{r['policy']:<12} {r['samples']:>8} {_fmt(r['detection_lag']):>8} "
                   f"{_fmt(r['auc_click']):>10} {_fmt(r['gauc_click']):>10}")
    if "lag_gap" in rep:
        click.echo(f"lag gap (fast_slow - realtime): {_fmt(rep['lag_gap'])} s")
    click.echo("consistency: " + "  ".join(f"{c['task']}={_fmt(c['consistency'])}" for c in rep["consistency"]))


def _r(v):
    return None if v is None else round(float(v), 6)


def _fmt(v) -> str:
    return "null" if v is None else (f"{v:.4g}" if isinstance(v, float) else str(v))


def _write_rows(rows, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]) if rows else [])
        w.writeheader()
        for r in rows:
            w.writerow({k: "null" if v is None else v for k, v in r.items()})


if __name__ == "__main__":
    main()
