import json
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from livectr.cli import main
from livectr.labels import read_samples
from livectr.model import init_params, load_checkpoint, params_digest
from livectr.sim import write_events

from conftest import make_log
from test_labels import SESSION

SMALL = {"sim": {"num_users": 60, "num_rooms": 3, "horizon": 3600.0, "num_short_videos": 40}, "probe_users": 8}


def invoke(*args):
    res = CliRunner().invoke(main, [str(a) for a in args])
    return res


def ok(*args) -> Path:
    res = invoke(*args)
    assert res.exit_code == 0, res.output
    return Path(res.output.strip().splitlines()[-1])


@pytest.fixture
def cfg(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(SMALL))
    return p


@pytest.fixture
def sim_run(tmp_path, cfg):
    return ok("simulate", "--config", cfg, "--seed", 4, "--out", tmp_path / "runs")


def test_simulate_outputs_and_repeatability(tmp_path, cfg, sim_run):
    assert (sim_run / "events.jsonl").stat().st_size > 0
    manifest = json.loads((sim_run / "manifest.json").read_text())
    assert manifest["command"] == "simulate" and manifest["config"]["seed"] == 4
    again = ok("simulate", "--config", cfg, "--seed", 4, "--out", tmp_path / "other")
    assert again.name == sim_run.name
    for f in ("events.jsonl", "ground_truth.csv", "histories.jsonl", "catalog.json"):
        assert (again / f).read_bytes() == (sim_run / f).read_bytes()


def test_simulate_toml_and_overrides(tmp_path):
    toml = tmp_path / "cfg.toml"
    toml.write_text("probe_users = 4\n[sim]\nnum_users = 0\nnum_rooms = 2\nhorizon = 1800.0\n")
    run = ok("simulate", "--config", toml, "--set", "sim.num_short_videos=5", "--out", tmp_path)
    assert (run / "events.jsonl").read_text() == ""
    assert (run / "ground_truth.csv").read_text().startswith("room_id,t,attractiveness")
    assert json.loads((run / "sim_config.json").read_text())["num_short_videos"] == 5


def test_assemble_hand_traces(tmp_path):
    log = tmp_path / "events.jsonl"
    write_events(make_log(SESSION), log)
    counts = {}
    for policy in ("exit_report", "fast_slow", "realtime"):
        run = ok("assemble", log, "--policy", policy, "--out", tmp_path)
        counts[policy] = len(read_samples(run / "samples.jsonl"))
    assert counts == {"exit_report": 1, "fast_slow": 2, "realtime": 3}


def test_assemble_exit_one_per_session(sim_run, tmp_path):
    from livectr.sim import group_sessions, read_events

    run = ok("assemble", sim_run / "events.jsonl", "--policy", "exit_report", "--out", tmp_path)
    n = len(group_sessions(read_events(sim_run / "events.jsonl")))
    assert len(read_samples(run / "samples.jsonl")) == n


def test_malformed_log_reports_line(tmp_path):
    log = tmp_path / "bad.jsonl"
    write_events(make_log(SESSION), log)
    lines = log.read_text().splitlines()
    lines.insert(2, '{"event_id": 1, "oops": true}')
    log.write_text("\n".join(lines) + "\n")
    res = invoke("assemble", log, "--policy", "realtime", "--out", tmp_path)
    assert res.exit_code != 0
    assert ":3:" in res.output


def _train(sim_run, samples, mode, tmp_path, *extra):
    return ok("train", samples, "--catalog", sim_run / "catalog.json", "--sim-config", sim_run / "sim_config.json",
              "--mode", mode, "--out", tmp_path / "train", *extra)


def test_train_empty_and_repeat(tmp_path, sim_run):
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    run = _train(sim_run, empty, "moment", tmp_path, "--seed", 3)
    params, cfg, extra = load_checkpoint(run / "checkpoint.bin")
    assert params_digest(params) == params_digest(init_params(cfg)) and extra["mode"] == "moment"

    samples = ok("assemble", sim_run / "events.jsonl", "--policy", "fast_slow", "--out", tmp_path) / "samples.jsonl"
    a = _train(sim_run, samples, "fast_slow", tmp_path / "a", "--seed", 3)
    b = _train(sim_run, samples, "fast_slow", tmp_path / "b", "--seed", 3)
    assert (a / "checkpoint.bin").read_bytes() == (b / "checkpoint.bin").read_bytes()
    assert (a / "trace.csv").read_text().startswith("step,report_ts,loss,n,loss_click")


def test_train_mode_mismatch_fails(tmp_path, sim_run):
    samples = ok("assemble", sim_run / "events.jsonl", "--policy", "realtime", "--out", tmp_path) / "samples.jsonl"
    res = invoke("train", samples, "--catalog", sim_run / "catalog.json", "--sim-config", sim_run / "sim_config.json",
                 "--mode", "fast_slow", "--out", tmp_path)
    assert res.exit_code == 1
    assert "cannot train in fast_slow mode" in res.output


def test_train_loss_trace_decreases_on_stationary_stream(tmp_path, sim_run):
    from livectr.labels import TrainingSample, write_samples
    from livectr.sim import TASKS

    rng = np.random.default_rng(0)
    stream = []
    for i in range(3000):
        u, r = int(rng.integers(5)), int(rng.integers(3))
        y = int(rng.random() < (0.8 if u % 2 else 0.1))
        stream.append(TrainingSample(i, u, r, float(i), "exit", {t: y if t == "click" else 0 for t in TASKS},
                                     {t: True for t in TASKS}, float(i)))
    path = tmp_path / "toy.jsonl"
    write_samples(stream, path)
    run = _train(sim_run, path, "moment", tmp_path, "--set", "model.lr=0.01")
    loss = np.loadtxt(run / "trace.csv", delimiter=",", skiprows=1, usecols=2)
    avg = np.convolve(loss, np.ones(500) / 500, mode="valid")[::500]
    assert np.all(np.diff(avg) < 0)


def test_eval_and_compare_and_report(tmp_path, sim_run, cfg):
    samples = ok("assemble", sim_run / "events.jsonl", "--policy", "realtime", "--out", tmp_path) / "samples.jsonl"
    model = _train(sim_run, samples, "moment", tmp_path)
    ev = ok("eval", model / "checkpoint.bin", "--events", sim_run / "events.jsonl", "--catalog",
            sim_run / "catalog.json", "--out", tmp_path)
    metrics = json.loads((ev / "metrics.json").read_text())
    assert [r["task"] for r in metrics["tasks"]][0] == "click" and metrics["sessions"] > 0

    run = ok("compare-policies", "--config", cfg, "--seed", 4, "--out", tmp_path / "cmp")
    rep = json.loads((run / "report.json").read_text())
    assert set(rep["policies"]) == {"exit_report", "fast_slow", "realtime"}
    assert rep["sample_volume_ratio"] == pytest.approx(rep["policies"]["realtime"]["samples"]
                                                       / rep["policies"]["fast_slow"]["samples"], abs=1e-6)
    assert {r["task"] for r in rep["consistency"]} >= {"click", "gift"}
    res = invoke("report", run)
    assert res.exit_code == 0 and "realtime" in res.output
    assert (run / "report.csv").exists()


def test_identical_policies_give_identical_metrics(tmp_path, cfg):
    run = ok("compare-policies", "--config", cfg, "--set", 'policies=["realtime","realtime"]', "--out", tmp_path)
    rep = json.loads((run / "report.json").read_text())
    assert list(rep["policies"]) == ["realtime"]
    from livectr.experiment import RunConfig, compare_policies

    rc = RunConfig.from_dict(dict(SMALL, policies=["realtime", "fast_slow"]))
    a, _ = compare_policies(rc)
    b, _ = compare_policies(RunConfig.from_dict(dict(SMALL, policies=["realtime", "fast_slow"])))
    assert a == b


def test_bad_config_is_reported(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps({"sim": {"horizon": -1}}))
    res = invoke("simulate", "--config", p, "--out", tmp_path)
    assert res.exit_code == 1 and "error:" in res.output
    p.write_text(json.dumps({"bogus": 1}))
    assert invoke("simulate", "--config", p, "--out", tmp_path).exit_code == 1
