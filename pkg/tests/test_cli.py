import json
import os
from pathlib import Path

import pytest
import torch
from hypothesis import given, settings, strategies as st

from rectiflow import backbone as bb
from rectiflow import cli
from rectiflow import config as cfg
from rectiflow.errors import ConfigError
from rectiflow.schedules import linear_beta_schedule


def _files(root: Path) -> set:
    return {p for p in root.rglob("*") if p.is_file()}


def test_help_exits_zero(capsys):
    assert cli.main(["--help"]) == 0
    assert "train" in capsys.readouterr().out


@pytest.mark.parametrize("command,flags", [
    (["train"], cli.TRAIN_FLAGS), (["sample"], cli.SAMPLE_FLAGS),
    (["analyze", "curvature"], cli.ANALYZE_FLAGS), (["bench", "steps"], cli.BENCH_FLAGS)])
def test_subcommand_help_documents_every_flag(capsys, command, flags):
    assert cli.main([command[0], "--help"]) == 0
    text = capsys.readouterr().out
    for dest in list(flags) + list(cli.COMMON_FLAGS) + ["config", "set", "deterministic"]:
        assert "--" + dest.replace("_", "-") in text, dest


def test_usage_errors_exit_two(tmp_path):
    assert cli.main(["train", "--bogus"]) == 2
    assert cli.main(["fly"]) == 2
    assert cli.main([]) == 2
    assert cli.main(["train", "--set", "train.momentum=0.9", "--out", str(tmp_path)]) == 2
    bad = tmp_path / "bad.cfg"
    bad.write_text("train.steps = 10\nmodel.width = 3\n")
    assert cli.main(["train", "--config", str(bad), "--out", str(tmp_path)]) == 2
    assert cli.main(["sample", "--out", str(tmp_path)]) == 2  # no checkpoint given


def test_config_parsing():
    values = cfg.parse_text("# comment\nseed = 4  # trailing\n\ndata.toy_mean = 1.5, -2\ndeterministic = yes\n")
    assert values == {"seed": 4, "data.toy_mean": (1.5, -2.0), "deterministic": True}
    with pytest.raises(ConfigError):
        cfg.parse_text("seed 4")
    with pytest.raises(ConfigError):
        cfg.parse_text("seed = four")
    with pytest.raises(ConfigError):
        cfg.resolve({"nonsense": 1})


key_values = st.sampled_from([("seed", st.integers(0, 100)), ("train.steps", st.integers(0, 50)),
                              ("train.lr", st.floats(1e-5, 1.0)), ("data.toy", st.sampled_from(["a", "b"])),
                              ("deterministic", st.booleans())])


@st.composite
def layers(draw):
    out = {}
    for _ in range(draw(st.integers(0, 4))):
        key, strategy = draw(key_values)
        out[key] = draw(strategy)
    return out


@settings(max_examples=200, deadline=None)
@given(a=layers(), b=layers(), c=layers())
def test_resolution_is_associative_and_last_wins(a, b, c):
    assert cfg.resolve(a, b, c) == cfg.resolve(a, {**b, **c}) == cfg.resolve({**a, **b}, c)
    merged = cfg.resolve(a, b, c)
    for key in cfg.SCHEMA:
        if key in c:
            assert merged[key] == c[key]
        elif key in b:
            assert merged[key] == b[key]
        elif key in a:
            assert merged[key] == a[key]
        else:
            assert merged[key] == cfg.SCHEMA[key][1]


def test_train_run_layout_and_flag_precedence(tmp_path):
    conf = tmp_path / "run.cfg"
    conf.write_text("train.steps = 500\nseed = 3\ntrain.lr = 0.001\n")
    out = tmp_path / "out"
    before = _files(tmp_path)
    code = cli.main(["train", "--config", str(conf), "--steps", "20", "--paradigm", "diffusion",
                     "--out", str(out), "--run-id", "r1", "--deterministic", "--set", "data.toy_count=600"])
    assert code == 0
    run = out / "r1"
    assert {p.name for p in run.iterdir()} == {"run.json", "ckpt", "samples", "reports", "figures"}
    echoed = json.loads((run / "run.json").read_text())["settings"]
    assert echoed["train.steps"] == 20 and echoed["seed"] == 3 and echoed["train.lr"] == 0.001
    assert echoed["data.toy_count"] == 600 and echoed["train.paradigm"] == "diffusion"
    new = _files(tmp_path) - before
    assert all(run in p.parents for p in new)
    ckpt = bb.load(run / "ckpt" / "diffusion")
    assert ckpt.paradigm == "diffusion" and ckpt.train_meta["steps"] == 20
    rows = (run / "reports" / "loss_diffusion.csv").read_text().splitlines()
    assert rows[0] == "step,loss,wall_ms" and rows[-1].endswith(",0.0")


def test_default_run_id_has_timestamp_and_seed_hash(tmp_path):
    assert cli.main(["train", "--steps", "1", "--out", str(tmp_path), "--set", "data.toy_count=300"]) == 0
    (run,) = list(tmp_path.iterdir())
    stamp, digest = run.name.rsplit("-", 1)
    assert stamp.endswith("Z") and len(digest) == 6


def test_sample_and_analyze_commands(tmp_path, quick_models):
    _, flow, diff = quick_models
    out = str(tmp_path)
    assert cli.main(["sample", "--ckpt", str(flow), "--sampler", "euler", "--steps", "10", "--count", "64",
                     "--seed", "7", "--record-traj", "out.traj", "--grid", "../../escape.png",
                     "--out", out, "--run-id", "s"]) == 0
    assert (tmp_path / "s" / "samples" / "out.traj" / "manifest.json").exists()
    assert (tmp_path / "s" / "figures" / "escape.png").exists()
    assert not (tmp_path / "escape.png").exists()
    assert cli.main(["analyze", "curvature", "--ckpt-flow", str(flow), "--ckpt-diff", str(diff), "--n", "12",
                     "--out", out, "--run-id", "c"]) == 0
    summary = json.loads((tmp_path / "c" / "reports" / "curvature_summary.json").read_text())
    assert set(summary) == {"flow", "diffusion"} and summary["flow"]["n"] == 12
    assert (tmp_path / "c" / "figures" / "curvature_hist.svg").exists()
    assert len((tmp_path / "c" / "reports" / "curvature.csv").read_text().splitlines()) == 25
    assert cli.main(["analyze", "field", "--ckpt-flow", str(flow), "--out", out, "--run-id", "f"]) == 0
    assert (tmp_path / "f" / "figures" / "field_quiver.svg").exists()
    assert cli.main(["analyze", "interp", "--ckpt-flow", str(flow), "--K", "4", "--out", out, "--run-id", "i"]) == 0
    assert len(json.loads((tmp_path / "i" / "reports" / "interp.json").read_text())["adjacent_mean_abs_diff"]) == 5
    # wrong paradigm for the sampler is a configuration error
    assert cli.main(["sample", "--ckpt", str(diff), "--sampler", "euler", "--out", out]) == 2


def test_bench_mismatched_presets_is_runtime_error(tmp_path, quick_models):
    _, flow, _ = quick_models
    bb.save(bb.build(bb.preset_config("tiny_unet")), tmp_path / "unet_diff", paradigm="diffusion",
            schedule=linear_beta_schedule().params())
    code = cli.main(["bench", "steps", "--ckpt-flow", str(flow), "--ckpt-diff", str(tmp_path / "unet_diff"),
                     "--steps-list", "5", "--count", "10", "--out", str(tmp_path / "o")])
    assert code == 1


def test_bench_commands_write_reports(tmp_path, quick_models):
    _, flow, diff = quick_models
    common = ["--ckpt-flow", str(flow), "--ckpt-diff", str(diff), "--out", str(tmp_path), "--set",
              "data.real_count=300", "--deterministic"]
    assert cli.main(["bench", "steps", "--steps-list", "5,10", "--count", "300", "--run-id", "st"] + common) == 0
    report = json.loads((tmp_path / "st" / "reports" / "steps" / "report.json").read_text())
    assert len(report["rows"]) == 4 and report["timestamp"] == "1970-01-01T00:00:00Z"
    assert len(list((tmp_path / "st" / "figures" / "steps").glob("*.png"))) == 4
    assert cli.main(["bench", "solver", "--solver-steps", "8", "--count", "300", "--run-id", "so"] + common) == 0
    assert cli.main(["bench", "latency", "--reps", "3", "--warmup", "1", "--run-id", "la"] + common) == 0
    rows = (tmp_path / "la" / "reports" / "latency" / "report.csv").read_text().splitlines()
    assert rows[0] == "config,metric,value,unit,sweep" and len(rows) > 1


def test_deterministic_reruns_are_byte_identical(tmp_path, quick_models):
    _, flow, diff = quick_models
    for rid in ("a", "b"):
        args = ["--out", str(tmp_path), "--run-id", rid, "--deterministic"]
        assert cli.main(["train", "--steps", "30", "--set", "data.toy_count=500"] + args) == 0
        assert cli.main(["analyze", "curvature", "--ckpt-flow", str(flow), "--ckpt-diff", str(diff),
                         "--n", "10"] + args) == 0
        assert cli.main(["bench", "steps", "--ckpt-flow", str(flow), "--ckpt-diff", str(diff), "--steps-list", "5",
                         "--count", "200", "--set", "data.real_count=200"] + args) == 0
    for rel in ("reports/loss_flow.csv", "reports/curvature.csv", "reports/curvature_summary.json",
                "reports/steps/report.json", "reports/steps/report.csv", "ckpt/flow/params.bin"):
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel


def test_thread_cap_env(monkeypatch, tmp_path):
    monkeypatch.setenv("RECTIFLOW_THREADS", "0")
    assert cli.main(["train", "--steps", "1", "--out", str(tmp_path), "--set", "data.toy_count=300"]) == 0
    assert torch.get_num_threads() == 1


def test_reproduce_writes_one_summary_line_per_criterion(tmp_path, capsys):
    conf = tmp_path / "configs"
    conf.mkdir()
    (conf / "toy.cfg").write_text("data.toy_count = 2000\ndata.real_count = 300\ntrain.lr = 0.001\n"
                                  "analyze.n = 10\nbench.steps_list = 10,100\nbench.count = 300\n"
                                  "bench.reps = 3\nbench.warmup = 1\n")
    out = tmp_path / "out"
    assert cli.main(["reproduce", str(conf), "--out", str(out), "--steps", "50"]) == 0
    lines = [l for l in (out / "summary.md").read_text().splitlines() if l.startswith("- [")]
    assert [int(l.split("]", 1)[1].split(".")[0]) for l in lines] == list(range(1, 13))
    assert all(l[3:7] in ("PASS", "FAIL", "SKIP") for l in lines)
    assert "SKIP] 12." in (out / "summary.md").read_text()
    assert (out / "toy" / "run.json").exists() and (out / "toy_determinism" / "determinism_a").is_dir()
    assert "Reproduction summary" in capsys.readouterr().out


def test_reproduce_stage_failure_exits_nonzero(tmp_path):
    assert cli.main(["reproduce", str(tmp_path / "nowhere"), "--out", str(tmp_path)]) == 1
