import csv
import json

import numpy as np
import pytest

from cfdt import experiment as ex
from cfdt.cli import CONFIG, DATA, main
from cfdt.data import load_layouts, load_trajectories
from cfdt.gridworld import layout_to_dict

from conftest import bfs_reachable

TINY = {
    "n_cf_envs": 6, "n_target_envs": 5, "n_factual_rollouts": 2, "rollouts_per_env": 1,
    "ate_rollouts": 2, "seeds": [0],
    "dt": {"context_len": 4, "embed_dim": 16, "n_layers": 1, "n_heads": 2, "batch_size": 8,
           "training_steps": 20, "log_every": 10},
}


def _cfg(**kw):
    d = json.loads(json.dumps(TINY))
    d.update(kw)
    return ex.ExperimentConfig.from_dict(d)


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = _cfg()
    report = ex.run_all(cfg, out)
    return cfg, out, report


def test_scenario_invariants():
    assert ex.ExperimentConfig(scenario="easy").n_obstacles_target == 6
    assert ex.ExperimentConfig(scenario="hard").n_obstacles_target == 7
    with pytest.raises(ValueError):
        ex.ExperimentConfig(scenario="hard", n_obstacles_target=6)
    with pytest.raises(ValueError):
        ex.ExperimentConfig(scenario="medium")
    hard = ex.ExperimentConfig().with_overrides(scenario="hard")
    assert hard.n_obstacles_target == 7
    assert hard.dt.obs_dim == 8 * 8 * 4 + 4


def test_config_text_formats():
    text = """
    # comment
    beta = 2.5
    scenario = hard
    seeds = [1, 2]
    [dt]
    lr = 3e-4
    """
    d = ex.parse_config_text(text)
    assert d == {"beta": 2.5, "scenario": "hard", "seeds": [1, 2], "dt": {"lr": 3e-4}}
    cfg = ex.ExperimentConfig.from_dict(d)
    assert cfg.dt.lr == 3e-4 and cfg.n_obstacles_target == 7
    assert ex.parse_config_text(json.dumps({"beta": 1})) == {"beta": 1}
    with pytest.raises(ValueError):
        ex.ExperimentConfig.from_dict({"bogus": 1})
    with pytest.raises(ValueError):
        ex.ExperimentConfig.from_dict({"dt": {"bogus": 1}})


def test_config_round_trip():
    cfg = _cfg(beta=3.0)
    assert ex.ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_gen_layout_sets(tiny_run):
    cfg, out, _ = tiny_run
    d = out / "seed-0" / "layouts"
    source, = load_layouts(d / "source.json")
    cfs = load_layouts(d / "counterfactual.json")
    targets = load_layouts(d / "target.json")
    assert len(cfs) == cfg.n_cf_envs and len(targets) == cfg.n_target_envs
    assert {len(l.obstacles) for l in targets} == {cfg.n_obstacles_target}
    assert {len(l.obstacles) for l in cfs} == {cfg.n_obstacles_source}
    cf_ids, target_ids = {l.layout_id for l in cfs}, {l.layout_id for l in targets}
    assert not cf_ids & target_ids and source.layout_id not in target_ids
    for l in cfs + targets:
        assert bfs_reachable(8, 8, l.obstacles, l.start, l.goal)
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["stages"]["gen"]["0"]["cf_target_intersection"] == []


def test_gen_is_repeatable(tmp_path):
    cfg = _cfg()
    ex.cmd_gen(cfg, tmp_path / "a")
    ex.cmd_gen(cfg, tmp_path / "b")
    for name in ("source", "counterfactual", "target"):
        a = (tmp_path / "a" / "seed-0" / "layouts" / f"{name}.json").read_bytes()
        assert a == (tmp_path / "b" / "seed-0" / "layouts" / f"{name}.json").read_bytes()
    assert (tmp_path / "a" / "manifest.json").read_bytes() == (tmp_path / "b" / "manifest.json").read_bytes()


def test_hard_targets_have_extra_obstacle(tmp_path):
    ex.cmd_gen(_cfg(scenario="hard"), tmp_path)
    targets = load_layouts(tmp_path / "seed-0" / "layouts" / "target.json")
    assert {len(l.obstacles) for l in targets} == {7}


def test_collect_outputs(tiny_run):
    cfg, out, _ = tiny_run
    sd = out / "seed-0"
    source, = load_layouts(sd / "layouts" / "source.json")
    factual = load_trajectories(sd / "data" / "factual.jsonl")
    assert len(factual) == cfg.n_factual_rollouts
    assert {t.layout_id for t in factual} == {source.layout_id}
    cf = load_trajectories(sd / "data" / "counterfactual.jsonl")
    assert len(cf) == cfg.n_cf_envs * cfg.rollouts_per_env
    table = json.loads((sd / "data" / "ate.json").read_text())
    assert len(table["rows"]) == cfg.n_cf_envs
    ates = ex.ate_table(out, 0)
    assert ates[source.layout_id] == 0.0


def test_variant_datasets(tiny_run):
    cfg, out, _ = tiny_run
    f = ex.variant_dataset(cfg, out, 0, "dt-f")
    assert {t.provenance for t in f.trajectories} == {"factual"} and f.beta == 0.0
    fcf_ate = ex.variant_dataset(cfg, out, 0, "dt-fcf-ate")
    assert {t.provenance for t in fcf_ate.trajectories} == {"factual", "counterfactual"}
    assert fcf_ate.beta == cfg.beta
    ates = ex.ate_table(out, 0)
    raw = np.exp(cfg.beta * np.array([ates[t.layout_id] for t in fcf_ate.trajectories]))
    np.testing.assert_allclose(fcf_ate.weights, raw / raw.sum(), rtol=1e-12)
    with pytest.raises(ValueError):
        ex.variant_dataset(cfg, out, 0, "dt-x")


def test_loss_trace_files(tiny_run):
    cfg, out, _ = tiny_run
    rows = list(csv.DictReader(open(out / "seed-0" / "checkpoints" / "dt-fcf.loss.csv")))
    assert [int(r["step"]) for r in rows] == [10, 20]


def test_eval_outputs(tiny_run):
    cfg, out, _ = tiny_run
    for agent in ex.AGENTS:
        rows = list(csv.DictReader(open(out / "seed-0" / "eval" / f"{agent}.csv")))
        assert len(rows) == cfg.n_target_envs
        assert list(rows[0]) == ["layout_id", "total_return", "length", "reached_goal",
                                 "agent_variant", "seed"]
        summary = json.loads((out / "seed-0" / "eval" / f"{agent}.json").read_text())
        goals = [r["reached_goal"] == "True" for r in rows]
        assert summary["goal_rate"] == pytest.approx(np.mean(goals))
        h = summary["histogram"]
        assert sum(h["counts"]) + h["failure_count"] + h["other_count"] == cfg.n_target_envs
        assert sum(h["counts"]) == sum(goals)


def test_report_contents(tiny_run):
    cfg, out, report = tiny_run
    assert [r["agent"] for r in report["agents"]] == list(ex.AGENTS)
    assert len(report["agents"]) == 6
    assert report["config"] == cfg.to_dict()
    for row in report["agents"]:
        assert 0 <= row["goal_rate"] <= 1
        assert {"composition", "beta", "seeds"} <= set(row)
    by = {r["agent"]: r for r in report["agents"]}
    for c in report["checks"]:
        assert c["passed"] == (by[c["better"]]["goal_rate"] >= by[c["baseline"]]["goal_rate"] + c["margin"] - 1e-12)
    assert "wall_clock_seconds" not in report
    assert (out / "timing.json").exists()
    assert len((out / "report.csv").read_text().splitlines()) == 7


def test_histogram_bins():
    h = ex.histogram([-1.0, 0.05, 0.91, 1.0, 0.5, -1.0], -1.0)
    assert h["failure_count"] == 2
    assert h["counts"][0] == 1 and h["counts"][18] == 1 and h["counts"][19] == 1 and h["counts"][9] == 1
    assert len(h["edges"]) == 21


def test_report_requires_all_fragments(tmp_path):
    cfg = _cfg()
    with pytest.raises(ex.ExperimentError):
        ex.cmd_report(cfg, tmp_path)


def test_train_cache_reuses_checkpoint(tmp_path):
    cfg = _cfg()
    for run in ("a", "b"):
        ex.cmd_gen(cfg, tmp_path / run)
        ex.cmd_collect(cfg, tmp_path / run)
        ex.cmd_train(cfg, tmp_path / run, "dt-cf", cache_dir=tmp_path / "cache")
    a = (tmp_path / "a" / "seed-0" / "checkpoints" / "dt-cf.json").read_bytes()
    assert a == (tmp_path / "b" / "seed-0" / "checkpoints" / "dt-cf.json").read_bytes()
    assert len(list((tmp_path / "cache").iterdir())) == 1


def test_cli_stages_and_errors(tmp_path, capsys):
    cfg_path = tmp_path / "tiny.json"
    cfg_path.write_text(json.dumps(TINY))
    out = str(tmp_path / "run")
    base = ["--config", str(cfg_path), "--out", out, "--seed", "3"]
    assert main(["collect"] + base) == DATA
    assert main(["gen"] + base) == 0
    assert main(["eval", "--variant", "dt-f"] + base) == DATA
    assert main(["collect"] + base) == 0
    assert main(["train", "--variant", "dt-f"] + base) == 0
    assert main(["eval", "--variant", "dt-f", "--variant", "source"] + base) == 0
    assert main(["report"] + base) == DATA
    assert main(["gen", "--set", "beta=-"] + base + ["--set", "bogus=1"]) == CONFIG
    with pytest.raises(SystemExit):
        main(["gen"])
    assert (tmp_path / "run" / "seed-3" / "eval" / "dt-f.csv").exists()
    manifest = json.loads((tmp_path / "run" / "manifest.json").read_text())
    assert manifest["config"]["seeds"] == [3]


def test_cli_run_is_deterministic(tmp_path, capsys):
    cfg_path = tmp_path / "tiny.cfg"
    cfg_path.write_text("n_cf_envs = 4\nn_target_envs = 3\nn_factual_rollouts = 2\n"
                        "rollouts_per_env = 1\nate_rollouts = 2\n[dt]\ncontext_len = 3\n"
                        "embed_dim = 8\nn_layers = 1\nn_heads = 2\nbatch_size = 4\n"
                        "training_steps = 10\nlog_every = 5\n")
    for run in ("a", "b"):
        assert main(["run", "--config", str(cfg_path), "--out", str(tmp_path / run), "--seed", "1",
                     "--deterministic", "--scenario", "hard"]) == 0
    assert "dt-fcf-ate" in capsys.readouterr().out
    for name in ("report.json", "report.csv", "manifest.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
