"""File-based orchestration of the transfer experiment.

A run directory holds one sub-directory per master seed plus a top-level
``manifest.json``::

    run/
      manifest.json
      seed-0/layouts/{source,counterfactual,target}.json
      seed-0/policy.json
      seed-0/data/{factual,counterfactual}.jsonl, ate.json
      seed-0/checkpoints/<variant>.json, <variant>.loss.csv
      seed-0/eval/<agent>.csv, <agent>.json
      report.json, report.csv

Each stage reads what the previous stage wrote, so stages can run as separate
processes.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import shutil
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import (COUNTERFACTUAL, FACTUAL, build_weights, collect_factual,
                   draw_counterfactual_layouts, estimate_ate, load_layouts, load_trajectories,
                   rollout, rollout_counterfactuals, save_layouts, save_trajectories)
from .dt import DTConfig, DTModel, evaluate, load_model, save_model, train
from .gridworld import GridLayout, RewardSpec, generate_layout
from .policy import FailSafeConfig, load_policy, save_policy, solve_policy
from .seeding import (STREAM_ATE, STREAM_EVAL, STREAM_SOURCE, STREAM_TARGET, STREAM_TRAIN,
                      derive_seed)

log = logging.getLogger(__name__)

DT_VARIANTS = {
    # name: (dataset composition, ATE weighting)
    "dt-f": ((FACTUAL,), False),
    "dt-cf": ((COUNTERFACTUAL,), False),
    "dt-fcf": ((FACTUAL, COUNTERFACTUAL), False),
    "dt-cf-ate": ((COUNTERFACTUAL,), True),
    "dt-fcf-ate": ((FACTUAL, COUNTERFACTUAL), True),
}
AGENTS = ("source",) + tuple(DT_VARIANTS)

# (name, better agent, baseline agent, margin in goal-rate points, scenarios where required)
ORDERING_CHECKS = (
    ("fcf_ate_beats_fcf", "dt-fcf-ate", "dt-fcf", 0.10, ("easy",)),
    ("fcf_beats_f", "dt-fcf", "dt-f", 0.10, ("easy",)),
    ("fcf_ate_beats_source", "dt-fcf-ate", "source", 0.20, ("easy",)),
    ("fcf_ate_beats_f", "dt-fcf-ate", "dt-f", 0.10, ("hard",)),
)

HIST_BINS = 20


class ExperimentError(RuntimeError):
    pass


@dataclass
class ExperimentConfig:
    width: int = 8
    height: int = 8
    scenario: str = "easy"
    n_obstacles_source: int = 6
    n_obstacles_target: int | None = None
    n_cf_envs: int = 200
    n_target_envs: int = 100
    n_factual_rollouts: int = 10
    rollouts_per_env: int = 3
    ate_rollouts: int = 5
    beta: float = 5.0
    horizon: int = 100
    success_scale: float = 0.9
    failure_reward: float = -1.0
    explore_steps: int = 10
    failsafe_collect: bool = True
    failsafe_source_eval: bool = False
    eval_episodes_per_layout: int = 1
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    deterministic: bool = True
    dt: DTConfig = field(default_factory=DTConfig)

    def __post_init__(self):
        if isinstance(self.dt, dict):
            self.dt = DTConfig.from_dict(self.dt)
        if self.scenario not in ("easy", "hard"):
            raise ValueError(f"scenario must be 'easy' or 'hard', got {self.scenario!r}")
        expected = self.n_obstacles_source + (1 if self.scenario == "hard" else 0)
        if self.n_obstacles_target is None:
            self.n_obstacles_target = expected
        elif self.n_obstacles_target != expected:
            raise ValueError(f"scenario {self.scenario} requires {expected} target obstacles, "
                             f"got {self.n_obstacles_target}")
        if self.eval_episodes_per_layout != 1:
            raise ValueError("greedy DT and tabular agents are deterministic; "
                             "eval_episodes_per_layout must be 1")
        self.seeds = [int(s) for s in self.seeds]
        # the DT sees the whole grid and needs one time embedding per step
        self.dt.obs_dim = self.width * self.height * 4 + 4
        self.dt.max_timestep = self.horizon

    @property
    def reward_spec(self) -> RewardSpec:
        return RewardSpec(self.horizon, self.success_scale, self.failure_reward)

    def failsafe(self, enabled: bool) -> FailSafeConfig | None:
        return FailSafeConfig(self.explore_steps) if enabled else None

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["dt"] = self.dt.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        if "dt" in d and isinstance(d["dt"], dict):
            bad = set(d["dt"]) - {f.name for f in dataclasses.fields(DTConfig)}
            if bad:
                raise ValueError(f"unknown dt config keys: {sorted(bad)}")
            d["dt"] = DTConfig.from_dict(d["dt"])
        return cls(**d)

    def with_overrides(self, **changes) -> "ExperimentConfig":
        d = self.to_dict()
        for key, value in changes.items():
            if key.startswith("dt."):
                d["dt"][key[3:]] = value
            else:
                d[key] = value
        if "scenario" in changes and "n_obstacles_target" not in changes:
            d["n_obstacles_target"] = None
        return ExperimentConfig.from_dict(d)


def _parse_value(text: str):
    text = text.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        lowered = text.lower()
        if lowered in ("true", "false"):
            return lowered == "true"
        return text.strip("\"'")


def parse_config_text(text: str) -> dict:
    """JSON, or ``key = value`` lines with optional ``[section]`` headers."""
    if text.lstrip().startswith("{"):
        return json.loads(text)
    out: dict = {}
    section = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if section:
            key = f"{section}.{key}"
        target = out
        *parents, leaf = key.split(".")
        for p in parents:
            target = target.setdefault(p, {})
        target[leaf] = _parse_value(value)
    return out


def load_config(path) -> ExperimentConfig:
    return ExperimentConfig.from_dict(parse_config_text(Path(path).read_text()))


# ---- helpers ---------------------------------------------------------------------

def _seed_dir(out: Path, seed: int) -> Path:
    return Path(out) / f"seed-{seed}"


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _read_json(path: Path):
    if not path.exists():
        raise ExperimentError(f"missing {path}; run the earlier pipeline stage first")
    return json.loads(path.read_text())


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _update_manifest(out: Path, stage: str, record: dict, cfg: ExperimentConfig) -> None:
    path = Path(out) / "manifest.json"
    manifest = json.loads(path.read_text()) if path.exists() else {}
    manifest["config"] = cfg.to_dict()
    manifest.setdefault("stages", {})[stage] = record
    _write_json(path, manifest)


def _limit_threads(cfg: ExperimentConfig):
    if cfg.deterministic:
        from threadpoolctl import threadpool_limits
        return threadpool_limits(1)
    return _nullcontext()


class _nullcontext:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


# ---- gen -------------------------------------------------------------------------

def draw_target_layouts(cfg: ExperimentConfig, seed: int, exclude: set[str]) -> list[GridLayout]:
    """Target layouts come from their own seed stream and skip any geometry in ``exclude``."""
    layouts, seen, j = [], set(exclude), 0
    while len(layouts) < cfg.n_target_envs:
        layout = generate_layout(derive_seed(seed, STREAM_TARGET, j), cfg.width, cfg.height,
                                 cfg.n_obstacles_target)
        j += 1
        if layout.layout_id in seen:
            continue
        seen.add(layout.layout_id)
        layouts.append(layout)
    return layouts


def cmd_gen(cfg: ExperimentConfig, out) -> dict:
    out = Path(out)
    record = {}
    for seed in cfg.seeds:
        d = _seed_dir(out, seed) / "layouts"
        d.mkdir(parents=True, exist_ok=True)
        source = generate_layout(derive_seed(seed, STREAM_SOURCE), cfg.width, cfg.height,
                                 cfg.n_obstacles_source)
        cfs = draw_counterfactual_layouts(source, cfg.n_cf_envs, cfg.n_obstacles_source, seed)
        cf_ids = {l.layout_id for l in cfs}
        targets = draw_target_layouts(cfg, seed, cf_ids | {source.layout_id})
        target_ids = {l.layout_id for l in targets}
        overlap = sorted(cf_ids & target_ids)
        if overlap or source.layout_id in target_ids:
            raise ExperimentError(f"seed {seed}: counterfactual/target layouts overlap: {overlap}")
        save_layouts(d / "source.json", [source])
        save_layouts(d / "counterfactual.json", cfs)
        save_layouts(d / "target.json", targets)
        record[str(seed)] = {
            "source_layout_id": source.layout_id,
            "n_counterfactual": len(cfs),
            "n_target": len(targets),
            "n_obstacles": {"source": cfg.n_obstacles_source, "counterfactual": cfg.n_obstacles_source,
                            "target": cfg.n_obstacles_target},
            "cf_target_intersection": overlap,
            "disjoint": True,
            "files": {name: _sha256(d / f"{name}.json")
                      for name in ("source", "counterfactual", "target")},
        }
    _update_manifest(out, "gen", record, cfg)
    return record


# ---- collect ---------------------------------------------------------------------

def _load_seed_layouts(out: Path, seed: int):
    d = _seed_dir(out, seed) / "layouts"
    for name in ("source", "counterfactual", "target"):
        if not (d / f"{name}.json").exists():
            raise ExperimentError(f"missing {d / name}.json; run `gen` first")
    return (load_layouts(d / "source.json")[0], load_layouts(d / "counterfactual.json"),
            load_layouts(d / "target.json"))


def cmd_collect(cfg: ExperimentConfig, out) -> dict:
    out = Path(out)
    rs = cfg.reward_spec
    failsafe = cfg.failsafe(cfg.failsafe_collect)
    record = {}
    for seed in cfg.seeds:
        sd = _seed_dir(out, seed)
        source, cfs, _ = _load_seed_layouts(out, seed)
        policy = solve_policy(source, rs)
        save_policy(policy, sd / "policy.json")
        factual = collect_factual(source, policy, cfg.n_factual_rollouts, seed, rs, failsafe)
        counterfactual = rollout_counterfactuals(cfs, policy, cfg.rollouts_per_env, seed, rs, failsafe)
        rows = []
        for i, layout in enumerate(cfs):
            est = estimate_ate(layout, source, policy, rs, cfg.ate_rollouts, failsafe,
                               derive_seed(seed, STREAM_ATE, i))
            rows.append(est.to_dict())
        (sd / "data").mkdir(parents=True, exist_ok=True)
        save_trajectories(sd / "data" / "factual.jsonl", factual)
        save_trajectories(sd / "data" / "counterfactual.jsonl", counterfactual)
        _write_json(sd / "data" / "ate.json", {
            "source_layout_id": source.layout_id,
            "rows": rows,
        })
        record[str(seed)] = {
            "n_factual": len(factual),
            "n_counterfactual": len(counterfactual),
            "n_ate_rows": len(rows),
            "failsafe": dataclasses.asdict(failsafe) if failsafe else None,
            "rollout_seed_streams": {"factual": "derive_seed(seed, 4, i)",
                                     "counterfactual": "derive_seed(seed, 5, env, k)",
                                     "ate": "derive_seed(derive_seed(seed, 6, env), 6, side, i)"},
            "files": {name: _sha256(sd / "data" / name)
                      for name in ("factual.jsonl", "counterfactual.jsonl", "ate.json")},
        }
    _update_manifest(out, "collect", record, cfg)
    return record


def ate_table(out, seed: int) -> dict[str, float]:
    """layout_id -> ATE, including the source layout at exactly zero."""
    table = _read_json(_seed_dir(Path(out), seed) / "data" / "ate.json")
    ates = {row["layout_id"]: row["ate"] for row in table["rows"]}
    ates[table["source_layout_id"]] = 0.0
    return ates


def variant_dataset(cfg: ExperimentConfig, out, seed: int, variant: str):
    if variant not in DT_VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {sorted(DT_VARIANTS)}")
    composition, weighted = DT_VARIANTS[variant]
    sd = _seed_dir(Path(out), seed)
    trajectories = []
    for part in composition:
        path = sd / "data" / f"{part}.jsonl"
        if not path.exists():
            raise ExperimentError(f"missing {path}; run `collect` first")
        trajectories += load_trajectories(path)
    source, cfs, _ = _load_seed_layouts(Path(out), seed)
    layouts = {l.layout_id: l for l in cfs + [source]}
    beta = cfg.beta if weighted else 0.0
    return build_weights(trajectories, ate_table(out, seed), beta, layouts,
                         {"variant": variant, "composition": list(composition), "beta": beta,
                          "seed": seed})


# ---- train -----------------------------------------------------------------------

def _train_key(cfg: ExperimentConfig, out: Path, seed: int, variant: str, dt_cfg: DTConfig) -> str:
    sd = _seed_dir(out, seed)
    h = hashlib.sha256()
    h.update(json.dumps({"variant": variant, "beta": cfg.beta, "dt": dt_cfg.to_dict()},
                        sort_keys=True).encode())
    for name in ("factual.jsonl", "counterfactual.jsonl", "ate.json"):
        h.update((sd / "data" / name).read_bytes())
    for name in ("source.json", "counterfactual.json"):
        h.update((sd / "layouts" / name).read_bytes())
    return h.hexdigest()[:24]


def cmd_train(cfg: ExperimentConfig, out, variant: str, cache_dir=None) -> dict:
    """Train one DT variant per seed.

    With ``cache_dir`` set, checkpoints are reused when the training inputs (data
    files, layouts, variant, DT config) hash identically; e.g. the easy and hard
    scenarios share counterfactual data and therefore share trained models.
    """
    out = Path(out)
    record = {}
    for seed in cfg.seeds:
        sd = _seed_dir(out, seed)
        ck_dir = sd / "checkpoints"
        ck_dir.mkdir(parents=True, exist_ok=True)
        dt_cfg = dataclasses.replace(cfg.dt, seed=derive_seed(seed, STREAM_TRAIN))
        key = _train_key(cfg, out, seed, variant, dt_cfg)
        ck_path, loss_path = ck_dir / f"{variant}.json", ck_dir / f"{variant}.loss.csv"
        cached = Path(cache_dir) / key if cache_dir else None
        t0 = time.perf_counter()
        if cached and (cached / "model.json").exists():
            shutil.copyfile(cached / "model.json", ck_path)
            shutil.copyfile(cached / "loss.csv", loss_path)
            log.info("seed %d %s: reused cached checkpoint %s", seed, variant, key)
        else:
            ds = variant_dataset(cfg, out, seed, variant)
            with _limit_threads(cfg):
                model, trace = train(DTModel(dt_cfg), ds, dt_cfg)
            save_model(model, ck_path, {"variant": variant, "seed": seed, "beta": ds.beta,
                                        "composition": ds.manifest["composition"],
                                        "n_trajectories": len(ds), "train_key": key})
            with open(loss_path, "w", newline="") as f:
                w = csv.writer(f, lineterminator="\n")
                w.writerow(["step", "loss"])
                w.writerows([(s, repr(l)) for s, l in trace])
            if cached:
                cached.mkdir(parents=True, exist_ok=True)
                shutil.copyfile(ck_path, cached / "model.json")
                shutil.copyfile(loss_path, cached / "loss.csv")
            log.info("seed %d %s: trained %d steps, final loss %.4f", seed, variant,
                     dt_cfg.training_steps, trace[-1][1] if trace else float("nan"))
        record[str(seed)] = {"checkpoint": str(ck_path.relative_to(out)), "train_key": key,
                             "dt_seed": dt_cfg.seed,
                             "seconds": round(time.perf_counter() - t0, 3)}
    _update_manifest(out, f"train:{variant}", {k: {kk: vv for kk, vv in v.items() if kk != "seconds"}
                                               for k, v in record.items()}, cfg)
    return record


# ---- eval ------------------------------------------------------------------------

def histogram(returns, failure_reward: float, bins: int = HIST_BINS) -> dict:
    """Failure mass plus ``bins`` uniform bins over (0, 1], right-closed."""
    returns = np.asarray(returns, dtype=float)
    edges = np.linspace(0.0, 1.0, bins + 1)
    success = returns[returns > 0]
    idx = np.clip(np.ceil(success * bins).astype(int) - 1, 0, bins - 1)
    counts = np.bincount(idx, minlength=bins)
    return {
        "failure_value": failure_reward,
        "failure_count": int(np.sum(returns == failure_reward)),
        "other_count": int(np.sum((returns <= 0) & (returns != failure_reward))),
        "edges": [float(e) for e in edges],
        "counts": [int(c) for c in counts],
    }


def summarize(rows: list[dict], failure_reward: float) -> dict:
    returns = [r["total_return"] for r in rows]
    return {
        "n_episodes": len(rows),
        "mean_return": float(np.mean(returns)),
        "mean_length": float(np.mean([r["length"] for r in rows])),
        "goal_rate": float(np.mean([r["reached_goal"] for r in rows])),
        "histogram": histogram(returns, failure_reward),
    }


def _eval_rows(cfg: ExperimentConfig, out: Path, seed: int, agent: str) -> tuple[list[dict], dict]:
    sd = _seed_dir(out, seed)
    _, _, targets = _load_seed_layouts(out, seed)
    rs = cfg.reward_spec
    if agent == "source":
        policy_path = sd / "policy.json"
        if not policy_path.exists():
            raise ExperimentError(f"missing {policy_path}; run `collect` first")
        policy = load_policy(policy_path)
        failsafe = cfg.failsafe(cfg.failsafe_source_eval)
        results = []
        for j, layout in enumerate(targets):
            traj = rollout(layout, policy, rs, failsafe, derive_seed(seed, STREAM_EVAL, j))
            results.append((layout.layout_id, traj.total_return, traj.episode_length, traj.reached_goal))
        provenance = {"agent": "source", "failsafe": failsafe is not None, "beta": None,
                      "composition": None}
    else:
        ck_path = sd / "checkpoints" / f"{agent}.json"
        if not ck_path.exists():
            raise ExperimentError(f"missing checkpoint {ck_path}; run `train --variant {agent}` first")
        model, extra = load_model(ck_path)
        with _limit_threads(cfg):
            episodes = evaluate(model, targets, rs, model.cfg)
        results = [(e.layout_id, e.total_return, e.length, e.reached_goal) for e in episodes]
        provenance = {"agent": agent, "failsafe": False, "beta": extra.get("beta"),
                      "composition": extra.get("composition"), "dt_seed": model.cfg.seed}
    rows = [{"layout_id": lid, "total_return": float(ret), "length": int(n),
             "reached_goal": bool(goal), "agent_variant": agent, "seed": seed}
            for lid, ret, n, goal in results]
    return rows, provenance


def cmd_eval(cfg: ExperimentConfig, out, agent: str) -> dict:
    if agent not in AGENTS:
        raise ValueError(f"unknown agent {agent!r}; choose from {list(AGENTS)}")
    out = Path(out)
    record = {}
    for seed in cfg.seeds:
        ed = _seed_dir(out, seed) / "eval"
        ed.mkdir(parents=True, exist_ok=True)
        rows, provenance = _eval_rows(cfg, out, seed, agent)
        with open(ed / f"{agent}.csv", "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=["layout_id", "total_return", "length", "reached_goal",
                                              "agent_variant", "seed"], lineterminator="\n")
            w.writeheader()
            for r in rows:
                w.writerow({**r, "total_return": repr(r["total_return"])})
        summary = {**summarize(rows, cfg.failure_reward), "provenance": provenance, "seed": seed}
        _write_json(ed / f"{agent}.json", summary)
        record[str(seed)] = {"goal_rate": summary["goal_rate"], "mean_return": summary["mean_return"]}
    _update_manifest(out, f"eval:{agent}", record, cfg)
    return record


# ---- report ----------------------------------------------------------------------

def cmd_report(cfg: ExperimentConfig, out, wall_clock: float | None = None) -> dict:
    out = Path(out)
    rows = []
    missing = []
    for agent in AGENTS:
        per_seed = []
        for seed in cfg.seeds:
            path = _seed_dir(out, seed) / "eval" / f"{agent}.json"
            if not path.exists():
                missing.append(str(path.relative_to(out)))
                continue
            per_seed.append(json.loads(path.read_text()))
        if len(per_seed) != len(cfg.seeds):
            continue
        pooled_counts = np.sum([s["histogram"]["counts"] for s in per_seed], axis=0)
        composition, weighted = DT_VARIANTS.get(agent, (None, False))
        rows.append({
            "agent": agent,
            "composition": list(composition) if composition else None,
            "beta": cfg.beta if weighted else (0.0 if composition else None),
            "seeds": cfg.seeds,
            "goal_rate": float(np.mean([s["goal_rate"] for s in per_seed])),
            "mean_return": float(np.mean([s["mean_return"] for s in per_seed])),
            "mean_length": float(np.mean([s["mean_length"] for s in per_seed])),
            "per_seed": [{"seed": s["seed"], "goal_rate": s["goal_rate"],
                          "mean_return": s["mean_return"], "mean_length": s["mean_length"],
                          "histogram": s["histogram"]} for s in per_seed],
            "pooled_histogram": {
                "edges": per_seed[0]["histogram"]["edges"],
                "counts": [int(c) for c in pooled_counts],
                "failure_count": int(sum(s["histogram"]["failure_count"] for s in per_seed)),
            },
        })
    if missing:
        raise ExperimentError(f"incomplete run, missing eval fragments: {missing}")

    by_agent = {r["agent"]: r for r in rows}
    checks = []
    for name, better, baseline, margin, scenarios in ORDERING_CHECKS:
        lhs, rhs = by_agent[better]["goal_rate"], by_agent[baseline]["goal_rate"]
        checks.append({"name": name, "better": better, "baseline": baseline, "margin": margin,
                       "better_goal_rate": lhs, "baseline_goal_rate": rhs,
                       "passed": bool(lhs >= rhs + margin - 1e-12),
                       "required": cfg.scenario in scenarios})
    report = {
        "scenario": cfg.scenario,
        "seeds": cfg.seeds,
        "config": cfg.to_dict(),
        "agents": rows,
        "checks": checks,
        "all_required_passed": all(c["passed"] for c in checks if c["required"]),
    }
    if not cfg.deterministic and wall_clock is not None:
        report["wall_clock_seconds"] = round(wall_clock, 3)
    _write_json(out / "report.json", report)

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["agent", "composition", "beta", "goal_rate", "mean_return", "mean_length", "seeds"])
    for r in rows:
        w.writerow([r["agent"], "+".join(r["composition"] or ["-"]), r["beta"], repr(r["goal_rate"]),
                    repr(r["mean_return"]), repr(r["mean_length"]), " ".join(map(str, r["seeds"]))])
    (out / "report.csv").write_text(buf.getvalue())
    return report


def run_all(cfg: ExperimentConfig, out, cache_dir=None) -> dict:
    """gen -> collect -> train (all variants) -> eval (all agents) -> report."""
    t0 = time.perf_counter()
    cmd_gen(cfg, out)
    cmd_collect(cfg, out)
    for variant in DT_VARIANTS:
        cmd_train(cfg, out, variant, cache_dir)
    for agent in AGENTS:
        cmd_eval(cfg, out, agent)
    wall = time.perf_counter() - t0
    _write_json(Path(out) / "timing.json", {"wall_clock_seconds": round(wall, 3)})
    return cmd_report(cfg, out, wall)
