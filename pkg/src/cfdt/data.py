"""Factual and counterfactual rollout datasets with ATE-based trajectory weighting."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .gridworld import (GridLayout, RewardSpec, intervene, layout_from_dict, layout_to_dict,
                        observe_poses, reset, step)
from .policy import FailSafeConfig, FailSafeState, failsafe_act
from .seeding import (STREAM_ATE, STREAM_CF_ROLLOUT, STREAM_COUNTERFACTUAL,
                      STREAM_FACTUAL_ROLLOUT, derive_seed, make_rng)

FACTUAL = "factual"
COUNTERFACTUAL = "counterfactual"


class DataError(ValueError):
    pass


def returns_to_go(rewards) -> np.ndarray:
    """Undiscounted suffix sums, accumulated back to front so that
    ``R[t] == r[t] + R[t+1]`` holds bit-exactly."""
    rewards = np.asarray(rewards, dtype=np.float64)
    out = np.empty_like(rewards)
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + acc
        out[t] = acc
    return out


@dataclass(eq=False)
class Trajectory:
    """One episode. ``poses[t]`` is the ``(x, y, heading)`` the agent observed
    before taking ``actions[t]``; observations are rebuilt from the layout."""

    layout_id: str
    provenance: str
    poses: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    returns_to_go: np.ndarray
    seed: int = 0
    failsafe_activations: int = 0

    @property
    def episode_length(self) -> int:
        return len(self.actions)

    @property
    def total_return(self) -> float:
        return float(self.returns_to_go[0]) if len(self.returns_to_go) else 0.0

    @property
    def reached_goal(self) -> bool:
        return self.total_return > 0.0

    def observations(self, layout: GridLayout) -> np.ndarray:
        return observe_poses(layout, self.poses)

    def to_dict(self) -> dict:
        return {
            "layout_id": self.layout_id,
            "provenance": self.provenance,
            "seed": self.seed,
            "failsafe_activations": self.failsafe_activations,
            "poses": self.poses.tolist(),
            "actions": self.actions.tolist(),
            "rewards": self.rewards.tolist(),
            "returns_to_go": self.returns_to_go.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Trajectory":
        return cls(
            layout_id=d["layout_id"],
            provenance=d["provenance"],
            poses=np.asarray(d["poses"], dtype=np.int64).reshape(-1, 3),
            actions=np.asarray(d["actions"], dtype=np.int64),
            rewards=np.asarray(d["rewards"], dtype=np.float64),
            returns_to_go=np.asarray(d["returns_to_go"], dtype=np.float64),
            seed=int(d["seed"]),
            failsafe_activations=int(d["failsafe_activations"]),
        )


def rollout(layout: GridLayout, policy, reward_spec: RewardSpec,
            failsafe: FailSafeConfig | None = None, seed: int = 0,
            provenance: str = FACTUAL) -> Trajectory:
    """Run ``policy`` (anything with ``act(state)``) for one episode."""
    state = reset(layout)
    fs_state = FailSafeState(make_rng(failsafe.rng_seed, seed)) if failsafe else None
    poses, actions, rewards = [], [], []
    bumped = False
    while not state.done:
        if failsafe is not None:
            action = failsafe_act(policy, state, bumped, failsafe, fs_state)
        else:
            action = policy.act(state)
        poses.append((state.pos[0], state.pos[1], state.heading))
        actions.append(int(action))
        state, reward, _, bumped = step(state, action, reward_spec)
        rewards.append(reward)
    rewards = np.asarray(rewards, dtype=np.float64)
    return Trajectory(
        layout_id=layout.layout_id,
        provenance=provenance,
        poses=np.asarray(poses, dtype=np.int64).reshape(-1, 3),
        actions=np.asarray(actions, dtype=np.int64),
        rewards=rewards,
        returns_to_go=returns_to_go(rewards),
        seed=int(seed),
        failsafe_activations=fs_state.activations if fs_state else 0,
    )


def collect_factual(source_layout: GridLayout, policy, n: int, seed: int,
                    reward_spec: RewardSpec, failsafe: FailSafeConfig | None = None
                    ) -> list[Trajectory]:
    """Rollout ``i`` uses seed ``derive_seed(seed, STREAM_FACTUAL_ROLLOUT, i)``."""
    return [rollout(source_layout, policy, reward_spec, failsafe,
                    derive_seed(seed, STREAM_FACTUAL_ROLLOUT, i), FACTUAL)
            for i in range(n)]


def draw_counterfactual_layouts(base: GridLayout, n_envs: int, n_obstacles: int, seed: int,
                                exclude: Iterable[str] = ()) -> list[GridLayout]:
    """``n_envs`` interventions on ``base`` with pairwise distinct geometry.

    Draw ``j`` uses ``derive_seed(seed, STREAM_COUNTERFACTUAL, j)``; repeated or
    excluded geometries are skipped and the stream advances.
    """
    if n_envs < 1:
        raise ValueError("n_envs must be >= 1")
    seen = set(exclude)
    layouts = []
    j = 0
    while len(layouts) < n_envs:
        cf = intervene(base, derive_seed(seed, STREAM_COUNTERFACTUAL, j), n_obstacles)
        j += 1
        if cf.layout_id in seen:
            continue
        seen.add(cf.layout_id)
        layouts.append(cf)
    return layouts


def rollout_counterfactuals(layouts: list[GridLayout], policy, rollouts_per_env: int, seed: int,
                            reward_spec: RewardSpec,
                            failsafe: FailSafeConfig | None = FailSafeConfig()) -> list[Trajectory]:
    trajectories = []
    for i, layout in enumerate(layouts):
        for k in range(rollouts_per_env):
            trajectories.append(rollout(layout, policy, reward_spec, failsafe,
                                        derive_seed(seed, STREAM_CF_ROLLOUT, i, k), COUNTERFACTUAL))
    return trajectories


def collect_counterfactual(base: GridLayout, policy, n_envs: int, rollouts_per_env: int,
                           n_obstacles: int, seed: int, reward_spec: RewardSpec,
                           failsafe: FailSafeConfig | None = FailSafeConfig()
                           ) -> tuple[list[Trajectory], list[GridLayout]]:
    layouts = draw_counterfactual_layouts(base, n_envs, n_obstacles, seed)
    trajectories = rollout_counterfactuals(layouts, policy, rollouts_per_env, seed,
                                           reward_spec, failsafe)
    return trajectories, layouts


@dataclass(frozen=True)
class AteEstimate:
    layout_id: str
    ate: float
    n_cf_rollouts: int
    n_source_rollouts: int
    cf_mean_return: float
    source_mean_return: float
    std_error: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _mean_var(x: np.ndarray) -> tuple[float, float]:
    mean = float(np.mean(x))
    var = float(np.var(x, ddof=1)) if len(x) > 1 else 0.0
    return mean, var


def estimate_ate(cf_layout: GridLayout, source_layout: GridLayout, policy,
                 reward_spec: RewardSpec, m: int = 5,
                 failsafe: FailSafeConfig | None = FailSafeConfig(), seed: int = 0
                 ) -> AteEstimate:
    """Monte-Carlo difference in mean total return, counterfactual minus source.

    The per-step expectations summed over time equal the expectation of the
    episode return, so comparing mean returns is the whole estimator.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    cf = np.array([rollout(cf_layout, policy, reward_spec, failsafe,
                           derive_seed(seed, STREAM_ATE, 0, i)).total_return for i in range(m)])
    src = np.array([rollout(source_layout, policy, reward_spec, failsafe,
                            derive_seed(seed, STREAM_ATE, 1, i)).total_return for i in range(m)])
    cf_mean, cf_var = _mean_var(cf)
    src_mean, src_var = _mean_var(src)
    return AteEstimate(
        layout_id=cf_layout.layout_id,
        ate=cf_mean - src_mean,
        n_cf_rollouts=m,
        n_source_rollouts=m,
        cf_mean_return=cf_mean,
        source_mean_return=src_mean,
        std_error=math.sqrt(cf_var / m + src_var / m),
    )


@dataclass(eq=False)
class WeightedDataset:
    trajectories: list[Trajectory]
    weights: np.ndarray
    beta: float
    layouts: dict[str, GridLayout]
    manifest: dict = field(default_factory=dict)
    _obs_cache: dict = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return len(self.trajectories)

    def observations(self, i: int) -> np.ndarray:
        obs = self._obs_cache.get(i)
        if obs is None:
            traj = self.trajectories[i]
            obs = traj.observations(self.layouts[traj.layout_id])
            self._obs_cache[i] = obs
        return obs

    @property
    def obs_dim(self) -> int:
        return next(iter(self.layouts.values())).obs_dim


def softmax_weights(ates: np.ndarray, beta: float) -> np.ndarray:
    ates = np.asarray(ates, dtype=np.float64)
    raw = np.exp(beta * (ates - ates.max()))
    return raw / raw.sum()


def build_weights(trajectories: list[Trajectory], ate_by_layout: Mapping[str, float], beta: float,
                  layouts: Mapping[str, GridLayout] | None = None,
                  manifest: dict | None = None) -> WeightedDataset:
    """Each trajectory inherits ``exp(beta * ate)`` of its environment, normalised
    over the whole dataset. The source layout belongs in ``ate_by_layout`` with 0."""
    if beta < 0:
        raise ValueError("beta must be >= 0")
    if not trajectories:
        raise DataError("cannot weight an empty trajectory list")
    missing = sorted({t.layout_id for t in trajectories} - set(ate_by_layout))
    if missing:
        raise DataError(f"no ATE entry for layouts {missing[:5]}{'...' if len(missing) > 5 else ''}")
    ates = np.array([ate_by_layout[t.layout_id] for t in trajectories], dtype=np.float64)
    return WeightedDataset(list(trajectories), softmax_weights(ates, beta), float(beta),
                           dict(layouts or {}), dict(manifest or {}))


@dataclass
class Batch:
    returns: np.ndarray    # (B, K) float
    obs: np.ndarray        # (B, K, obs_dim)
    actions: np.ndarray    # (B, K) int
    timesteps: np.ndarray  # (B, K) int
    mask: np.ndarray       # (B, K) bool, False on left padding
    traj_index: np.ndarray  # (B,) which trajectory each row came from


def window(ds: WeightedDataset, i: int, start: int, K: int, dtype=np.float32):
    traj = ds.trajectories[i]
    L = traj.episode_length
    stop = min(start + K, L)
    n = stop - start
    pad = K - n
    obs = np.zeros((K, ds.obs_dim), dtype=dtype)
    obs[pad:] = ds.observations(i)[start:stop]
    returns = np.zeros(K, dtype=dtype)
    returns[pad:] = traj.returns_to_go[start:stop]
    actions = np.zeros(K, dtype=np.int64)
    actions[pad:] = traj.actions[start:stop]
    timesteps = np.zeros(K, dtype=np.int64)
    timesteps[pad:] = np.arange(start, stop)
    mask = np.zeros(K, dtype=bool)
    mask[pad:] = True
    return returns, obs, actions, timesteps, mask


def sample_batch(ds: WeightedDataset, batch: int, K: int, rng: np.random.Generator,
                 dtype=np.float32) -> Batch:
    """Weighted draw of trajectories (with replacement), then a uniform K-window
    from each; trajectories shorter than K are left-padded and masked."""
    if K < 1:
        raise ValueError("context length K must be >= 1")
    if len(ds) == 0:
        raise DataError("empty dataset")
    idx = rng.choice(len(ds), size=batch, replace=True, p=ds.weights)
    rows = []
    for i in idx:
        L = ds.trajectories[i].episode_length
        start = int(rng.integers(0, max(L - K, 0) + 1))
        rows.append(window(ds, int(i), start, K, dtype))
    returns, obs, actions, timesteps, mask = (np.stack(col) for col in zip(*rows))
    return Batch(returns, obs, actions, timesteps, mask, idx)


def save_trajectories(path, trajectories: Iterable[Trajectory]) -> None:
    with open(path, "w") as f:
        for traj in trajectories:
            f.write(json.dumps(traj.to_dict()) + "\n")


def load_trajectories(path) -> list[Trajectory]:
    with open(path) as f:
        return [Trajectory.from_dict(json.loads(line)) for line in f if line.strip()]


def save_layouts(path, layouts: Iterable[GridLayout]) -> None:
    with open(path, "w") as f:
        json.dump([layout_to_dict(l) for l in layouts], f, indent=1)


def load_layouts(path) -> list[GridLayout]:
    with open(path) as f:
        return [layout_from_dict(d) for d in json.load(f)]


def save_dataset(ds: WeightedDataset, path) -> None:
    """Write ``<path>.jsonl`` (trajectories) and ``<path>.manifest.json``."""
    save_trajectories(f"{path}.jsonl", ds.trajectories)
    manifest = {
        "beta": ds.beta,
        "weights": ds.weights.tolist(),
        "layouts": {k: layout_to_dict(v) for k, v in sorted(ds.layouts.items())},
        "manifest": ds.manifest,
    }
    with open(f"{path}.manifest.json", "w") as f:
        json.dump(manifest, f, indent=1)


def load_dataset(path) -> WeightedDataset:
    trajectories = load_trajectories(f"{path}.jsonl")
    with open(f"{path}.manifest.json") as f:
        m = json.load(f)
    return WeightedDataset(trajectories, np.asarray(m["weights"], dtype=np.float64), m["beta"],
                           {k: layout_from_dict(v) for k, v in m["layouts"].items()},
                           m["manifest"])
