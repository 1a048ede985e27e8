"""Tabular source policy and the wall-bump fail-safe.

The source policy is the exact optimum of the deterministic MDP over poses
``(cell, heading)`` of a single layout. Rewards only arrive at the goal and shrink
linearly with elapsed steps, so the undiscounted value of a pose is
``1 - success_scale * d / T`` where ``d`` is the number of actions needed to reach
the goal. Value iteration recovers exactly that with a per-step cost of
``success_scale / T`` and the goal fixed at 1.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .gridworld import (HEADING_VECTORS, N_ACTIONS, N_HEADINGS, Action, EnvState, GridLayout,
                        RewardSpec, UsageError, layout_from_dict, layout_to_dict)

VI_TOLERANCE = 1e-12


def _successors(layout: GridLayout) -> np.ndarray:
    """``nxt[y, x, h, a]`` = flat pose index reached from pose (x, y, h) by action a."""
    W, H = layout.width, layout.height
    nxt = np.empty((H, W, N_HEADINGS, N_ACTIONS), dtype=np.int64)
    for y in range(H):
        for x in range(W):
            for h in range(N_HEADINGS):
                nxt[y, x, h, Action.TurnLeft] = (y * W + x) * N_HEADINGS + (h - 1) % N_HEADINGS
                nxt[y, x, h, Action.TurnRight] = (y * W + x) * N_HEADINGS + (h + 1) % N_HEADINGS
                dx, dy = HEADING_VECTORS[h]
                tx, ty = x + dx, y + dy
                if layout.is_free((tx, ty)):
                    nxt[y, x, h, Action.Forward] = (ty * W + tx) * N_HEADINGS + h
                else:
                    nxt[y, x, h, Action.Forward] = (y * W + x) * N_HEADINGS + h
    return nxt


@dataclass(frozen=True, eq=False)
class PolicyTable:
    layout: GridLayout
    actions: np.ndarray  # (height, width, 4) int
    values: np.ndarray   # (height, width, 4) float64

    @property
    def action_of(self) -> dict[tuple[int, int, int], Action]:
        H, W, _ = self.actions.shape
        return {(x, y, h): Action(int(self.actions[y, x, h]))
                for y in range(H) for x in range(W) for h in range(N_HEADINGS)}

    def act(self, state: EnvState) -> Action:
        return act(self, state)


def solve_policy(layout: GridLayout, reward_spec: RewardSpec) -> PolicyTable:
    """Exact value iteration; greedy ties resolve TurnLeft < TurnRight < Forward.

    Poses that cannot reach the goal (cells walled off by obstacles, and the
    obstacle cells themselves) carry ``failure_reward`` as their value. Their
    action is still the one-step greedy choice, so the table is a total function
    over poses and can be queried on counterfactual layouts.
    """
    W, H = layout.width, layout.height
    nxt = _successors(layout).reshape(-1, N_ACTIONS)
    n = W * H * N_HEADINGS
    cost = reward_spec.success_scale / reward_spec.horizon

    free = np.zeros((H, W, N_HEADINGS), dtype=bool)
    for (x, y) in layout.interior:
        if layout.is_free((x, y)):
            free[y, x, :] = True
    free = free.ravel()
    goal = np.zeros((H, W, N_HEADINGS), dtype=bool)
    goal[layout.goal[1], layout.goal[0], :] = True
    goal = goal.ravel()
    update = free & ~goal

    values = np.full(n, -np.inf)
    values[goal] = 1.0
    while True:
        backed = values[nxt].max(axis=1) - cost
        new = values.copy()
        new[update] = backed[update]
        finite = np.isfinite(new)
        if np.array_equal(finite, np.isfinite(values)):
            delta = np.abs(new[finite] - values[finite]).max(initial=0.0)
            values = new
            if delta < VI_TOLERANCE:
                break
        else:
            values = new

    values[~np.isfinite(values)] = reward_spec.failure_reward
    values[~free] = reward_spec.failure_reward
    q = values[nxt] - cost
    actions = np.argmax(q, axis=1)
    actions[goal] = Action.TurnLeft
    return PolicyTable(layout,
                       actions.reshape(H, W, N_HEADINGS),
                       values.reshape(H, W, N_HEADINGS))


def act(policy: PolicyTable, state: EnvState) -> Action:
    x, y = state.pos
    H, W, _ = policy.actions.shape
    if not (0 <= x < W and 0 <= y < H) or not 0 <= state.heading < N_HEADINGS:
        raise UsageError(f"pose {(x, y, state.heading)} lies outside the {W}x{H} policy grid")
    return Action(int(policy.actions[y, x, state.heading]))


@dataclass(frozen=True)
class FailSafeConfig:
    explore_steps: int = 10
    rng_seed: int = 0

    def __post_init__(self):
        if self.explore_steps < 1:
            raise ValueError("explore_steps must be >= 1")


@dataclass
class FailSafeState:
    rng: np.random.Generator
    counter: int = 0
    activations: int = 0
    random_actions: int = 0

    @classmethod
    def from_config(cls, fs: FailSafeConfig) -> "FailSafeState":
        return cls(np.random.default_rng(fs.rng_seed))


def failsafe_act(policy, state: EnvState, bumped_last: bool, fs: FailSafeConfig,
                 fs_state: FailSafeState) -> Action:
    """After a wall bump, act uniformly at random for ``explore_steps`` steps."""
    if bumped_last and fs_state.counter == 0:
        fs_state.counter = fs.explore_steps
        fs_state.activations += 1
    if fs_state.counter > 0:
        fs_state.counter -= 1
        fs_state.random_actions += 1
        return Action(int(fs_state.rng.integers(N_ACTIONS)))
    return policy.act(state)


def policy_to_dict(policy: PolicyTable) -> dict:
    H, W, _ = policy.actions.shape
    actions, values = {}, {}
    for y in range(H):
        for x in range(W):
            for h in range(N_HEADINGS):
                key = f"{x},{y},{h}"
                actions[key] = Action(int(policy.actions[y, x, h])).name
                values[key] = float(policy.values[y, x, h])
    return {"layout": layout_to_dict(policy.layout), "actions": actions, "values": values}


def policy_from_dict(d: dict) -> PolicyTable:
    layout = layout_from_dict(d["layout"])
    actions = np.zeros((layout.height, layout.width, N_HEADINGS), dtype=np.int64)
    values = np.zeros(actions.shape)
    for key, name in d["actions"].items():
        x, y, h = map(int, key.split(","))
        actions[y, x, h] = Action[name]
        values[y, x, h] = d["values"][key]
    return PolicyTable(layout, actions, values)


def save_policy(policy: PolicyTable, path) -> None:
    with open(path, "w") as f:
        json.dump(policy_to_dict(policy), f)


def load_policy(path) -> PolicyTable:
    with open(path) as f:
        return policy_from_dict(json.load(f))
