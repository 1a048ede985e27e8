"""Deterministic obstacle gridworld whose obstacle layout is the intervention target.

Coordinates are ``(x, y)`` with ``x`` the column and ``y`` the row, origin at the
top-left corner. The outermost ring of cells is an implicit wall. Headings follow
the minigrid convention: 0 east, 1 south, 2 west, 3 north.
"""
from __future__ import annotations

import enum
import functools
import hashlib
import json
from collections import deque
from dataclasses import dataclass, replace

import numpy as np

from .seeding import make_rng

Cell = tuple[int, int]

MAX_RESAMPLES = 10_000
N_CHANNELS = 4  # empty, obstacle, goal, agent
N_HEADINGS = 4

CH_EMPTY, CH_OBSTACLE, CH_GOAL, CH_AGENT = range(N_CHANNELS)

# (dx, dy) per heading
HEADING_VECTORS = ((1, 0), (0, 1), (-1, 0), (0, -1))
HEADING_NAMES = ("east", "south", "west", "north")


class ConfigurationError(ValueError):
    pass


class GenerationError(RuntimeError):
    pass


class UsageError(RuntimeError):
    pass


class Action(enum.IntEnum):
    TurnLeft = 0
    TurnRight = 1
    Forward = 2


N_ACTIONS = len(Action)


@dataclass(frozen=True)
class RewardSpec:
    horizon: int = 100
    success_scale: float = 0.9
    failure_reward: float = -1.0
    discount: float = 1.0  # carried for completeness; returns-to-go are undiscounted

    def __post_init__(self):
        if self.horizon <= 0:
            raise ConfigurationError(f"horizon must be positive, got {self.horizon}")
        if not 0.0 <= self.success_scale <= 1.0:
            raise ConfigurationError(f"success_scale must lie in [0, 1], got {self.success_scale}")

    def success_reward(self, step_count: int) -> float:
        return 1.0 - self.success_scale * (step_count / self.horizon)


@dataclass(frozen=True)
class GridLayout:
    width: int
    height: int
    obstacles: frozenset[Cell]
    start: Cell
    start_heading: int
    goal: Cell
    layout_seed: int = 0

    @property
    def interior(self) -> list[Cell]:
        return [(x, y) for y in range(1, self.height - 1) for x in range(1, self.width - 1)]

    def is_free(self, cell: Cell) -> bool:
        x, y = cell
        if x <= 0 or y <= 0 or x >= self.width - 1 or y >= self.height - 1:
            return False
        return cell not in self.obstacles

    @property
    def obs_dim(self) -> int:
        return self.width * self.height * N_CHANNELS + N_HEADINGS

    @functools.cached_property
    def layout_id(self) -> str:
        """Hash of the geometry only; two draws with the same obstacles share an id."""
        geometry = layout_to_dict(self)
        del geometry["layout_seed"]
        blob = json.dumps(geometry, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class EnvState:
    layout: GridLayout
    pos: Cell
    heading: int
    step_count: int = 0
    done: bool = False


def _check_dims(width: int, height: int, n_obstacles: int) -> None:
    if width < 3 or height < 3:
        raise ConfigurationError(f"grid {width}x{height} has no interior")
    n_interior = (width - 2) * (height - 2)
    if n_interior < n_obstacles + 2:
        raise ConfigurationError(
            f"interior of {width}x{height} has {n_interior} cells, need at least {n_obstacles + 2}")


def _reachable(width: int, height: int, obstacles, start: Cell, goal: Cell) -> bool:
    seen = {start}
    queue = deque([start])
    while queue:
        x, y = queue.popleft()
        if (x, y) == goal:
            return True
        for dx, dy in HEADING_VECTORS:
            nxt = (x + dx, y + dy)
            if (0 < nxt[0] < width - 1 and 0 < nxt[1] < height - 1
                    and nxt not in obstacles and nxt not in seen):
                seen.add(nxt)
                queue.append(nxt)
    return False


def generate_layout(seed: int, width: int = 8, height: int = 8, n_obstacles: int = 6) -> GridLayout:
    """Random obstacle configuration with start at the top-left interior cell facing
    east and the goal at the bottom-right interior cell.

    Obstacle sets are redrawn until the goal is reachable from the start.
    """
    _check_dims(width, height, n_obstacles)
    start = (1, 1)
    goal = (width - 2, height - 2)
    candidates = [(x, y) for y in range(1, height - 1) for x in range(1, width - 1)
                  if (x, y) != start and (x, y) != goal]
    rng = make_rng(seed)
    for _ in range(MAX_RESAMPLES):
        picks = rng.choice(len(candidates), size=n_obstacles, replace=False)
        obstacles = frozenset(candidates[i] for i in picks)
        if _reachable(width, height, obstacles, start, goal):
            return GridLayout(width, height, obstacles, start, 0, goal, int(seed))
    raise GenerationError(
        f"no reachable layout for seed={seed} {width}x{height} n_obstacles={n_obstacles} "
        f"after {MAX_RESAMPLES} draws")


def intervene(base: GridLayout, cf_seed: int, n_obstacles: int) -> GridLayout:
    """do(obstacles = resample): a counterfactual sibling of ``base``.

    Dimensions, start and goal are shared with ``base``; only the obstacle set is
    redrawn from the same generator used for every layout in the family.
    """
    cf = generate_layout(cf_seed, base.width, base.height, n_obstacles)
    if cf.start != base.start or cf.goal != base.goal or cf.start_heading != base.start_heading:
        # base was not produced by generate_layout; keep its anchors
        cf = replace(cf, start=base.start, start_heading=base.start_heading, goal=base.goal)
    return cf


def reset(layout: GridLayout) -> EnvState:
    return EnvState(layout, layout.start, layout.start_heading, 0, False)


def step(state: EnvState, action: Action | int, reward_spec: RewardSpec):
    """Apply one action. Returns ``(next_state, reward, done, bumped)``."""
    if state.done:
        raise UsageError("step() called on a terminal state")
    layout = state.layout
    action = int(action)
    pos, heading, bumped = state.pos, state.heading, False
    if action == Action.TurnLeft:
        heading = (heading - 1) % N_HEADINGS
    elif action == Action.TurnRight:
        heading = (heading + 1) % N_HEADINGS
    elif action == Action.Forward:
        dx, dy = HEADING_VECTORS[heading]
        target = (pos[0] + dx, pos[1] + dy)
        if layout.is_free(target):
            pos = target
        else:
            bumped = True
    else:
        raise UsageError(f"unknown action {action!r}")

    step_count = state.step_count + 1
    if pos == layout.goal:
        reward, done = reward_spec.success_reward(step_count), True
    elif step_count >= reward_spec.horizon:
        reward, done = reward_spec.failure_reward, True
    else:
        reward, done = 0.0, False
    return EnvState(layout, pos, heading, step_count, done), reward, done, bumped


@functools.lru_cache(maxsize=4096)
def _static_grid(layout: GridLayout) -> np.ndarray:
    grid = np.zeros((layout.height, layout.width, N_CHANNELS), dtype=np.float32)
    grid[..., CH_EMPTY] = 1.0
    for y in range(layout.height):
        for x in range(layout.width):
            if not layout.is_free((x, y)):
                grid[y, x] = 0.0
                grid[y, x, CH_OBSTACLE] = 1.0
    gx, gy = layout.goal
    grid[gy, gx] = 0.0
    grid[gy, gx, CH_GOAL] = 1.0
    grid.setflags(write=False)
    return grid


def observe_pose(layout: GridLayout, pos: Cell, heading: int) -> np.ndarray:
    grid = _static_grid(layout).copy()
    x, y = pos
    grid[y, x] = 0.0
    grid[y, x, CH_AGENT] = 1.0
    head = np.zeros(N_HEADINGS, dtype=np.float32)
    head[heading] = 1.0
    return np.concatenate([grid.ravel(), head])


def observe(state: EnvState) -> np.ndarray:
    """Fully observable one-hot encoding, length ``width*height*4 + 4``."""
    return observe_pose(state.layout, state.pos, state.heading)


def observe_poses(layout: GridLayout, poses: np.ndarray) -> np.ndarray:
    """Vectorised :func:`observe_pose` for an ``(n, 3)`` array of ``(x, y, heading)``."""
    poses = np.asarray(poses, dtype=np.int64).reshape(-1, 3)
    n = len(poses)
    grid = np.broadcast_to(_static_grid(layout), (n,) + _static_grid(layout).shape).copy()
    rows = np.arange(n)
    grid[rows, poses[:, 1], poses[:, 0]] = 0.0
    grid[rows, poses[:, 1], poses[:, 0], CH_AGENT] = 1.0
    head = np.zeros((n, N_HEADINGS), dtype=np.float32)
    head[rows, poses[:, 2]] = 1.0
    return np.concatenate([grid.reshape(n, -1), head], axis=1)


def render(layout: GridLayout, pos: Cell | None = None, heading: int | None = None) -> str:
    """ASCII picture: ``#`` wall or obstacle, ``G`` goal, ``>v<^`` agent."""
    pos = layout.start if pos is None else tuple(pos)
    heading = layout.start_heading if heading is None else heading
    rows = []
    for y in range(layout.height):
        row = []
        for x in range(layout.width):
            if (x, y) == pos:
                row.append(">v<^"[heading])
            elif (x, y) == layout.goal:
                row.append("G")
            elif not layout.is_free((x, y)):
                row.append("#")
            else:
                row.append(".")
        rows.append("".join(row))
    return "\n".join(rows)


def layout_to_dict(layout: GridLayout) -> dict:
    return {
        "width": layout.width,
        "height": layout.height,
        "obstacles": [list(c) for c in sorted(layout.obstacles)],
        "start": {"x": layout.start[0], "y": layout.start[1], "heading": layout.start_heading},
        "goal": {"x": layout.goal[0], "y": layout.goal[1]},
        "layout_seed": layout.layout_seed,
    }


def layout_from_dict(d: dict) -> GridLayout:
    return GridLayout(
        width=int(d["width"]),
        height=int(d["height"]),
        obstacles=frozenset((int(x), int(y)) for x, y in d["obstacles"]),
        start=(int(d["start"]["x"]), int(d["start"]["y"])),
        start_heading=int(d["start"]["heading"]),
        goal=(int(d["goal"]["x"]), int(d["goal"]["y"])),
        layout_seed=int(d["layout_seed"]),
    )


def layout_to_json(layout: GridLayout) -> str:
    return json.dumps(layout_to_dict(layout))


def layout_from_json(text: str) -> GridLayout:
    return layout_from_dict(json.loads(text))
