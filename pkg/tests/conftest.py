"""Independent oracles shared by the test modules.

These deliberately avoid the package's own helpers: the BFS routines work on raw
coordinate sets and the finite-difference checker only calls forward functions.
"""
from collections import deque

import numpy as np
import pytest

MOVES = [(1, 0), (0, 1), (-1, 0), (0, -1)]


def bfs_reachable(width, height, obstacles, start, goal):
    """4-connected reachability over interior cells, written from scratch."""
    def free(c):
        return 1 <= c[0] <= width - 2 and 1 <= c[1] <= height - 2 and tuple(c) not in obstacles

    frontier, seen = deque([tuple(start)]), {tuple(start)}
    while frontier:
        c = frontier.popleft()
        if c == tuple(goal):
            return True
        for dx, dy in MOVES:
            n = (c[0] + dx, c[1] + dy)
            if free(n) and n not in seen:
                seen.add(n)
                frontier.append(n)
    return False


def bfs_pose_distance(width, height, obstacles, start, heading, goal):
    """Fewest actions (turn left/right, forward) from a pose to the goal cell."""
    def free(c):
        return 1 <= c[0] <= width - 2 and 1 <= c[1] <= height - 2 and c not in obstacles

    start_pose = (start[0], start[1], heading)
    dist = {start_pose: 0}
    frontier = deque([start_pose])
    while frontier:
        x, y, h = frontier.popleft()
        if (x, y) == tuple(goal):
            return dist[(x, y, h)]
        dx, dy = MOVES[h]
        nbrs = [(x, y, (h + 3) % 4), (x, y, (h + 1) % 4)]
        if free((x + dx, y + dy)):
            nbrs.append((x + dx, y + dy, h))
        for n in nbrs:
            if n not in dist:
                dist[n] = dist[(x, y, h)] + 1
                frontier.append(n)
    return None


def numeric_grad(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. every entry of ``x`` (mutated in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        fp = f()
        x[i] = old - eps
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = np.maximum(np.abs(analytic) + np.abs(numeric), 1e-6)
    return float(np.max(np.abs(analytic - numeric) / scale))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def oracle_episode_return(width, height, obstacles, start, heading, goal, action_table,
                          horizon=100, success_scale=0.9, failure_reward=-1.0,
                          explore_steps=None, rng=None):
    """Replay a tabular policy with movement, reward and fail-safe rules coded from scratch.

    ``action_table[y, x, h]`` gives 0 = turn left, 1 = turn right, 2 = forward.
    """
    def free(c):
        return 1 <= c[0] <= width - 2 and 1 <= c[1] <= height - 2 and c not in obstacles

    (x, y), h, t = tuple(start), heading, 0
    bumped, explore_left = False, 0
    while True:
        if explore_steps and bumped and explore_left == 0:
            explore_left = explore_steps
        if explore_left:
            explore_left -= 1
            a = int(rng.integers(3))
        else:
            a = int(action_table[y, x, h])
        t += 1
        bumped = False
        if a == 0:
            h = (h + 3) % 4
        elif a == 1:
            h = (h + 1) % 4
        else:
            nxt = (x + MOVES[h][0], y + MOVES[h][1])
            if free(nxt):
                x, y = nxt
            else:
                bumped = True
        if (x, y) == tuple(goal):
            return 1.0 - success_scale * t / horizon
        if t >= horizon:
            return failure_reward
