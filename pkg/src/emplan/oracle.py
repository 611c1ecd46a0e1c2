"""Oracle demonstrations: shortest-path search, corruption, dataset packaging.

Plans are minimum-cost action sequences over the (x, y, dir) pose graph with
unit cost per action; moving through a closed door pays an extra unit for the
inserted OPEN. Ties are broken by the fixed action order LEFT < RIGHT <
FORWARD < OPEN so datasets are reproducible.
"""

from __future__ import annotations

import heapq
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .gridworld import (
    ACTIONS,
    Action,
    Cell,
    DIR_VECS,
    EnvSpec,
    GridEnv,
    Outcome,
    Pose,
    build_env,
    simulate_poses,
    step,
    turn_left,
    turn_right,
)

DATASET_FORMAT = "emplan-dataset"
DATASET_VERSION = 1
_BINARY_MAGIC = b"EMPD"


class NoPath(Exception):
    """Goal unreachable from the agent's pose."""


def state_vec(pose: Pose, goal: Cell) -> tuple[int, int, int, int, int]:
    """The (x, y, dir, gx, gy) state symbol fed to sequence models."""
    return (pose.x, pose.y, pose.dir, goal[0], goal[1])


@dataclass
class Demo:
    """One trajectory: len(states) == len(actions) + 1, states are
    (x, y, dir, gx, gy) tuples, actions integer codes."""

    states: list[tuple[int, int, int, int, int]]
    actions: list[int]
    optimal: bool = True

    def __post_init__(self):
        if len(self.states) != len(self.actions) + 1:
            raise ValueError("demo must have exactly one more state than actions")


@dataclass
class Dataset:
    spec: EnvSpec
    seed: int
    m: int
    p_corrupt: float
    demos: list[Demo] = field(default_factory=list)
    version: int = DATASET_VERSION

    def env_seed(self, index: int) -> np.random.SeedSequence:
        return episode_seed(self.seed, index)


def episode_seed(seed: int, index: int, stream: int = 0) -> np.random.SeedSequence:
    """Per-episode RNG key derived from (dataset seed, episode index)."""
    return np.random.SeedSequence((seed, index, stream))


def optimal_plan(env: GridEnv, start: Pose | None = None) -> list[Action]:
    """Minimum-cost action sequence from the agent pose to the goal cell.

    Uniform-cost search over (x, y, dir); entering a closed door costs 2
    (OPEN then FORWARD). Raises NoPath when the goal is unreachable.
    """
    start = env.agent if start is None else start
    if start.cell == env.goal:
        return []

    blocked = env.walls | env.obstacles | env.lava
    closed_doors = {c for c, is_open in env.doors.items() if not is_open}

    # heap entries: (cost, tiebreak counter, pose); parents reconstruct actions
    counter = 0
    heap: list[tuple[int, int, Pose]] = [(0, counter, start)]
    dist: dict[Pose, int] = {start: 0}
    parent: dict[Pose, tuple[Pose, tuple[Action, ...]]] = {}

    while heap:
        cost, _, pose = heapq.heappop(heap)
        if cost > dist.get(pose, np.inf):
            continue
        if pose.cell == env.goal:
            actions: list[Action] = []
            node = pose
            while node != start:
                node, acts = parent[node]
                actions.extend(reversed(acts))
            actions.reverse()
            return actions

        neighbours: list[tuple[Pose, tuple[Action, ...]]] = [
            (Pose(pose.x, pose.y, turn_left(pose.dir)), (Action.LEFT,)),
            (Pose(pose.x, pose.y, turn_right(pose.dir)), (Action.RIGHT,)),
        ]
        dx, dy = DIR_VECS[pose.dir]
        ahead = (pose.x + dx, pose.y + dy)
        if env.in_bounds(ahead) and ahead not in blocked:
            moved = Pose(ahead[0], ahead[1], pose.dir)
            if ahead in closed_doors:
                neighbours.append((moved, (Action.OPEN, Action.FORWARD)))
            else:
                neighbours.append((moved, (Action.FORWARD,)))

        for nxt, acts in neighbours:
            ncost = cost + len(acts)
            if ncost < dist.get(nxt, np.inf):
                dist[nxt] = ncost
                parent[nxt] = (pose, acts)
                counter += 1
                heapq.heappush(heap, (ncost, counter, nxt))

    raise NoPath(f"goal {env.goal} unreachable from {start}")


def demo_from_plan(env: GridEnv, actions: list[Action]) -> Demo:
    poses = simulate_poses(env, env.agent, actions)
    return Demo(
        states=[state_vec(p, env.goal) for p in poses],
        actions=[int(a) for a in actions],
        optimal=True,
    )


def rollout_demo(env: GridEnv, rng: np.random.Generator) -> Demo:
    """Demonstration under the env's own dynamics, replanning from scratch
    after every executed step. Under deterministic dynamics this is exactly
    the oracle plan; under stochastic dynamics the stored actions are the
    executed ones, so corrective turns appear in the data."""
    env = env.fresh()
    states = [state_vec(env.agent, env.goal)]
    actions: list[int] = []
    while not env.terminated:
        plan = optimal_plan(env)
        if not plan:
            break
        res = step(env, plan[0], rng)
        actions.append(int(res.executed))
        states.append(state_vec(env.agent, env.goal))
        if env.outcome == Outcome.STEP_LIMIT:
            break
    return Demo(states=states, actions=actions, optimal=env.dynamics == "deterministic")


def corrupt(demo: Demo, p: float, rng: np.random.Generator, env: GridEnv) -> Demo:
    """Swap each action independently w.p. ``p`` for a uniform draw over the
    action vocabulary (the original action included), then re-roll states
    through the env's deterministic geometry so the pair stays consistent."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("corruption probability must lie in [0, 1]")
    if not demo.actions:
        return Demo(list(demo.states), [], demo.optimal)
    actions = list(demo.actions)
    swapped = False
    for i in range(len(actions)):
        if p > 0.0 and rng.random() < p:
            actions[i] = int(rng.integers(len(ACTIONS)))
            swapped = True
    if not swapped:
        return Demo(list(demo.states), actions, demo.optimal)
    sx, sy, sdir, gx, gy = demo.states[0]
    poses = simulate_poses(env, Pose(sx, sy, sdir), actions)
    return Demo(
        states=[state_vec(pose, (gx, gy)) for pose in poses],
        actions=actions,
        optimal=False,
    )


def generate_dataset(spec: EnvSpec, m: int, p_corrupt: float, seed: int) -> Dataset:
    """M demos from M independently sampled solvable envs under the spec.

    Each episode owns RNG streams derived from (seed, index) so generation is
    reproducible and order-independent.
    """
    if m < 1:
        raise ValueError("dataset size must be at least 1")
    demos = []
    for i in range(m):
        env = build_env(spec, episode_seed(seed, i, 0))
        if spec.dynamics == "stochastic":
            demo = rollout_demo(env, np.random.default_rng(episode_seed(seed, i, 1)))
        else:
            demo = demo_from_plan(env, optimal_plan(env))
        if p_corrupt > 0.0:
            demo = corrupt(demo, p_corrupt, np.random.default_rng(episode_seed(seed, i, 2)), env)
        demos.append(demo)
    return Dataset(spec=spec, seed=seed, m=m, p_corrupt=p_corrupt, demos=demos)


def replay_consistent(demo: Demo, env: GridEnv) -> bool:
    """Check the Demo invariant: deterministic replay reproduces the states."""
    sx, sy, sdir, gx, gy = demo.states[0]
    poses = simulate_poses(env, Pose(sx, sy, sdir), demo.actions)
    return demo.states == [state_vec(p, (gx, gy)) for p in poses]


def _header_dict(ds: Dataset) -> dict:
    return {
        "format": DATASET_FORMAT,
        "version": ds.version,
        "spec": ds.spec.to_dict(),
        "seed": ds.seed,
        "m": ds.m,
        "p_corrupt": ds.p_corrupt,
    }


def _dataset_from_header(header: dict) -> Dataset:
    if header.get("format") != DATASET_FORMAT:
        raise ValueError(f"not a {DATASET_FORMAT} file")
    if header["version"] != DATASET_VERSION:
        raise ValueError(f"unsupported dataset version {header['version']}")
    return Dataset(
        spec=EnvSpec.from_dict(header["spec"]),
        seed=int(header["seed"]),
        m=int(header["m"]),
        p_corrupt=float(header["p_corrupt"]),
        demos=[],
        version=int(header["version"]),
    )


def save_dataset_jsonl(ds: Dataset, path) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps(_header_dict(ds), sort_keys=True) + "\n")
        for demo in ds.demos:
            fh.write(
                json.dumps(
                    {
                        "states": [list(s) for s in demo.states],
                        "actions": demo.actions,
                        "optimal": demo.optimal,
                    }
                )
                + "\n"
            )


def load_dataset_jsonl(path) -> Dataset:
    with open(path) as fh:
        ds = _dataset_from_header(json.loads(fh.readline()))
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            ds.demos.append(
                Demo(
                    states=[tuple(map(int, s)) for s in rec["states"]],
                    actions=[int(a) for a in rec["actions"]],
                    optimal=bool(rec["optimal"]),
                )
            )
    return ds


def save_dataset_binary(ds: Dataset, path) -> None:
    header = json.dumps(_header_dict(ds), sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_BINARY_MAGIC)
        fh.write(struct.pack("<HI", DATASET_VERSION, len(header)))
        fh.write(header)
        for demo in ds.demos:
            n = len(demo.actions)
            fh.write(struct.pack("<IB", n, int(demo.optimal)))
            fh.write(np.asarray(demo.states, dtype=np.int16).tobytes())
            fh.write(np.asarray(demo.actions, dtype=np.uint8).tobytes())


def load_dataset_binary(path) -> Dataset:
    with open(path, "rb") as fh:
        if fh.read(4) != _BINARY_MAGIC:
            raise ValueError("not an emplan binary dataset")
        version, hlen = struct.unpack("<HI", fh.read(6))
        ds = _dataset_from_header(json.loads(fh.read(hlen)))
        for _ in range(ds.m):
            n, optimal = struct.unpack("<IB", fh.read(5))
            states = np.frombuffer(fh.read((n + 1) * 5 * 2), dtype=np.int16).reshape(n + 1, 5)
            actions = np.frombuffer(fh.read(n), dtype=np.uint8)
            ds.demos.append(
                Demo(
                    states=[tuple(map(int, s)) for s in states],
                    actions=[int(a) for a in actions],
                    optimal=bool(optimal),
                )
            )
    return ds


def save_dataset(ds: Dataset, path, fmt: str | None = None) -> None:
    fmt = fmt or ("binary" if str(path).endswith((".bin", ".empd")) else "jsonl")
    if fmt == "jsonl":
        save_dataset_jsonl(ds, path)
    elif fmt == "binary":
        save_dataset_binary(ds, path)
    else:
        raise ValueError(f"unknown dataset format {fmt!r}")


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        magic = fh.read(4)
    return load_dataset_binary(path) if magic == _BINARY_MAGIC else load_dataset_jsonl(path)
