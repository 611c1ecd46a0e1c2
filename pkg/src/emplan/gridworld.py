"""Gridworld simulator: single-room and multi-room maze layouts.

Grids are axis-aligned with x growing right and y growing down. The
width/height of an environment include the boundary wall ring, so a 7x7
environment has a 5x5 walkable interior. Multi-room layouts partition the
interior into a k x k grid of equal rooms separated by one-cell wall lines,
with one opening (gap or door) per shared room edge.

Dynamics are deterministic by default. In stochastic mode a commanded turn
action fails with probability p_fail and a uniformly random action from the
remaining vocabulary is executed instead.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, replace
from enum import IntEnum
from typing import Iterable, Sequence

import numpy as np

Cell = tuple[int, int]


class Action(IntEnum):
    LEFT = 0
    RIGHT = 1
    FORWARD = 2
    OPEN = 3
    # reserved for object manipulation; never emitted and outside the model vocabulary
    PICKUP = 6
    DROP = 7


# actions the planner/model/dataset may emit
ACTIONS: tuple[Action, ...] = (Action.LEFT, Action.RIGHT, Action.FORWARD, Action.OPEN)
N_ACTIONS = len(ACTIONS)
TURN_ACTIONS = (Action.LEFT, Action.RIGHT)


class Direction(IntEnum):
    N = 0
    E = 1
    S = 2
    W = 3


# unit step for each facing; y grows downward
DIR_VECS: dict[int, Cell] = {
    Direction.N: (0, -1),
    Direction.E: (1, 0),
    Direction.S: (0, 1),
    Direction.W: (-1, 0),
}


class Outcome(IntEnum):
    ONGOING = 0
    GOAL_REACHED = 1
    LAVA_DEATH = 2
    STEP_LIMIT = 3


@dataclass(frozen=True)
class Pose:
    x: int
    y: int
    dir: int

    @property
    def cell(self) -> Cell:
        return (self.x, self.y)


@dataclass(frozen=True)
class StepResult:
    next_state: Pose
    terminated: bool
    outcome: Outcome
    executed: Action  # action actually performed (may differ from the command in stochastic mode)


class UnsolvableLayout(Exception):
    """No solvable layout found within the retry budget."""


@dataclass(frozen=True)
class EnvSpec:
    """Declarative description of an environment family.

    ``obstacles`` and ``lava`` are either a count (sampled uniformly over free
    interior cells) or an explicit tuple of cells fixed across builds. ``agent``,
    ``agent_dir`` and ``goal`` pin the start configuration when given.
    """

    width: int
    height: int
    rooms: int = 1
    obstacles: int | tuple[Cell, ...] = 0
    lava: int | tuple[Cell, ...] = 0
    doors: str = "open"  # opening type between rooms: "open" | "closed" | "gap"
    dynamics: str = "deterministic"  # "deterministic" | "stochastic"
    p_fail: float = 0.0
    agent: Cell | None = None
    agent_dir: int | None = None
    goal: Cell | None = None
    seed: int | None = None

    def __post_init__(self):
        if self.width < 3 or self.height < 3:
            raise ValueError("spec dimensions must be at least 3x3")
        k = math.isqrt(self.rooms)
        if k * k != self.rooms or self.rooms < 1:
            raise ValueError(f"rooms must be a perfect square, got {self.rooms}")
        if k > 1:
            for interior in (self.width - 2, self.height - 2):
                if (interior - (k - 1)) % k != 0 or (interior - (k - 1)) < k:
                    raise ValueError(
                        f"interior of size {interior} cannot be split into {k} equal rooms"
                    )
        if self.doors not in ("open", "closed", "gap"):
            raise ValueError(f"unknown door mode {self.doors!r}")
        if self.dynamics not in ("deterministic", "stochastic"):
            raise ValueError(f"unknown dynamics {self.dynamics!r}")
        if not 0.0 <= self.p_fail <= 1.0:
            raise ValueError("p_fail must lie in [0, 1]")

    def to_dict(self) -> dict:
        d = {
            "width": self.width,
            "height": self.height,
            "rooms": self.rooms,
            "obstacles": list(map(list, self.obstacles))
            if isinstance(self.obstacles, tuple)
            else self.obstacles,
            "lava": list(map(list, self.lava)) if isinstance(self.lava, tuple) else self.lava,
            "doors": self.doors,
            "dynamics": self.dynamics,
            "p_fail": self.p_fail,
            "agent": list(self.agent) if self.agent is not None else None,
            "agent_dir": self.agent_dir,
            "goal": list(self.goal) if self.goal is not None else None,
            "seed": self.seed,
        }
        return d

    @staticmethod
    def from_dict(d: dict) -> "EnvSpec":
        def cells(v):
            if isinstance(v, (int, type(None))):
                return v if v is not None else 0
            return tuple((int(x), int(y)) for x, y in v)

        return EnvSpec(
            width=int(d["width"]),
            height=int(d["height"]),
            rooms=int(d.get("rooms", 1)),
            obstacles=cells(d.get("obstacles", 0)),
            lava=cells(d.get("lava", 0)),
            doors=d.get("doors", "open"),
            dynamics=d.get("dynamics", "deterministic"),
            p_fail=float(d.get("p_fail", 0.0)),
            agent=tuple(d["agent"]) if d.get("agent") is not None else None,
            agent_dir=int(d["agent_dir"]) if d.get("agent_dir") is not None else None,
            goal=tuple(d["goal"]) if d.get("goal") is not None else None,
            seed=int(d["seed"]) if d.get("seed") is not None else None,
        )


def _parse_cells(text: str) -> tuple[Cell, ...]:
    cells = []
    for part in text.replace("(", "").replace(")", "").split(";"):
        part = part.strip()
        if not part:
            continue
        x, y = part.split(",")
        cells.append((int(x), int(y)))
    return tuple(cells)


def parse_env_spec(pairs: dict[str, str]) -> EnvSpec:
    """Build an EnvSpec from string key=value pairs (config-file values)."""
    kw: dict = {}
    for key, raw in pairs.items():
        key = key.strip().lower()
        raw = raw.strip()
        if key in ("width", "height", "rooms"):
            kw[key] = int(raw)
        elif key in ("obstacles", "lava", "lava_cells"):
            name = "lava" if key.startswith("lava") else key
            try:
                kw[name] = int(raw)
            except ValueError:
                kw[name] = _parse_cells(raw)
        elif key in ("doors", "dynamics"):
            kw[key] = raw
        elif key == "p_fail":
            kw[key] = float(raw)
        elif key == "agent":
            kw[key] = _parse_cells(raw)[0]
        elif key == "agent_dir":
            kw[key] = Direction[raw].value if raw in Direction.__members__ else int(raw)
        elif key == "goal":
            kw[key] = _parse_cells(raw)[0]
        elif key == "seed":
            kw[key] = int(raw)
        else:
            raise ValueError(f"unknown env spec key {key!r}")
    return EnvSpec(**kw)


def load_env_spec(path) -> EnvSpec:
    """Load an EnvSpec from a plain-text key=value file ('#' starts a comment)."""
    pairs = {}
    with open(path) as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if not line or line.startswith("["):
                continue
            key, _, value = line.partition("=")
            pairs[key.strip()] = value.strip()
    return parse_env_spec(pairs)


@dataclass
class GridEnv:
    """A single environment instance. Mutated by :func:`step`; not thread-safe."""

    width: int
    height: int
    walls: frozenset[Cell]
    obstacles: frozenset[Cell]
    lava: frozenset[Cell]
    doors: dict[Cell, bool]  # cell -> open flag
    agent: Pose
    goal: Cell
    dynamics: str = "deterministic"
    p_fail: float = 0.0
    step_limit: int = 0
    steps_taken: int = 0
    terminated: bool = False
    outcome: Outcome = Outcome.ONGOING

    def __post_init__(self):
        if self.step_limit <= 0:
            self.step_limit = 4 * (self.width + self.height)
        self._validate()
        if self.agent.cell == self.goal and not self.terminated:
            self.terminated = True
            self.outcome = Outcome.GOAL_REACHED

    def _validate(self):
        blocked_sets = [self.walls, self.obstacles, self.lava, frozenset(self.doors)]
        for i in range(len(blocked_sets)):
            for j in range(i + 1, len(blocked_sets)):
                overlap = blocked_sets[i] & blocked_sets[j]
                if overlap:
                    raise ValueError(f"cell sets overlap at {sorted(overlap)}")
        if not 0.0 <= self.p_fail <= 1.0:
            raise ValueError("p_fail must lie in [0, 1]")
        for name, cell in (("agent", self.agent.cell), ("goal", self.goal)):
            if not self.in_bounds(cell):
                raise ValueError(f"{name} {cell} out of bounds")
            if cell in self.walls or cell in self.obstacles:
                raise ValueError(f"{name} {cell} placed inside a wall/obstacle")

    def in_bounds(self, cell: Cell) -> bool:
        return 0 <= cell[0] < self.width and 0 <= cell[1] < self.height

    def passable(self, cell: Cell) -> bool:
        """True when the agent could move into the cell right now."""
        if not self.in_bounds(cell) or cell in self.walls or cell in self.obstacles:
            return False
        if cell in self.doors and not self.doors[cell]:
            return False
        return True

    def fresh(self) -> "GridEnv":
        """A reset copy of this layout (doors restored, agent back at start)."""
        return replace(
            self,
            doors=dict(self.doors),
            steps_taken=0,
            terminated=False,
            outcome=Outcome.ONGOING,
        )

    def render(self) -> str:
        rows = []
        for y in range(self.height):
            row = []
            for x in range(self.width):
                c = (x, y)
                if c == self.agent.cell:
                    row.append({0: "^", 1: ">", 2: "v", 3: "<"}[self.agent.dir])
                elif c == self.goal:
                    row.append("G")
                elif c in self.walls:
                    row.append("#")
                elif c in self.obstacles:
                    row.append("O")
                elif c in self.lava:
                    row.append("~")
                elif c in self.doors:
                    row.append("D" if self.doors[c] else "d")
                else:
                    row.append(".")
            rows.append("".join(row))
        return "\n".join(rows)


def turn_left(dir: int) -> int:
    return (dir - 1) % 4


def turn_right(dir: int) -> int:
    return (dir + 1) % 4


def apply_action(env: GridEnv, pose: Pose, action: Action) -> Pose:
    """Pose after one deterministic action; mutates door state on OPEN.

    Blocked forward moves are absorbing no-ops. Termination (goal/lava) is not
    interpreted here; callers decide what entering a cell means.
    """
    if action == Action.LEFT:
        return Pose(pose.x, pose.y, turn_left(pose.dir))
    if action == Action.RIGHT:
        return Pose(pose.x, pose.y, turn_right(pose.dir))
    dx, dy = DIR_VECS[pose.dir]
    ahead = (pose.x + dx, pose.y + dy)
    if action == Action.FORWARD:
        if env.passable(ahead):
            return Pose(ahead[0], ahead[1], pose.dir)
        return pose
    if action == Action.OPEN:
        if ahead in env.doors and not env.doors[ahead]:
            env.doors[ahead] = True
        return pose
    raise ValueError(f"unsupported action {action!r}")


def step(env: GridEnv, action: Action | int, rng: np.random.Generator | None = None) -> StepResult:
    """Advance the environment by one action.

    In stochastic mode a commanded turn is swapped, with probability p_fail,
    for a uniform draw over the remaining actions; ``rng`` is then required.
    """
    if env.terminated:
        raise RuntimeError("step() called on a terminated environment")
    action = Action(action)
    executed = action
    if env.dynamics == "stochastic" and env.p_fail > 0.0 and action in TURN_ACTIONS:
        if rng is None:
            raise ValueError("stochastic dynamics require an rng")
        if rng.random() < env.p_fail:
            others = [a for a in ACTIONS if a != action]
            executed = others[int(rng.integers(len(others)))]

    env.agent = apply_action(env, env.agent, executed)
    env.steps_taken += 1

    if env.agent.cell in env.lava:
        env.terminated, env.outcome = True, Outcome.LAVA_DEATH
    elif env.agent.cell == env.goal:
        env.terminated, env.outcome = True, Outcome.GOAL_REACHED
    elif env.steps_taken >= env.step_limit:
        env.terminated, env.outcome = True, Outcome.STEP_LIMIT

    return StepResult(env.agent, env.terminated, env.outcome, executed)


def simulate_poses(env: GridEnv, start: Pose, actions: Iterable[Action | int]) -> list[Pose]:
    """Pose sequence (len(actions)+1) from replaying actions with deterministic
    geometry, ignoring termination. Door state is tracked on a local copy."""
    sim = env.fresh()
    poses = [start]
    for a in actions:
        poses.append(apply_action(sim, poses[-1], Action(a)))
    return poses


def reachable_cells(env: GridEnv, start: Cell) -> set[Cell]:
    """Flood fill over traversable cells; closed doors count as traversable
    (they can be opened), lava does not (entering is lethal)."""
    seen = {start}
    queue = deque([start])
    while queue:
        x, y = queue.popleft()
        for dx, dy in DIR_VECS.values():
            c = (x + dx, y + dy)
            if c in seen or not env.in_bounds(c):
                continue
            if c in env.walls or c in env.obstacles or c in env.lava:
                continue
            seen.add(c)
            queue.append(c)
    return seen


def solvable(env: GridEnv) -> bool:
    return env.goal in reachable_cells(env, env.agent.cell)


def _room_layout(width: int, height: int, rooms: int, doors: str, rng: np.random.Generator):
    """Internal wall lines for a k x k room grid plus one opening per shared edge."""
    k = math.isqrt(rooms)
    walls: set[Cell] = set()
    door_cells: dict[Cell, bool] = {}
    if k == 1:
        return walls, door_cells

    def lines(size: int) -> list[int]:
        band = (size - 2 - (k - 1)) // k
        return [1 + (band + 1) * i + band for i in range(k - 1)]

    def bands(size: int) -> list[range]:
        band = (size - 2 - (k - 1)) // k
        return [range(1 + (band + 1) * i, 1 + (band + 1) * i + band) for i in range(k)]

    v_lines, h_lines = lines(width), lines(height)
    x_bands, y_bands = bands(width), bands(height)
    for lx in v_lines:
        walls.update((lx, y) for y in range(1, height - 1))
    for ly in h_lines:
        walls.update((x, ly) for x in range(1, width - 1))

    openings: list[Cell] = []
    for lx in v_lines:  # vertical lines: one opening per room row
        for ys in y_bands:
            openings.append((lx, int(rng.choice(list(ys)))))
    for ly in h_lines:  # horizontal lines: one opening per room column
        for xs in x_bands:
            openings.append((int(rng.choice(list(xs))), ly))
    for cell in openings:
        walls.discard(cell)
        if doors in ("open", "closed"):
            door_cells[cell] = doors == "open"
    return walls, door_cells


def build_env(spec: EnvSpec, seed: int | np.random.SeedSequence, max_retries: int = 100) -> GridEnv:
    """Sample a solvable environment for the spec; raises UnsolvableLayout
    when no solvable layout is found within ``max_retries`` attempts."""
    root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    for attempt in range(max_retries):
        rng = np.random.default_rng(np.random.SeedSequence((root.entropy, attempt)))
        env = _try_build(spec, rng)
        if env is not None and solvable(env):
            return env
    raise UnsolvableLayout(f"no solvable layout for {spec} after {max_retries} attempts")


def _try_build(spec: EnvSpec, rng: np.random.Generator) -> GridEnv | None:
    walls = {(x, 0) for x in range(spec.width)} | {(x, spec.height - 1) for x in range(spec.width)}
    walls |= {(0, y) for y in range(spec.height)} | {(spec.width - 1, y) for y in range(spec.height)}
    inner, doors = _room_layout(spec.width, spec.height, spec.rooms, spec.doors, rng)
    walls |= inner

    free = sorted(
        (x, y)
        for x in range(1, spec.width - 1)
        for y in range(1, spec.height - 1)
        if (x, y) not in walls and (x, y) not in doors
    )

    def take(cells: Sequence[Cell], n: int) -> list[Cell]:
        idx = rng.choice(len(cells), size=n, replace=False)
        return [cells[i] for i in sorted(map(int, idx))]

    if isinstance(spec.obstacles, tuple):
        obstacles = set(spec.obstacles)
        if not obstacles <= set(free):
            raise ValueError("explicit obstacles must lie on free interior cells")
    else:
        if spec.obstacles > len(free) - 2:
            return None
        obstacles = set(take(free, spec.obstacles))
    remaining = [c for c in free if c not in obstacles]

    if isinstance(spec.lava, tuple):
        lava = set(spec.lava)
        if not lava <= set(remaining):
            raise ValueError("explicit lava must lie on free non-obstacle cells")
    else:
        if spec.lava > len(remaining) - 2:
            return None
        lava = set(take(remaining, spec.lava))
    remaining = [c for c in remaining if c not in lava]
    if not remaining:
        return None

    if spec.agent is not None:
        agent_cell = spec.agent
    else:
        agent_cell = remaining[int(rng.integers(len(remaining)))]
    agent_dir = spec.agent_dir if spec.agent_dir is not None else int(rng.integers(4))
    if spec.goal is not None:
        goal = spec.goal
    else:
        goal_choices = [c for c in remaining if c != agent_cell]
        if not goal_choices:
            return None
        goal = goal_choices[int(rng.integers(len(goal_choices)))]

    try:
        return GridEnv(
            width=spec.width,
            height=spec.height,
            walls=frozenset(walls),
            obstacles=frozenset(obstacles),
            lava=frozenset(lava),
            doors=doors,
            agent=Pose(agent_cell[0], agent_cell[1], agent_dir),
            goal=goal,
            dynamics=spec.dynamics,
            p_fail=spec.p_fail if spec.dynamics == "stochastic" else 0.0,
        )
    except ValueError:
        return None
