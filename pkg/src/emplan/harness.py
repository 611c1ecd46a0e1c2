"""Experiment drivers: evaluation loops, property protocols, metrics, manifests.

Every run derives all randomness from (seed, episode index) so a stored
manifest reproduces its report bit-identically. Reports validate against a
versioned JSON schema before they are written.
"""

from __future__ import annotations

import configparser
import csv
import json
from dataclasses import dataclass, replace as dc_replace
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .codec import N_ACTIONS
from .energy import ConstraintEnergy, DEFAULT_BARRIER, ModelPLL, compose
from .gridworld import (
    EnvSpec,
    GridEnv,
    Outcome,
    build_env,
    parse_env_spec,
    reachable_cells,
    solvable,
    step,
)
from .model import MaskedSeqModel, TrainConfig, load_checkpoint, train
from .oracle import Dataset, generate_dataset, optimal_plan, simulate_poses
from .planner import PlanConfig, REPLAN_EACH_STEP, run_episode
from .util import config_digest, configure_determinism

SCHEMA_VERSION = 1

METRICS_SCHEMA = {
    "type": "object",
    "required": [
        "schema_version",
        "name",
        "success_rate",
        "stderr",
        "mean_episode_length",
        "lava_entries",
        "per_seed",
        "manifest",
    ],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "name": {"type": "string"},
        "success_rate": {"type": "number", "minimum": 0.0, "maximum": 1.0},
        "stderr": {"type": "number", "minimum": 0.0},
        "mean_episode_length": {"type": "number", "minimum": 0.0},
        "lava_entries": {"type": "integer", "minimum": 0},
        "per_seed": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["seed", "episodes", "successes", "success_rate", "mean_steps"],
                "properties": {
                    "seed": {"type": "integer"},
                    "episodes": {"type": "integer", "minimum": 1},
                    "successes": {"type": "integer", "minimum": 0},
                    "success_rate": {"type": "number", "minimum": 0.0, "maximum": 1.0},
                    "mean_steps": {"type": "number", "minimum": 0.0},
                    "lava_entries": {"type": "integer", "minimum": 0},
                },
            },
        },
        "iteration_curve": {"type": ["array", "null"]},
        "manifest": {"type": "object"},
    },
}


class CheckpointMissing(Exception):
    """Referenced checkpoint does not exist."""


@dataclass(frozen=True)
class ExperimentSpec:
    name: str
    env: EnvSpec
    train: TrainConfig = TrainConfig()
    plan: PlanConfig = PlanConfig(horizon=5)
    test_env: EnvSpec | None = None
    m: int = 500
    p_corrupt: float = 0.0
    mode: str = "standard"  # standard | adaptation | generalization | composition
    difficulty: str = "easy"
    max_lava: int = 2
    episodes: int = 200
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    data_seed: int = 0
    train_seed: int = 0
    checkpoint: str | None = None

    def __post_init__(self):
        if self.episodes < 1:
            raise ValueError("episodes must be at least 1")
        if not self.seeds:
            raise ValueError("at least one evaluation seed is required")
        if self.mode == "generalization":
            if self.test_env is None or self.test_env == self.env:
                raise ValueError("generalization mode needs a test env different from the train env")

    @property
    def eval_env(self) -> EnvSpec:
        return self.test_env if self.test_env is not None else self.env


@dataclass
class SeedMetrics:
    seed: int
    episodes: int
    successes: int
    success_rate: float
    mean_steps: float
    lava_entries: int


@dataclass
class MetricsReport:
    name: str
    per_seed: list[SeedMetrics]
    success_rate: float
    stderr: float
    mean_episode_length: float
    lava_entries: int
    manifest: dict
    iteration_curve: list[dict] | None = None
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "name": self.name,
            "success_rate": self.success_rate,
            "stderr": self.stderr,
            "mean_episode_length": self.mean_episode_length,
            "lava_entries": self.lava_entries,
            "per_seed": [vars(s) for s in self.per_seed],
            "iteration_curve": self.iteration_curve,
            "manifest": self.manifest,
        }


def validate_report(report: dict) -> None:
    import jsonschema

    jsonschema.validate(report, METRICS_SCHEMA)


def aggregate(per_seed: list[SeedMetrics]) -> tuple[float, float, float, int]:
    rates = np.asarray([s.success_rate for s in per_seed])
    mean = float(rates.mean())
    stderr = float(rates.std(ddof=1) / np.sqrt(len(rates))) if len(rates) > 1 else 0.0
    total_eps = sum(s.episodes for s in per_seed)
    mean_steps = float(sum(s.mean_steps * s.episodes for s in per_seed) / total_eps)
    lava = int(sum(s.lava_entries for s in per_seed))
    return mean, stderr, mean_steps, lava


def episode_env_seed(seed: int, ep: int) -> np.random.SeedSequence:
    return np.random.SeedSequence((seed, ep, 11))


def episode_rng(seed: int, ep: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, ep, 13)))


def run_seed_block(
    env_factory,
    energy_factory,
    plan_cfg: PlanConfig,
    episodes: int,
    seed: int,
) -> SeedMetrics:
    """One seed's worth of episodes. ``env_factory(seed, ep)`` builds the
    episode env; ``energy_factory(env)`` builds the energy it is planned
    with (so test-time constraints can depend on the sampled env)."""
    successes = 0
    lava = 0
    steps = 0
    for ep in range(episodes):
        env = env_factory(seed, ep)
        result = run_episode(env, energy_factory(env), plan_cfg, episode_rng(seed, ep))
        successes += int(result.success)
        lava += int(result.lava_hit)
        steps += result.steps
    return SeedMetrics(
        seed=seed,
        episodes=episodes,
        successes=successes,
        success_rate=successes / episodes,
        mean_steps=steps / episodes,
        lava_entries=lava,
    )


def spec_env_factory(env_spec: EnvSpec):
    def factory(seed: int, ep: int) -> GridEnv:
        return build_env(env_spec, episode_env_seed(seed, ep))

    return factory


def build_manifest(
    spec: ExperimentSpec, extra: dict | None = None
) -> dict:
    train_cfg = spec.train.to_dict()
    plan_cfg = spec.plan.to_dict()
    env_cfg = spec.env.to_dict()
    manifest = {
        "package_version": __version__,
        "mode": spec.mode,
        "env": env_cfg,
        "test_env": spec.test_env.to_dict() if spec.test_env is not None else None,
        "data": {"m": spec.m, "p_corrupt": spec.p_corrupt, "seed": spec.data_seed},
        "train": train_cfg,
        "plan": plan_cfg,
        "episodes": spec.episodes,
        "seeds": list(spec.seeds),
        "train_seed": spec.train_seed,
        "digests": {
            "env": config_digest(env_cfg),
            "train": config_digest(train_cfg),
            "plan": config_digest(plan_cfg),
        },
    }
    if extra:
        manifest.update(extra)
    return manifest


def evaluate(
    spec: ExperimentSpec,
    model=None,
    energy_factory=None,
    env_factory=None,
    iters_sweep: list[int] | None = None,
) -> MetricsReport:
    """Run episodes x seeds for the spec and aggregate a report.

    ``model`` may be any marginals-contract model; when omitted the spec's
    checkpoint is loaded (CheckpointMissing if absent). Custom factories
    support the property protocols.
    """
    if model is None and energy_factory is None:
        if spec.checkpoint is None or not Path(spec.checkpoint).exists():
            raise CheckpointMissing(f"checkpoint {spec.checkpoint!r} not found")
        model = load_checkpoint(spec.checkpoint)
    if energy_factory is None:
        pll = ModelPLL(model)
        energy_factory = lambda env: pll  # noqa: E731
    if env_factory is None:
        env_factory = spec_env_factory(spec.eval_env)

    per_seed = [
        run_seed_block(env_factory, energy_factory, spec.plan, spec.episodes, s)
        for s in spec.seeds
    ]
    mean, stderr, mean_steps, lava = aggregate(per_seed)

    curve = None
    if iters_sweep:
        curve = []
        for n_iters in iters_sweep:
            cfg = dc_replace(spec.plan, iters=n_iters)
            block = [
                run_seed_block(env_factory, energy_factory, cfg, spec.episodes, s)
                for s in spec.seeds
            ]
            m_i, se_i, _, _ = aggregate(block)
            curve.append({"iters": n_iters, "success_rate": m_i, "stderr": se_i})

    report = MetricsReport(
        name=spec.name,
        per_seed=per_seed,
        success_rate=mean,
        stderr=stderr,
        mean_episode_length=mean_steps,
        lava_entries=lava,
        manifest=build_manifest(spec),
        iteration_curve=curve,
    )
    validate_report(report.to_dict())
    return report


def write_report(report: MetricsReport, out_dir) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = report.to_dict()
    validate_report(payload)
    json_path = out / "metrics.json"
    json_path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    csv_path = out / "metrics.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["seed", "episodes", "successes", "success_rate", "mean_steps", "lava_entries"])
        for s in report.per_seed:
            writer.writerow(
                [s.seed, s.episodes, s.successes, f"{s.success_rate:.4f}", f"{s.mean_steps:.2f}", s.lava_entries]
            )
        writer.writerow(
            ["all", sum(s.episodes for s in report.per_seed), sum(s.successes for s in report.per_seed),
             f"{report.success_rate:.4f}", f"{report.mean_episode_length:.2f}", report.lava_entries]
        )
    return json_path, csv_path


# -- model construction ----------------------------------------------------


def new_model(env_spec: EnvSpec, plan_cfg: PlanConfig, cfg: TrainConfig, seed: int,
              ctx_len: int = 0) -> MaskedSeqModel:
    torch.manual_seed(seed)
    return MaskedSeqModel(
        grid_size=max(env_spec.width, env_spec.height),
        ctx_len=ctx_len,
        horizon=plan_cfg.horizon,
        layers=cfg.layers,
        heads=cfg.heads,
        embed_dim=cfg.embed_dim,
        dropout=cfg.dropout,
    )


def train_pipeline(
    spec: ExperimentSpec, out_dir=None, env_spec: EnvSpec | None = None
) -> tuple[MaskedSeqModel, Dataset]:
    """Generate the dataset and train a model for the spec's environment."""
    configure_determinism()
    env_spec = env_spec if env_spec is not None else spec.env
    dataset = generate_dataset(env_spec, spec.m, spec.p_corrupt, spec.data_seed)
    model = new_model(env_spec, spec.plan, spec.train, spec.train_seed)
    train(model, dataset, spec.train, spec.train_seed, out_dir=out_dir)
    return model, dataset


# -- reference policies ----------------------------------------------------


def bc_reference(model, env_spec: EnvSpec, episodes: int, seed: int,
                 temperature: float = 1.0) -> float:
    """Single-mask next-step policy: gibbs with iters=0 and horizon 1,
    replanning every step. The no-refinement comparator."""
    cfg = PlanConfig(horizon=1, iters=0, temperature=temperature, execution=REPLAN_EACH_STEP)
    block = run_seed_block(
        spec_env_factory(env_spec), lambda env: ModelPLL(model), cfg, episodes, seed
    )
    return block.success_rate


def random_policy_success(env_spec: EnvSpec, episodes: int, seed: int) -> float:
    """Uniform-random action baseline under the env's own dynamics."""
    successes = 0
    for ep in range(episodes):
        env = build_env(env_spec, episode_env_seed(seed, ep))
        rng = episode_rng(seed, ep)
        while not env.terminated:
            step(env, int(rng.integers(N_ACTIONS)), rng)
        successes += int(env.outcome == Outcome.GOAL_REACHED)
    return successes / episodes


# -- property protocols ----------------------------------------------------

ADAPTATION_TIERS = {"easy": 2, "medium": 5, "hard": 2}


def add_path_lava(env: GridEnv, max_cells: int, rng: np.random.Generator,
                  tries: int = 50) -> GridEnv:
    """Scatter 1..max_cells lava cells on the oracle path (start and goal
    excluded), rerolling until the env stays solvable around them."""
    plan = optimal_plan(env)
    poses = simulate_poses(env, env.agent, plan)
    candidates = sorted({p.cell for p in poses} - {env.agent.cell, env.goal})
    n = min(int(rng.integers(1, max_cells + 1)), len(candidates))
    while n > 0:
        for _ in range(tries):
            idx = rng.choice(len(candidates), size=n, replace=False)
            cells = frozenset(candidates[i] for i in sorted(map(int, idx)))
            lavaed = dc_replace(env, lava=cells, doors=dict(env.doors))
            if solvable(lavaed):
                return lavaed
        n -= 1
    return dc_replace(env, doors=dict(env.doors))


def adaptation_env_factory(base_spec: EnvSpec, max_lava: int):
    def factory(seed: int, ep: int) -> GridEnv:
        env = build_env(base_spec, episode_env_seed(seed, ep))
        rng = np.random.default_rng(np.random.SeedSequence((seed, ep, 17)))
        return add_path_lava(env, max_lava, rng)

    return factory


def adaptation_energy_factory(model, barrier: float = DEFAULT_BARRIER):
    pll = ModelPLL(model)

    def factory(env: GridEnv):
        if not env.lava:
            return pll
        return compose([pll, ConstraintEnergy(env.lava, env, barrier)])

    return factory


def adaptation_eval(spec: ExperimentSpec, model, max_lava: int) -> MetricsReport:
    """Evaluate with test-time lava and the composed constraint energy."""
    report_spec = dc_replace(spec, mode="adaptation", max_lava=max_lava)
    return evaluate(
        report_spec,
        model=model,
        energy_factory=adaptation_energy_factory(model),
        env_factory=adaptation_env_factory(spec.eval_env, max_lava),
    )


def split_obstacles(spec: EnvSpec, n_obstacles: int, seed: int,
                    tries: int = 200) -> tuple[tuple, tuple, tuple]:
    """A fixed obstacle layout whose free cells stay connected, split by
    index parity into the two half-views used for composition."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, 23)))
    interior = [
        (x, y) for x in range(1, spec.width - 1) for y in range(1, spec.height - 1)
    ]
    for _ in range(tries):
        idx = rng.choice(len(interior), size=n_obstacles, replace=False)
        cells = tuple(interior[i] for i in sorted(map(int, idx)))
        probe_spec = dc_replace(spec, obstacles=cells)
        try:
            env = build_env(probe_spec, 0)
        except Exception:
            continue
        free = [c for c in interior if c not in set(cells)]
        if len(free) >= 2 and set(free) <= reachable_cells(env, free[0]):
            return cells, cells[0::2], cells[1::2]
    raise RuntimeError(f"could not draw a connected {n_obstacles}-obstacle layout")


def composition_eval(
    spec: ExperimentSpec, model_a: MaskedSeqModel, model_b: MaskedSeqModel
) -> dict[str, MetricsReport]:
    """Composed vs single-model success on the full-obstacle env."""
    full_factory = spec_env_factory(spec.eval_env)
    composed = compose([ModelPLL(model_a), ModelPLL(model_b)])
    out = {}
    for label, energy in (
        ("composed", composed),
        ("single_a", ModelPLL(model_a)),
        ("single_b", ModelPLL(model_b)),
    ):
        report_spec = dc_replace(spec, name=f"{spec.name}-{label}", mode="composition")
        out[label] = evaluate(
            report_spec,
            model=model_a,
            energy_factory=lambda env, e=energy: e,
            env_factory=full_factory,
        )
    return out


def ablate(
    spec: ExperimentSpec, model, methods: tuple[str, ...] = ("gibbs", "cem", "shooting")
) -> dict[str, MetricsReport]:
    """Head-to-head planner comparison with shared episode seeds."""
    out = {}
    for method in methods:
        cfg = dc_replace(spec.plan, method=method)
        report_spec = dc_replace(spec, plan=cfg, name=f"{spec.name}-{method}")
        out[method] = evaluate(report_spec, model=model)
    return out


# -- config files ----------------------------------------------------------


def load_experiment(path) -> ExperimentSpec:
    """Parse a sectioned key=value config ([env], [data], [train], [plan],
    [eval], optional [test_env])."""
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise FileNotFoundError(path)

    env = parse_env_spec(dict(parser["env"])) if "env" in parser else None
    if env is None:
        raise ValueError("config must carry an [env] section")
    test_env = parse_env_spec(dict(parser["test_env"])) if "test_env" in parser else None

    data = dict(parser["data"]) if "data" in parser else {}
    m = int(data.get("m", 500))
    p_corrupt = float(data.get("p_corrupt", 0.0))
    data_seed = int(data.get("seed", 0))

    train_kw = {}
    if "train" in parser:
        raw = dict(parser["train"])
        for key in ("layers", "heads", "embed_dim", "batch_size", "max_epochs", "checkpoint_every"):
            if key in raw:
                train_kw[key] = int(raw[key])
        for key in ("lr", "dropout", "grad_clip", "weight_decay", "warmup_frac"):
            if key in raw:
                train_kw[key] = float(raw[key])
        if "betas" in raw:
            train_kw["betas"] = tuple(float(v) for v in raw["betas"].split(","))
    train_cfg = TrainConfig(**train_kw)

    plan_kw = {"horizon": 5}
    if "plan" in parser:
        raw = dict(parser["plan"])
        for key in ("horizon", "iters", "masks_per_step", "seed", "n_samples", "n_elite"):
            if key in raw:
                plan_kw[key] = int(raw[key])
        for key in ("temperature", "anneal_to"):
            if key in raw:
                plan_kw[key] = float(raw[key])
        for key in ("execution", "method"):
            if key in raw:
                plan_kw[key] = raw[key]
    plan_cfg = PlanConfig(**plan_kw)

    eval_kw = dict(parser["eval"]) if "eval" in parser else {}
    seeds = tuple(int(s) for s in eval_kw.get("seeds", "0,1,2,3,4").split(","))
    return ExperimentSpec(
        name=eval_kw.get("name", Path(path).stem),
        env=env,
        test_env=test_env,
        m=m,
        p_corrupt=p_corrupt,
        train=train_cfg,
        plan=plan_cfg,
        mode=eval_kw.get("mode", "standard"),
        difficulty=eval_kw.get("difficulty", "easy"),
        max_lava=int(eval_kw.get("max_lava", ADAPTATION_TIERS.get(eval_kw.get("difficulty", "easy"), 2))),
        episodes=int(eval_kw.get("episodes", 200)),
        seeds=seeds,
        data_seed=data_seed,
        train_seed=int(eval_kw.get("train_seed", 0)),
        checkpoint=eval_kw.get("checkpoint"),
    )
