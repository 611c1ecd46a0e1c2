"""Plan construction by iterative energy minimization plus baselines.

The Gibbs planner fills a PAD-initialized template from the model marginals,
then repeatedly masks random plan positions and resamples them from the
locally normalized energy distribution. Constraint energies that factor per
step are folded into the local sampling distribution; everything else acts
through best-so-far selection on the full composite energy. The returned
plan is always the lowest-energy sequence visited.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .codec import MaskPattern, N_ACTIONS, PAD, TokenSeq, apply_mask, make_plan_template
from .energy import CompositeEnergy, as_energy
from .gridworld import GridEnv, Outcome, step
from .oracle import state_vec

EXECUTE_ALL = "all"
REPLAN_EACH_STEP = "replan"


@dataclass(frozen=True)
class PlanConfig:
    horizon: int
    iters: int = 10
    masks_per_step: int = 1
    temperature: float = 1.0
    anneal_to: float | None = None  # linear anneal target; None keeps temperature constant
    execution: str = EXECUTE_ALL
    seed: int = 0
    method: str = "gibbs"  # "gibbs" | "shooting" | "cem"
    n_samples: int = 30
    n_elite: int = 3

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        if self.iters < 0:
            raise ValueError("iters must be non-negative")
        if not 1 <= self.masks_per_step <= self.horizon:
            raise ValueError("masks_per_step must lie in [1, horizon]")
        if self.temperature <= 0 or (self.anneal_to is not None and self.anneal_to <= 0):
            raise ValueError("temperatures must be positive")
        if self.execution not in (EXECUTE_ALL, REPLAN_EACH_STEP):
            raise ValueError(f"unknown execution mode {self.execution!r}")
        if self.method not in ("gibbs", "shooting", "cem"):
            raise ValueError(f"unknown planner method {self.method!r}")
        if self.n_elite > self.n_samples:
            raise ValueError("n_elite cannot exceed n_samples")

    def temperature_at(self, iteration: int) -> float:
        if self.anneal_to is None or self.iters == 0:
            return self.temperature
        frac = iteration / self.iters
        return self.temperature + (self.anneal_to - self.temperature) * frac

    def to_dict(self) -> dict:
        return {
            "horizon": self.horizon,
            "iters": self.iters,
            "masks_per_step": self.masks_per_step,
            "temperature": self.temperature,
            "anneal_to": self.anneal_to,
            "execution": self.execution,
            "seed": self.seed,
            "method": self.method,
            "n_samples": self.n_samples,
            "n_elite": self.n_elite,
        }


@dataclass
class PlanTrace:
    """Per-iteration snapshots (iteration, plan actions, composite energy);
    snapshot 0 is the initialization."""

    snapshots: list[tuple[int, list[int], float]] = field(default_factory=list)

    def record(self, iteration: int, actions: np.ndarray, energy: float) -> None:
        self.snapshots.append((iteration, [int(a) for a in actions], float(energy)))

    def to_jsonl(self) -> str:
        return "\n".join(
            json.dumps({"iteration": it, "actions": acts, "energy": e})
            for it, acts, e in self.snapshots
        )


def _sample_from(nll: np.ndarray, temperature: float, rng: np.random.Generator) -> int:
    logits = -np.asarray(nll, dtype=np.float64) / temperature
    logits -= logits.max()
    probs = np.exp(logits)
    probs /= probs.sum()
    return int(np.searchsorted(np.cumsum(probs), rng.random(), side="right").clip(0, N_ACTIONS - 1))


def _proposal_nll(energy: CompositeEnergy, masked: TokenSeq, positions: list[int]) -> np.ndarray:
    """Summed -log marginals of all model parts at the masked positions."""
    total = np.zeros((len(positions), N_ACTIONS))
    for part in energy.model_parts:
        dists = part.model.marginals(masked, positions)
        total += -np.log(dists)
    return total


def _fill_positions(
    energy: CompositeEnergy,
    seq: TokenSeq,
    positions: list[int],
    model_nll: np.ndarray,
    temperature: float,
    rng: np.random.Generator,
) -> None:
    """Sample the masked positions left to right, folding per-position
    constraint terms; earlier samples are written before later ones so each
    constraint sees a real prefix."""
    for row, pos in enumerate(positions):
        nll = model_nll[row].copy()
        for part in energy.other_parts:
            nll += part.local_action_energies(seq, pos)
        seq.actions[pos] = _sample_from(nll, temperature, rng)


def gibbs_plan(
    energy,
    template: TokenSeq,
    cfg: PlanConfig,
    rng: np.random.Generator,
) -> tuple[np.ndarray, PlanTrace]:
    """Iterative masked resampling; returns the best-energy plan visited.

    The plan region is first filled by a single multi-mask marginal query;
    each of cfg.iters rounds then masks cfg.masks_per_step distinct plan
    positions and resamples them from exp(-energy/temperature).
    """
    energy = as_energy(energy)
    if not energy.model_parts:
        raise ValueError("gibbs_plan needs at least one model energy for proposals")
    horizon = template.horizon
    if not 1 <= cfg.masks_per_step <= horizon:
        raise ValueError("masks_per_step must lie in [1, template horizon]")
    plan_lo = template.ctx_len

    seq = template.copy()
    pad_positions = [p for p in seq.plan_positions if seq.actions[p] == PAD]
    if pad_positions:
        masked, _ = apply_mask(seq, MaskPattern(tuple(pad_positions)))
        nll = _proposal_nll(energy, masked, pad_positions)
        _fill_positions(energy, seq, pad_positions, nll, cfg.temperature_at(0), rng)

    best_energy = energy.evaluate(seq)
    best_actions = seq.plan_actions.copy()
    trace = PlanTrace()
    trace.record(0, seq.plan_actions, best_energy)

    prev_actions = seq.plan_actions.copy()
    prev_energy = best_energy
    for it in range(1, cfg.iters + 1):
        chosen = rng.choice(horizon, size=cfg.masks_per_step, replace=False)
        positions = sorted(int(c) + plan_lo for c in chosen)
        masked, _ = apply_mask(seq, MaskPattern(tuple(positions)))
        nll = _proposal_nll(energy, masked, positions)
        for p in positions:
            seq.actions[p] = masked.actions[p]  # MASK while resampling
        _fill_positions(energy, seq, positions, nll, cfg.temperature_at(it), rng)

        if np.array_equal(seq.plan_actions, prev_actions):
            e = prev_energy  # unchanged sequence, unchanged energy
        else:
            e = energy.evaluate(seq)
        trace.record(it, seq.plan_actions, e)
        prev_actions = seq.plan_actions.copy()
        prev_energy = e
        if e < best_energy:
            best_energy = e
            best_actions = seq.plan_actions.copy()

    return best_actions, trace


def _fill_template(template: TokenSeq, actions: np.ndarray) -> TokenSeq:
    seq = template.copy()
    seq.actions[seq.ctx_len :] = actions
    return seq


def random_shooting_plan(
    energy, template: TokenSeq, n_samples: int, rng: np.random.Generator
) -> np.ndarray:
    """Uniform random plans; returns the lowest-energy candidate."""
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    energy = as_energy(energy)
    candidates = rng.integers(0, N_ACTIONS, size=(n_samples, template.horizon))
    values = energy.evaluate_many([_fill_template(template, c) for c in candidates])
    return candidates[int(np.argmin(values))].copy()


def cem_plan(
    energy,
    template: TokenSeq,
    n_samples: int,
    n_elite: int,
    iters: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Cross-entropy-style refinement: keep the elite plans each generation
    and repopulate by mutating one random token of a random elite."""
    if not 1 <= n_elite <= n_samples:
        raise ValueError("need 1 <= n_elite <= n_samples")
    energy = as_energy(energy)
    horizon = template.horizon
    pop = rng.integers(0, N_ACTIONS, size=(n_samples, horizon))
    best_actions = None
    best_value = np.inf
    for generation in range(max(1, iters)):
        values = np.asarray(energy.evaluate_many([_fill_template(template, c) for c in pop]))
        order = np.argsort(values, kind="stable")
        if values[order[0]] < best_value:
            best_value = float(values[order[0]])
            best_actions = pop[order[0]].copy()
        if generation == max(1, iters) - 1:
            break
        elites = pop[order[:n_elite]]
        children = [elites[j % n_elite].copy() for j in range(n_samples - n_elite)]
        for child in children:
            child[int(rng.integers(horizon))] = int(rng.integers(N_ACTIONS))
        pop = np.vstack([elites, children]) if children else elites.copy()
    return best_actions


@dataclass
class EpisodeResult:
    success: bool
    steps: int
    lava_hit: bool
    outcome: Outcome


def plan_once(
    energy, template: TokenSeq, cfg: PlanConfig, rng: np.random.Generator
) -> tuple[np.ndarray, PlanTrace | None]:
    if cfg.method == "gibbs":
        return gibbs_plan(energy, template, cfg, rng)
    if cfg.method == "shooting":
        return random_shooting_plan(energy, template, cfg.n_samples, rng), None
    return cem_plan(energy, template, cfg.n_samples, cfg.n_elite, cfg.iters, rng), None


def run_episode(
    env: GridEnv,
    model_or_energy,
    cfg: PlanConfig,
    rng: np.random.Generator,
) -> EpisodeResult:
    """Plan and execute until termination.

    ExecuteAll plans a horizon-length segment, executes all of it, and
    replans while the episode continues; ReplanEachStep executes only the
    first planned action before replanning.
    """
    energy = as_energy(model_or_energy)
    ctx_caps = [part.model.ctx_len for part in energy.model_parts]
    ctx_cap = min(ctx_caps) if ctx_caps else 0
    context: list[tuple[tuple[int, ...], int]] = []

    while not env.terminated:
        ctx = context[len(context) - ctx_cap :] if ctx_cap else []
        template = make_plan_template(
            ctx, state_vec(env.agent, env.goal), cfg.horizon, max_ctx=ctx_cap
        )
        actions, _ = plan_once(energy, template, cfg, rng)
        to_exec = actions if cfg.execution == EXECUTE_ALL else actions[:1]
        for a in to_exec:
            sv = state_vec(env.agent, env.goal)
            result = step(env, int(a), rng)
            context.append((sv, int(result.executed)))
            if env.terminated:
                break

    return EpisodeResult(
        success=env.outcome == Outcome.GOAL_REACHED,
        steps=env.steps_taken,
        lava_hit=env.outcome == Outcome.LAVA_DEATH,
        outcome=env.outcome,
    )
