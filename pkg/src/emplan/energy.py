"""Trajectory energies: model pseudo-likelihood, constraints, composition.

The energy of a fully populated plan is the sum over plan positions of the
negative log marginal of the chosen action with exactly that position masked.
Constraint energies simulate the plan from the template's current state under
deterministic geometry and charge a barrier for every step that lands in a
forbidden cell. Energies compose by summation and every energy exposes the
per-position action terms the Gibbs sampler needs for its local proposals.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .codec import MASK, MaskPattern, N_ACTIONS, PAD, TokenSeq, apply_mask, make_plan_template
from .gridworld import Action, DIR_VECS, GridEnv, Pose, apply_action
from .oracle import optimal_plan, state_vec

DEFAULT_BARRIER = 1.0e3


class IncompletePlan(Exception):
    """PAD or MASK tokens remain inside the plan region."""


def _check_complete(seq: TokenSeq) -> None:
    plan = seq.plan_actions
    if np.any(plan == PAD) or np.any(plan == MASK):
        raise IncompletePlan("plan region still holds PAD/MASK tokens")


class ModelPLL:
    """Pseudo-likelihood energy of a masked sequence model."""

    kind = "model_pll"

    def __init__(self, model):
        self.model = model

    def evaluate(self, seq: TokenSeq) -> float:
        return self.evaluate_many([seq])[0]

    def evaluate_many(self, seqs: list[TokenSeq]) -> list[float]:
        """Batched energies: all single-mask variants of all sequences go
        through one model call, which is bit-identical to separate queries."""
        for seq in seqs:
            _check_complete(seq)
        variants: list[TokenSeq] = []
        positions: list[list[int]] = []
        for seq in seqs:
            for t in seq.plan_positions:
                masked, _ = apply_mask(seq, MaskPattern((t,)))
                variants.append(masked)
                positions.append([t])
        dists = self.model.marginals_many(variants, positions)
        energies = []
        i = 0
        for seq in seqs:
            total = 0.0
            for t in seq.plan_positions:
                p = float(dists[i][0][int(seq.actions[t])])
                total += -math.log(p)
                i += 1
            energies.append(total)
        return energies

    def local_action_energies(self, seq: TokenSeq, position: int) -> np.ndarray:
        """-log marginal per candidate action with ``position`` masked."""
        masked, _ = apply_mask(seq, MaskPattern((position,)))
        return -np.log(self.model.marginals(masked, [position])[0])


class ConstraintEnergy:
    """Barrier energy on plans whose simulated rollout enters forbidden cells.

    The rollout starts from the plan template's current state and uses the
    env's deterministic geometry; each violating step costs ``barrier``.
    Applies to the plan region only.
    """

    kind = "constraint"

    def __init__(self, forbidden, env: GridEnv, barrier: float = DEFAULT_BARRIER):
        self.forbidden = frozenset(forbidden)
        self.env = env
        self.barrier = barrier

    def _start_pose(self, seq: TokenSeq) -> Pose:
        x, y, d, _, _ = seq.current_state
        return Pose(int(x), int(y), int(d))

    def evaluate(self, seq: TokenSeq) -> float:
        _check_complete(seq)
        sim = self.env.fresh()
        pose = self._start_pose(seq)
        violations = 0
        for a in seq.plan_actions:
            pose = apply_action(sim, pose, Action(int(a)))
            if pose.cell in self.forbidden:
                violations += 1
        return self.barrier * violations

    def evaluate_many(self, seqs: list[TokenSeq]) -> list[float]:
        return [self.evaluate(s) for s in seqs]

    def local_action_energies(self, seq: TokenSeq, position: int) -> np.ndarray:
        """Barrier per candidate action at ``position`` given the (real)
        prefix actions before it."""
        sim = self.env.fresh()
        pose = self._start_pose(seq)
        for t in range(seq.ctx_len, position):
            code = int(seq.actions[t])
            if code >= N_ACTIONS:
                raise IncompletePlan("prefix before the queried position must be real actions")
            pose = apply_action(sim, pose, Action(code))
        dx, dy = DIR_VECS[pose.dir]
        ahead = (pose.x + dx, pose.y + dy)
        out = np.zeros(N_ACTIONS)
        for a in range(N_ACTIONS):
            lands = ahead if a == Action.FORWARD and sim.passable(ahead) else pose.cell
            if lands in self.forbidden:
                out[a] = self.barrier
        return out


class ConstantEnergy:
    """Constant offset; composing it shifts every plan equally."""

    kind = "constant"

    def __init__(self, value: float = 0.0):
        self.value = value

    def evaluate(self, seq: TokenSeq) -> float:
        return self.value

    def evaluate_many(self, seqs: list[TokenSeq]) -> list[float]:
        return [self.value] * len(seqs)

    def local_action_energies(self, seq: TokenSeq, position: int) -> np.ndarray:
        return np.zeros(N_ACTIONS)


class CompositeEnergy:
    """Sum of component energies; associative and commutative exactly."""

    kind = "composite"

    def __init__(self, parts):
        flat = []
        for part in parts:
            if isinstance(part, CompositeEnergy):
                flat.extend(part.parts)
            else:
                flat.append(part)
        if not flat:
            raise ValueError("composite energy needs at least one part")
        self.parts = flat

    def evaluate(self, seq: TokenSeq) -> float:
        return float(sum(part.evaluate(seq) for part in self.parts))

    def evaluate_many(self, seqs: list[TokenSeq]) -> list[float]:
        totals = [0.0] * len(seqs)
        for part in self.parts:
            for i, value in enumerate(part.evaluate_many(seqs)):
                totals[i] += value
        return totals

    def local_action_energies(self, seq: TokenSeq, position: int) -> np.ndarray:
        out = np.zeros(N_ACTIONS)
        for part in self.parts:
            out = out + part.local_action_energies(seq, position)
        return out

    @property
    def model_parts(self) -> list[ModelPLL]:
        return [p for p in self.parts if isinstance(p, ModelPLL)]

    @property
    def other_parts(self) -> list:
        return [p for p in self.parts if not isinstance(p, ModelPLL)]


def compose(energies) -> CompositeEnergy:
    return CompositeEnergy(list(energies))


def as_energy(model_or_energy) -> CompositeEnergy:
    """Wrap a bare model into its PLL energy; normalize to a composite."""
    if isinstance(model_or_energy, CompositeEnergy):
        return model_or_energy
    if hasattr(model_or_energy, "evaluate"):
        return CompositeEnergy([model_or_energy])
    return CompositeEnergy([ModelPLL(model_or_energy)])


def pll_energy(model, seq: TokenSeq) -> float:
    """Sum over plan positions of the negative marginal log-likelihood of the
    chosen action, each term computed by masking exactly that position."""
    return ModelPLL(model).evaluate(seq)


def constraint_energy(
    forbidden, env: GridEnv, seq: TokenSeq, barrier: float = DEFAULT_BARRIER
) -> float:
    return ConstraintEnergy(forbidden, env, barrier).evaluate(seq)


@dataclass
class LandscapeRow:
    noise_level: float
    mean_energy: float
    stderr: float
    trials: int


def landscape(
    model,
    env: GridEnv,
    noise_levels,
    trials: int,
    rng: np.random.Generator,
    horizon: int | None = None,
) -> list[LandscapeRow]:
    """Mean plan energy as the oracle plan is corrupted at increasing rates.

    Each trial corrupts the oracle action sequence at rate rho (uniform swaps
    over the action vocabulary, original included) and scores the first
    ``horizon`` actions from the env's start state. The env's oracle plan must
    fill the horizon.
    """
    horizon = horizon if horizon is not None else model.horizon
    base = [int(a) for a in optimal_plan(env)]
    if len(base) < horizon:
        raise ValueError(
            f"oracle plan of length {len(base)} cannot fill horizon {horizon}; pick a harder env"
        )
    template = make_plan_template([], state_vec(env.agent, env.goal), horizon)
    energy = ModelPLL(model)
    rows = []
    for rho in noise_levels:
        seqs = []
        for _ in range(trials):
            actions = list(base)
            for i in range(len(actions)):
                if rho > 0.0 and rng.random() < rho:
                    actions[i] = int(rng.integers(N_ACTIONS))
            seq = template.copy()
            seq.actions[seq.ctx_len :] = actions[:horizon]
            seqs.append(seq)
        values = np.asarray(energy.evaluate_many(seqs))
        stderr = float(values.std(ddof=1) / math.sqrt(trials)) if trials > 1 else 0.0
        rows.append(LandscapeRow(float(rho), float(values.mean()), stderr, trials))
    return rows


def write_landscape_csv(rows: list[LandscapeRow], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["noise_level", "mean_energy", "stderr", "trials"])
        for row in rows:
            writer.writerow(
                [row.noise_level, f"{row.mean_energy:.6f}", f"{row.stderr:.6f}", row.trials]
            )
