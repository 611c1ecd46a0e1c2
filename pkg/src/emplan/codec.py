"""Token layout for plan templates and training windows.

A token sequence has K context slots followed by T plan slots. Context slots
carry real past states and actions. Plan slots all repeat the current state;
their action slots start as PAD and are filled in by the planner. Training
windows use the same layout: the window is split at a step n, the plan-region
states all repeat the state at n, and the true subsequent actions (PAD beyond
the demo's end) fill the action slots, one of which is masked for the loss.

Token codes are fixed: LEFT=0, RIGHT=1, FORWARD=2, OPEN=3, PAD=4, MASK=5.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .oracle import Dataset, Demo

N_ACTIONS = 4
PAD = 4
MASK = 5
VOCAB_SIZE = 6

STATE_DIM = 5  # (x, y, dir, gx, gy)


class ContextOverflow(Exception):
    """Context longer than the model's trained capacity."""


@dataclass
class TokenSeq:
    """Aligned state/action slots; slots [0, ctx_len) are context, the
    remaining ``horizon`` slots are the plan region."""

    states: np.ndarray  # (ctx_len + horizon, STATE_DIM) int64
    actions: np.ndarray  # (ctx_len + horizon,) int64 action/PAD/MASK codes
    ctx_len: int
    horizon: int

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.int64)
        self.actions = np.asarray(self.actions, dtype=np.int64)
        n = self.ctx_len + self.horizon
        if self.states.shape != (n, STATE_DIM) or self.actions.shape != (n,):
            raise ValueError("state/action slots do not match ctx_len + horizon")
        if np.any(self.actions[: self.ctx_len] == PAD):
            raise ValueError("PAD may not appear in the context region")

    @property
    def plan_positions(self) -> range:
        return range(self.ctx_len, self.ctx_len + self.horizon)

    @property
    def plan_actions(self) -> np.ndarray:
        return self.actions[self.ctx_len :]

    @property
    def current_state(self) -> tuple[int, ...]:
        return tuple(int(v) for v in self.states[self.ctx_len])

    def copy(self) -> "TokenSeq":
        return TokenSeq(self.states.copy(), self.actions.copy(), self.ctx_len, self.horizon)


@dataclass(frozen=True)
class MaskPattern:
    indices: tuple[int, ...]

    def validate(self, seq: TokenSeq) -> None:
        for i in self.indices:
            if not seq.ctx_len <= i < seq.ctx_len + seq.horizon:
                raise ValueError(f"mask index {i} outside the plan region")


def make_plan_template(
    ctx: list[tuple[tuple[int, ...], int]],
    current_state: tuple[int, ...],
    horizon: int,
    max_ctx: int | None = None,
) -> TokenSeq:
    """Fresh plan template: context pairs, then ``horizon`` slots repeating
    ``current_state`` with PAD actions."""
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    if max_ctx is not None and len(ctx) > max_ctx:
        raise ContextOverflow(f"context of {len(ctx)} exceeds capacity {max_ctx}")
    k = len(ctx)
    states = np.empty((k + horizon, STATE_DIM), dtype=np.int64)
    actions = np.empty(k + horizon, dtype=np.int64)
    for i, (s, a) in enumerate(ctx):
        states[i] = s
        actions[i] = a
    states[k:] = current_state
    actions[k:] = PAD
    return TokenSeq(states, actions, ctx_len=k, horizon=horizon)


def apply_mask(seq: TokenSeq, pattern: MaskPattern) -> tuple[TokenSeq, np.ndarray]:
    """Replace action slots at the pattern's indices with MASK. Returns the
    masked copy and the original codes at those indices (loss targets)."""
    pattern.validate(seq)
    masked = seq.copy()
    idx = np.asarray(sorted(pattern.indices), dtype=np.int64)
    originals = masked.actions[idx].copy()
    masked.actions[idx] = MASK
    return masked, originals


@dataclass
class Batch:
    """Stacked training windows. ``actions`` holds MASK at ``mask_pos``.

    Elements with fewer context steps than ``ctx_cap`` are right-aligned:
    slots before ctx_cap - ctx_len are inert and excluded from attention.
    """

    states: np.ndarray  # (B, L, STATE_DIM)
    actions: np.ndarray  # (B, L)
    ctx_lens: np.ndarray  # (B,)
    mask_pos: np.ndarray  # (B,)
    targets: np.ndarray  # (B,)
    ctx_cap: int
    horizon: int

    def __len__(self) -> int:
        return self.states.shape[0]


def encode_window(
    demo: Demo,
    n: int,
    ctx_cap: int,
    horizon: int,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, np.ndarray, int, int]:
    """Encode the window of ``demo`` split at step ``n`` into right-aligned
    slot arrays. Returns (states, actions, ctx_len, real action count).

    Plan slots past the demo's end are PAD without an rng. With an rng they
    are filled with uniform random actions instead: once the goal is entered
    the episode is over and any further action is vacuous, so the data
    conditional for post-goal slots is uniform. Training on that keeps plans
    which reach the goal early at the energy minimum instead of looking
    out-of-distribution to the model.
    """
    length = ctx_cap + horizon
    states = np.zeros((length, STATE_DIM), dtype=np.int64)
    actions = np.zeros(length, dtype=np.int64)
    k = min(ctx_cap, n)
    for j in range(k):
        states[ctx_cap - k + j] = demo.states[n - k + j]
        actions[ctx_cap - k + j] = demo.actions[n - k + j]
    states[ctx_cap:] = demo.states[n]
    n_real = min(horizon, len(demo.actions) - n)
    actions[ctx_cap : ctx_cap + n_real] = demo.actions[n : n + n_real]
    if rng is None:
        actions[ctx_cap + n_real :] = PAD
    else:
        tail = horizon - n_real
        if tail:
            actions[ctx_cap + n_real :] = rng.integers(0, N_ACTIONS, size=tail)
    return states, actions, k, n_real


def training_batch(
    dataset: Dataset | list[Demo],
    batch_size: int,
    rng: np.random.Generator,
    ctx_cap: int,
    horizon: int,
    input_mask_mode: str = "uniform",
) -> Batch:
    """Sample a batch of masked windows: uniform demo, uniform split offset,
    exactly one masked loss position uniform over the plan slots (slots past
    the demo's end carry uniform post-goal actions; see encode_window).

    With input_mask_mode="uniform", the other plan slots are additionally
    replaced by MASK as input-only noise at a per-window rate drawn from
    U[0,1]. The planner queries the model at every mask density (from the
    all-masked initial fill down to single-site resampling), so conditionals
    must be calibrated across that whole range; the loss still reads exactly
    one position. "none" disables the augmentation.
    """
    demos = dataset.demos if isinstance(dataset, Dataset) else dataset
    eligible = [d for d in demos if d.actions]
    if not eligible:
        raise ValueError("dataset holds no demo with at least one action")
    if input_mask_mode not in ("uniform", "none"):
        raise ValueError(f"unknown input mask mode {input_mask_mode!r}")

    length = ctx_cap + horizon
    states = np.zeros((batch_size, length, STATE_DIM), dtype=np.int64)
    actions = np.zeros((batch_size, length), dtype=np.int64)
    ctx_lens = np.zeros(batch_size, dtype=np.int64)
    mask_pos = np.zeros(batch_size, dtype=np.int64)
    targets = np.zeros(batch_size, dtype=np.int64)

    for b in range(batch_size):
        demo = eligible[int(rng.integers(len(eligible)))]
        n = int(rng.integers(len(demo.actions)))
        s, a, k, _ = encode_window(demo, n, ctx_cap, horizon, rng)
        pos = ctx_cap + int(rng.integers(horizon))
        targets[b] = a[pos]
        if input_mask_mode == "uniform":
            rate = rng.random()
            for other in range(ctx_cap, length):
                if other != pos and rng.random() < rate:
                    a[other] = MASK
        a[pos] = MASK
        states[b], actions[b], ctx_lens[b], mask_pos[b] = s, a, k, pos

    return Batch(states, actions, ctx_lens, mask_pos, targets, ctx_cap, horizon)


def demo_to_arrays(demo: Demo) -> tuple[np.ndarray, np.ndarray]:
    """Integer-coded arrays for serialization: (n+1, 5) states, (n,) actions."""
    return (
        np.asarray(demo.states, dtype=np.int64),
        np.asarray(demo.actions, dtype=np.int64),
    )


def arrays_to_demo(states: np.ndarray, actions: np.ndarray, optimal: bool = True) -> Demo:
    return Demo(
        states=[tuple(int(v) for v in row) for row in np.asarray(states)],
        actions=[int(a) for a in np.asarray(actions)],
        optimal=optimal,
    )
