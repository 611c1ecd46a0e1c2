"""Masked sequence models over trajectory token slots.

Two interchangeable implementations of the same marginals contract:

* :class:`MaskedSeqModel` — a small bidirectional transformer trained from
  scratch with the masked-prediction objective. Each slot embeds its state
  features (separate tables for x, y, dir, gx, gy), its action token, and a
  learned position, summed. The output head maps each slot to token logits;
  marginals normalize over the four real actions only.

* :class:`TabularModel` — smoothed conditional counts keyed by the current
  slot's state. Exact and enumerable, used to verify the planner against
  brute force.

All linear layers route through a per-sequence batched matmul so that a
batched forward is bit-identical to running each sequence alone; the energy
module's batched fast path relies on this.
"""

from __future__ import annotations

import copy
import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .codec import Batch, MASK, N_ACTIONS, PAD, STATE_DIM, TokenSeq, VOCAB_SIZE, ContextOverflow
from .oracle import Dataset, Demo
from .util import config_digest

CHECKPOINT_FORMAT = "emplan-checkpoint"
CHECKPOINT_VERSION = 1

TOKEN_CODES = {"LEFT": 0, "RIGHT": 1, "FORWARD": 2, "OPEN": 3, "PAD": PAD, "MASK": MASK}


class NonFiniteLoss(Exception):
    """Training loss diverged to NaN/inf."""


class GradMismatch(Exception):
    """Analytic gradients disagree with finite differences."""


class CheckpointError(Exception):
    """Checkpoint file malformed or dimensions mismatch."""


@dataclass(frozen=True)
class TrainConfig:
    layers: int = 3
    heads: int = 4
    embed_dim: int = 128
    batch_size: int = 64
    lr: float = 6e-4
    betas: tuple[float, float] = (0.9, 0.95)
    dropout: float = 0.1
    grad_clip: float = 1.0
    weight_decay: float = 0.1
    warmup_frac: float = 0.05  # fraction of total steps under linear warmup
    max_epochs: int = 200
    checkpoint_every: int = 0  # epochs between checkpoints; 0 keeps only the final one
    input_mask_mode: str = "uniform"  # input-only mask noise; see codec.training_batch

    def __post_init__(self):
        if min(self.layers, self.heads, self.embed_dim, self.batch_size, self.max_epochs) <= 0:
            raise ValueError("layers/heads/embed_dim/batch_size/max_epochs must be positive")
        if self.embed_dim % self.heads != 0:
            raise ValueError("heads must divide embed_dim")
        if self.lr <= 0 or self.grad_clip <= 0:
            raise ValueError("lr and grad_clip must be positive")

    def to_dict(self) -> dict:
        return {
            "layers": self.layers,
            "heads": self.heads,
            "embed_dim": self.embed_dim,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "betas": list(self.betas),
            "dropout": self.dropout,
            "grad_clip": self.grad_clip,
            "weight_decay": self.weight_decay,
            "warmup_frac": self.warmup_frac,
            "max_epochs": self.max_epochs,
            "checkpoint_every": self.checkpoint_every,
            "input_mask_mode": self.input_mask_mode,
        }

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return TrainConfig(**d)


class StableLinear(nn.Module):
    """Linear layer whose eval-mode forward runs one gemm per batch element
    (baddbmm), so the kernel shape is independent of the batch size and
    batched inference is bit-identical to single-sequence inference. Training
    mode uses the ordinary flattened gemm, which is much faster."""

    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(out_dim, in_dim))
        self.bias = nn.Parameter(torch.zeros(out_dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.training:
            return F.linear(x, self.weight, self.bias)
        b = x.shape[0]
        w = self.weight.t().unsqueeze(0).expand(b, -1, -1)
        return torch.baddbmm(self.bias.view(1, 1, -1), x, w)


class Block(nn.Module):
    """Pre-norm transformer block with bidirectional self-attention."""

    def __init__(self, dim: int, heads: int, dropout: float):
        super().__init__()
        self.heads = heads
        self.dropout = dropout
        self.ln1 = nn.LayerNorm(dim)
        self.qkv = StableLinear(dim, 3 * dim)
        self.proj = StableLinear(dim, dim)
        self.ln2 = nn.LayerNorm(dim)
        self.fc1 = StableLinear(dim, 4 * dim)
        self.fc2 = StableLinear(4 * dim, dim)
        self.resid_drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, attn_mask: torch.Tensor | None) -> torch.Tensor:
        b, l, d = x.shape
        q, k, v = self.qkv(self.ln1(x)).split(d, dim=-1)

        def split_heads(t):
            return t.view(b, l, self.heads, d // self.heads).transpose(1, 2)

        att = F.scaled_dot_product_attention(
            split_heads(q),
            split_heads(k),
            split_heads(v),
            attn_mask=attn_mask,
            dropout_p=self.dropout if self.training else 0.0,
        )
        att = att.transpose(1, 2).reshape(b, l, d)
        x = x + self.resid_drop(self.proj(att))
        h = F.gelu(self.fc1(self.ln2(x)))
        x = x + self.resid_drop(self.fc2(h))
        return x


class MaskedSeqModel(nn.Module):
    """Bidirectional transformer over state/action slots.

    grid_size bounds the coordinate embedding tables; ctx_len and horizon fix
    the slot layout the model was trained for (sequences with fewer context
    steps are right-aligned and excluded from attention).
    """

    def __init__(
        self,
        grid_size: int,
        ctx_len: int,
        horizon: int,
        layers: int = 3,
        heads: int = 4,
        embed_dim: int = 128,
        dropout: float = 0.1,
    ):
        super().__init__()
        self.grid_size = grid_size
        self.ctx_len = ctx_len
        self.horizon = horizon
        self.layers = layers
        self.heads = heads
        self.embed_dim = embed_dim
        self.dropout = dropout

        # one table per state feature (x, y, dir, gx, gy), stored contiguously
        # and addressed by per-feature offsets so one lookup embeds all five
        sizes = [grid_size, grid_size, 4, grid_size, grid_size]
        self.state_embed = nn.Embedding(sum(sizes), embed_dim)
        offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]])
        self.register_buffer("feature_offsets", torch.from_numpy(offsets), persistent=False)
        self.action_embed = nn.Embedding(VOCAB_SIZE, embed_dim)
        self.pos_embed = nn.Embedding(ctx_len + horizon, embed_dim)
        self.embed_drop = nn.Dropout(dropout)
        self.blocks = nn.ModuleList([Block(embed_dim, heads, dropout) for _ in range(layers)])
        self.ln_f = nn.LayerNorm(embed_dim)
        self.head = StableLinear(embed_dim, VOCAB_SIZE)
        self.apply(self._init_weights)
        # zero head: an untrained model yields exactly uniform marginals
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    @staticmethod
    def _init_weights(module: nn.Module) -> None:
        if isinstance(module, StableLinear):
            nn.init.trunc_normal_(module.weight, std=0.02)
            nn.init.zeros_(module.bias)
        elif isinstance(module, nn.Embedding):
            nn.init.trunc_normal_(module.weight, std=0.02)
        elif isinstance(module, nn.LayerNorm):
            nn.init.ones_(module.weight)
            nn.init.zeros_(module.bias)

    def arch_dict(self) -> dict:
        return {
            "grid_size": self.grid_size,
            "ctx_len": self.ctx_len,
            "horizon": self.horizon,
            "layers": self.layers,
            "heads": self.heads,
            "embed_dim": self.embed_dim,
            "dropout": self.dropout,
        }

    def forward(
        self,
        states: torch.Tensor,  # (B, L, STATE_DIM) long
        actions: torch.Tensor,  # (B, L) long
        ctx_lens: torch.Tensor | None = None,  # (B,) long, actual context lengths
    ) -> torch.Tensor:
        b, l, _ = states.shape
        x = self.action_embed(actions)
        x = x + self.state_embed(states + self.feature_offsets).sum(dim=2)
        x = x + self.pos_embed.weight[:l].unsqueeze(0)
        x = self.embed_drop(x)

        attn_mask = None
        if ctx_lens is not None and bool((ctx_lens < self.ctx_len).any()):
            slot = torch.arange(l)
            valid = slot.unsqueeze(0) >= (self.ctx_len - ctx_lens).unsqueeze(1)  # (B, L)
            attn_mask = valid.view(b, 1, 1, l).expand(b, 1, l, l)

        for block in self.blocks:
            x = block(x, attn_mask)
        return self.head(self.ln_f(x))

    # -- inference helpers ------------------------------------------------

    def _stack(self, seqs: list[TokenSeq]) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, int]:
        k0 = seqs[0].ctx_len
        t0 = seqs[0].horizon
        if any(s.ctx_len != k0 or s.horizon != t0 for s in seqs):
            raise ValueError("all sequences in one call must share ctx_len and horizon")
        if k0 > self.ctx_len:
            raise ContextOverflow(f"context of {k0} exceeds trained capacity {self.ctx_len}")
        if t0 > self.horizon:
            raise ValueError(f"horizon {t0} exceeds trained horizon {self.horizon}")
        pad = self.ctx_len - k0
        length = self.ctx_len + t0
        states = np.zeros((len(seqs), length, STATE_DIM), dtype=np.int64)
        actions = np.zeros((len(seqs), length), dtype=np.int64)
        for i, s in enumerate(seqs):
            states[i, pad:] = s.states
            actions[i, pad:] = s.actions
        ctx = torch.full((len(seqs),), k0, dtype=torch.int64)
        return torch.from_numpy(states), torch.from_numpy(actions), ctx, pad

    def marginals_many(
        self, seqs: list[TokenSeq], positions_list: list[list[int]]
    ) -> list[np.ndarray]:
        """Action distributions at masked positions for a batch of sequences.

        One forward pass; bit-identical to calling :meth:`marginals` per
        sequence.
        """
        if self.training:
            self.eval()
        states, actions, ctx, pad = self._stack(seqs)
        with torch.no_grad():
            logits = self.forward(states, actions, ctx)
            probs = torch.softmax(logits[..., :N_ACTIONS], dim=-1)
        out = []
        for i, positions in enumerate(positions_list):
            idx = torch.as_tensor([pad + p for p in positions], dtype=torch.int64)
            out.append(probs[i, idx].numpy().astype(np.float64))
        return out

    def marginals(self, seq: TokenSeq, positions) -> np.ndarray:
        positions = list(positions)
        for p in positions:
            if seq.actions[p] != MASK:
                raise ValueError(f"position {p} is not masked")
        return self.marginals_many([seq], [positions])[0]


def marginals(model, seq: TokenSeq, positions) -> np.ndarray:
    """Normalized distributions over the four real actions at masked
    positions; works for any model satisfying the contract."""
    return model.marginals(seq, positions)


def _loss_tensor(model: MaskedSeqModel, batch: Batch) -> torch.Tensor:
    states = torch.from_numpy(batch.states)
    actions = torch.from_numpy(batch.actions)
    ctx = torch.from_numpy(batch.ctx_lens)
    logits = model(states, actions, ctx)
    rows = torch.arange(len(batch))
    at_mask = logits[rows, torch.from_numpy(batch.mask_pos)]
    return F.cross_entropy(at_mask[:, :N_ACTIONS], torch.from_numpy(batch.targets))


def mlm_loss(model, batch: Batch) -> float:
    """Mean negative log-likelihood of the target actions at masked positions."""
    if isinstance(model, TabularModel):
        return model.mlm_loss(batch)
    model.eval()
    with torch.no_grad():
        value = float(_loss_tensor(model, batch))
    if not math.isfinite(value):
        raise NonFiniteLoss(f"loss is {value}")
    return value


@dataclass
class TrainResult:
    model: "MaskedSeqModel"
    losses: list[float]  # mean loss per epoch
    checkpoint_path: str | None = None


def _param_groups(model: MaskedSeqModel, weight_decay: float):
    decay, no_decay = [], []
    for module in model.modules():
        if isinstance(module, StableLinear):
            decay.append(module.weight)
    decay_ids = {id(p) for p in decay}
    no_decay = [p for p in model.parameters() if id(p) not in decay_ids]
    return [
        {"params": decay, "weight_decay": weight_decay},
        {"params": no_decay, "weight_decay": 0.0},
    ]


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear warmup to cfg.lr, then cosine decay to a 10% floor."""
    warmup = max(1, int(round(cfg.warmup_frac * total_steps)))
    if step < warmup:
        return cfg.lr * (step + 1) / warmup
    span = max(1, total_steps - warmup)
    frac = (step - warmup) / span
    return cfg.lr * (0.1 + 0.45 * (1.0 + math.cos(math.pi * frac)))


def train(
    model: MaskedSeqModel,
    dataset: Dataset,
    cfg: TrainConfig,
    seed: int,
    out_dir: str | Path | None = None,
) -> TrainResult:
    """Train with the masked objective; records a per-epoch loss curve.

    Divergence raises NonFiniteLoss with the last end-of-epoch parameters
    restored. When ``out_dir`` is given, writes loss.csv plus checkpoint.pt
    (and checkpoint_ep{N}.pt at the configured cadence).
    """
    from .codec import training_batch

    torch.manual_seed(seed)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x7261494E)))
    opt = torch.optim.AdamW(
        _param_groups(model, cfg.weight_decay), lr=cfg.lr, betas=cfg.betas
    )
    # one epoch covers every (demo, split offset) window once in expectation
    n_windows = sum(len(d.actions) for d in dataset.demos)
    steps_per_epoch = max(1, math.ceil(n_windows / cfg.batch_size))
    total_steps = cfg.max_epochs * steps_per_epoch

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    losses: list[float] = []
    last_good = copy.deepcopy(model.state_dict())
    step_idx = 0
    for epoch in range(cfg.max_epochs):
        model.train()
        epoch_losses = []
        for _ in range(steps_per_epoch):
            batch = training_batch(
                dataset, cfg.batch_size, rng, model.ctx_len, model.horizon, cfg.input_mask_mode
            )
            lr = lr_at(step_idx, total_steps, cfg)
            for group in opt.param_groups:
                group["lr"] = lr
            loss = _loss_tensor(model, batch)
            value = loss.item()
            if not math.isfinite(value):
                model.load_state_dict(last_good)
                raise NonFiniteLoss(f"loss diverged to {value} at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            epoch_losses.append(value)
            step_idx += 1
        losses.append(float(np.mean(epoch_losses)))
        last_good = copy.deepcopy(model.state_dict())
        if out is not None and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(model, out / f"checkpoint_ep{epoch + 1}.pt", cfg)

    model.eval()
    ckpt_path = None
    if out is not None:
        ckpt_path = str(out / "checkpoint.pt")
        save_checkpoint(model, ckpt_path, cfg)
        with open(out / "loss.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "loss"])
            for i, value in enumerate(losses):
                writer.writerow([i + 1, f"{value:.6f}"])
    return TrainResult(model=model, losses=losses, checkpoint_path=ckpt_path)


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_param: str
    n_checked: int


def grad_check(
    model: MaskedSeqModel,
    batch: Batch,
    epsilon: float = 1e-4,
    tolerance: float = 1e-3,
    grad_hook=None,
) -> GradCheckReport:
    """Compare analytic gradients of the masked loss against central finite
    differences in double precision. Raises GradMismatch above tolerance.

    ``grad_hook`` (name, grad) -> grad lets tests corrupt the analytic path.
    """
    model = copy.deepcopy(model).double().eval()
    loss = _loss_tensor(model, batch)
    model.zero_grad()
    loss.backward()

    max_err, worst, checked = 0.0, "", 0
    with torch.no_grad():
        for name, param in model.named_parameters():
            grad = param.grad
            if grad is None:
                grad = torch.zeros_like(param)
            if grad_hook is not None:
                grad = grad_hook(name, grad)
            flat = param.view(-1)
            gflat = grad.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + epsilon
                hi = float(_loss_tensor(model, batch))
                flat[i] = orig - epsilon
                lo = float(_loss_tensor(model, batch))
                flat[i] = orig
                fd = (hi - lo) / (2.0 * epsilon)
                an = gflat[i].item()
                denom = max(abs(fd), abs(an))
                err = 0.0 if denom == 0.0 else abs(fd - an) / max(denom, 1e-8)
                checked += 1
                if err > max_err:
                    max_err, worst = err, f"{name}[{i}]"
    report = GradCheckReport(max_rel_err=max_err, worst_param=worst, n_checked=checked)
    if max_err > tolerance:
        raise GradMismatch(f"max relative error {max_err:.3e} at {worst} exceeds {tolerance}")
    return report


# -- tabular variant ------------------------------------------------------


@dataclass
class TabularModel:
    """Smoothed conditional counts keyed by the current slot's state (or the
    last ``key_width`` slot states). Memoryless by design so that small
    instances stay exactly enumerable."""

    counts: dict[tuple, np.ndarray]
    alpha: float
    key_width: int = 1
    ctx_len: int = 0
    horizon: int | None = None

    def _key(self, seq: TokenSeq, position: int) -> tuple:
        lo = max(0, position - self.key_width + 1)
        parts = []
        for i in range(lo, position + 1):
            parts.extend(int(v) for v in seq.states[i])
        return tuple(parts)

    def distribution(self, key: tuple) -> np.ndarray:
        c = self.counts.get(key)
        if c is None:
            c = np.zeros(N_ACTIONS)
        return (c + self.alpha) / (c.sum() + N_ACTIONS * self.alpha)

    def marginals(self, seq: TokenSeq, positions) -> np.ndarray:
        positions = list(positions)
        for p in positions:
            if seq.actions[p] != MASK:
                raise ValueError(f"position {p} is not masked")
        return np.stack([self.distribution(self._key(seq, p)) for p in positions])

    def marginals_many(self, seqs, positions_list) -> list[np.ndarray]:
        return [
            np.stack([self.distribution(self._key(s, p)) for p in ps])
            for s, ps in zip(seqs, positions_list)
        ]

    def mlm_loss(self, batch: Batch) -> float:
        total = 0.0
        for b in range(len(batch)):
            pos = int(batch.mask_pos[b])
            lo = max(0, pos - self.key_width + 1)
            key = tuple(int(v) for i in range(lo, pos + 1) for v in batch.states[b, i])
            p = self.distribution(key)[int(batch.targets[b])]
            total += -math.log(p)
        return total / len(batch)


def fit_tabular(
    dataset: Dataset | list[Demo], context_key_width: int = 1, alpha: float = 0.01
) -> TabularModel:
    """Conditional count table over (state key -> next action) pairs; rows
    with alpha smoothing are proper distributions and unseen keys fall back
    to uniform."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    demos = dataset.demos if isinstance(dataset, Dataset) else dataset
    counts: dict[tuple, np.ndarray] = {}
    for demo in demos:
        for i, action in enumerate(demo.actions):
            lo = max(0, i - context_key_width + 1)
            key = tuple(v for j in range(lo, i + 1) for v in demo.states[j])
            row = counts.get(key)
            if row is None:
                row = counts[key] = np.zeros(N_ACTIONS)
            row[int(action)] += 1.0
    return TabularModel(counts=counts, alpha=alpha, key_width=context_key_width)


# -- checkpoints -----------------------------------------------------------


def save_checkpoint(model: MaskedSeqModel, path, train_config: TrainConfig | None = None) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "arch": model.arch_dict(),
        "vocab": TOKEN_CODES,
        "train_config_digest": config_digest(train_config.to_dict()) if train_config else None,
        "state": model.state_dict(),
    }
    torch.save(payload, path)


def load_checkpoint(path) -> MaskedSeqModel:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not an {CHECKPOINT_FORMAT} file")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {payload.get('version')}")
    model = MaskedSeqModel(**payload["arch"])
    expected = model.state_dict()
    state = payload["state"]
    if set(expected) != set(state):
        raise CheckpointError("checkpoint parameter names do not match the architecture")
    for key, tensor in expected.items():
        if tuple(state[key].shape) != tuple(tensor.shape):
            raise CheckpointError(
                f"dimension mismatch for {key}: "
                f"checkpoint {tuple(state[key].shape)} vs architecture {tuple(tensor.shape)}"
            )
    model.load_state_dict(state)
    model.eval()
    return model
