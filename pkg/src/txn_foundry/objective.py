"""Training losses and their aggregation.

Numerical targets use the negative log-likelihood of a normal in log-space.
Low-cardinality categorical targets use full-softmax cross-entropy.
High-cardinality targets use a contrastive approximation whose negatives
are sampled once per call and shared across every sample and timestep of
the batch (the in-batch positives of other samples at the same timestep act
as additional negatives); an independent per-position variant and an exact
full-softmax oracle exist for comparison and testing.

Aggregation pivots every auxiliary loss against the abnormal-flag loss:
tasks doing worse than the pivot are scaled down to the pivot's detached
value while keeping a proportionally scaled gradient, so the pivot task
dominates the gradient direction. Plain-sum and equal-contribution modes
are provided as ablation baselines.

All losses are masked: invalid positions contribute exactly zero to values
and gradients, and in the shared strategy candidates drawn from invalid
positions are excluded from every denominator.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum

import torch

from .corpus import Batch
from .model import ModelOutputs, TransactionModel, logits
from .schema import AttrClass, CardinalityClass, classify

LOG_2PI_OVER_2 = 0.5 * math.log(2.0 * math.pi)

# Finite stand-in for -inf when blocking candidates: exp() underflows to an
# exact 0.0 without poisoning gradients the way actual -inf would.
_BLOCKED = -1e30


class SamplingStrategy(str, Enum):
    SHARED = "shared"
    INDEPENDENT = "independent"
    EXHAUSTIVE = "exhaustive"


@dataclass(frozen=True)
class NegativeSamplingPlan:
    strategy: SamplingStrategy = SamplingStrategy.SHARED
    n_negative: int = 1024  # shared: per batch; independent: per positive
    seed: int = 0

    def __post_init__(self):
        # coerce plain strings so identity checks downstream cannot mis-route
        object.__setattr__(self, "strategy", SamplingStrategy(self.strategy))
        if self.n_negative < 1 and self.strategy is not SamplingStrategy.EXHAUSTIVE:
            raise ValueError("n_negative must be >= 1")

    @classmethod
    def default_for(cls, strategy: SamplingStrategy, seed: int = 0) -> "NegativeSamplingPlan":
        n = 1024 if strategy is SamplingStrategy.SHARED else 5
        return cls(strategy=strategy, n_negative=n, seed=seed)


def masked_mean(per_position: torch.Tensor, mask: torch.Tensor | None) -> torch.Tensor:
    if mask is None:
        return per_position.mean()
    count = mask.sum()
    if count == 0:
        return per_position.sum() * 0.0
    return torch.where(mask, per_position, torch.zeros_like(per_position)).sum() / count


def loss_num(mu: torch.Tensor, sigma: torch.Tensor, y_log: torch.Tensor,
             mask: torch.Tensor | None = None) -> torch.Tensor:
    """Gaussian NLL in log-space, masked mean over valid positions."""
    if (sigma <= 0).any():
        raise ValueError("sigma must be strictly positive")
    per = (y_log - mu) ** 2 / (2.0 * sigma ** 2) + torch.log(sigma) + LOG_2PI_OVER_2
    return masked_mean(per, mask)


def _per_position_ce(z: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    picked = z.gather(-1, y.unsqueeze(-1)).squeeze(-1)
    return torch.logsumexp(z, dim=-1) - picked


def loss_lcat(z: torch.Tensor, y: torch.Tensor,
              mask: torch.Tensor | None = None) -> torch.Tensor:
    """Full-softmax cross-entropy over logits [.., C], masked mean."""
    return masked_mean(_per_position_ce(z, y), mask)


def loss_hcat_shared(head: torch.Tensor, table: torch.Tensor, y: torch.Tensor,
                     n_negative: int, seed: int = 0,
                     mask: torch.Tensor | None = None,
                     negative_indices: torch.Tensor | None = None) -> torch.Tensor:
    """Contrastive loss with one negative set shared batch-wide.

    head: [B, T, d]; table: [C, d]; y: [B, T]. Negatives are drawn uniformly
    with replacement once per call; every sample and timestep scores the
    same negative rows, plus the in-batch positives of all samples at its
    own timestep. Returns the per-position loss [B, T] (>= 0; masked
    positions are exactly 0). ``negative_indices`` overrides sampling for
    deterministic oracles.
    """
    b, t, d = head.shape
    pos_rows = table[y]  # [B, T, d]
    if negative_indices is not None:
        neg_idx = negative_indices
    else:
        gen = torch.Generator().manual_seed(seed)
        neg_idx = torch.randint(table.shape[0], (n_negative,), generator=gen)
    dot_pos = torch.einsum("ijk,ljk->ilj", head, pos_rows)  # [B, B(l), T]
    if mask is not None:
        blocked = ~mask  # candidate (l, j) invalid
        dot_pos = dot_pos.masked_fill(blocked.unsqueeze(0), _BLOCKED)
    parts = [dot_pos]
    if len(neg_idx) > 0:
        neg_rows = table[neg_idx]  # [N, d]
        dot_neg = torch.einsum("ijk,lk->ilj", head, neg_rows)  # [B, N, T]
        parts.append(dot_neg)
    dot_all = torch.cat(parts, dim=1)  # [B, B+N, T]
    idx = torch.arange(b)
    numerator = dot_pos[idx, idx]  # [B, T]
    denominator = torch.logsumexp(dot_all, dim=1)
    loss = denominator - numerator
    if mask is not None:
        loss = torch.where(mask, loss, torch.zeros_like(loss))
    return loss


def loss_hcat_independent(head: torch.Tensor, table: torch.Tensor, y: torch.Tensor,
                          n_per_positive: int, seed: int = 0,
                          mask: torch.Tensor | None = None) -> torch.Tensor:
    """Contrastive loss with fresh negatives per (sample, timestep).

    Candidate set per position is {its positive} plus its own negatives;
    no cross-sample candidates. Memory scales with B*T*N*d because of the
    per-position negative-row gather.
    """
    b, t, d = head.shape
    pos_rows = table[y]
    pos_dot = (head * pos_rows).sum(dim=-1)  # [B, T]
    if n_per_positive > 0:
        gen = torch.Generator().manual_seed(seed)
        neg_idx = torch.randint(table.shape[0], (b, t, n_per_positive), generator=gen)
        neg_rows = table[neg_idx]  # [B, T, N, d] -- the expensive gather
        neg_dot = torch.einsum("ijk,ijlk->ijl", head, neg_rows)  # [B, T, N]
        dot_all = torch.cat([pos_dot.unsqueeze(-1), neg_dot], dim=-1)
    else:
        dot_all = pos_dot.unsqueeze(-1)
    loss = torch.logsumexp(dot_all, dim=-1) - pos_dot
    if mask is not None:
        loss = torch.where(mask, loss, torch.zeros_like(loss))
    return loss


def loss_hcat_exhaustive(head: torch.Tensor, table: torch.Tensor, y: torch.Tensor,
                         mask: torch.Tensor | None = None) -> torch.Tensor:
    """Exact full-softmax cross-entropy; the test oracle the sampled losses
    approximate. Refuses vocabularies past 2**16 rows."""
    if table.shape[0] > 2 ** 16:
        raise ValueError("exhaustive loss is for test-scale vocabularies only")
    z = logits(head, table)
    loss = _per_position_ce(z, y)
    if mask is not None:
        loss = torch.where(mask, loss, torch.zeros_like(loss))
    return loss


# -- aggregation ------------------------------------------------------------

AGGREGATION_MODES = ("treasure", "simple", "equal")


def aggregate(losses: dict[str, torch.Tensor], pivot: str,
              mode: str = "treasure") -> torch.Tensor:
    """Combine per-attribute losses into the training scalar.

    treasure: pivot + mean over other losses of min(L_i, L_i * ph / h_i)
    where ph, h_i are detached copies of the pivot and of L_i; a task worse
    than the pivot contributes the pivot's value with a down-scaled
    gradient. simple: plain sum of everything. equal: sum of L_i / h_i, so
    every term has value 1 and a magnitude-normalized gradient.
    """
    if pivot not in losses:
        raise KeyError(f"pivot loss {pivot!r} missing from report")
    if mode == "simple":
        return sum(losses.values())
    if mode == "equal":
        total = None
        for v in losses.values():
            hat = v.detach()
            term = torch.where(hat != 0, v / torch.where(hat != 0, hat, torch.ones_like(hat)),
                               v * 0.0)
            total = term if total is None else total + term
        return total
    if mode != "treasure":
        raise ValueError(f"unknown aggregation mode {mode!r}")
    pivot_loss = losses[pivot]
    others = [v for k, v in losses.items() if k != pivot]
    if not others:
        return pivot_loss
    pivot_hat = pivot_loss.detach()
    total = pivot_loss
    acc = None
    for v in others:
        hat = v.detach()
        safe = torch.where(hat != 0, hat, torch.ones_like(hat))
        scaled = v * (pivot_hat / safe)
        term = torch.where(hat != 0, torch.minimum(v, scaled), v * 0.0)
        acc = term if acc is None else acc + term
    return total + acc / len(others)


@dataclass
class LossReport:
    """Detached bookkeeping for one optimization step or evaluation pass."""

    per_attribute: dict[str, float]
    pivot: str
    mode: str
    aggregate: float
    counts: dict[str, int] = field(default_factory=dict)

    def pivot_value(self) -> float:
        return self.per_attribute[self.pivot]

    def recompute_aggregate(self) -> float:
        """Reproduce the aggregate from the detached entries (audit path)."""
        vals = {k: torch.tensor(v) for k, v in self.per_attribute.items()}
        return float(aggregate(vals, self.pivot, self.mode))

    def log_line(self) -> str:
        return json.dumps({
            "pivot": self.pivot, "mode": self.mode, "aggregate": self.aggregate,
            "losses": self.per_attribute, "counts": self.counts,
        }, sort_keys=True)


# -- batch-level loss assembly ------------------------------------------------

def next_key(name: str) -> str:
    return f"next:{name}"


def current_key(name: str) -> str:
    return f"current:{name}"


def batch_losses(model: TransactionModel, outputs: ModelOutputs, batch: Batch,
                 plan: NegativeSamplingPlan,
                 klass: CardinalityClass = CardinalityClass(),
                 only: set[str] | None = None) -> tuple[dict[str, torch.Tensor], dict[str, int]]:
    """Per-attribute masked-mean losses for one batch.

    Keys are ``next:<attr>`` / ``current:<attr>``. ``only`` restricts
    computation (single-purpose training modes). Also returns the valid
    position count per key.
    """
    layout = batch.layout
    schema = layout.schema
    losses: dict[str, torch.Tensor] = {}
    counts: dict[str, int] = {}

    def cat_loss(head_vec, name, y, mask, seed_salt):
        spec = schema[name]
        if classify(spec, klass) is AttrClass.LOW_CAT or \
                plan.strategy is SamplingStrategy.EXHAUSTIVE:
            z = logits(head_vec, model.table(name))
            return loss_lcat(z, y, mask)
        seed = (plan.seed * 1_000_003 + seed_salt) % (2 ** 63)
        if plan.strategy is SamplingStrategy.SHARED:
            per = loss_hcat_shared(head_vec, model.table(name), y,
                                   plan.n_negative, seed=seed, mask=mask)
        else:
            per = loss_hcat_independent(head_vec, model.table(name), y,
                                        plan.n_negative, seed=seed, mask=mask)
        return masked_mean(per, mask)

    salt = 0
    for head_name, head_out, names_num, names_cat, target in (
        ("next", outputs.next, layout.next_num, layout.next_cat, batch.next_target),
        ("current", outputs.current, layout.sig_num, layout.sig_cat, batch.current_target),
    ):
        for name in names_num:
            key = f"{head_name}:{name}"
            if only is not None and key not in only:
                continue
            y_raw, mask = target(name)
            y_log = torch.log1p(y_raw.to(head_out.mu[name].dtype))
            losses[key] = loss_num(head_out.mu[name], head_out.sigma[name], y_log, mask)
            counts[key] = int(mask.sum())
        for name in names_cat:
            key = f"{head_name}:{name}"
            salt += 1
            if only is not None and key not in only:
                continue
            y, mask = target(name)
            losses[key] = cat_loss(head_out.cat_head[name], name, y, mask, salt)
            counts[key] = int(mask.sum())
    return losses, counts


def pivot_key(schema) -> str:
    return current_key(schema.pivot.name)
