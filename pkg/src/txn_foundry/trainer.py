"""Optimization loop, checkpoint selection, and ablation-mode switches.

Training is single-writer and fully seeded: batch order derives from
(seed, epoch), negative sampling from (seed, global step), so a run is
reproducible end-to-end and ``train(n)`` followed by ``resume(m)`` matches
``train(n + m)``. The best checkpoint is picked on validation pivot loss
(validation merchant loss in merchant-only mode); ``last.ckpt`` carries the
optimizer state for resumption.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace, asdict
from pathlib import Path

import torch

from .corpus import CardSequence, SchemaLayout, batches
from .model import (
    ModelConfig,
    TransactionModel,
    load_checkpoint,
    restore_optimizer,
    save_checkpoint,
)
from .objective import (
    AGGREGATION_MODES,
    LossReport,
    NegativeSamplingPlan,
    SamplingStrategy,
    aggregate,
    batch_losses,
    next_key,
    pivot_key,
)
from .schema import CardinalityClass

TASK_MODES = ("multi", "merchant_only", "abnormal_only")


@dataclass
class TrainConfig:
    epochs: int = 20
    learning_rate: float = 1e-4
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.999)
    batch_size: int = 256
    aggregation_mode: str = "treasure"
    task_mode: str = "multi"
    seed: int = 0
    grad_clip: float = 1.0
    sampling_strategy: str = "shared"
    n_negative: int | None = None  # strategy default when None
    cardinality_threshold: int = 1024

    def __post_init__(self):
        if self.epochs < 0 or self.learning_rate <= 0 or self.batch_size < 1:
            raise ValueError("epochs, learning_rate, batch_size must be positive")
        if self.aggregation_mode not in AGGREGATION_MODES:
            raise ValueError(f"unknown aggregation_mode {self.aggregation_mode!r}")
        if self.task_mode not in TASK_MODES:
            raise ValueError(f"unknown task_mode {self.task_mode!r}")

    def plan(self, seed: int = 0) -> NegativeSamplingPlan:
        strategy = SamplingStrategy(self.sampling_strategy)
        base = NegativeSamplingPlan.default_for(strategy, seed=seed)
        if self.n_negative is not None:
            base = replace(base, n_negative=self.n_negative)
        return base

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


@dataclass
class TrainResult:
    model: TransactionModel
    history: list
    best_epoch: int
    best_metric: float
    best_path: Path | None
    last_path: Path | None


def _selection_key(layout: SchemaLayout, cfg: TrainConfig) -> str:
    if cfg.task_mode == "merchant_only":
        return next_key("merchant")
    return pivot_key(layout.schema)


def _active_keys(layout: SchemaLayout, cfg: TrainConfig) -> set[str] | None:
    if cfg.task_mode == "multi":
        return None
    if cfg.task_mode == "merchant_only":
        if "merchant" not in layout.next_cat:
            raise ValueError("merchant_only mode needs a next-target 'merchant' attribute")
        return {next_key("merchant")}
    return {pivot_key(layout.schema)}


def _epoch_seed(seed: int, epoch: int) -> int:
    return (seed * 1_000_003 + epoch * 7919 + 17) % (2 ** 63)


def _step_seed(seed: int, step: int) -> int:
    return (seed * 2_147_483_647 + step) % (2 ** 63)


def _total_loss(losses: dict, layout: SchemaLayout, cfg: TrainConfig) -> torch.Tensor:
    if cfg.task_mode != "multi":
        (only_loss,) = losses.values()
        return only_loss
    return aggregate(losses, pivot_key(layout.schema), cfg.aggregation_mode)


class _Accumulator:
    """Weighted per-key loss means across batches."""

    def __init__(self):
        self.sums: dict[str, float] = {}
        self.counts: dict[str, int] = {}

    def add(self, losses: dict, counts: dict) -> None:
        for k, v in losses.items():
            n = counts[k]
            self.sums[k] = self.sums.get(k, 0.0) + float(v.detach()) * n
            self.counts[k] = self.counts.get(k, 0) + n

    def means(self) -> dict[str, float]:
        return {k: (self.sums[k] / self.counts[k]) if self.counts[k] else 0.0
                for k in sorted(self.sums)}


def _check_finite(losses: dict) -> None:
    for k, v in losses.items():
        if not math.isfinite(float(v.detach())):
            raise RuntimeError(f"non-finite loss for attribute {k!r}")


def evaluate_losses(model: TransactionModel, seqs: list[CardSequence],
                    cfg: TrainConfig, plan_seed: int) -> tuple[dict[str, float], dict[str, int]]:
    """Deterministic per-attribute validation losses (no gradient)."""
    layout = model.layout
    only = _active_keys(layout, cfg)
    klass = CardinalityClass(cfg.cardinality_threshold)
    acc = _Accumulator()
    with torch.no_grad():
        for batch in batches(seqs, layout, cfg.batch_size, seed=0, shuffle=False):
            _, outputs = model(batch)
            plan = replace(cfg.plan(), seed=plan_seed)
            losses, counts = batch_losses(model, outputs, batch, plan, klass, only=only)
            acc.add(losses, counts)
    return acc.means(), acc.counts


def train(layout: SchemaLayout, parts: dict[str, list[CardSequence]],
          model_cfg: ModelConfig, cfg: TrainConfig,
          out_dir: str | Path | None = None,
          start_model: TransactionModel | None = None,
          start_optimizer_state: tuple | None = None,
          start_epoch: int = 0, start_step: int = 0,
          best_so_far: float = math.inf) -> TrainResult:
    """Run the optimization loop over the train partition.

    Per epoch: one full pass with a gradient step per batch, then a
    validation pass; the checkpoint with the best selection metric and the
    last state (with optimizer) are written to ``out_dir`` when given.
    """
    if not parts.get("train"):
        raise ValueError("train partition is empty")
    if not parts.get("val"):
        raise ValueError("val partition is empty")
    torch.manual_seed(cfg.seed)
    model = start_model or TransactionModel(layout.schema, model_cfg)
    optimizer = torch.optim.AdamW(model.parameters(), lr=cfg.learning_rate,
                                  betas=cfg.betas, weight_decay=cfg.weight_decay)
    if start_optimizer_state is not None:
        header, opt_arrays = start_optimizer_state
        restore_optimizer(optimizer, header, opt_arrays)

    only = _active_keys(layout, cfg)
    klass = CardinalityClass(cfg.cardinality_threshold)
    sel_key = _selection_key(layout, cfg)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    history: list[dict] = []
    best_metric = best_so_far
    best_epoch = -1
    best_path = out / "best.ckpt" if out else None
    last_path = out / "last.ckpt" if out else None
    best_state = None
    step = start_step
    step_log = (out / "steps.jsonl").open("a") if out is not None else None

    pivot = pivot_key(layout.schema) if cfg.task_mode != "merchant_only" \
        else _selection_key(layout, cfg)
    for epoch in range(start_epoch, start_epoch + cfg.epochs):
        model.train()
        acc = _Accumulator()
        n_steps = 0
        for batch in batches(parts["train"], layout, cfg.batch_size,
                             seed=_epoch_seed(cfg.seed, epoch)):
            _, outputs = model(batch)
            plan = replace(cfg.plan(), seed=_step_seed(cfg.seed, step))
            losses, counts = batch_losses(model, outputs, batch, plan, klass, only=only)
            _check_finite(losses)
            total = _total_loss(losses, layout, cfg)
            optimizer.zero_grad()
            total.backward()
            if cfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            optimizer.step()
            acc.add(losses, counts)
            if step_log is not None:
                report = LossReport(
                    per_attribute={k: float(v.detach()) for k, v in losses.items()},
                    pivot=pivot, mode=cfg.aggregation_mode,
                    aggregate=float(total.detach()), counts=counts)
                step_log.write(report.log_line() + "\n")
            step += 1
            n_steps += 1

        model.eval()
        val_means, _ = evaluate_losses(model, parts["val"], cfg,
                                       plan_seed=_epoch_seed(cfg.seed, epoch))
        train_means = acc.means()
        entry = {"epoch": epoch, "steps": n_steps, "train": train_means,
                 "val": val_means, "selection_key": sel_key,
                 "selection_value": val_means.get(sel_key)}
        history.append(entry)

        metric = val_means.get(sel_key)
        if metric is None:
            raise RuntimeError(f"selection metric {sel_key!r} absent from validation")
        if metric < best_metric:
            best_metric = metric
            best_epoch = epoch
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
            if best_path is not None:
                save_checkpoint(best_path, model,
                                extra={"epoch": epoch, "step": step,
                                       "best_metric": best_metric,
                                       "train_config": cfg.to_dict()})
        if last_path is not None:
            save_checkpoint(last_path, model, optimizer=optimizer,
                            extra={"epoch": epoch, "step": step,
                                   "best_metric": best_metric,
                                   "train_config": cfg.to_dict()})

    if step_log is not None:
        step_log.close()
    if best_state is not None:
        model.load_state_dict(best_state)
    return TrainResult(model=model, history=history, best_epoch=best_epoch,
                       best_metric=best_metric, best_path=best_path,
                       last_path=last_path)


def resume(checkpoint_path: str | Path, layout: SchemaLayout,
           parts: dict[str, list[CardSequence]], cfg: TrainConfig,
           out_dir: str | Path | None = None) -> TrainResult:
    """Continue a run from ``last.ckpt``; schema hash must match the corpus."""
    model, header, opt_arrays = load_checkpoint(checkpoint_path, layout.schema)
    extra = header.get("extra", {})
    return train(layout, parts, model.cfg, cfg, out_dir=out_dir,
                 start_model=model,
                 start_optimizer_state=(header, opt_arrays) if header.get("optimizer") else None,
                 start_epoch=int(extra.get("epoch", -1)) + 1,
                 start_step=int(extra.get("step", 0)),
                 best_so_far=float(extra.get("best_metric", math.inf)))


def write_metrics(history: list[dict], path: str | Path) -> None:
    """Newline-delimited structured records, one per epoch (deterministic)."""
    import json
    with Path(path).open("w") as fh:
        for entry in history:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
