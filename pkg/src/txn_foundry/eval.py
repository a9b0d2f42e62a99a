"""Evaluation metrics, the negative-sampling memory benchmark, and the
scaling-study runner.

Prec@1 always ranks against the full vocabulary (exhaustive logits), even
for high-cardinality attributes; desk-scale vocabularies make that cheap.
sMAPE uses the 0-2 normalized form. Abnormal-flag quality is rank-based
ROC-AUC with midrank tie handling (the production-relative metric the
benchmark numbers in the source material rely on is not reproducible).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.stats import rankdata

from .corpus import Batch, CardSequence, SchemaLayout, batches
from .model import ModelConfig, TransactionModel, logits
from .objective import loss_hcat_independent, loss_hcat_shared
from .schema import AttrClass, CardinalityClass, classify


@dataclass
class MetricReport:
    prec_at_1: dict[str, float]        # categorical next-targets
    smape: dict[str, float]            # numerical next-targets
    auc_abnormal: float | None         # pivot flag; absent on one-class data
    counts: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"prec_at_1": self.prec_at_1, "smape": self.smape,
                "auc_abnormal": self.auc_abnormal, "counts": self.counts}


def prec_at_1(predicted: np.ndarray, truth: np.ndarray) -> float | None:
    """Fraction of positions whose top-1 prediction hits the ground truth."""
    if len(truth) == 0:
        return None
    return float(np.mean(predicted == truth))


def smape(predictions: np.ndarray, truths: np.ndarray) -> float | None:
    """Symmetric MAPE, 0-2 normalized; a both-zero position contributes 0."""
    if len(truths) == 0:
        return None
    num = 2.0 * np.abs(predictions - truths)
    den = np.abs(predictions) + np.abs(truths)
    terms = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
    return float(terms.mean())


def auc_abnormal(scores: np.ndarray, flags: np.ndarray) -> float | None:
    """Rank-based ROC-AUC with midrank ties; None when one class is absent."""
    flags = np.asarray(flags, dtype=bool)
    n_pos = int(flags.sum())
    n_neg = len(flags) - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores, method="average")
    return float((ranks[flags].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def evaluate_model(model: TransactionModel, seqs: list[CardSequence],
                   batch_size: int = 256) -> MetricReport:
    """Next-target Prec@1 and sMAPE plus pivot AUC over scored positions."""
    layout = model.layout
    schema = layout.schema
    pivot = schema.pivot.name
    abnormal_idx = schema.vocabulary(pivot).lookup("1")

    hits: dict[str, int] = {n: 0 for n in layout.next_cat}
    totals: dict[str, int] = {n: 0 for n in layout.next_cat}
    preds_num: dict[str, list] = {n: [] for n in layout.next_num}
    truths_num: dict[str, list] = {n: [] for n in layout.next_num}
    pivot_scores: list[np.ndarray] = []
    pivot_flags: list[np.ndarray] = []

    model.eval()
    with torch.no_grad():
        for batch in batches(seqs, layout, batch_size, shuffle=False):
            _, out = model(batch)
            for name in layout.next_cat:
                y, mask = batch.next_target(name)
                z = logits(out.next.cat_head[name], model.table(name))
                pred = z.argmax(dim=-1)
                m = mask.numpy()
                hits[name] += int((pred == y).numpy()[m].sum())
                totals[name] += int(m.sum())
            for name in layout.next_num:
                y, mask = batch.next_target(name)
                m = mask.numpy()
                point = torch.expm1(out.next.mu[name]).numpy()[m]
                preds_num[name].append(point)
                truths_num[name].append(y.numpy()[m])
            y, mask = batch.current_target(pivot)
            z = logits(out.current.cat_head[pivot], model.table(pivot))
            prob = torch.softmax(z, dim=-1)[..., abnormal_idx]
            m = mask.numpy()
            pivot_scores.append(prob.numpy()[m])
            pivot_flags.append((y == abnormal_idx).numpy()[m])

    report = MetricReport(prec_at_1={}, smape={}, auc_abnormal=None)
    for name in layout.next_cat:
        report.counts[f"next:{name}"] = totals[name]
        if totals[name]:
            report.prec_at_1[name] = hits[name] / totals[name]
    for name in layout.next_num:
        preds = np.concatenate(preds_num[name]) if preds_num[name] else np.array([])
        truth = np.concatenate(truths_num[name]) if truths_num[name] else np.array([])
        report.counts[f"next:{name}"] = len(truth)
        val = smape(preds, truth)
        if val is not None:
            report.smape[name] = val
    scores = np.concatenate(pivot_scores) if pivot_scores else np.array([])
    flags = np.concatenate(pivot_flags) if pivot_flags else np.array([])
    report.counts[f"current:{pivot}"] = len(flags)
    report.auc_abnormal = auc_abnormal(scores, flags)
    return report


# -- negative sampling memory benchmark --------------------------------------

def analytic_elements(strategy: str, b: int, t: int, d: int, n: int) -> int:
    """Closed-form forward-pass intermediate element counts.

    shared: the concatenated candidate-score tensor B*(B+N)*T plus the N*d
    gathered negative rows. independent: the per-position negative gather
    B*T*N*d plus its B*T*(N+1) candidate scores.
    """
    if strategy == "shared":
        return b * (b + n) * t + n * d
    if strategy == "independent":
        return b * t * n * d + b * t * (n + 1)
    raise ValueError(f"unknown strategy {strategy!r}")


def _measured_alloc_bytes(fn) -> int | None:
    """Sum of positive CPU allocations during fn(), if the profiler allows."""
    try:
        from torch.profiler import ProfilerActivity, profile
        with profile(activities=[ProfilerActivity.CPU], profile_memory=True) as prof:
            fn()
        total = 0
        for evt in prof.key_averages():
            if evt.self_cpu_memory_usage > 0:
                total += evt.self_cpu_memory_usage
        return total
    except Exception:
        return None


def memory_benchmark(strategies: list[str], n_negatives: list[int],
                     b: int = 32, t: int = 64, d: int = 64,
                     cardinality: int = 100_000,
                     element_cap: int | None = None,
                     measure: bool = True, seed: int = 0) -> list[dict]:
    """Forward+backward the high-cardinality loss alone per configuration.

    Emits one plot-ready row per (strategy, N): analytic element count,
    measured allocation bytes per pass where the platform exposes them, and
    wall times. Configurations past ``element_cap`` are recorded as
    exceeded and not run.
    """
    rows = []
    gen = torch.Generator().manual_seed(seed)
    table = torch.randn(cardinality, d, generator=gen)
    head_base = torch.randn(b, t, d, generator=gen)
    y = torch.randint(cardinality, (b, t), generator=gen)
    for strategy in strategies:
        fn = loss_hcat_shared if strategy == "shared" else loss_hcat_independent
        for n in n_negatives:
            elements = analytic_elements(strategy, b, t, d, n)
            row = {"strategy": strategy, "n_negative": n, "b": b, "t": t, "d": d,
                   "analytic_elements": elements, "exceeded": False,
                   "fwd_bytes": None, "bwd_bytes": None,
                   "fwd_time_s": None, "bwd_time_s": None}
            if element_cap is not None and elements > element_cap:
                row["exceeded"] = True
                rows.append(row)
                continue
            head = head_base.clone().requires_grad_(True)
            state = {}

            def fwd():
                state["loss"] = fn(head, table, y, n, seed=seed).sum()

            def bwd():
                state["loss"].backward()

            t0 = time.perf_counter()
            if measure:
                row["fwd_bytes"] = _measured_alloc_bytes(fwd)
            else:
                fwd()
            row["fwd_time_s"] = time.perf_counter() - t0
            t0 = time.perf_counter()
            if measure:
                row["bwd_bytes"] = _measured_alloc_bytes(bwd)
            else:
                bwd()
            row["bwd_time_s"] = time.perf_counter() - t0
            rows.append(row)
    return rows


def linear_fit_r2(xs: list[float], ys: list[float]) -> float:
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    coef = np.polyfit(x, y, 1)
    resid = y - np.polyval(coef, x)
    ss_res = float((resid ** 2).sum())
    ss_tot = float(((y - y.mean()) ** 2).sum())
    return 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0


# -- scaling study ------------------------------------------------------------

def scaling_study(axis: str, sizes: list[int], run_point) -> dict:
    """Train/evaluate one model per point; report-only monotonicity summary.

    ``run_point(axis, size) -> dict`` must return at least val_pivot_loss,
    prec_at_1_merchant, and auc. Points run in the given order with their
    own fixed seeds, so the report is reproducible.
    """
    if len(sizes) < 3:
        raise ValueError("scaling study needs at least 3 points per axis")
    rows = []
    for size in sizes:
        row = {"axis": axis, "size": size}
        row.update(run_point(axis, size))
        rows.append(row)

    def trend(key: str) -> str:
        vals = [r[key] for r in rows if r.get(key) is not None]
        if len(vals) < 2:
            return "n/a"
        ups = sum(b > a for a, b in zip(vals, vals[1:]))
        downs = sum(b < a for a, b in zip(vals, vals[1:]))
        if ups == len(vals) - 1:
            return "increasing"
        if downs == len(vals) - 1:
            return "decreasing"
        return f"mixed ({ups} up, {downs} down)"

    return {
        "axis": axis,
        "rows": rows,
        "monotonicity": {key: trend(key) for key in
                         ("val_pivot_loss", "prec_at_1_merchant", "auc")},
    }
