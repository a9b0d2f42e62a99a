"""Single command-line entry point wiring the whole pipeline.

Every subcommand reads one structured config file (YAML or JSON) plus flag
overrides (flags win), and writes a run manifest into its output directory:
the command, the full config snapshot, seeds, input/output paths, the
schema hash it operated under, and a checksum per written artifact. Stages
validate the upstream schema hash before consuming artifacts.
"""

from __future__ import annotations

import datetime
import hashlib
import json
import os
from dataclasses import asdict
from pathlib import Path

import click
import numpy as np
import yaml

from . import __version__
from . import embedsvc, eval as evalmod, rec as recmod, syngen, trainer
from .corpus import TemporalSplit, build_corpus, load_corpus, write_corpus
from .model import ModelConfig, load_checkpoint
from .schema import Vocabulary

MANIFEST_NAME = "run_manifest.json"


def _data_root() -> Path | None:
    root = os.environ.get("TXN_FOUNDRY_DATA")
    return Path(root) if root else None


def _resolve(path: str | Path) -> Path:
    p = Path(path)
    root = _data_root()
    if not p.is_absolute() and root is not None:
        return root / p
    return p


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = _resolve(path)
    if not p.exists():
        raise click.ClickException(f"config file not found: {p}")
    text = p.read_text()
    try:
        if p.suffix in (".yaml", ".yml"):
            data = yaml.safe_load(text) or {}
        else:
            data = json.loads(text)
    except Exception as e:
        raise click.ClickException(f"could not parse config {p}: {e}")
    if not isinstance(data, dict):
        raise click.ClickException(f"config {p} must be a mapping")
    return data


def _build(cls, data: dict, what: str):
    try:
        return cls(**data)
    except TypeError as e:
        raise click.ClickException(f"invalid {what} config: {e}")
    except ValueError as e:
        raise click.ClickException(f"invalid {what} config: {e}")


def _checksums(out_dir: Path, skip: tuple[str, ...] = (MANIFEST_NAME,)) -> dict:
    sums = {}
    for p in sorted(out_dir.rglob("*")):
        if p.is_file() and p.name not in skip:
            sums[str(p.relative_to(out_dir))] = hashlib.sha256(p.read_bytes()).hexdigest()
    return sums


def _write_manifest(out_dir: Path, command: str, config: dict, seeds: dict,
                    inputs: dict, schema_hash: str | None,
                    started: str) -> None:
    manifest = {
        "format_version": 1,
        "command": command,
        "version": __version__,
        "config": config,
        "seeds": seeds,
        "inputs": {k: str(v) for k, v in inputs.items()},
        "output_dir": str(out_dir),
        "schema_hash": schema_hash,
        "artifact_checksums": _checksums(out_dir),
        "started_at": started,
        "finished_at": datetime.datetime.now(datetime.timezone.utc).isoformat(),
    }
    (out_dir / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True))


def _now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


@click.group()
@click.version_option(version=__version__, prog_name="txn-foundry")
def main():
    """Synthetic transaction corpus, foundation-model training, and serving."""


@main.command()
@click.option("--config", "config_path", type=str, default=None,
              help="world config file (YAML/JSON)")
@click.option("--out", "out_dir", type=str, required=True)
@click.option("--seed", type=int, default=None, help="override the config seed")
def generate(config_path, out_dir, seed):
    """Generate the synthetic transaction stream."""
    started = _now()
    data = _load_config(config_path)
    if seed is not None:
        data["seed"] = seed
    config = _build(syngen.WorldConfig, data, "world")
    out = _resolve(out_dir)
    manifest = syngen.write_raw(syngen.generate(config), out, config)
    click.echo(f"wrote {manifest['n_transactions']} transactions "
               f"({manifest['n_abnormal']} abnormal) to {out}")
    _write_manifest(out, "generate", config.to_dict(), {"seed": config.seed},
                    {}, None, started)


@main.command("build-corpus")
@click.option("--raw", "raw_dir", type=str, required=True)
@click.option("--out", "out_dir", type=str, required=True)
@click.option("--max-seq-len", type=int, default=512, show_default=True)
@click.option("--min-count", type=int, default=1, show_default=True)
@click.option("--max-size", type=int, default=1_000_000, show_default=True)
@click.option("--split", "split_spec", type=str, default="24,1,1", show_default=True,
              help="train,val,test span parts")
def build_corpus_cmd(raw_dir, out_dir, max_seq_len, min_count, max_size, split_spec):
    """Group, split, window, and shard a raw stream."""
    started = _now()
    raw_path = _resolve(raw_dir)
    raw_manifest = syngen.read_manifest(raw_path)
    try:
        parts_spec = tuple(int(x) for x in split_spec.split(","))
        if len(parts_spec) != 3:
            raise ValueError
    except ValueError:
        raise click.ClickException(f"invalid --split {split_spec!r}; expected e.g. 24,1,1")
    span = raw_manifest["config"]["time_span_days"] * syngen.DAY
    raw = list(syngen.read_raw(raw_path))
    layout, boundaries, parts = build_corpus(
        raw, span_seconds=span, max_seq_len=max_seq_len, min_count=min_count,
        max_size=max_size, split_parts=parts_spec)
    out = _resolve(out_dir)
    manifest = write_corpus(out, parts, layout, max_seq_len, boundaries)
    sizes = {k: v["n_sequences"] for k, v in manifest["partitions"].items()}
    click.echo(f"corpus written to {out}: {sizes}")
    _write_manifest(out, "build-corpus",
                    {"max_seq_len": max_seq_len, "min_count": min_count,
                     "max_size": max_size, "split": list(parts_spec)},
                    {"seed": raw_manifest["seed"]}, {"raw": raw_path},
                    layout.schema.hash(), started)


@main.command()
@click.option("--data", "corpus_dir", type=str, required=True)
@click.option("--config", "config_path", type=str, default=None,
              help="file with {model: {...}, train: {...}} sections")
@click.option("--out", "out_dir", type=str, required=True)
@click.option("--epochs", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--aggregation-mode", type=click.Choice(trainer.AGGREGATION_MODES),
              default=None)
@click.option("--task-mode", type=click.Choice(trainer.TASK_MODES), default=None)
@click.option("--sampling-strategy", type=click.Choice(["shared", "independent"]),
              default=None)
@click.option("--n-negative", type=int, default=None)
@click.option("--resume", "resume_from", type=str, default=None,
              help="continue from a last.ckpt")
def train(corpus_dir, config_path, out_dir, epochs, seed, aggregation_mode,
          task_mode, sampling_strategy, n_negative, resume_from):
    """Train the foundation model on a built corpus."""
    started = _now()
    corpus_path = _resolve(corpus_dir)
    layout, corpus_manifest, parts = load_corpus(corpus_path)
    data = _load_config(config_path)
    model_cfg = _build(ModelConfig, data.get("model", {}), "model")
    train_data = dict(data.get("train", {}))
    for key, val in (("epochs", epochs), ("seed", seed),
                     ("aggregation_mode", aggregation_mode),
                     ("task_mode", task_mode),
                     ("sampling_strategy", sampling_strategy),
                     ("n_negative", n_negative)):
        if val is not None:
            train_data[key] = val
    train_cfg = _build(trainer.TrainConfig, train_data, "train")
    if model_cfg.max_seq_len < corpus_manifest["max_seq_len"]:
        raise click.ClickException(
            f"model max_seq_len {model_cfg.max_seq_len} < corpus window "
            f"{corpus_manifest['max_seq_len']}")
    out = _resolve(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        if resume_from is not None:
            result = trainer.resume(_resolve(resume_from), layout, parts, train_cfg,
                                    out_dir=out)
        else:
            result = trainer.train(layout, parts, model_cfg, train_cfg, out_dir=out)
    except (RuntimeError, ValueError) as e:
        raise click.ClickException(str(e))
    trainer.write_metrics(result.history, out / "metrics.jsonl")
    click.echo(f"best epoch {result.best_epoch} "
               f"({result.history[-1]['selection_key']}={result.best_metric:.6f}); "
               f"checkpoints in {out}")
    _write_manifest(out, "train",
                    {"model": model_cfg.to_dict(), "train": train_cfg.to_dict()},
                    {"seed": train_cfg.seed}, {"corpus": corpus_path},
                    layout.schema.hash(), started)


@main.command("eval")
@click.option("--data", "corpus_dir", type=str, required=True)
@click.option("--checkpoint", "ckpt_path", type=str, required=True)
@click.option("--partition", type=click.Choice(["train", "val", "test"]),
              default="test", show_default=True)
@click.option("--out", "out_dir", type=str, required=True)
def eval_cmd(corpus_dir, ckpt_path, partition, out_dir):
    """Prec@1 / sMAPE / abnormal AUC of a checkpoint on one partition."""
    started = _now()
    corpus_path = _resolve(corpus_dir)
    layout, _, parts = load_corpus(corpus_path)
    try:
        model, header, _ = load_checkpoint(_resolve(ckpt_path), layout.schema)
    except ValueError as e:
        raise click.ClickException(str(e))
    report = evalmod.evaluate_model(model, parts[partition])
    out = _resolve(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(json.dumps(report.to_dict(), indent=2,
                                                 sort_keys=True))
    click.echo(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    _write_manifest(out, "eval", {"partition": partition}, {},
                    {"corpus": corpus_path, "checkpoint": ckpt_path},
                    header["schema_hash"], started)


@main.command("bench-negatives")
@click.option("--out", "out_dir", type=str, required=True)
@click.option("--b", type=int, default=32, show_default=True)
@click.option("--t", type=int, default=64, show_default=True)
@click.option("--d", type=int, default=64, show_default=True)
@click.option("--cardinality", type=int, default=100_000, show_default=True)
@click.option("--negatives", type=str, default="64,128,256,512,1024", show_default=True)
@click.option("--strategies", type=str, default="shared,independent", show_default=True)
@click.option("--element-cap", type=int, default=500_000_000, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
def bench_negatives(out_dir, b, t, d, cardinality, negatives, strategies,
                    element_cap, seed):
    """Memory/time benchmark of the negative-sampling strategies."""
    started = _now()
    n_list = [int(x) for x in negatives.split(",")]
    strat_list = [s.strip() for s in strategies.split(",")]
    rows = evalmod.memory_benchmark(strat_list, n_list, b=b, t=t, d=d,
                                    cardinality=cardinality,
                                    element_cap=element_cap, seed=seed)
    out = _resolve(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "benchmark.json").write_text(json.dumps(rows, indent=2, sort_keys=True))
    cols = ["strategy", "n_negative", "analytic_elements", "fwd_bytes", "bwd_bytes",
            "fwd_time_s", "bwd_time_s", "exceeded"]
    with (out / "benchmark.tsv").open("w") as fh:
        fh.write("\t".join(cols) + "\n")
        for row in rows:
            fh.write("\t".join(str(row[c]) for c in cols) + "\n")
    for row in rows:
        click.echo(f"{row['strategy']:<12} N={row['n_negative']:<6} "
                   f"elements={row['analytic_elements']:<12} "
                   f"{'EXCEEDED' if row['exceeded'] else ''}")
    _write_manifest(out, "bench-negatives",
                    {"b": b, "t": t, "d": d, "cardinality": cardinality,
                     "negatives": n_list, "strategies": strat_list,
                     "element_cap": element_cap},
                    {"seed": seed}, {}, None, started)


@main.command()
@click.option("--axis", type=click.Choice(["cards", "hidden"]), required=True)
@click.option("--sizes", type=str, required=True, help="e.g. 1000,4000,16000")
@click.option("--config", "config_path", type=str, default=None,
              help="base {world: ..., model: ..., train: ...} config")
@click.option("--out", "out_dir", type=str, required=True)
def scaling(axis, sizes, config_path, out_dir):
    """Train one model per corpus/model size and report the trend."""
    started = _now()
    size_list = [int(x) for x in sizes.split(",")]
    data = _load_config(config_path)
    world_base = data.get("world", {})
    model_base = data.get("model", {})
    train_base = data.get("train", {})

    def run_point(ax: str, size: int) -> dict:
        world_data = dict(world_base)
        model_data = dict(model_base)
        if ax == "cards":
            world_data["n_cards"] = size
        else:
            model_data["hidden_dim"] = size
        world = _build(syngen.WorldConfig, world_data, "world")
        model_cfg = _build(ModelConfig, model_data, "model")
        train_cfg = _build(trainer.TrainConfig, train_base, "train")
        raw = list(syngen.generate(world))
        layout, _, parts = build_corpus(raw, span_seconds=world.time_span_days * syngen.DAY,
                                        max_seq_len=model_cfg.max_seq_len)
        result = trainer.train(layout, parts, model_cfg, train_cfg)
        report = evalmod.evaluate_model(result.model, parts["test"])
        return {
            "val_pivot_loss": result.best_metric,
            "prec_at_1_merchant": report.prec_at_1.get("merchant"),
            "auc": report.auc_abnormal,
        }

    study = evalmod.scaling_study(axis, size_list, run_point)
    out = _resolve(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "scaling.json").write_text(json.dumps(study, indent=2, sort_keys=True))
    with (out / "scaling.tsv").open("w") as fh:
        cols = ["axis", "size", "val_pivot_loss", "prec_at_1_merchant", "auc"]
        fh.write("\t".join(cols) + "\n")
        for row in study["rows"]:
            fh.write("\t".join(str(row[c]) for c in cols) + "\n")
    click.echo(json.dumps(study["monotonicity"], indent=2, sort_keys=True))
    _write_manifest(out, "scaling",
                    {"axis": axis, "sizes": size_list, "world": world_base,
                     "model": model_base, "train": train_base},
                    {"seed": train_base.get("seed", 0)}, {}, None, started)


@main.command("export-embeddings")
@click.option("--data", "corpus_dir", type=str, required=True)
@click.option("--checkpoint", "ckpt_path", type=str, required=True)
@click.option("--raw", "raw_dir", type=str, default=None,
              help="raw data dir; attaches planted merchant metadata")
@click.option("--out", "out_dir", type=str, required=True)
def export_embeddings(corpus_dir, ckpt_path, raw_dir, out_dir):
    """Export attribute tables, card embeddings, and coloring metadata."""
    started = _now()
    corpus_path = _resolve(corpus_dir)
    layout, corpus_manifest, parts = load_corpus(corpus_path)
    try:
        model, header, _ = load_checkpoint(_resolve(ckpt_path), layout.schema)
    except ValueError as e:
        raise click.ClickException(str(e))
    truth = None
    if raw_dir is not None:
        raw_manifest = syngen.read_manifest(_resolve(raw_dir))
        truth = syngen.ground_truth(syngen.WorldConfig.from_dict(raw_manifest["config"]))
    out = _resolve(out_dir)
    index = embedsvc.export_bundle(model, parts["train"], out, merchant_truth=truth,
                                   cutoff=corpus_manifest["boundaries"]["train_end"])
    click.echo(f"exported {len(index['attributes'])} tables and "
               f"{index['card']['count']} card embeddings to {out}")
    _write_manifest(out, "export-embeddings", {}, {},
                    {"corpus": corpus_path, "checkpoint": ckpt_path,
                     "raw": raw_dir or ""},
                    header["schema_hash"], started)


@main.command()
@click.option("--embeddings", "bundle_dir", type=str, required=True)
@click.option("--interactions", "raw_dir", type=str, required=True,
              help="raw data dir supplying post-cutoff interactions")
@click.option("--k", "k_spec", type=str, default="1,5,10,20", show_default=True)
@click.option("--epochs", type=int, default=10, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_dir", type=str, required=True)
def rec(bundle_dir, raw_dir, k_spec, epochs, seed, out_dir):
    """Two-tower comparison: pretrained-frozen vs supervised-from-scratch."""
    started = _now()
    bundle = embedsvc.EmbeddingBundle(_resolve(bundle_dir))
    cutoff = bundle.index.get("cutoff")
    if cutoff is None:
        raise click.ClickException("embedding bundle carries no pretrain cutoff")
    meta = bundle.metadata("merchant")
    n_tokens = bundle.index["attributes"]["merchant"]["cardinality"] - 2
    vocab = Vocabulary("merchant", [meta["tokens"][str(i)] for i in range(n_tokens)])
    cards, card_ids = bundle.card_embeddings()
    card_index = {int(c): i for i, c in enumerate(card_ids)}
    raw = syngen.read_raw(_resolve(raw_dir))
    interactions = recmod.build_interactions(raw, vocab, cutoff, card_index)
    if len(interactions) == 0:
        raise click.ClickException("no interactions found after the cutoff")
    k_values = tuple(int(x) for x in k_spec.split(","))
    cfg = recmod.TowerConfig(k_values=k_values, epochs=epochs, seed=seed)
    table = recmod.run_comparison(cards, bundle.table("merchant"), interactions, cfg)
    out = _resolve(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "rec_metrics.json").write_text(json.dumps(table, indent=2, sort_keys=True))
    click.echo(json.dumps(table, indent=2, sort_keys=True))
    _write_manifest(out, "rec", {"k_values": list(k_values), "epochs": epochs},
                    {"seed": seed},
                    {"embeddings": bundle_dir, "interactions": raw_dir},
                    bundle.schema_hash, started)


@main.command()
@click.option("--embeddings", "bundle_dir", type=str, required=True)
@click.option("--host", type=str, default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8765, show_default=True)
@click.option("--static", "static_dir", type=str, default=None,
              help="serve an explorer bundle at /app")
def serve(bundle_dir, host, port, static_dir):
    """Run the read-only embedding explorer service."""
    embedsvc.serve(_resolve(bundle_dir), host=host, port=port,
                   static_dir=_resolve(static_dir) if static_dir else None)


if __name__ == "__main__":
    main()
