"""Turns interleaved raw transactions into model-ready batches.

Pipeline: group per card and sort chronologically, split on temporal
boundaries, window to the sequence cap, and pack padded batches. Sequences
store raw numeric values (the model applies the log transform) and dense
vocabulary indices for categoricals.

Temporal split semantics: a transaction is a *member* of exactly one
partition by its timestamp. Later partitions keep the earlier history in
the sequence as input context, but only member positions are scored, via
the ``curr_scored`` / ``next_scored`` masks (the next-target mask follows
the membership of the *target* transaction).

Shard files are fixed-layout little-endian binary records behind a JSON
manifest carrying the schema hash; see ``write_shard`` for the exact byte
layout.
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
import torch

from .schema import (
    AttrKind,
    AttrRole,
    AttrScope,
    AttributeSchema,
    AttributeSpec,
    Vocabulary,
    build_vocabulary,
)
from .syngen import ATTRIBUTE_TEMPLATE, RawTransaction

SHARD_MAGIC = b"TXFSHRD1"
SHARD_VERSION = 1


class SchemaLayout:
    """Fixed column orderings derived from a schema.

    Dynamic non-signal attributes fill the ``dyn_*`` arrays whether or not
    they are model inputs; current signals live in ``sig_*``. Orderings
    follow schema attribute order and are part of the shard layout.
    """

    def __init__(self, schema: AttributeSchema):
        self.schema = schema
        static = [a for a in schema if a.scope is AttrScope.STATIC]
        dyn = [a for a in schema
               if a.scope is AttrScope.DYNAMIC and not a.is_current_signal]
        sig = [a for a in schema if a.is_current_signal]
        if any(a.scope is not AttrScope.DYNAMIC for a in sig):
            raise ValueError("current-signal attributes must be dynamic")

        def names(attrs: list[AttributeSpec], kind: AttrKind) -> list[str]:
            return [a.name for a in attrs if a.kind is kind]

        self.static_num = names(static, AttrKind.NUMERICAL)
        self.static_cat = names(static, AttrKind.CATEGORICAL)
        self.dyn_num = names(dyn, AttrKind.NUMERICAL)
        self.dyn_cat = names(dyn, AttrKind.CATEGORICAL)
        self.sig_num = names(sig, AttrKind.NUMERICAL)
        self.sig_cat = names(sig, AttrKind.CATEGORICAL)
        self.next_num = [a.name for a in dyn if a.is_next_target
                         and a.kind is AttrKind.NUMERICAL]
        self.next_cat = [a.name for a in dyn if a.is_next_target
                         and a.kind is AttrKind.CATEGORICAL]
        self.input_dyn_num = [a.name for a in dyn if a.is_input
                              and a.kind is AttrKind.NUMERICAL]
        self.input_dyn_cat = [a.name for a in dyn if a.is_input
                              and a.kind is AttrKind.CATEGORICAL]

    def pad_indices(self, names: Sequence[str]) -> list[int]:
        return [self.schema.vocabulary(n).pad_index for n in names]

    def column(self, group: str, name: str) -> int:
        return getattr(self, group).index(name)


@dataclass
class CardSequence:
    """One card's (possibly windowed) chronological transaction run."""

    card_id: int
    static_num: np.ndarray   # [n_static_num] float32, raw values
    static_cat: np.ndarray   # [n_static_cat] int64, vocabulary indices
    dyn_num: np.ndarray      # [t, n_dyn_num] float32
    dyn_cat: np.ndarray      # [t, n_dyn_cat] int64
    sig_num: np.ndarray      # [t, n_sig_num] float32
    sig_cat: np.ndarray      # [t, n_sig_cat] int64
    timestamps: np.ndarray   # [t] float64
    curr_scored: np.ndarray  # [t] bool
    next_scored: np.ndarray  # [t] bool; target transaction is a member

    @property
    def t(self) -> int:
        return len(self.timestamps)

    def __post_init__(self):
        if self.t < 1:
            raise ValueError("sequence must contain at least one transaction")
        if np.any(np.diff(self.timestamps) < 0):
            raise ValueError("timestamps must be non-decreasing within a card")


def encode_transaction(txn: RawTransaction, layout: SchemaLayout) -> tuple:
    """Map one raw record to (dyn_num, dyn_cat, sig_num, sig_cat) rows."""
    schema = layout.schema
    unknown = [k for k in txn.values if k not in schema]
    if unknown:
        raise ValueError(
            f"record card={txn.card_id} ts={txn.timestamp}: unknown attributes {unknown}"
        )
    try:
        dn = [float(txn.values[n]) for n in layout.dyn_num]
        dc = [schema.vocabulary(n).lookup(txn.values[n]) for n in layout.dyn_cat]
        gn = [float(txn.values[n]) for n in layout.sig_num]
        gc = [schema.vocabulary(n).lookup(txn.values[n]) for n in layout.sig_cat]
    except KeyError as e:
        raise ValueError(
            f"record card={txn.card_id} ts={txn.timestamp}: missing attribute {e}"
        ) from None
    return dn, dc, gn, gc


def group_and_sort(raw: Iterable[RawTransaction], layout: SchemaLayout) -> list[CardSequence]:
    """One CardSequence per card, chronological, stable on input order for ties."""
    schema = layout.schema
    per_card: dict[int, list] = {}
    for order, txn in enumerate(raw):
        per_card.setdefault(txn.card_id, []).append((txn.timestamp, order, txn))
    out = []
    for card_id in sorted(per_card):
        rows = per_card[card_id]
        rows.sort(key=lambda r: (r[0], r[1]))
        first = rows[0][2]
        static_num = np.array([float(first.values[n]) for n in layout.static_num],
                              dtype=np.float32)
        static_cat = np.array([schema.vocabulary(n).lookup(first.values[n])
                               for n in layout.static_cat], dtype=np.int64)
        t = len(rows)
        dyn_num = np.zeros((t, len(layout.dyn_num)), dtype=np.float32)
        dyn_cat = np.zeros((t, len(layout.dyn_cat)), dtype=np.int64)
        sig_num = np.zeros((t, len(layout.sig_num)), dtype=np.float32)
        sig_cat = np.zeros((t, len(layout.sig_cat)), dtype=np.int64)
        ts = np.zeros(t, dtype=np.float64)
        for i, (stamp, _, txn) in enumerate(rows):
            dn, dc, gn, gc = encode_transaction(txn, layout)
            dyn_num[i] = dn
            dyn_cat[i] = dc
            sig_num[i] = gn
            sig_cat[i] = gc
            ts[i] = stamp
        scored = np.ones(t, dtype=bool)
        next_scored = np.zeros(t, dtype=bool)
        next_scored[:-1] = True
        out.append(CardSequence(card_id, static_num, static_cat, dyn_num, dyn_cat,
                                sig_num, sig_cat, ts, scored, next_scored))
    return out


def window(seq: CardSequence, max_seq_len: int = 512) -> list[CardSequence]:
    """Split into consecutive non-overlapping windows of at most max_seq_len.

    Every window keeps the card's static vector. The final step of each
    window loses its next-target (no successor in-window).
    """
    if max_seq_len < 2:
        raise ValueError("max_seq_len must be >= 2")
    out = []
    for lo in range(0, seq.t, max_seq_len):
        hi = min(lo + max_seq_len, seq.t)
        next_scored = seq.next_scored[lo:hi].copy()
        next_scored[-1] = False
        out.append(CardSequence(
            seq.card_id, seq.static_num, seq.static_cat,
            seq.dyn_num[lo:hi], seq.dyn_cat[lo:hi],
            seq.sig_num[lo:hi], seq.sig_cat[lo:hi],
            seq.timestamps[lo:hi], seq.curr_scored[lo:hi], next_scored,
        ))
    return out


@dataclass(frozen=True)
class TemporalSplit:
    train_end: float
    val_end: float
    test_end: float

    def __post_init__(self):
        if not (self.train_end < self.val_end < self.test_end):
            raise ValueError("split boundaries must satisfy train_end < val_end < test_end")

    @classmethod
    def from_span(cls, span_seconds: float, train_parts: int = 24,
                  val_parts: int = 1, test_parts: int = 1) -> "TemporalSplit":
        total = train_parts + val_parts + test_parts
        unit = span_seconds / total
        return cls(train_parts * unit, (train_parts + val_parts) * unit, span_seconds)


def _restrict(seq: CardSequence, end: float, member_from: float) -> CardSequence | None:
    keep = seq.timestamps < end
    t = int(keep.sum())
    if t == 0:
        return None
    member = (seq.timestamps[:t] >= member_from)
    if not member.any():
        return None
    next_scored = np.zeros(t, dtype=bool)
    next_scored[:-1] = member[1:]
    return CardSequence(
        seq.card_id, seq.static_num, seq.static_cat,
        seq.dyn_num[:t], seq.dyn_cat[:t], seq.sig_num[:t], seq.sig_cat[:t],
        seq.timestamps[:t], member, next_scored,
    )


def split(seqs: Sequence[CardSequence], boundaries: TemporalSplit) -> dict[str, list[CardSequence]]:
    """Partition by timestamp; earlier history stays as unscored context."""
    ranges = {
        "train": (boundaries.train_end, -np.inf),
        "val": (boundaries.val_end, boundaries.train_end),
        "test": (boundaries.test_end, boundaries.val_end),
    }
    out: dict[str, list[CardSequence]] = {name: [] for name in ranges}
    for seq in seqs:
        for name, (end, member_from) in ranges.items():
            restricted = _restrict(seq, end, member_from)
            if restricted is not None:
                out[name].append(restricted)
    for name, part in out.items():
        if not part:
            warnings.warn(f"partition {name!r} is empty")
    return out


@dataclass
class Batch:
    """Padded tensor bundle of B sequences; T is the batch-local maximum."""

    static_num: torch.Tensor   # [B, n_static_num] float32
    static_cat: torch.Tensor   # [B, n_static_cat] int64
    dyn_num: torch.Tensor      # [B, T, n_dyn_num] float32
    dyn_cat: torch.Tensor      # [B, T, n_dyn_cat] int64
    sig_num: torch.Tensor      # [B, T, n_sig_num] float32
    sig_cat: torch.Tensor      # [B, T, n_sig_cat] int64
    valid: torch.Tensor        # [B, T] bool
    curr_scored: torch.Tensor  # [B, T] bool
    next_scored: torch.Tensor  # [B, T] bool
    card_ids: torch.Tensor     # [B] int64
    layout: SchemaLayout

    @property
    def batch_size(self) -> int:
        return self.valid.shape[0]

    @property
    def seq_len(self) -> int:
        return self.valid.shape[1]

    @property
    def lengths(self) -> torch.Tensor:
        return self.valid.sum(dim=1)

    def next_target(self, name: str) -> tuple[torch.Tensor, torch.Tensor]:
        """(values, mask) for a next-attribute target; values[i,j] describes
        transaction j+1. Masked slots hold zero / the padding index."""
        mask = self.next_scored
        if name in self.layout.next_num:
            col = self.layout.column("dyn_num", name)
            vals = torch.zeros_like(self.dyn_num[:, :, col])
            vals[:, :-1] = self.dyn_num[:, 1:, col]
            return torch.where(mask, vals, torch.zeros_like(vals)), mask
        col = self.layout.column("dyn_cat", name)
        pad = self.layout.schema.vocabulary(name).pad_index
        vals = torch.full_like(self.dyn_cat[:, :, col], pad)
        vals[:, :-1] = self.dyn_cat[:, 1:, col]
        return torch.where(mask, vals, torch.full_like(vals, pad)), mask

    def current_target(self, name: str) -> tuple[torch.Tensor, torch.Tensor]:
        """(values, mask) for a current-signal target at the same step."""
        mask = self.valid & self.curr_scored
        if name in self.layout.sig_num:
            col = self.layout.column("sig_num", name)
            return self.sig_num[:, :, col], mask
        col = self.layout.column("sig_cat", name)
        return self.sig_cat[:, :, col], mask


def collate(seqs: Sequence[CardSequence], layout: SchemaLayout) -> Batch:
    b = len(seqs)
    t_max = max(s.t for s in seqs)
    dyn_cat_pad = layout.pad_indices(layout.dyn_cat)
    sig_cat_pad = layout.pad_indices(layout.sig_cat)

    static_num = np.stack([s.static_num for s in seqs]) if layout.static_num else \
        np.zeros((b, 0), dtype=np.float32)
    static_cat = np.stack([s.static_cat for s in seqs]) if layout.static_cat else \
        np.zeros((b, 0), dtype=np.int64)
    dyn_num = np.zeros((b, t_max, len(layout.dyn_num)), dtype=np.float32)
    dyn_cat = np.tile(np.array(dyn_cat_pad, dtype=np.int64), (b, t_max, 1)) \
        if dyn_cat_pad else np.zeros((b, t_max, 0), dtype=np.int64)
    sig_num = np.zeros((b, t_max, len(layout.sig_num)), dtype=np.float32)
    sig_cat = np.tile(np.array(sig_cat_pad, dtype=np.int64), (b, t_max, 1)) \
        if sig_cat_pad else np.zeros((b, t_max, 0), dtype=np.int64)
    valid = np.zeros((b, t_max), dtype=bool)
    curr_scored = np.zeros((b, t_max), dtype=bool)
    next_scored = np.zeros((b, t_max), dtype=bool)

    for i, s in enumerate(seqs):
        valid[i, :s.t] = True
        curr_scored[i, :s.t] = s.curr_scored
        next_scored[i, :s.t] = s.next_scored
        dyn_num[i, :s.t] = s.dyn_num
        dyn_cat[i, :s.t] = s.dyn_cat
        sig_num[i, :s.t] = s.sig_num
        sig_cat[i, :s.t] = s.sig_cat

    return Batch(
        static_num=torch.from_numpy(static_num),
        static_cat=torch.from_numpy(static_cat),
        dyn_num=torch.from_numpy(dyn_num),
        dyn_cat=torch.from_numpy(dyn_cat),
        sig_num=torch.from_numpy(sig_num),
        sig_cat=torch.from_numpy(sig_cat),
        valid=torch.from_numpy(valid),
        curr_scored=torch.from_numpy(curr_scored),
        next_scored=torch.from_numpy(next_scored),
        card_ids=torch.tensor([s.card_id for s in seqs], dtype=torch.int64),
        layout=layout,
    )


def batches(seqs: Sequence[CardSequence], layout: SchemaLayout,
            batch_size: int = 256, seed: int = 0,
            shuffle: bool = True) -> Iterator[Batch]:
    """Deterministic shuffled batching; same seed -> same batch order."""
    if not seqs:
        raise ValueError("corpus is empty")
    order = np.arange(len(seqs))
    if shuffle:
        order = np.random.default_rng(seed).permutation(len(seqs))
    for lo in range(0, len(seqs), batch_size):
        chunk = [seqs[i] for i in order[lo:lo + batch_size]]
        yield collate(chunk, layout)


# -- schema construction from a raw stream ---------------------------------

def build_schema(raw: Iterable[RawTransaction], *, min_count: int = 1,
                 max_size: int = 1_000_000,
                 vocab_before: float | None = None) -> AttributeSchema:
    """Build vocabularies (and hence cardinalities) from a raw stream.

    ``vocab_before`` restricts vocabulary building to transactions before a
    timestamp (normally the train boundary) so later partitions exercise
    the OOV path.
    """
    streams: dict[str, list] = {name: [] for name, kind, *_ in ATTRIBUTE_TEMPLATE
                                if kind is AttrKind.CATEGORICAL}
    for txn in raw:
        if vocab_before is not None and txn.timestamp >= vocab_before:
            continue
        for name in streams:
            streams[name].append(txn.values[name])
    vocabs = {name: build_vocabulary(name, toks, min_count=min_count, max_size=max_size)
              for name, toks in streams.items()}
    attrs = []
    for name, kind, scope, roles, is_pivot in ATTRIBUTE_TEMPLATE:
        card = vocabs[name].cardinality if kind is AttrKind.CATEGORICAL else None
        attrs.append(AttributeSpec(name=name, kind=kind, scope=scope,
                                   roles=frozenset(roles), cardinality=card,
                                   is_pivot=is_pivot))
    return AttributeSchema(attrs, vocabs)


# -- shard files ------------------------------------------------------------

def write_shard(path: str | Path, seqs: Sequence[CardSequence],
                layout: SchemaLayout) -> None:
    """Write sequences as fixed-layout little-endian binary records.

    Layout: magic, u32 version, 64-byte hex schema hash, six u32 column
    counts (static_num, static_cat, dyn_num, dyn_cat, sig_num, sig_cat),
    u64 record count; then per record: u64 card_id, u32 t, static f32/u32
    columns, t*cols f32/u32 dynamic and signal blocks, and two t-byte
    scored-mask blocks.
    """
    counts = (len(layout.static_num), len(layout.static_cat), len(layout.dyn_num),
              len(layout.dyn_cat), len(layout.sig_num), len(layout.sig_cat))
    with Path(path).open("wb") as fh:
        fh.write(SHARD_MAGIC)
        fh.write(struct.pack("<I", SHARD_VERSION))
        fh.write(layout.schema.hash().encode("ascii"))
        fh.write(struct.pack("<6I", *counts))
        fh.write(struct.pack("<Q", len(seqs)))
        for s in seqs:
            fh.write(struct.pack("<QI", s.card_id, s.t))
            fh.write(s.static_num.astype("<f4").tobytes())
            fh.write(s.static_cat.astype("<u4").tobytes())
            fh.write(s.dyn_num.astype("<f4").tobytes())
            fh.write(s.dyn_cat.astype("<u4").tobytes())
            fh.write(s.sig_num.astype("<f4").tobytes())
            fh.write(s.sig_cat.astype("<u4").tobytes())
            fh.write(s.curr_scored.astype(np.uint8).tobytes())
            fh.write(s.next_scored.astype(np.uint8).tobytes())


def read_shard(path: str | Path, layout: SchemaLayout) -> list[CardSequence]:
    data = Path(path).read_bytes()
    off = 0
    if data[:8] != SHARD_MAGIC:
        raise ValueError(f"{path}: not a shard file")
    off = 8
    (version,) = struct.unpack_from("<I", data, off)
    off += 4
    if version != SHARD_VERSION:
        raise ValueError(f"{path}: unsupported shard version {version}")
    shard_hash = data[off:off + 64].decode("ascii")
    off += 64
    if shard_hash != layout.schema.hash():
        raise ValueError(f"{path}: schema hash mismatch")
    counts = struct.unpack_from("<6I", data, off)
    off += 24
    expected = (len(layout.static_num), len(layout.static_cat), len(layout.dyn_num),
                len(layout.dyn_cat), len(layout.sig_num), len(layout.sig_cat))
    if counts != expected:
        raise ValueError(f"{path}: column counts {counts} != schema layout {expected}")
    (n_records,) = struct.unpack_from("<Q", data, off)
    off += 8

    def take(dtype: str, n: int) -> np.ndarray:
        nonlocal off
        arr = np.frombuffer(data, dtype=dtype, count=n, offset=off)
        off += arr.nbytes
        return arr

    n_sn, n_sc, n_dn, n_dc, n_gn, n_gc = counts
    out = []
    for _ in range(n_records):
        card_id, t = struct.unpack_from("<QI", data, off)
        off += 12
        static_num = take("<f4", n_sn).astype(np.float32)
        static_cat = take("<u4", n_sc).astype(np.int64)
        dyn_num = take("<f4", t * n_dn).astype(np.float32).reshape(t, n_dn)
        dyn_cat = take("<u4", t * n_dc).astype(np.int64).reshape(t, n_dc)
        sig_num = take("<f4", t * n_gn).astype(np.float32).reshape(t, n_gn)
        sig_cat = take("<u4", t * n_gc).astype(np.int64).reshape(t, n_gc)
        curr_scored = take("u1", t).astype(bool)
        next_scored = take("u1", t).astype(bool)
        # Timestamps are not persisted; windows are already split-resolved.
        out.append(CardSequence(card_id, static_num, static_cat, dyn_num, dyn_cat,
                                sig_num, sig_cat, np.zeros(t, dtype=np.float64),
                                curr_scored, next_scored))
    return out


def write_corpus(out_dir: str | Path, parts: dict[str, list[CardSequence]],
                 layout: SchemaLayout, max_seq_len: int,
                 boundaries: TemporalSplit) -> dict:
    """Persist schema, per-partition shards, and the corpus manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    layout.schema.save(out / "schema.json")
    manifest: dict = {
        "format_version": 1,
        "schema_hash": layout.schema.hash(),
        "max_seq_len": max_seq_len,
        "boundaries": {"train_end": boundaries.train_end,
                       "val_end": boundaries.val_end,
                       "test_end": boundaries.test_end},
        "partitions": {},
    }
    for name, seqs in parts.items():
        shard = f"{name}-00000.shard"
        write_shard(out / shard, seqs, layout)
        manifest["partitions"][name] = {
            "shards": [shard],
            "n_sequences": len(seqs),
            "n_scored": int(sum(int(s.curr_scored.sum()) for s in seqs)),
        }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def load_corpus(corpus_dir: str | Path) -> tuple[SchemaLayout, dict, dict[str, list[CardSequence]]]:
    """Load (layout, manifest, partitions) from a corpus directory."""
    root = Path(corpus_dir)
    schema = AttributeSchema.load(root / "schema.json")
    layout = SchemaLayout(schema)
    manifest = json.loads((root / "manifest.json").read_text())
    if manifest["schema_hash"] != schema.hash():
        raise ValueError("corpus manifest schema hash mismatch")
    parts = {}
    for name, info in manifest["partitions"].items():
        seqs: list[CardSequence] = []
        for shard in info["shards"]:
            seqs.extend(read_shard(root / shard, layout))
        parts[name] = seqs
    return layout, manifest, parts


def build_corpus(raw: Sequence[RawTransaction], *, span_seconds: float,
                 max_seq_len: int = 512, min_count: int = 1,
                 max_size: int = 1_000_000,
                 split_parts: tuple[int, int, int] = (24, 1, 1),
                 ) -> tuple[SchemaLayout, TemporalSplit, dict[str, list[CardSequence]]]:
    """Full in-memory pipeline: schema from train range, group, split, window."""
    boundaries = TemporalSplit.from_span(span_seconds, *split_parts)
    schema = build_schema(raw, min_count=min_count, max_size=max_size,
                          vocab_before=boundaries.train_end)
    layout = SchemaLayout(schema)
    seqs = group_and_sort(raw, layout)
    parts = split(seqs, boundaries)
    # Windows that no longer score anything (pure-context fragments) are dropped.
    windowed = {
        name: [w for s in part for w in window(s, max_seq_len)
               if w.curr_scored.any() or w.next_scored.any()]
        for name, part in parts.items()
    }
    return layout, boundaries, windowed
