"""Dual-head autoregressive transaction model.

The static vector and the per-transaction dynamic vectors pass through two
input modules of identical design (the dynamic one shared across all
timesteps), the static representation is prepended to the sequence, and a
causal pre-norm transformer decoder produces one hidden state per position.
No positional encoding is used; ordering is captured by the causal mask
alone. Two output heads of identical structure then predict, per step, the
attributes of the next transaction and the network signals of the current
one: numerical targets as (mu, sigma) of a log-scale normal, categorical
targets as a head vector whose logits come from multiplying with the
attribute's (input-tied) embedding table.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .corpus import Batch, SchemaLayout
from .schema import AttrKind, AttributeSchema

CHECKPOINT_MAGIC = b"TXFCKPT1"
CHECKPOINT_VERSION = 1

SIGMA_FLOOR = 1e-4


def default_embedding_dim(cardinality: int, hidden_dim: int) -> int:
    return min(hidden_dim, math.ceil(cardinality ** 0.25) * 8)


@dataclass
class ModelConfig:
    hidden_dim: int = 256
    n_layers: int = 3
    n_heads: int = 4
    input_module_layers: int = 3
    ff_mult: int = 4
    max_seq_len: int = 512
    numeric_proj_dim: int | None = None            # defaults to hidden_dim
    embedding_dims: dict = field(default_factory=dict)  # per-attribute overrides
    embedding_init_std: float | None = None        # None: unit-normal rows

    def __post_init__(self):
        if self.hidden_dim % self.n_heads != 0:
            raise ValueError("hidden_dim must be divisible by n_heads")
        for name in ("hidden_dim", "n_layers", "n_heads", "input_module_layers",
                     "ff_mult", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    def embedding_dim(self, attribute: str, cardinality: int) -> int:
        if attribute in self.embedding_dims:
            return int(self.embedding_dims[attribute])
        return default_embedding_dim(cardinality, self.hidden_dim)

    def to_dict(self) -> dict:
        return {
            "hidden_dim": self.hidden_dim,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "input_module_layers": self.input_module_layers,
            "ff_mult": self.ff_mult,
            "max_seq_len": self.max_seq_len,
            "numeric_proj_dim": self.numeric_proj_dim,
            "embedding_dims": dict(self.embedding_dims),
            "embedding_init_std": self.embedding_init_std,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class EmbeddingTable:
    """Snapshot of one attribute's embedding matrix (OOV and pad rows included)."""

    attribute: str
    matrix: np.ndarray  # [cardinality, d_attr]

    def save(self, path: str | Path) -> None:
        np.save(path, self.matrix.astype("<f4"), allow_pickle=False)

    @classmethod
    def load(cls, attribute: str, path: str | Path) -> "EmbeddingTable":
        return cls(attribute, np.load(path, allow_pickle=False))


@dataclass
class HeadOutputs:
    """Per-attribute predictions of one head over positions 1..T."""

    mu: dict       # name -> [B, T]
    sigma: dict    # name -> [B, T], strictly positive
    cat_head: dict  # name -> [B, T, d_attr]


@dataclass
class ModelOutputs:
    next: HeadOutputs
    current: HeadOutputs


def logits(head_vec: torch.Tensor, table: torch.Tensor) -> torch.Tensor:
    """Score every category: head output times the embedding table, transposed."""
    return head_vec @ table.transpose(-1, -2)


def sample_numerical(mu: torch.Tensor, sigma: torch.Tensor, seed: int) -> torch.Tensor:
    """Draw positive values: exponentiate a normal draw in log-space."""
    if (sigma <= 0).any():
        raise ValueError("sigma must be positive")
    gen = torch.Generator().manual_seed(seed)
    z = torch.normal(mu.detach().to(torch.float64),
                     sigma.detach().to(torch.float64), generator=gen)
    return torch.exp(z)


def sample_categorical(cat_logits: torch.Tensor, seed: int) -> torch.Tensor:
    """Draw category indices proportionally to softmax(logits)."""
    gen = torch.Generator().manual_seed(seed)
    probs = torch.softmax(cat_logits.detach(), dim=-1)
    flat = probs.reshape(-1, probs.shape[-1])
    idx = torch.multinomial(flat, 1, generator=gen).squeeze(-1)
    return idx.reshape(probs.shape[:-1])


class InputModule(nn.Module):
    """Log-scales and projects numerics, embeds categoricals, fuses to width d.

    One instance serves the static vector; a second, with its own weights,
    serves every dynamic vector (weights shared across timesteps by
    construction: the same module is applied to all of them at once).
    """

    def __init__(self, num_names: list[str], cat_names: list[str],
                 embeddings: nn.ModuleDict, cfg: ModelConfig):
        super().__init__()
        if not num_names and not cat_names:
            raise ValueError("input module needs at least one attribute")
        self.num_names = list(num_names)
        self.cat_names = list(cat_names)
        self.embeddings = embeddings  # shared, owned by the model
        width = 0
        if num_names:
            proj = cfg.numeric_proj_dim or cfg.hidden_dim
            self.numeric_proj = nn.Linear(len(num_names), proj)
            width += proj
        width += sum(embeddings[n].embedding_dim for n in cat_names)
        stack: list[nn.Module] = []
        d_in = width
        for layer in range(cfg.input_module_layers):
            stack.append(nn.Linear(d_in, cfg.hidden_dim))
            if layer < cfg.input_module_layers - 1:
                stack.append(nn.GELU())
            d_in = cfg.hidden_dim
        self.fuse = nn.Sequential(*stack)

    def forward(self, num_vals: torch.Tensor, cat_idx: torch.Tensor) -> torch.Tensor:
        parts = []
        if self.num_names:
            x = torch.log1p(num_vals.to(self.numeric_proj.weight.dtype))
            parts.append(self.numeric_proj(x))
        for i, name in enumerate(self.cat_names):
            parts.append(self.embeddings[name](cat_idx[..., i]))
        return self.fuse(torch.cat(parts, dim=-1))


class SelfAttention(nn.Module):
    def __init__(self, d: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.d_head = d // n_heads
        self.qkv = nn.Linear(d, 3 * d)
        self.out = nn.Linear(d, d)

    def forward(self, x: torch.Tensor, attn_mask: torch.Tensor) -> torch.Tensor:
        b, s, d = x.shape
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        shape = (b, s, self.n_heads, self.d_head)
        q = q.view(shape).transpose(1, 2)
        k = k.view(shape).transpose(1, 2)
        v = v.view(shape).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.d_head)
        scores = scores + attn_mask  # [B or 1, 1, S, S], 0 / -inf
        weights = torch.softmax(scores, dim=-1)
        ctx = (weights @ v).transpose(1, 2).reshape(b, s, d)
        return self.out(ctx)


class DecoderBlock(nn.Module):
    """Pre-norm residual block: masked self-attention then feed-forward."""

    def __init__(self, d: int, n_heads: int, ff_mult: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(d)
        self.attn = SelfAttention(d, n_heads)
        self.norm2 = nn.LayerNorm(d)
        self.ff = nn.Sequential(
            nn.Linear(d, ff_mult * d), nn.GELU(), nn.Linear(ff_mult * d, d),
        )

    def forward(self, x: torch.Tensor, attn_mask: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x), attn_mask)
        return x + self.ff(self.norm2(x))


class OutputHead(nn.Module):
    """One prediction sub-head: (mu, sigma) per numerical target, a head
    vector per categorical target (logits are formed against the tied
    embedding table by the caller)."""

    def __init__(self, num_names: list[str], cat_names: list[str],
                 embeddings: nn.ModuleDict, cfg: ModelConfig):
        super().__init__()
        self.num_names = list(num_names)
        self.cat_names = list(cat_names)
        self.num_proj = nn.ModuleDict(
            {n: nn.Linear(cfg.hidden_dim, 2) for n in num_names})
        self.cat_proj = nn.ModuleDict(
            {n: nn.Linear(cfg.hidden_dim, embeddings[n].embedding_dim)
             for n in cat_names})

    def forward(self, h: torch.Tensor) -> HeadOutputs:
        mu, sigma, cat_head = {}, {}, {}
        for name, proj in self.num_proj.items():
            out = proj(h)
            mu[name] = out[..., 0]
            sigma[name] = nn.functional.softplus(out[..., 1]) + SIGMA_FLOOR
        for name, proj in self.cat_proj.items():
            cat_head[name] = proj(h)
        return HeadOutputs(mu=mu, sigma=sigma, cat_head=cat_head)


class TransactionModel(nn.Module):
    """The full network: input modules, causal decoder, dual output heads."""

    def __init__(self, schema: AttributeSchema, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.schema = schema
        self.schema_hash = schema.hash()
        self.layout = SchemaLayout(schema)

        self.embeddings = nn.ModuleDict()
        for a in schema:
            if a.kind is AttrKind.CATEGORICAL:
                d_attr = cfg.embedding_dim(a.name, a.cardinality)
                emb = nn.Embedding(a.cardinality, d_attr)
                if cfg.embedding_init_std is not None:
                    nn.init.normal_(emb.weight, std=cfg.embedding_init_std)
                self.embeddings[a.name] = emb

        lay = self.layout
        self.static_input = InputModule(lay.static_num, lay.static_cat,
                                        self.embeddings, cfg)
        self.dynamic_input = InputModule(lay.input_dyn_num, lay.input_dyn_cat,
                                         self.embeddings, cfg)
        self.blocks = nn.ModuleList(
            DecoderBlock(cfg.hidden_dim, cfg.n_heads, cfg.ff_mult)
            for _ in range(cfg.n_layers))
        self.final_norm = nn.LayerNorm(cfg.hidden_dim)
        self.next_head = OutputHead(lay.next_num, lay.next_cat, self.embeddings, cfg)
        self.current_head = OutputHead(lay.sig_num, lay.sig_cat, self.embeddings, cfg)

    def table(self, attribute: str) -> torch.Tensor:
        return self.embeddings[attribute].weight

    def _attn_mask(self, valid: torch.Tensor) -> torch.Tensor:
        """Additive mask [B,1,S,S]: causal, padded keys blocked, self always open."""
        b, t = valid.shape
        s = t + 1
        dtype = self.final_norm.weight.dtype
        causal = torch.ones(s, s, dtype=torch.bool).tril()
        key_valid = torch.cat([torch.ones(b, 1, dtype=torch.bool), valid], dim=1)
        allowed = causal.unsqueeze(0) & key_valid.unsqueeze(1)
        allowed = allowed | torch.eye(s, dtype=torch.bool).unsqueeze(0)
        mask = torch.zeros(b, s, s, dtype=dtype)
        mask.masked_fill_(~allowed, float("-inf"))
        return mask.unsqueeze(1)

    def forward(self, batch: Batch) -> tuple[torch.Tensor, ModelOutputs]:
        """Returns (hidden states [B, T+1, d], per-step dual-head outputs).

        Position 0 holds the static token and produces no predictions;
        position j >= 1 corresponds to transaction j.
        """
        if batch.seq_len > self.cfg.max_seq_len:
            raise ValueError(
                f"sequence length {batch.seq_len} exceeds max_seq_len {self.cfg.max_seq_len}")
        lay = self.layout
        static_tok = self.static_input(batch.static_num, batch.static_cat)

        num_cols = [lay.dyn_num.index(n) for n in lay.input_dyn_num]
        cat_cols = [lay.dyn_cat.index(n) for n in lay.input_dyn_cat]
        dyn_num = batch.dyn_num[:, :, num_cols]
        dyn_cat = batch.dyn_cat[:, :, cat_cols]
        dyn_tok = self.dynamic_input(dyn_num, dyn_cat)

        x = torch.cat([static_tok.unsqueeze(1), dyn_tok], dim=1)
        mask = self._attn_mask(batch.valid)
        for block in self.blocks:
            x = block(x, mask)
        h = self.final_norm(x)

        states = h[:, 1:, :]
        outputs = ModelOutputs(next=self.next_head(states),
                               current=self.current_head(states))
        return h, outputs

    def card_embeddings(self, batch: Batch) -> torch.Tensor:
        """Card representation: hidden state at the final valid step."""
        h, _ = self.forward(batch)
        idx = batch.lengths  # position of the last transaction in h
        return h[torch.arange(h.shape[0]), idx, :]

    def export_embedding_table(self, attribute: str) -> EmbeddingTable:
        if attribute not in self.embeddings:
            raise KeyError(f"no embedding table for attribute {attribute!r}")
        mat = self.embeddings[attribute].weight.detach().cpu().numpy().copy()
        return EmbeddingTable(attribute, mat)


# -- checkpoint format ------------------------------------------------------

def save_checkpoint(path: str | Path, model: TransactionModel,
                    optimizer: torch.optim.Optimizer | None = None,
                    extra: dict | None = None, half: bool = False) -> None:
    """Write a checkpoint: magic, u32 header length, JSON header, raw bodies.

    The header records the model config, schema hash, and a tensor index
    (name, dtype, shape, byte offset); bodies are little-endian float32 by
    default, float16 when ``half`` (parameters only; optimizer state always
    stays float32). Integer state is stored as little-endian int64.
    """
    tensors: list[tuple[str, np.ndarray]] = []
    for name, t in model.state_dict().items():
        arr = t.detach().cpu().numpy()
        if half and arr.dtype.kind == "f":
            arr = arr.astype("<f2")
        tensors.append((f"model/{name}", arr))
    opt_meta = None
    if optimizer is not None:
        opt_state = optimizer.state_dict()
        opt_meta = {"param_groups": opt_state["param_groups"], "state_keys": {}}
        for pid, st in opt_state["state"].items():
            keys = []
            for key, val in st.items():
                if isinstance(val, torch.Tensor):
                    tensors.append((f"optim/{pid}/{key}", val.detach().cpu().numpy()))
                    keys.append([key, "tensor"])
                else:
                    keys.append([key, val])
            opt_meta["state_keys"][str(pid)] = keys

    index = []
    offset = 0
    bodies = []
    for name, arr in tensors:
        arr = np.ascontiguousarray(arr)
        if arr.dtype.kind == "f" and arr.dtype.itemsize == 4:
            arr = arr.astype("<f4")
        elif arr.dtype.kind in "iu":
            arr = arr.astype("<i8")
        raw = arr.tobytes()
        index.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(raw)})
        bodies.append(raw)
        offset += len(raw)

    header = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": model.cfg.to_dict(),
        "schema_hash": model.schema_hash,
        "half": half,
        "tensors": index,
        "extra": extra or {},
        "optimizer": opt_meta,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with Path(path).open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for raw in bodies:
            fh.write(raw)


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    """Return (header, name -> array) without needing a schema."""
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack_from("<I", data, 8)
    header = json.loads(data[12:12 + hlen].decode())
    if header["format_version"] != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header['format_version']}")
    base = 12 + hlen
    arrays = {}
    for entry in header["tensors"]:
        arr = np.frombuffer(data, dtype=np.dtype(entry["dtype"]),
                            count=int(np.prod(entry["shape"])) if entry["shape"] else 1,
                            offset=base + entry["offset"])
        arrays[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return header, arrays


def load_checkpoint(path: str | Path, schema: AttributeSchema,
                    ) -> tuple[TransactionModel, dict, dict]:
    """Rebuild a model from a checkpoint; schema hash must match.

    Returns (model, header, optimizer_arrays) where optimizer_arrays maps
    ``optim/...`` tensor names to arrays for ``restore_optimizer``.
    """
    header, arrays = read_checkpoint(path)
    if header["schema_hash"] != schema.hash():
        raise ValueError("checkpoint schema hash does not match the corpus schema")
    cfg = ModelConfig.from_dict(header["model_config"])
    model = TransactionModel(schema, cfg)
    state = {}
    for name, arr in arrays.items():
        if name.startswith("model/"):
            t = torch.from_numpy(arr)
            if t.dtype == torch.float16:
                t = t.to(torch.float32)
            state[name[len("model/"):]] = t
    model.load_state_dict(state)
    opt_arrays = {n: a for n, a in arrays.items() if n.startswith("optim/")}
    return model, header, opt_arrays


def restore_optimizer(optimizer: torch.optim.Optimizer, header: dict,
                      opt_arrays: dict[str, np.ndarray]) -> None:
    meta = header.get("optimizer")
    if meta is None:
        raise ValueError("checkpoint carries no optimizer state")
    state: dict = {}
    for pid_str, keys in meta["state_keys"].items():
        pid = int(pid_str)
        st = {}
        for key, kind in keys:
            if kind == "tensor":
                st[key] = torch.from_numpy(opt_arrays[f"optim/{pid}/{key}"].copy())
            else:
                st[key] = kind
        state[pid] = st
    optimizer.load_state_dict({"state": state, "param_groups": meta["param_groups"]})
