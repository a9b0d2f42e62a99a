"""Two-tower next-merchant recommendation harness.

Compares two embedding sources under an otherwise identical architecture:
a frozen pretrained arm (merchant tower seeded from the exported embedding
table, card tower from exported card embeddings, both with trainable
projections) and a supervised-from-scratch arm that learns everything from
the interaction data alone. Interactions come from a held-out time range
the pretrained model never saw. Ranking is against the full merchant
vocabulary; metrics are HR@K and NDCG@K.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .syngen import RawTransaction
from .schema import Vocabulary

EMBEDDING_SOURCES = ("pretrained_frozen", "supervised_scratch")


@dataclass
class InteractionSet:
    """(card, merchant-index, timestamp) triples after the pretrain cutoff."""

    cards: np.ndarray        # [n] int64, positions into the card-embedding rows
    merchants: np.ndarray    # [n] int64, merchant vocabulary indices
    timestamps: np.ndarray   # [n] float64
    n_merchants: int
    cutoff: float

    def __post_init__(self):
        if len(self.timestamps) and self.timestamps.min() < self.cutoff:
            raise ValueError("interactions must lie after the pretrain cutoff")

    def __len__(self) -> int:
        return len(self.cards)

    def temporal_split(self, train_frac: float = 0.6, val_frac: float = 0.2,
                       ) -> dict[str, "InteractionSet"]:
        order = np.lexsort((self.cards, self.timestamps))
        n = len(order)
        a = int(n * train_frac)
        b = int(n * (train_frac + val_frac))
        out = {}
        for name, idx in (("train", order[:a]), ("val", order[a:b]), ("test", order[b:])):
            out[name] = InteractionSet(self.cards[idx], self.merchants[idx],
                                       self.timestamps[idx], self.n_merchants,
                                       self.cutoff)
        return out


def build_interactions(raw, vocab: Vocabulary, cutoff: float,
                       card_index: dict[int, int]) -> InteractionSet:
    """Collect post-cutoff (card, merchant) events for cards with a known
    pre-cutoff embedding row; unseen merchants map to the OOV index."""
    cards, merchants, ts = [], [], []
    for txn in raw:
        if txn.timestamp < cutoff or txn.card_id not in card_index:
            continue
        cards.append(card_index[txn.card_id])
        merchants.append(vocab.lookup(txn.values["merchant"]))
        ts.append(txn.timestamp)
    return InteractionSet(np.array(cards, dtype=np.int64),
                          np.array(merchants, dtype=np.int64),
                          np.array(ts, dtype=np.float64),
                          vocab.cardinality, cutoff)


@dataclass
class TowerConfig:
    embedding_source: str = "pretrained_frozen"
    projection_dim: int = 64
    n_negative: int = 256
    k_values: tuple = (1, 5, 10, 20)
    epochs: int = 10
    learning_rate: float = 1e-3
    batch_size: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.embedding_source not in EMBEDDING_SOURCES:
            raise ValueError(f"unknown embedding source {self.embedding_source!r}")
        if any(k < 1 for k in self.k_values):
            raise ValueError("K values must be >= 1")


class _Tower(nn.Module):
    def __init__(self, base: torch.Tensor, frozen: bool, out_dim: int):
        super().__init__()
        self.base = nn.Embedding(base.shape[0], base.shape[1])
        with torch.no_grad():
            self.base.weight.copy_(base)
        self.base.weight.requires_grad_(not frozen)
        self.proj = nn.Sequential(
            nn.Linear(base.shape[1], out_dim), nn.GELU(), nn.Linear(out_dim, out_dim),
        )

    def forward(self, idx: torch.Tensor) -> torch.Tensor:
        return self.proj(self.base(idx))


class TwoTowerModel(nn.Module):
    """score(card, merchant) = dot of the two tower outputs."""

    def __init__(self, card_base: np.ndarray, merchant_base: np.ndarray,
                 cfg: TowerConfig):
        super().__init__()
        frozen = cfg.embedding_source == "pretrained_frozen"
        self.cfg = cfg
        self.card_tower = _Tower(torch.from_numpy(card_base.astype(np.float32)),
                                 frozen, cfg.projection_dim)
        self.merchant_tower = _Tower(torch.from_numpy(merchant_base.astype(np.float32)),
                                     frozen, cfg.projection_dim)

    def score_all(self, card_rows: torch.Tensor) -> torch.Tensor:
        """[len(card_rows), n_merchants] scores against the full vocabulary."""
        u = self.card_tower(card_rows)
        m = self.merchant_tower(torch.arange(self.merchant_tower.base.num_embeddings))
        return u @ m.t()


def _scratch_base(n_rows: int, dim: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 11])
    return (rng.standard_normal((n_rows, dim)) * 0.1).astype(np.float32)


def make_towers(card_embeddings: np.ndarray, merchant_table: np.ndarray,
                cfg: TowerConfig) -> TwoTowerModel:
    """Both arms share the architecture; only initialization/freezing differ."""
    torch.manual_seed(cfg.seed)
    if cfg.embedding_source == "pretrained_frozen":
        return TwoTowerModel(card_embeddings, merchant_table, cfg)
    card_base = _scratch_base(card_embeddings.shape[0], card_embeddings.shape[1], cfg.seed)
    merch_base = _scratch_base(merchant_table.shape[0], merchant_table.shape[1],
                               cfg.seed + 1)
    return TwoTowerModel(card_base, merch_base, cfg)


def train_two_tower(model: TwoTowerModel, train_set: InteractionSet,
                    cfg: TowerConfig) -> TwoTowerModel:
    """Sampled-softmax retrieval training: in-batch positives plus a shared
    uniform negative set as candidates, cross-entropy on the own positive."""
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=cfg.learning_rate)
    n = len(train_set)
    if n == 0:
        return model
    cards = torch.from_numpy(train_set.cards)
    merchants = torch.from_numpy(train_set.merchants)
    n_merch = model.merchant_tower.base.num_embeddings
    for epoch in range(cfg.epochs):
        order = torch.from_numpy(
            np.random.default_rng([cfg.seed, 7, epoch]).permutation(n))
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            u = model.card_tower(cards[idx])
            pos = model.merchant_tower(merchants[idx])
            gen = torch.Generator().manual_seed(cfg.seed * 65537 + epoch * 331 + lo)
            neg_idx = torch.randint(n_merch, (cfg.n_negative,), generator=gen)
            neg = model.merchant_tower(neg_idx)
            cand = torch.cat([pos, neg], dim=0)          # [B + N, e]
            z = u @ cand.t()                              # [B, B + N]
            labels = torch.arange(len(idx))
            loss = nn.functional.cross_entropy(z, labels)
            opt.zero_grad()
            loss.backward()
            opt.step()
    return model


def rank_of_truth(scores: np.ndarray, truth: int) -> int:
    """Descending stable-sort position of the true item (1-based)."""
    s = scores[truth]
    greater = int(np.sum(scores > s))
    tied_before = int(np.sum((scores == s) & (np.arange(len(scores)) < truth)))
    return 1 + greater + tied_before


def hr_ndcg(model: TwoTowerModel, test_set: InteractionSet,
            k_values: tuple = (1, 5, 10, 20), batch_size: int = 512) -> dict:
    """HR@K and NDCG@K ranking the true merchant against all merchants."""
    ranks = []
    with torch.no_grad():
        for lo in range(0, len(test_set), batch_size):
            cards = torch.from_numpy(test_set.cards[lo:lo + batch_size])
            scores = model.score_all(cards).numpy()
            for row, truth in zip(scores, test_set.merchants[lo:lo + batch_size]):
                ranks.append(rank_of_truth(row, int(truth)))
    ranks_arr = np.array(ranks)
    table: dict = {"n": len(ranks_arr)}
    for k in k_values:
        hit = ranks_arr <= k
        table[f"hr@{k}"] = float(hit.mean()) if len(ranks_arr) else None
        gains = np.where(hit, 1.0 / np.log2(ranks_arr + 1.0), 0.0)
        table[f"ndcg@{k}"] = float(gains.mean()) if len(ranks_arr) else None
    return table


def run_comparison(card_embeddings: np.ndarray, merchant_table: np.ndarray,
                   interactions: InteractionSet, cfg: TowerConfig) -> dict:
    """Train and evaluate both arms on the same split; emits the paper-style
    comparison table."""
    parts = interactions.temporal_split()
    out: dict = {"k_values": list(cfg.k_values), "arms": {}}
    for source in EMBEDDING_SOURCES:
        arm_cfg = TowerConfig(**{**cfg.__dict__, "embedding_source": source})
        model = make_towers(card_embeddings, merchant_table, arm_cfg)
        train_two_tower(model, parts["train"], arm_cfg)
        out["arms"][source] = hr_ndcg(model, parts["test"], arm_cfg.k_values)
    return out
