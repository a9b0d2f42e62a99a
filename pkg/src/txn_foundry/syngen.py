"""Deterministic synthetic transaction-stream generator.

Stands in for a real payment corpus: every merchant carries a planted
(country, city, category) identity, every card has a home country, a small
set of preferred merchants, and a long-tail exploration habit. Abnormal
transactions are injected at a configurable rate with off-profile merchants
and inflated amounts, and the response code is a noisy function of the
abnormal flag and the amount, so both current-signal heads have learnable
structure. The planted assignments are recoverable via ``ground_truth`` for
evaluation only.

Determinism: each card owns an independent, seed-derived RNG stream, and the
global interleaving is a timestamp-ordered merge, so output is byte-identical
for a fixed (seed, config) regardless of how generation is parallelized.
"""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, asdict, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .schema import (
    AttrKind,
    AttrRole,
    AttrScope,
    AttributeSchema,
)

DAY = 86400.0

# Attribute template: (name, kind, scope, roles, is_pivot). Cardinalities are
# only known once vocabularies are built from a generated stream, so the
# template carries none.
ATTRIBUTE_TEMPLATE = [
    ("issuer_country", AttrKind.CATEGORICAL, AttrScope.STATIC, {AttrRole.INPUT}, False),
    ("card_tier", AttrKind.CATEGORICAL, AttrScope.STATIC, {AttrRole.INPUT}, False),
    ("credit_limit", AttrKind.NUMERICAL, AttrScope.STATIC, {AttrRole.INPUT}, False),
    ("merchant", AttrKind.CATEGORICAL, AttrScope.DYNAMIC,
     {AttrRole.INPUT, AttrRole.NEXT_TARGET}, False),
    ("merchant_country", AttrKind.CATEGORICAL, AttrScope.DYNAMIC,
     {AttrRole.INPUT, AttrRole.NEXT_TARGET}, False),
    ("merchant_city", AttrKind.CATEGORICAL, AttrScope.DYNAMIC,
     {AttrRole.INPUT, AttrRole.NEXT_TARGET}, False),
    ("merchant_category", AttrKind.CATEGORICAL, AttrScope.DYNAMIC,
     {AttrRole.INPUT, AttrRole.NEXT_TARGET}, False),
    ("channel", AttrKind.CATEGORICAL, AttrScope.DYNAMIC,
     {AttrRole.INPUT, AttrRole.NEXT_TARGET}, False),
    ("amount", AttrKind.NUMERICAL, AttrScope.DYNAMIC,
     {AttrRole.INPUT, AttrRole.NEXT_TARGET}, False),
    ("time_gap", AttrKind.NUMERICAL, AttrScope.DYNAMIC,
     {AttrRole.INPUT, AttrRole.NEXT_TARGET}, False),
    ("response_code", AttrKind.CATEGORICAL, AttrScope.DYNAMIC,
     {AttrRole.CURRENT_SIGNAL}, False),
    ("abnormal_flag", AttrKind.CATEGORICAL, AttrScope.DYNAMIC,
     {AttrRole.CURRENT_SIGNAL}, True),
]

CHANNELS = ("pos", "ecom", "atm")


@dataclass(frozen=True)
class WorldConfig:
    """Knobs of the synthetic world. Same (seed, config) -> identical output."""

    n_cards: int = 1000
    n_merchants: int = 500
    n_countries: int = 10
    n_categories: int = 10
    n_cities: int = 40
    time_span_days: int = 780
    abnormal_rate: float = 0.05
    seed: int = 0
    txns_per_card: float = 20.0  # mean; per-card counts are long-tailed around it

    def __post_init__(self):
        for name in ("n_cards", "n_merchants", "n_countries", "n_categories",
                     "n_cities", "time_span_days"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not (0.0 <= self.abnormal_rate <= 1.0):
            raise ValueError("abnormal_rate must be in [0, 1]")
        if self.n_merchants < self.n_cities:
            raise ValueError("n_merchants must be >= n_cities")
        if self.n_merchants < self.n_categories:
            raise ValueError("n_merchants must be >= n_categories")
        if self.txns_per_card <= 0:
            raise ValueError("txns_per_card must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "WorldConfig":
        return cls(**d)


@dataclass
class RawTransaction:
    card_id: int
    timestamp: float
    values: dict  # attribute name -> raw value (float or token string)

    def __post_init__(self):
        if self.values.get("amount", 1.0) <= 0:
            raise ValueError("amount must be positive")
        if self.values.get("abnormal_flag") not in ("0", "1"):
            raise ValueError("abnormal_flag must be '0' or '1'")


def merchant_token(m: int) -> str:
    return f"M{m:06d}"


def country_token(c: int) -> str:
    return f"C{c:03d}"


def city_token(c: int) -> str:
    return f"Y{c:04d}"


def category_token(g: int) -> str:
    return f"G{g:03d}"


class _World:
    """Latent assignments shared by all cards, derived from the seed alone."""

    def __init__(self, config: WorldConfig):
        self.config = config
        rng = np.random.default_rng([config.seed, 1])
        # Round-robin city->country keeps every country populated.
        self.city_country = np.arange(config.n_cities) % config.n_countries
        self.merchant_city = rng.integers(0, config.n_cities, size=config.n_merchants)
        self.merchant_country = self.city_country[self.merchant_city]
        self.merchant_category = rng.integers(0, config.n_categories,
                                              size=config.n_merchants)
        # Zipf-ish merchant popularity for exploration / off-profile draws.
        ranks = rng.permutation(config.n_merchants)
        pop = 1.0 / (ranks + 10.0)
        self.merchant_popularity = pop / pop.sum()
        # Per-category log-normal amount parameters (long-tail by design).
        self.cat_log_mu = rng.uniform(2.5, 5.0, size=config.n_categories)
        self.cat_log_sigma = rng.uniform(0.4, 0.9, size=config.n_categories)
        # Merchants grouped by country for home-biased preference draws.
        self.merchants_by_country = [
            np.flatnonzero(self.merchant_country == c) for c in range(config.n_countries)
        ]


def ground_truth(config: WorldConfig) -> dict:
    """Planted merchant -> (country, city, category) map, for evaluation only."""
    world = _World(config)
    return {
        merchant_token(m): {
            "country": country_token(int(world.merchant_country[m])),
            "city": city_token(int(world.merchant_city[m])),
            "category": category_token(int(world.merchant_category[m])),
        }
        for m in range(config.n_merchants)
    }


def _card_stream(config: WorldConfig, world: _World, card_id: int) -> list[RawTransaction]:
    rng = np.random.default_rng([config.seed, 2, card_id])
    span = config.time_span_days * DAY

    home = int(rng.integers(0, config.n_countries))
    tier = int(rng.choice(4, p=[0.5, 0.3, 0.15, 0.05]))
    credit_limit = float(np.round(rng.lognormal(8.0 + 0.5 * tier, 0.5), 2))
    spend_mult = rng.lognormal(0.2 * tier, 0.3)

    # Preferred merchants: home-country merchants in the card's preferred
    # categories first, then other home-country ones, then anywhere. This
    # plants recoverable country AND category co-occurrence structure.
    n_pref_cats = min(2, config.n_categories)
    pref_cats = rng.choice(config.n_categories, size=n_pref_cats, replace=False)
    local = world.merchants_by_country[home]
    local_pref = local[np.isin(world.merchant_category[local], pref_cats)]
    prefs: list[int] = []
    for pool, quota in ((local_pref, 6), (local, 7), (np.arange(config.n_merchants), 8)):
        remaining = np.setdiff1d(pool, np.array(prefs, dtype=np.int64))
        take = min(quota - len(prefs), len(remaining))
        if take > 0:
            w = world.merchant_popularity[remaining]
            prefs.extend(rng.choice(remaining, size=take, replace=False,
                                    p=w / w.sum()))
    prefs = np.array(prefs)
    pref_w = 0.5 ** np.arange(len(prefs))
    pref_w /= pref_w.sum()
    explore_p = 0.12

    mean_count = rng.lognormal(math.log(config.txns_per_card), 0.5)
    mean_gap = span / max(mean_count, 1.0)
    start = rng.uniform(0.0, 0.25 * span)

    # Draw gaps in chunks until the span is covered, then trim.
    chunk = int(max(8, mean_count * 2))
    gaps = rng.exponential(mean_gap, size=chunk)
    while start + gaps.sum() < span:
        gaps = np.concatenate([gaps, rng.exponential(mean_gap, size=chunk)])
    times = start + np.cumsum(gaps)
    times = times[times < span]
    t = len(times)
    if t == 0:
        return []

    abnormal = rng.random(t) < config.abnormal_rate
    merchants = np.empty(t, dtype=np.int64)
    pref_draw = rng.choice(prefs, size=t, p=pref_w)
    pop_draw = rng.choice(config.n_merchants, size=t, p=world.merchant_popularity)
    explore = rng.random(t) < explore_p
    merchants[:] = np.where(explore, pop_draw, pref_draw)
    # Off-profile merchants for abnormal transactions: uniform over the world.
    uniform_draw = rng.integers(0, config.n_merchants, size=t)
    merchants[abnormal] = uniform_draw[abnormal]

    cats = world.merchant_category[merchants]
    mu = world.cat_log_mu[cats] + math.log(spend_mult)
    mu = np.where(abnormal, mu + 1.8, mu)
    amounts = np.round(np.exp(rng.normal(mu, world.cat_log_sigma[cats])), 2)
    amounts = np.maximum(amounts, 0.01)

    channels = rng.choice(len(CHANNELS), size=t, p=[0.6, 0.35, 0.05])

    # Declines: near-certain for abnormal behavior, else rare with a mild
    # amount dependence, so the response head has signal beyond the flag.
    p_decline = np.where(
        abnormal, 0.9,
        np.minimum(0.3, 0.02 + 0.04 * np.maximum(0.0, np.log1p(amounts) - 4.0)),
    )
    declined = rng.random(t) < p_decline

    first_gap = times[0] - start
    gap_attr = np.concatenate([[first_gap], np.diff(times)])

    out = []
    for i in range(t):
        m = int(merchants[i])
        out.append(RawTransaction(
            card_id=card_id,
            timestamp=float(times[i]),
            values={
                "issuer_country": country_token(home),
                "card_tier": f"T{tier}",
                "credit_limit": credit_limit,
                "merchant": merchant_token(m),
                "merchant_country": country_token(int(world.merchant_country[m])),
                "merchant_city": city_token(int(world.merchant_city[m])),
                "merchant_category": category_token(int(world.merchant_category[m])),
                "channel": CHANNELS[int(channels[i])],
                "amount": float(amounts[i]),
                "time_gap": float(gap_attr[i]),
                "response_code": "declined" if declined[i] else "approved",
                "abnormal_flag": "1" if abnormal[i] else "0",
            },
        ))
    return out


def generate(config: WorldConfig, schema: AttributeSchema | None = None) -> Iterator[RawTransaction]:
    """Yield the full synthetic stream, globally ordered by timestamp.

    Ties break on (card_id, per-card order) so the interleaving is stable.
    If a schema is supplied, its attribute names must cover the generator's.
    """
    if schema is not None:
        missing = [name for name, *_ in ATTRIBUTE_TEMPLATE if name not in schema]
        if missing:
            raise ValueError(f"schema is missing generator attributes: {missing}")
    world = _World(config)
    streams = (
        (((txn.timestamp, txn.card_id, i), txn)
         for i, txn in enumerate(_card_stream(config, world, card)))
        for card in range(config.n_cards)
    )
    for _, txn in heapq.merge(*streams, key=lambda kv: kv[0]):
        yield txn


# -- on-disk format -------------------------------------------------------

RAW_FILE = "transactions.jsonl"
RAW_MANIFEST = "manifest.json"
_FIELD_ORDER = [name for name, *_ in ATTRIBUTE_TEMPLATE]


def write_raw(stream: Iterable[RawTransaction], out_dir: str | Path,
              config: WorldConfig) -> dict:
    """Write newline-delimited records plus a manifest; returns the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n = 0
    n_abnormal = 0
    with (out / RAW_FILE).open("w") as fh:
        for txn in stream:
            rec = {"card_id": txn.card_id, "timestamp": txn.timestamp}
            for name in _FIELD_ORDER:
                rec[name] = txn.values[name]
            fh.write(json.dumps(rec) + "\n")
            n += 1
            n_abnormal += txn.values["abnormal_flag"] == "1"
    manifest = {
        "format_version": 1,
        "config": config.to_dict(),
        "seed": config.seed,
        "n_transactions": n,
        "n_abnormal": n_abnormal,
        "fields": ["card_id", "timestamp"] + _FIELD_ORDER,
    }
    (out / RAW_MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def read_raw(data_dir: str | Path) -> Iterator[RawTransaction]:
    path = Path(data_dir) / RAW_FILE
    with path.open() as fh:
        for line in fh:
            rec = json.loads(line)
            card_id = rec.pop("card_id")
            ts = rec.pop("timestamp")
            yield RawTransaction(card_id=card_id, timestamp=ts, values=rec)


def read_manifest(data_dir: str | Path) -> dict:
    return json.loads((Path(data_dir) / RAW_MANIFEST).read_text())
