"""Calibration: runs the exact acceptance-scale experiments and dumps results."""
import json
import time

import numpy as np
import torch

from txn_foundry import embedsvc, rec, syngen, trainer
from txn_foundry.corpus import build_corpus
from txn_foundry.model import ModelConfig
import txn_foundry.eval as ev

torch.set_num_threads(1)

WORLD = syngen.WorldConfig(n_cards=10_000, n_merchants=2000, n_countries=12,
                           n_categories=12, n_cities=60, time_span_days=780,
                           abnormal_rate=0.05, seed=11, txns_per_card=18)
MODEL = dict(hidden_dim=96, n_layers=2, n_heads=4, input_module_layers=2,
             ff_mult=2, max_seq_len=64)
TRAIN = dict(epochs=3, learning_rate=1e-3, batch_size=256)

t0 = time.time()
raw = list(syngen.generate(WORLD))
layout, bounds, parts = build_corpus(raw, span_seconds=WORLD.time_span_days * syngen.DAY,
                                     max_seq_len=64)
print(f"corpus ready {time.time()-t0:.0f}s", flush=True)

results = {}
models = {}
for seed in (0, 1, 2):
    for run_name, kwargs in (
        ("treasure", dict(aggregation_mode="treasure", sampling_strategy="shared")),
        ("simple", dict(aggregation_mode="simple", sampling_strategy="shared")),
        ("independent", dict(aggregation_mode="treasure",
                             sampling_strategy="independent", n_negative=5)),
    ):
        key = f"{run_name}-s{seed}"
        t1 = time.time()
        cfg = trainer.TrainConfig(seed=seed, **TRAIN, **kwargs)
        res = trainer.train(layout, parts, ModelConfig(**MODEL), cfg)
        rep = ev.evaluate_model(res.model, parts["test"])
        results[key] = {
            "prec1_merchant": rep.prec_at_1["merchant"],
            "smape_amount": rep.smape["amount"],
            "auc": rep.auc_abnormal,
            "minutes": (time.time() - t1) / 60,
        }
        models[key] = res.model
        print(key, json.dumps(results[key]), flush=True)

# Embedding structure on the seed-0 treasure model
m = models["treasure-s0"]
truth = syngen.ground_truth(WORLD)
table = m.export_embedding_table("merchant").matrix
vocab = layout.schema.vocabulary("merchant")
labels_cat, labels_ctry, rows = [], [], []
for i in range(vocab.cardinality - 2):
    tok = vocab.token(i)
    if tok in truth:
        rows.append(table[i])
        labels_cat.append(truth[tok]["category"])
        labels_ctry.append(truth[tok]["country"])
X = np.array(rows)
from sklearn.linear_model import LogisticRegression
from sklearn.model_selection import train_test_split
from sklearn.metrics import silhouette_score
Xtr, Xte, ytr, yte = train_test_split(X, labels_cat, test_size=0.25, random_state=0)
probe = LogisticRegression(max_iter=2000).fit(Xtr, ytr)
acc = probe.score(Xte, yte)
# silhouette: 50 per country x 10 most common countries
rng = np.random.default_rng(0)
by = {}
for v, c in zip(X, labels_ctry):
    by.setdefault(c, []).append(v)
top = sorted(by, key=lambda c: -len(by[c]))[:10]
sample, groups = [], []
for c in top:
    idx = rng.choice(len(by[c]), size=min(50, len(by[c])), replace=False)
    sample.extend(np.array(by[c])[idx])
    groups.extend([c] * len(idx))
sample = np.array(sample)
sil = silhouette_score(sample, groups)
rand_sils = []
for r in range(100):
    perm = np.random.default_rng(r + 1).permutation(groups)
    rand_sils.append(silhouette_score(sample, perm))
results["embedding_structure"] = {
    "probe_acc": acc, "chance": 1.0 / WORLD.n_categories,
    "silhouette": float(sil), "rand_p95": float(np.percentile(rand_sils, 95)),
}
print("embedding_structure", json.dumps(results["embedding_structure"]), flush=True)

# Two-tower on seed-0 treasure embeddings
import tempfile
with tempfile.TemporaryDirectory() as td:
    embedsvc.export_bundle(m, parts["train"], td, merchant_truth=truth,
                           cutoff=bounds.train_end)
    bundle = embedsvc.EmbeddingBundle(td)
    cards, card_ids = bundle.card_embeddings()
    card_index = {int(c): i for i, c in enumerate(card_ids)}
    inter = rec.build_interactions(raw, vocab, bounds.train_end, card_index)
    print("interactions:", len(inter), flush=True)
    for seed in (0, 1, 2):
        cfg = rec.TowerConfig(seed=seed, epochs=8)
        table_cmp = rec.run_comparison(cards, bundle.table("merchant"), inter, cfg)
        results[f"two_tower-s{seed}"] = {
            arm: {k: v for k, v in vals.items() if k in ("hr@10", "ndcg@10")}
            for arm, vals in table_cmp["arms"].items()}
        print(f"two_tower-s{seed}", json.dumps(results[f"two_tower-s{seed}"]), flush=True)

with open("/tmp/calibration.json", "w") as fh:
    json.dump(results, fh, indent=2)
print(f"TOTAL {time.time()-t0:.0f}s", flush=True)
