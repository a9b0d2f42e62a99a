"""Round 6: embedding-structure push: tiny init, more epochs, cosine probes."""
import ctypes
import gc
import json
import time

import numpy as np
import torch
from sklearn.linear_model import LogisticRegression
from sklearn.metrics import silhouette_score
from sklearn.model_selection import train_test_split

from txn_foundry import syngen, trainer
from txn_foundry.corpus import build_corpus, batches
from txn_foundry.model import ModelConfig, TransactionModel
from txn_foundry.objective import NegativeSamplingPlan, batch_losses, next_key
import txn_foundry.eval as ev

torch.set_num_threads(1)
libc = ctypes.CDLL("libc.so.6")

WORLD = syngen.WorldConfig(n_cards=10_000, n_merchants=2000, n_countries=12,
                           n_categories=12, n_cities=60, time_span_days=780,
                           abnormal_rate=0.05, seed=11, txns_per_card=18)
MC = dict(hidden_dim=96, n_layers=2, n_heads=4, input_module_layers=2,
          ff_mult=2, max_seq_len=64)

t0 = time.time()
raw = list(syngen.generate(WORLD))
layout, bounds, parts = build_corpus(raw, span_seconds=WORLD.time_span_days * syngen.DAY,
                                     max_seq_len=64)
truth = syngen.ground_truth(WORLD)
vocab = layout.schema.vocabulary("merchant")
del raw
gc.collect(); libc.malloc_trim(0)
print(f"corpus {time.time()-t0:.0f}s", flush=True)


def structure(model):
    table = model.export_embedding_table("merchant").matrix
    rows, cats, ctrys = [], [], []
    for i in range(vocab.cardinality - 2):
        tok = vocab.token(i)
        if tok in truth:
            rows.append(table[i])
            cats.append(truth[tok]["category"])
            ctrys.append(truth[tok]["country"])
    X = np.array(rows)
    Xn = X / (np.linalg.norm(X, axis=1, keepdims=True) + 1e-12)
    out = {}
    for tag, M in (("raw", X), ("cos", Xn)):
        Xtr, Xte, ytr, yte = train_test_split(M, cats, test_size=0.25, random_state=0)
        out[f"probe_{tag}"] = round(LogisticRegression(max_iter=2000)
                                    .fit(Xtr, ytr).score(Xte, yte), 3)
    rng = np.random.default_rng(0)
    by = {}
    for v, c in zip(X, ctrys):
        by.setdefault(c, []).append(v)
    top = sorted(by, key=lambda c: -len(by[c]))[:10]
    sample, groups = [], []
    for c in top:
        idx = rng.choice(len(by[c]), size=min(50, len(by[c])), replace=False)
        sample.extend(np.array(by[c])[idx])
        groups.extend([c] * len(idx))
    sample = np.array(sample)
    for tag, metric in (("euc", "euclidean"), ("cos", "cosine")):
        sil = float(silhouette_score(sample, groups, metric=metric))
        rand = [float(silhouette_score(sample,
                                       np.random.default_rng(r + 1).permutation(groups),
                                       metric=metric)) for r in range(100)]
        out[f"sil_{tag}"] = round(sil, 4)
        out[f"rp95_{tag}"] = round(float(np.percentile(rand, 95)), 4)
    return out


torch.manual_seed(0)
m = TransactionModel(layout.schema, ModelConfig(**MC, embedding_init_std=0.02))
opt = torch.optim.AdamW(m.parameters(), lr=1e-3, weight_decay=0.01)
only = {next_key("merchant")}
step = 0
for epoch in range(8):
    te = time.time()
    for b in batches(parts["train"], layout, 128, seed=trainer._epoch_seed(0, epoch)):
        _, out = m(b)
        plan = NegativeSamplingPlan(strategy="shared", n_negative=1024,
                                    seed=trainer._step_seed(0, step))
        losses, _ = batch_losses(m, out, b, plan, only=only)
        loss = next(iter(losses.values()))
        opt.zero_grad(); loss.backward()
        torch.nn.utils.clip_grad_norm_(m.parameters(), 1.0)
        opt.step(); step += 1
    row = {"epoch": epoch, "sec": round(time.time()-te)}
    if epoch in (3, 5, 7):
        rep = ev.evaluate_model(m, parts["test"], batch_size=128)
        row["prec1"] = round(rep.prec_at_1["merchant"], 4)
        row.update(structure(m))
    print("std0.02", json.dumps(row), flush=True)
    gc.collect(); libc.malloc_trim(0)
print(f"TOTAL {time.time()-t0:.0f}s", flush=True)
