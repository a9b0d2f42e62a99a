"""Round 7: category-structure race (simple multi vs merchant-only) + re-verify."""
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
from txn_foundry.corpus import build_corpus
from txn_foundry.model import ModelConfig
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
    Xtr, Xte, ytr, yte = train_test_split(X, cats, test_size=0.25, random_state=0)
    probe = LogisticRegression(max_iter=2000).fit(Xtr, ytr).score(Xte, yte)
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
    sil = float(silhouette_score(sample, groups))
    rand = [float(silhouette_score(sample,
                                   np.random.default_rng(r + 1).permutation(groups)))
            for r in range(100)]
    return {"probe": round(probe, 3), "sil": round(sil, 4),
            "rp95": round(float(np.percentile(rand, 95)), 4)}


def run(tag, *, agg="simple", task="multi", strategy="shared", n_neg=None,
        epochs=4, std=0.02, bs=256):
    mc = ModelConfig(**MC, embedding_init_std=std)
    cfg = trainer.TrainConfig(epochs=epochs, learning_rate=1e-3, batch_size=bs,
                              seed=0, aggregation_mode=agg, task_mode=task,
                              sampling_strategy=strategy, n_negative=n_neg)
    te = time.time()
    result = trainer.train(layout, parts, mc, cfg)
    rep = ev.evaluate_model(result.model, parts["test"], batch_size=128)
    row = {"tag": tag, "epochs": epochs, "best_epoch": result.best_epoch,
           "min": round((time.time()-te)/60, 1),
           "prec1": round(rep.prec_at_1["merchant"], 4),
           "auc": round(rep.auc_abnormal, 4),
           "smape": round(rep.smape["amount"], 3)}
    row.update(structure(result.model))
    print(json.dumps(row), flush=True)
    del result
    gc.collect(); libc.malloc_trim(0)


run("simple-multi-std0.02-e4", agg="simple", epochs=4)
run("merchant-shared-std0.02-e12", task="merchant_only", strategy="shared",
    n_neg=1024, epochs=12, bs=128)
run("treasure-s0-e3", agg="treasure", epochs=3, std=None)
run("merchant-indep-std0.02-e4", task="merchant_only", strategy="independent",
    n_neg=5, epochs=4, bs=128)
run("merchant-shared-std0.02-e4", task="merchant_only", strategy="shared",
    n_neg=1024, epochs=4, bs=128)
print(f"TOTAL {time.time()-t0:.0f}s", flush=True)
