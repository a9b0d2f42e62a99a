"""Round 2: embedding-structure trajectory + merchant-only sampling ablation."""
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
from txn_foundry.objective import NegativeSamplingPlan, aggregate, batch_losses, pivot_key
import txn_foundry.eval as ev

torch.set_num_threads(1)

WORLD = syngen.WorldConfig(n_cards=10_000, n_merchants=2000, n_countries=12,
                           n_categories=12, n_cities=60, time_span_days=780,
                           abnormal_rate=0.05, seed=11, txns_per_card=18)
MC = ModelConfig(hidden_dim=96, n_layers=2, n_heads=4, input_module_layers=2,
                 ff_mult=2, max_seq_len=64)

t0 = time.time()
raw = list(syngen.generate(WORLD))
layout, bounds, parts = build_corpus(raw, span_seconds=WORLD.time_span_days * syngen.DAY,
                                     max_seq_len=64)
truth = syngen.ground_truth(WORLD)
vocab = layout.schema.vocabulary("merchant")
print(f"corpus {time.time()-t0:.0f}s", flush=True)


def probe_and_silhouette(model):
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
    acc = LogisticRegression(max_iter=2000).fit(Xtr, ytr).score(Xte, yte)
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
    rand = [float(silhouette_score(sample, np.random.default_rng(r + 1).permutation(groups)))
            for r in range(100)]
    return acc, sil, float(np.percentile(rand, 95))


# -- treasure trajectory with per-epoch probe --------------------------------
torch.manual_seed(0)
m = TransactionModel(layout.schema, MC)
opt = torch.optim.AdamW(m.parameters(), lr=1e-3, weight_decay=0.01)
pk = pivot_key(layout.schema)
step = 0
for epoch in range(6):
    te = time.time()
    for b in batches(parts["train"], layout, 256, seed=trainer._epoch_seed(0, epoch)):
        _, out = m(b)
        plan = NegativeSamplingPlan(seed=trainer._step_seed(0, step))
        losses, _ = batch_losses(m, out, b, plan)
        total = aggregate(losses, pk)
        opt.zero_grad(); total.backward()
        torch.nn.utils.clip_grad_norm_(m.parameters(), 1.0)
        opt.step(); step += 1
    val_losses, _ = trainer.evaluate_losses(m, parts["val"],
                                            trainer.TrainConfig(), 0)
    rep = ev.evaluate_model(m, parts["test"])
    acc, sil, rp95 = probe_and_silhouette(m)
    print(json.dumps({"epoch": epoch, "sec": round(time.time()-te),
                      "val_pivot": round(val_losses[pk], 5),
                      "prec1": round(rep.prec_at_1["merchant"], 4),
                      "auc": round(rep.auc_abnormal, 4),
                      "smape": round(rep.smape["amount"], 3),
                      "probe": round(acc, 3), "sil": round(sil, 4),
                      "rand_p95": round(rp95, 4)}), flush=True)

# -- merchant-only sampling ablation ------------------------------------------
for seed in (0, 1, 2):
    row = {}
    for strat, n_neg in (("shared", 1024), ("independent", 5)):
        cfg = trainer.TrainConfig(epochs=3, learning_rate=1e-3, batch_size=256,
                                  seed=seed, task_mode="merchant_only",
                                  sampling_strategy=strat, n_negative=n_neg)
        res = trainer.train(layout, parts, MC, cfg)
        rep = ev.evaluate_model(res.model, parts["test"])
        row[strat] = {"prec1": round(rep.prec_at_1["merchant"], 4),
                      "best_epoch": res.best_epoch}
    print(f"merchant_only-s{seed}", json.dumps(row), flush=True)
print(f"TOTAL {time.time()-t0:.0f}s", flush=True)
