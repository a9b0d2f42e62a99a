"""Round 4: final recipe verification with memory hygiene."""
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
gc.collect()
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
    return round(acc, 3), round(sil, 4), round(float(np.percentile(rand, 95)), 4)


# A. treasure s0, 4 epochs, per-epoch metrics (manual loop, default init)
torch.manual_seed(0)
m = TransactionModel(layout.schema, ModelConfig(**MC))
opt = torch.optim.AdamW(m.parameters(), lr=1e-3, weight_decay=0.01)
from txn_foundry.objective import aggregate, pivot_key
pk = pivot_key(layout.schema)
step = 0
for epoch in range(4):
    te = time.time()
    for b in batches(parts["train"], layout, 256, seed=trainer._epoch_seed(0, epoch)):
        _, out = m(b)
        plan = NegativeSamplingPlan(seed=trainer._step_seed(0, step))
        losses, _ = batch_losses(m, out, b, plan)
        total = aggregate(losses, pk)
        opt.zero_grad(); total.backward()
        torch.nn.utils.clip_grad_norm_(m.parameters(), 1.0)
        opt.step(); step += 1
    val, _ = trainer.evaluate_losses(m, parts["val"], trainer.TrainConfig(), 0)
    rep = ev.evaluate_model(m, parts["test"])
    acc, sil, rp95 = probe_and_silhouette(m)
    print("treasure-s0", json.dumps({
        "epoch": epoch, "sec": round(time.time()-te), "val_pivot": round(val[pk], 5),
        "prec1": round(rep.prec_at_1["merchant"], 4),
        "auc": round(rep.auc_abnormal, 4), "smape": round(rep.smape["amount"], 3),
        "probe": acc, "sil": sil, "rp95": rp95}), flush=True)
del m, opt
gc.collect()

# B. merchant-only, small init, 6 epochs, both strategies, per-epoch prec1
for strat, n_neg in (("shared", 1024), ("independent", 5)):
    torch.manual_seed(0)
    cfg_small = ModelConfig(**MC, embedding_init_std=0.15)
    m = TransactionModel(layout.schema, cfg_small)
    opt = torch.optim.AdamW(m.parameters(), lr=1e-3, weight_decay=0.01)
    only = {next_key("merchant")}
    step = 0
    for epoch in range(6):
        te = time.time()
        for b in batches(parts["train"], layout, 256, seed=trainer._epoch_seed(0, epoch)):
            _, out = m(b)
            plan = NegativeSamplingPlan(strategy=strat, n_negative=n_neg,
                                        seed=trainer._step_seed(0, step))
            losses, _ = batch_losses(m, out, b, plan, only=only)
            loss = next(iter(losses.values()))
            opt.zero_grad(); loss.backward()
            torch.nn.utils.clip_grad_norm_(m.parameters(), 1.0)
            opt.step(); step += 1
        rep = ev.evaluate_model(m, parts["test"])
        acc, sil, rp95 = probe_and_silhouette(m)
        print(f"merchant_only-{strat}", json.dumps({
            "epoch": epoch, "sec": round(time.time()-te),
            "prec1": round(rep.prec_at_1["merchant"], 4),
            "probe": acc, "sil": sil, "rp95": rp95}), flush=True)
    del m, opt
    gc.collect()

print(f"TOTAL {time.time()-t0:.0f}s", flush=True)
