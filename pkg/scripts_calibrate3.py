"""Round 3: default init; simple-mode structure; long merchant-only ablation."""
import json
import time

import numpy as np
import torch
from sklearn.linear_model import LogisticRegression
from sklearn.metrics import silhouette_score
from sklearn.model_selection import train_test_split

from txn_foundry import embedsvc, rec, syngen, trainer
from txn_foundry.corpus import build_corpus, batches
from txn_foundry.model import ModelConfig, TransactionModel
from txn_foundry.objective import NegativeSamplingPlan, batch_losses, next_key
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
    return round(acc, 3), round(sil, 4), round(float(np.percentile(rand, 95)), 4)


# 1. treasure-s0, 3 epochs, default init, new generator
cfg = trainer.TrainConfig(epochs=3, learning_rate=1e-3, batch_size=256, seed=0)
res = trainer.train(layout, parts, MC, cfg)
rep = ev.evaluate_model(res.model, parts["test"])
acc, sil, rp95 = probe_and_silhouette(res.model)
print("treasure-s0", json.dumps({
    "best_epoch": res.best_epoch, "prec1": round(rep.prec_at_1["merchant"], 4),
    "auc": round(rep.auc_abnormal, 4), "smape": round(rep.smape["amount"], 3),
    "probe": acc, "sil": sil, "rand_p95": rp95}), flush=True)

# 2. simple-s0: structure + exports + two-tower
cfg = trainer.TrainConfig(epochs=3, learning_rate=1e-3, batch_size=256, seed=0,
                          aggregation_mode="simple")
res_simple = trainer.train(layout, parts, MC, cfg)
rep = ev.evaluate_model(res_simple.model, parts["test"])
acc, sil, rp95 = probe_and_silhouette(res_simple.model)
print("simple-s0", json.dumps({
    "best_epoch": res_simple.best_epoch, "prec1": round(rep.prec_at_1["merchant"], 4),
    "auc": round(rep.auc_abnormal, 4), "smape": round(rep.smape["amount"], 3),
    "probe": acc, "sil": sil, "rand_p95": rp95}), flush=True)

import tempfile
with tempfile.TemporaryDirectory() as td:
    embedsvc.export_bundle(res_simple.model, parts["train"], td,
                           merchant_truth=truth, cutoff=bounds.train_end)
    bundle = embedsvc.EmbeddingBundle(td)
    cards, card_ids = bundle.card_embeddings()
    card_index = {int(c): i for i, c in enumerate(card_ids)}
    inter = rec.build_interactions(iter(raw), vocab, bounds.train_end, card_index)
    for seed in (0, 1, 2):
        tc = rec.TowerConfig(seed=seed, epochs=8)
        cmp_table = rec.run_comparison(cards, bundle.table("merchant"), inter, tc)
        print(f"two_tower(simple)-s{seed}",
              json.dumps({arm: {k: round(v, 4) for k, v in vals.items()
                                if k in ("hr@10", "ndcg@10")}
                          for arm, vals in cmp_table["arms"].items()}), flush=True)

# 3. merchant-only, seed 0, 8 epochs, per-epoch prec1, both strategies
for strat, n_neg in (("shared", 1024), ("independent", 5)):
    torch.manual_seed(0)
    m = TransactionModel(layout.schema, MC)
    opt = torch.optim.AdamW(m.parameters(), lr=1e-3, weight_decay=0.01)
    only = {next_key("merchant")}
    step = 0
    curve = []
    for epoch in range(8):
        for b in batches(parts["train"], layout, 256, seed=trainer._epoch_seed(0, epoch)):
            _, out = m(b)
            plan = NegativeSamplingPlan(
                strategy=("shared" if strat == "shared" else "independent"),
                n_negative=n_neg, seed=trainer._step_seed(0, step))
            losses, _ = batch_losses(m, out, b, plan,
                                     only=only)
            (next(iter(losses.values()))).backward()
            torch.nn.utils.clip_grad_norm_(m.parameters(), 1.0)
            opt.step(); opt.zero_grad(); step += 1
        rep = ev.evaluate_model(m, parts["test"])
        curve.append(round(rep.prec_at_1["merchant"], 4))
        print(f"merchant_only-{strat} epoch {epoch}: prec1={curve[-1]}", flush=True)
    print(f"merchant_only-{strat} curve:", curve, flush=True)

print(f"TOTAL {time.time()-t0:.0f}s", flush=True)
