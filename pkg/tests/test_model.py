import math

import numpy as np
import pytest
import torch

from txn_foundry.corpus import SchemaLayout, build_schema, collate, group_and_sort
from txn_foundry.model import (
    EmbeddingTable,
    ModelConfig,
    TransactionModel,
    default_embedding_dim,
    load_checkpoint,
    logits,
    read_checkpoint,
    sample_categorical,
    sample_numerical,
    save_checkpoint,
)
from txn_foundry.syngen import WorldConfig, generate

TINY = ModelConfig(hidden_dim=16, n_layers=2, n_heads=2, input_module_layers=2,
                   ff_mult=2, max_seq_len=32)


@pytest.fixture(scope="module")
def world():
    cfg = WorldConfig(n_cards=30, n_merchants=25, n_countries=3, n_categories=3,
                      n_cities=6, time_span_days=120, abnormal_rate=0.1, seed=2,
                      txns_per_card=8)
    raw = list(generate(cfg))
    layout = SchemaLayout(build_schema(raw))
    seqs = group_and_sort(raw, layout)
    return cfg, layout, seqs


@pytest.fixture()
def tiny_model(world):
    _, layout, _ = world
    torch.manual_seed(0)
    return TransactionModel(layout.schema, TINY)


class TestConfig:
    def test_head_divisibility(self):
        with pytest.raises(ValueError):
            ModelConfig(hidden_dim=10, n_heads=4)

    def test_default_embedding_dim(self):
        assert default_embedding_dim(249, 256) == 32
        assert default_embedding_dim(2002, 256) == 56
        assert default_embedding_dim(4, 256) == 16
        assert default_embedding_dim(10 ** 8, 16) == 16  # capped at hidden

    def test_round_trip(self):
        cfg = ModelConfig(hidden_dim=64, n_heads=4, embedding_dims={"merchant": 24})
        assert ModelConfig.from_dict(cfg.to_dict()).to_dict() == cfg.to_dict()


class TestInputModule:
    def test_identical_vectors_share_weights(self, world, tiny_model):
        _, layout, seqs = world
        batch = collate(seqs[:4], layout)
        # duplicate one timestep's inputs at two positions
        num_cols = [layout.dyn_num.index(n) for n in layout.input_dyn_num]
        cat_cols = [layout.dyn_cat.index(n) for n in layout.input_dyn_cat]
        dyn_num = batch.dyn_num[:, :, num_cols].clone()
        dyn_cat = batch.dyn_cat[:, :, cat_cols].clone()
        dyn_num[0, 3] = dyn_num[0, 1]
        dyn_cat[0, 3] = dyn_cat[0, 1]
        reprs = tiny_model.dynamic_input(dyn_num, dyn_cat)
        assert torch.equal(reprs[0, 3], reprs[0, 1])

    def test_numeric_path_applies_shifted_log(self, world, tiny_model):
        _, layout, _ = world
        module = tiny_model.dynamic_input
        n_num = len(layout.input_dyn_num)
        n_cat = len(layout.input_dyn_cat)
        vals = torch.full((1, n_num), 3.14)
        idx = torch.zeros((1, n_cat), dtype=torch.int64)
        out = module(vals, idx)
        # replicate by hand: log1p -> numeric projection
        expected = module.numeric_proj(torch.log1p(vals))
        parts = [expected] + [module.embeddings[n](idx[..., i])
                              for i, n in enumerate(module.cat_names)]
        assert torch.equal(out, module.fuse(torch.cat(parts, dim=-1)))

    def test_category_index_retrieves_table_row(self, world, tiny_model):
        _, layout, _ = world
        vocab = layout.schema.vocabulary("merchant_country")
        tok = vocab.token(1)
        row = tiny_model.embeddings["merchant_country"](torch.tensor(vocab.lookup(tok)))
        assert torch.equal(row, tiny_model.table("merchant_country")[1])


class TestForward:
    def test_shapes_and_head_coverage(self, world, tiny_model):
        _, layout, seqs = world
        batch = collate(seqs[:6], layout)
        h, out = tiny_model(batch)
        assert h.shape == (6, batch.seq_len + 1, TINY.hidden_dim)
        assert set(out.next.mu) == set(layout.next_num)
        assert set(out.next.cat_head) == set(layout.next_cat)
        assert set(out.current.cat_head) == set(layout.sig_cat)
        assert set(out.current.mu) == set(layout.sig_num)
        for name in layout.next_num:
            assert out.next.mu[name].shape == (6, batch.seq_len)
            assert (out.next.sigma[name] > 0).all()

    def test_causality_random_probes(self, world, tiny_model):
        _, layout, seqs = world
        batch = collate(seqs[:4], layout)
        h0, out0 = tiny_model(batch)
        rng = np.random.default_rng(0)
        for _ in range(25):
            i = int(rng.integers(0, batch.batch_size))
            t_len = int(batch.lengths[i])
            if t_len < 2:
                continue
            j = int(rng.integers(1, t_len))  # perturb transaction j+1 (0-based j)
            perturbed = collate(seqs[:4], layout)
            perturbed.dyn_num[i, j] += 1.5
            perturbed.dyn_cat[i, j] = (perturbed.dyn_cat[i, j] + 1) % 2
            h1, out1 = tiny_model(perturbed)
            # positions strictly before the perturbed one are bit-identical
            assert torch.equal(h0[i, :j + 1], h1[i, :j + 1])
            name = layout.next_cat[0]
            assert torch.equal(out0.next.cat_head[name][i, :j],
                               out1.next.cat_head[name][i, :j])
            # and the perturbed position itself changed
            assert not torch.equal(h0[i, j + 1], h1[i, j + 1])

    def test_not_permutation_invariant(self, world, tiny_model):
        _, layout, seqs = world
        seq = next(s for s in seqs if s.t >= 4)
        batch = collate([seq], layout)
        h0, _ = tiny_model(batch)
        swapped = collate([seq], layout)
        for arr in (swapped.dyn_num, swapped.dyn_cat, swapped.sig_num, swapped.sig_cat):
            tmp = arr[0, 0].clone()
            arr[0, 0] = arr[0, 1]
            arr[0, 1] = tmp
        h1, _ = tiny_model(swapped)
        assert not torch.allclose(h0[0, -1], h1[0, -1])

    def test_zero_head_weights_give_uniform_logits(self, world, tiny_model):
        _, layout, seqs = world
        name = layout.next_cat[0]
        proj = tiny_model.next_head.cat_proj[name]
        with torch.no_grad():
            proj.weight.zero_()
            proj.bias.zero_()
        batch = collate(seqs[:2], layout)
        _, out = tiny_model(batch)
        z = logits(out.next.cat_head[name], tiny_model.table(name))
        assert torch.allclose(z, z[..., :1].expand_as(z))

    def test_rejects_overlong_sequence(self, world, tiny_model):
        _, layout, seqs = world
        long_seq = [s for s in seqs if s.t > 2]
        cfg = ModelConfig(hidden_dim=16, n_layers=1, n_heads=2, max_seq_len=2)
        torch.manual_seed(0)
        small = TransactionModel(layout.schema, cfg)
        with pytest.raises(ValueError, match="max_seq_len"):
            small(collate(long_seq[:1], layout))

    def test_padding_content_never_leaks_into_valid_positions(self, world, tiny_model):
        _, layout, seqs = world
        short = next(s for s in seqs if s.t == min(x.t for x in seqs))
        longer = max(seqs, key=lambda s: s.t)
        base = collate([short, longer], layout)
        h_base, _ = tiny_model(base)
        mod = collate([short, longer], layout)
        mod.dyn_num[0, short.t:] += 123.0
        mod.dyn_cat[0, short.t:] = 0
        h_mod, _ = tiny_model(mod)
        assert torch.equal(h_base[0, :short.t + 1], h_mod[0, :short.t + 1])
        assert torch.equal(h_base[1], h_mod[1])


class TestLogits:
    def test_one_hot_rows_argmax(self):
        table = torch.eye(5)
        head = torch.zeros(1, 1, 5)
        head[0, 0, 3] = 1.0
        z = logits(head, table)
        assert int(z.argmax()) == 3

    def test_matches_row_by_row_loop(self):
        rng = torch.Generator().manual_seed(4)
        head = torch.randn(2, 3, 6, generator=rng)
        table = torch.randn(11, 6, generator=rng)
        z = logits(head, table)
        for i in range(2):
            for j in range(3):
                for c in range(11):
                    expected = float(head[i, j] @ table[c])
                    assert abs(float(z[i, j, c]) - expected) < 1e-6


class TestSampling:
    def test_sigma_zero_limit(self):
        mu = torch.tensor([1.5])
        out = sample_numerical(mu, torch.tensor([1e-12]), seed=1)
        assert float(out) == pytest.approx(math.exp(1.5), rel=1e-6)

    def test_monte_carlo_log_mean(self):
        n = 100_000
        mu, sigma = 0.7, 1.3
        draw = sample_numerical(torch.full((n,), mu), torch.full((n,), sigma), seed=3)
        log_mean = float(torch.log(draw).mean())
        assert abs(log_mean - mu) < 3 * sigma / math.sqrt(n)

    def test_strictly_positive_and_deterministic(self):
        mu = torch.randn(50)
        sigma = torch.rand(50) + 0.1
        a = sample_numerical(mu, sigma, seed=9)
        b = sample_numerical(mu, sigma, seed=9)
        assert (a > 0).all()
        assert torch.equal(a, b)
        with pytest.raises(ValueError):
            sample_numerical(mu, torch.zeros(50), seed=0)

    def test_categorical_sampling_follows_logits(self):
        z = torch.tensor([[100.0, 0.0, 0.0]])
        assert int(sample_categorical(z, seed=5)) == 0


class TestEmbeddingExport:
    def test_table_row_count_and_round_trip(self, world, tiny_model, tmp_path):
        _, layout, _ = world
        table = tiny_model.export_embedding_table("merchant")
        assert table.matrix.shape[0] == layout.schema["merchant"].cardinality
        path = tmp_path / "merchant.npy"
        table.save(path)
        again = EmbeddingTable.load("merchant", path)
        np.testing.assert_array_equal(table.matrix.astype("<f4"), again.matrix)

    def test_unknown_attribute(self, tiny_model):
        with pytest.raises(KeyError):
            tiny_model.export_embedding_table("nope")

    def test_card_embedding_causality(self, world, tiny_model):
        _, layout, seqs = world
        seq = max(seqs, key=lambda s: s.t)
        shorter = next(s for s in seqs if s.t < seq.t)
        base = collate([seq, shorter], layout)
        e0 = tiny_model.card_embeddings(base)
        # changing the shorter card's padding must not change its embedding
        mod = collate([seq, shorter], layout)
        mod.dyn_num[1, shorter.t:] += 7.0
        e1 = tiny_model.card_embeddings(mod)
        assert torch.equal(e0[1], e1[1])
        # changing its actual last transaction must change it
        mod2 = collate([seq, shorter], layout)
        mod2.dyn_num[1, shorter.t - 1] += 7.0
        e2 = tiny_model.card_embeddings(mod2)
        assert not torch.equal(e0[1], e2[1])


class TestWeightSharing:
    def test_single_parameter_set_regardless_of_length(self, world, tiny_model):
        _, layout, seqs = world
        names = {n for n, _ in tiny_model.named_parameters()}
        by_len = [s for s in seqs if s.t >= 3][:1] + [s for s in seqs if s.t <= 2][:1]
        for chunk in (by_len[:1], by_len):
            tiny_model(collate(chunk, layout))
        assert names == {n for n, _ in tiny_model.named_parameters()}
        # exactly one dynamic input module and one output module per head
        dyn_params = [n for n in names if n.startswith("dynamic_input.")]
        assert dyn_params and all("weight" in n or "bias" in n for n in dyn_params)


class TestCheckpoint:
    def test_save_load_bit_exact(self, world, tiny_model, tmp_path):
        _, layout, _ = world
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, tiny_model, extra={"note": 1})
        loaded, header, _ = load_checkpoint(path, layout.schema)
        assert header["extra"]["note"] == 1
        for (n1, p1), (n2, p2) in zip(tiny_model.state_dict().items(),
                                      loaded.state_dict().items()):
            assert n1 == n2
            assert torch.equal(p1, p2)

    def test_half_precision_export(self, world, tiny_model, tmp_path):
        _, layout, _ = world
        path = tmp_path / "model16.ckpt"
        save_checkpoint(path, tiny_model, half=True)
        header, arrays = read_checkpoint(path)
        assert header["half"] is True
        some = arrays["model/final_norm.weight"]
        assert some.dtype == np.float16
        loaded, _, _ = load_checkpoint(path, layout.schema)
        ref = tiny_model.final_norm.weight.detach().to(torch.float16).to(torch.float32)
        assert torch.equal(loaded.final_norm.weight.detach(), ref)

    def test_schema_hash_mismatch_refused(self, world, tiny_model, tmp_path):
        _, layout, _ = world
        raw2 = list(generate(WorldConfig(n_cards=10, n_merchants=8, n_countries=2,
                                         n_categories=2, n_cities=2,
                                         time_span_days=30, abnormal_rate=0.2,
                                         seed=77, txns_per_card=5)))
        other = build_schema(raw2)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, tiny_model)
        with pytest.raises(ValueError, match="hash"):
            load_checkpoint(path, other)
