import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from fdcheck import central_difference_grad, max_relative_error
from txn_foundry.objective import (
    LossReport,
    NegativeSamplingPlan,
    SamplingStrategy,
    aggregate,
    loss_hcat_exhaustive,
    loss_hcat_independent,
    loss_hcat_shared,
    loss_lcat,
    loss_num,
    masked_mean,
)

LOG_2PI_OVER_2 = 0.9189385332046727


def t64(*vals):
    return torch.tensor(vals, dtype=torch.float64)


class TestLossNum:
    def test_zero_residual_unit_sigma(self):
        val = loss_num(t64(2.5), t64(1.0), t64(2.5))
        assert float(val) == pytest.approx(LOG_2PI_OVER_2, abs=1e-12)

    def test_unit_residual(self):
        val = loss_num(t64(0.0), t64(1.0), t64(1.0))
        assert float(val) == pytest.approx(0.5 + LOG_2PI_OVER_2, abs=1e-12)

    def test_gradient_wrt_mu(self):
        mu = t64(0.0).requires_grad_(True)
        loss = loss_num(mu, t64(1.0), t64(1.0))
        loss.backward()
        assert float(mu.grad) == pytest.approx(-1.0, abs=1e-12)
        numeric = central_difference_grad(
            lambda: loss_num(mu, t64(1.0), t64(1.0)), mu.data)
        assert float(numeric) == pytest.approx(-1.0, abs=1e-6)

    def test_rejects_nonpositive_sigma(self):
        with pytest.raises(ValueError):
            loss_num(t64(0.0), t64(0.0), t64(1.0))

    def test_masked_mean_over_valid_positions(self):
        mu = torch.zeros(2, 2, dtype=torch.float64)
        sigma = torch.ones(2, 2, dtype=torch.float64)
        y = torch.ones(2, 2, dtype=torch.float64) * 2.0
        mask = torch.tensor([[True, False], [True, False]])
        val = loss_num(mu, sigma, y, mask)
        assert float(val) == pytest.approx(2.0 + LOG_2PI_OVER_2, abs=1e-12)


class TestLossLcat:
    def test_uniform_logits(self):
        val = loss_lcat(torch.zeros(4, dtype=torch.float64), torch.tensor(0))
        assert float(val) == pytest.approx(math.log(4.0), abs=1e-12)

    def test_confident_logits(self):
        z = t64(10.0, 0.0, 0.0)
        val = loss_lcat(z, torch.tensor(0))
        expected = -math.log(1.0 / (1.0 + 2.0 * math.exp(-10.0)))
        assert float(val) == pytest.approx(expected, abs=1e-12)
        assert float(val) == pytest.approx(9.0799e-5, rel=1e-3)

    def test_shift_invariance(self):
        gen = torch.Generator().manual_seed(0)
        z = torch.randn(3, 5, 7, dtype=torch.float64, generator=gen)
        y = torch.randint(7, (3, 5), generator=gen)
        a = loss_lcat(z, y)
        b = loss_lcat(z + 13.7, y)
        assert float(a) == pytest.approx(float(b), abs=1e-9)


def brute_force_shared(head, table, y, neg_idx):
    """Literal per-position evaluation of the contrastive objective with
    candidates = all in-batch positives at the same step + the negatives."""
    b, t, d = head.shape
    out = torch.zeros(b, t, dtype=head.dtype)
    for i in range(b):
        for j in range(t):
            cand = [table[y[l, j]] for l in range(b)]
            cand += [table[n] for n in neg_idx]
            dots = torch.stack([head[i, j] @ c for c in cand])
            out[i, j] = torch.logsumexp(dots, dim=0) - head[i, j] @ table[y[i, j]]
    return out


class TestLossHcatShared:
    def test_single_sample_no_negatives_is_zero(self):
        head = torch.randn(1, 3, 4)
        table = torch.randn(9, 4)
        y = torch.randint(9, (1, 3))
        loss = loss_hcat_shared(head, table, y, n_negative=0,
                                negative_indices=torch.empty(0, dtype=torch.int64))
        assert torch.allclose(loss, torch.zeros_like(loss), atol=1e-6)

    def test_equal_positive_and_negative_dot_gives_ln2(self):
        head = torch.ones(1, 1, 2)
        table = torch.stack([torch.tensor([1.0, 0.0]), torch.tensor([1.0, 0.0]),
                             torch.tensor([5.0, 5.0])])
        y = torch.zeros(1, 1, dtype=torch.int64)
        loss = loss_hcat_shared(head, table, y, n_negative=1,
                                negative_indices=torch.tensor([1]))
        assert float(loss) == pytest.approx(math.log(2.0), abs=1e-6)

    def test_matches_brute_force_loop(self):
        gen = torch.Generator().manual_seed(7)
        head = torch.randn(2, 2, 3, dtype=torch.float64, generator=gen)
        table = torch.randn(20, 3, dtype=torch.float64, generator=gen)
        y = torch.randint(20, (2, 2), generator=gen)
        neg = torch.randint(20, (6,), generator=gen)
        fast = loss_hcat_shared(head, table, y, n_negative=6, negative_indices=neg)
        slow = brute_force_shared(head, table, y, neg)
        assert torch.allclose(fast, slow, atol=1e-6)

    def test_seeded_sampling_deterministic(self):
        head = torch.randn(3, 4, 5)
        table = torch.randn(50, 5)
        y = torch.randint(50, (3, 4))
        a = loss_hcat_shared(head, table, y, n_negative=8, seed=123)
        b = loss_hcat_shared(head, table, y, n_negative=8, seed=123)
        c = loss_hcat_shared(head, table, y, n_negative=8, seed=124)
        assert torch.equal(a, b)
        assert not torch.equal(a, c)

    def test_nonnegative_elementwise(self):
        gen = torch.Generator().manual_seed(1)
        for trial in range(20):
            head = torch.randn(3, 4, 6, generator=gen) * 3
            table = torch.randn(30, 6, generator=gen)
            y = torch.randint(30, (3, 4), generator=gen)
            loss = loss_hcat_shared(head, table, y, n_negative=5, seed=trial)
            assert (loss >= -1e-6).all()

    def test_masked_positions_zero_value_and_zero_grad(self):
        gen = torch.Generator().manual_seed(2)
        head = torch.randn(2, 3, 4, dtype=torch.float64, generator=gen)
        head.requires_grad_(True)
        table = torch.randn(10, 4, dtype=torch.float64, generator=gen)
        y = torch.randint(10, (2, 3), generator=gen)
        mask = torch.tensor([[True, True, False], [True, False, False]])
        loss = loss_hcat_shared(head, table, y, n_negative=4, seed=0, mask=mask)
        assert (loss[~mask] == 0).all()
        loss.sum().backward()
        assert torch.equal(head.grad[~mask], torch.zeros_like(head.grad[~mask]))

    def test_masked_candidates_excluded_from_denominators(self):
        # sample 1 masked at step 0: sample 0's loss must equal the B=1 case
        gen = torch.Generator().manual_seed(3)
        head = torch.randn(2, 1, 4, dtype=torch.float64, generator=gen)
        table = torch.randn(12, 4, dtype=torch.float64, generator=gen)
        y = torch.randint(12, (2, 1), generator=gen)
        neg = torch.tensor([3, 7])
        mask = torch.tensor([[True], [False]])
        both = loss_hcat_shared(head, table, y, 2, negative_indices=neg, mask=mask)
        solo = loss_hcat_shared(head[:1], table, y[:1], 2, negative_indices=neg)
        assert float(both[0, 0]) == pytest.approx(float(solo[0, 0]), abs=1e-9)


class TestLossHcatIndependent:
    def test_zero_negatives_zero_loss(self):
        head = torch.randn(2, 3, 4)
        table = torch.randn(9, 4)
        y = torch.randint(9, (2, 3))
        loss = loss_hcat_independent(head, table, y, n_per_positive=0)
        assert torch.allclose(loss, torch.zeros_like(loss), atol=1e-6)

    def test_candidate_count_is_n_plus_one(self):
        # with all-equal dots the loss must be exactly log(n+1)
        head = torch.zeros(2, 2, 3)
        table = torch.ones(7, 3)
        y = torch.zeros(2, 2, dtype=torch.int64)
        loss = loss_hcat_independent(head, table, y, n_per_positive=4, seed=0)
        assert torch.allclose(loss, torch.full_like(loss, math.log(5.0)), atol=1e-6)

    def test_deterministic_and_masked(self):
        head = torch.randn(2, 3, 4, dtype=torch.float64)
        table = torch.randn(9, 4, dtype=torch.float64)
        y = torch.randint(9, (2, 3))
        mask = torch.tensor([[True, False, True], [False, True, True]])
        a = loss_hcat_independent(head, table, y, 5, seed=11, mask=mask)
        b = loss_hcat_independent(head, table, y, 5, seed=11, mask=mask)
        assert torch.equal(a, b)
        assert (a[~mask] == 0).all()


class TestLossHcatExhaustive:
    def test_equals_full_softmax_cross_entropy(self):
        gen = torch.Generator().manual_seed(5)
        head = torch.randn(2, 4, 6, dtype=torch.float64, generator=gen)
        table = torch.randn(31, 6, dtype=torch.float64, generator=gen)
        y = torch.randint(31, (2, 4), generator=gen)
        per = loss_hcat_exhaustive(head, table, y)
        from txn_foundry.model import logits
        assert float(loss_lcat(logits(head, table), y)) == \
            pytest.approx(float(per.mean()), abs=1e-12)

    def test_shared_with_all_indices_once_reproduces_it(self):
        gen = torch.Generator().manual_seed(6)
        for trial in range(30):
            c = int(torch.randint(5, 64, (1,), generator=gen))
            head = torch.randn(1, 1, 4, dtype=torch.float64, generator=gen)
            table = torch.randn(c, 4, dtype=torch.float64, generator=gen)
            y = torch.randint(c, (1, 1), generator=gen)
            others = torch.tensor([i for i in range(c) if i != int(y)])
            shared = loss_hcat_shared(head, table, y, len(others),
                                      negative_indices=others)
            exact = loss_hcat_exhaustive(head, table, y)
            assert float(shared) == pytest.approx(float(exact), abs=1e-6)

    def test_monotone_in_positive_dot(self):
        table = torch.eye(4, dtype=torch.float64)
        y = torch.zeros(1, 1, dtype=torch.int64)
        prev = None
        for scale in (0.1, 0.5, 1.0, 2.0):
            head = torch.zeros(1, 1, 4, dtype=torch.float64)
            head[0, 0, 0] = scale
            val = float(loss_hcat_exhaustive(head, table, y))
            if prev is not None:
                assert val < prev
            prev = val

    def test_refuses_huge_vocabulary(self):
        with pytest.raises(ValueError):
            loss_hcat_exhaustive(torch.zeros(1, 1, 2), torch.zeros(2 ** 16 + 1, 2),
                                 torch.zeros(1, 1, dtype=torch.int64))

    def test_shift_invariance(self):
        gen = torch.Generator().manual_seed(8)
        head = torch.randn(2, 3, 4, dtype=torch.float64, generator=gen)
        table = torch.randn(13, 4, dtype=torch.float64, generator=gen)
        y = torch.randint(13, (2, 3), generator=gen)
        z_shiftable = loss_hcat_exhaustive(head, table, y)
        # shifting every candidate dot by a constant: add c * unit to head
        # with a table column of ones is not available here, so verify via
        # the logits route instead
        from txn_foundry.model import logits
        z = logits(head, table)
        a = loss_lcat(z, y)
        b = loss_lcat(z - 42.0, y)
        assert float(a) == pytest.approx(float(b), abs=1e-9)
        assert float(a) == pytest.approx(float(z_shiftable.mean()), abs=1e-9)


class TestAggregate:
    def test_ratio_one_gives_twice_pivot(self):
        losses = {"p": t64(1.3), "a": t64(1.3), "b": t64(1.3)}
        assert float(aggregate(losses, "p")) == pytest.approx(2.6, abs=1e-9)

    def test_hand_computed_case(self):
        losses = {"p": torch.tensor(1.0), "a": torch.tensor(0.5),
                  "b": torch.tensor(2.0)}
        # 1.0 + (0.5 + 2.0 * (1.0 / 2.0)) / 2 = 1.75
        assert float(aggregate(losses, "p")) == pytest.approx(1.75, abs=1e-9)

    def test_overperforming_task_keeps_plain_gradient(self):
        theta = torch.tensor(0.5, dtype=torch.float64, requires_grad=True)

        def build():
            return {"p": torch.tensor(1.0, dtype=torch.float64),
                    "a": theta ** 2,  # 0.25 < pivot: over-performing
                    "b": torch.tensor(3.0, dtype=torch.float64)}

        total = aggregate(build(), "p")
        total.backward()
        # d/d theta of (theta^2) / |L| with |L| = 2
        assert float(theta.grad) == pytest.approx(2 * 0.5 / 2, abs=1e-9)
        numeric = central_difference_grad(lambda: aggregate(build(), "p"), theta.data)
        assert float(numeric) == pytest.approx(float(theta.grad), abs=1e-6)

    def test_underperforming_task_is_scaled(self):
        theta = torch.tensor(2.0, dtype=torch.float64, requires_grad=True)

        def build():
            return {"p": torch.tensor(1.0, dtype=torch.float64),
                    "a": theta ** 2}  # 4.0 > pivot: scaled down

        total = aggregate(build(), "p")
        # value contribution equals the pivot's detached value
        assert float(total) == pytest.approx(1.0 + 1.0, abs=1e-9)
        total.backward()
        # gradient is (pivot_hat / hat) * dL/dtheta = (1/4) * 4 = 1
        assert float(theta.grad) == pytest.approx(1.0, abs=1e-9)

    def test_zero_hat_contributes_zero(self):
        theta = torch.tensor(0.0, dtype=torch.float64, requires_grad=True)
        losses = {"p": torch.tensor(1.0, dtype=torch.float64), "a": theta * 1.0}
        total = aggregate(losses, "p")
        assert float(total) == pytest.approx(1.0, abs=1e-12)
        total.backward()
        assert float(theta.grad) == 0.0

    def test_zero_pivot_suppresses_others(self):
        losses = {"p": torch.tensor(0.0), "a": torch.tensor(5.0)}
        assert float(aggregate(losses, "p")) == pytest.approx(0.0, abs=1e-9)

    def test_simple_mode_is_plain_sum(self):
        losses = {"p": torch.tensor(1.0), "a": torch.tensor(0.5),
                  "b": torch.tensor(2.0)}
        assert float(aggregate(losses, "p", mode="simple")) == pytest.approx(3.5)

    def test_equal_mode_value_and_gradient(self):
        theta = torch.tensor(3.0, dtype=torch.float64, requires_grad=True)
        losses = {"p": torch.tensor(2.0, dtype=torch.float64), "a": theta * 2.0}
        total = aggregate(losses, "p", mode="equal")
        assert float(total) == pytest.approx(2.0, abs=1e-9)  # one 1.0 per term
        total.backward()
        assert float(theta.grad) == pytest.approx(2.0 / 6.0, abs=1e-9)

    def test_pivot_missing_raises(self):
        with pytest.raises(KeyError):
            aggregate({"a": torch.tensor(1.0)}, "p")

    @given(st.lists(st.floats(0.0, 50.0), min_size=1, max_size=6),
           st.floats(0.0, 50.0))
    @settings(max_examples=100, deadline=None)
    def test_aggregate_at_least_pivot_for_nonnegative_losses(self, vals, pv):
        losses = {"p": torch.tensor(pv, dtype=torch.float64)}
        for i, v in enumerate(vals):
            losses[f"l{i}"] = torch.tensor(v, dtype=torch.float64)
        assert float(aggregate(losses, "p")) >= pv - 1e-9


class TestLossReport:
    def test_recompute_matches(self):
        report = LossReport(per_attribute={"current:flag": 1.0, "next:a": 0.5,
                                           "next:b": 2.0},
                            pivot="current:flag", mode="treasure",
                            aggregate=1.75)
        assert report.recompute_aggregate() == pytest.approx(1.75, abs=1e-6)

    def test_log_line_is_json(self):
        import json
        report = LossReport(per_attribute={"current:flag": 1.0},
                            pivot="current:flag", mode="simple", aggregate=1.0)
        parsed = json.loads(report.log_line())
        assert parsed["losses"]["current:flag"] == 1.0


class TestPlanAndMaskedMean:
    def test_plan_defaults(self):
        shared = NegativeSamplingPlan.default_for(SamplingStrategy.SHARED)
        indep = NegativeSamplingPlan.default_for(SamplingStrategy.INDEPENDENT)
        assert shared.n_negative == 1024
        assert indep.n_negative == 5
        with pytest.raises(ValueError):
            NegativeSamplingPlan(n_negative=0)

    def test_masked_mean_empty_mask_is_zero(self):
        x = torch.ones(2, 2, requires_grad=True)
        val = masked_mean(x, torch.zeros(2, 2, dtype=torch.bool))
        assert float(val) == 0.0
        val.backward()
        assert torch.equal(x.grad, torch.zeros_like(x))
