import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from helpers import toy_dataset
from rclsieve.data import Dataset, Example
from rclsieve.losses import ScoreRow
from rclsieve.model import identity_params, random_params
from rclsieve.sieve import lemma1_oracle, refine_and_sieve, sieve_dataset, sieve_row, sieve_threshold
from rclsieve.trainer import TrainConfig


def oracle_decisions(params, dataset):
    """Threshold rule written with plain floats: cosine, log-softmax, mean, keep if loss >= mean."""
    Q, P = params.query_matrix.tolist(), params.passage_matrix.tolist()

    def emb(M, x):
        return [sum(a * b for a, b in zip(r, x)) for r in M]

    def cos(u, v):
        nu = math.sqrt(sum(a * a for a in u))
        nv = math.sqrt(sum(a * a for a in v))
        if nu == 0 or nv == 0:
            return 0.0
        return max(-1.0, min(1.0, sum(a * b for a, b in zip(u, v)) / (nu * nv)))

    out = {}
    for ex in dataset.examples:
        if not ex.negative_ids:
            out[ex.query_id] = []
            continue
        u = emb(Q, ex.query.tolist())
        ids = [ex.positive_id] + ex.negative_ids
        s = [params.scale * cos(u, emb(P, dataset.corpus[p].tolist())) for p in ids]
        m = max(s)
        lse = m + math.log(math.fsum(math.exp(x - m) for x in s))
        losses = [lse - x for x in s]
        th = math.fsum(losses) / len(losses)
        out[ex.query_id] = [p for p, l in zip(ex.negative_ids, losses[1:]) if l >= th]
    return out


def prob_row(probs, pos=0):
    return ScoreRow(np.log(np.asarray(probs, dtype=float)), pos)


class TestThreshold:
    def test_uniform(self):
        th, keep = sieve_row(ScoreRow(np.zeros(4)))
        assert th == pytest.approx(math.log(4), abs=1e-15)
        assert keep.all()

    def test_hand_probs(self):
        th, keep = sieve_row(prob_row([0.4, 0.3, 0.2, 0.1]))
        hand = (0.91629 + 1.20397 + 1.60944 + 2.30259) / 4
        assert th == pytest.approx(hand, abs=1e-4)
        assert th == pytest.approx(1.50807, abs=1e-4)
        # negative at 0.3 dropped, 0.2 and 0.1 kept
        assert keep.tolist() == [True, False, True, True]

    @given(st.floats(-5, 5), st.floats(-5, 5))
    def test_single_negative_two_term_mean(self, a, b):
        row = ScoreRow([a, b], 0)
        th, _ = sieve_row(row)
        lse = max(a, b) + math.log(math.exp(a - max(a, b)) + math.exp(b - max(a, b)))
        assert th == pytest.approx(((lse - a) + (lse - b)) / 2, abs=1e-12)

    def test_sieve_threshold_uses_cosine(self):
        p = identity_params(2, "dot", scale=1.0)
        th = sieve_threshold(p, np.array([10.0, 0.0]), np.array([[10.0, 0.0], [0.0, 3.0]]))
        # cosine scores (1, 0)
        l0 = math.log(1 + math.exp(-1))
        l1 = l0 + 1
        assert th == pytest.approx((l0 + l1) / 2, abs=1e-12)

    def test_identical_negatives_share_fate(self):
        for s in ([3.0, 1.0, 1.0, 1.0], [0.0, 2.0, 2.0, 2.0], [1.0, 1.0, 1.0]):
            _, keep = sieve_row(ScoreRow(s, 0))
            assert len(set(keep[1:].tolist())) == 1

    def test_exact_tie_is_kept(self):
        # two candidates with equal scores: both losses equal the threshold
        _, keep = sieve_row(ScoreRow([0.7, 0.7], 0))
        assert keep.tolist() == [True, True]


rows = st.integers(2, 64).flatmap(
    lambda k: st.tuples(arrays(np.float64, k, elements=st.floats(-20, 20, allow_nan=False)), st.integers(0, k - 1))
)


class TestLemma:
    def test_hand(self):
        checks = lemma1_oracle(prob_row([0.4, 0.3, 0.2, 0.1]))
        assert [c.selected for c in checks] == [False, True, True]
        assert not any(c.violated for c in checks)
        assert checks[0].f_value == pytest.approx(0.3)

    def test_boundary_not_flagged(self):
        checks = lemma1_oracle(ScoreRow(np.zeros(5), 2))
        assert all(c.f_value == 0.2 for c in checks)
        assert not any(c.violated for c in checks)

    @given(rows)
    def test_no_violations(self, r):
        scores, pos = r
        checks = lemma1_oracle(ScoreRow(scores, pos))
        assert len(checks) == len(scores) - 1
        assert not any(c.violated for c in checks)

    @given(rows)
    def test_decision_depends_only_on_loss_vs_threshold(self, r):
        row = ScoreRow(*r)
        th, keep = sieve_row(row)
        losses = np.max(row.scores) + np.log(np.exp(row.scores - np.max(row.scores)).sum()) - row.scores
        for j in range(row.k):
            if j != row.positive_index and abs(losses[j] - th) > 1e-9:
                assert keep[j] == (losses[j] >= th)


class TestSieveDataset:
    def test_matches_oracle(self):
        for seed in range(30):
            ds = toy_dataset(8, dim=6, hard=5, seed=seed)
            params = random_params(6, 4, seed=seed, scale=float(1 + seed % 5))
            sieved, report = sieve_dataset(params, ds)
            expected = oracle_decisions(params, ds)
            assert {e.query_id: e.negative_ids for e in sieved.examples} == expected

    def test_subset_and_untouched(self):
        ds = toy_dataset(6, hard=4, seed=1)
        sieved, report = sieve_dataset(random_params(5, 5, seed=1, scale=5.0), ds)
        for a, b in zip(ds.examples, sieved.examples):
            assert set(b.negative_ids) <= set(a.negative_ids)
            assert (a.query_id, a.positive_id) == (b.query_id, b.positive_id)
            assert np.array_equal(a.query, b.query)
        assert sieved.corpus.keys() == ds.corpus.keys()
        assert all(np.array_equal(sieved.corpus[k], ds.corpus[k]) for k in ds.corpus)
        assert report.kept + report.dropped == sum(len(e.negative_ids) for e in ds.examples)
        assert report.kept == sum(len(e.negative_ids) for e in sieved.examples)

    def test_scoring_ignores_training_kind(self):
        ds = toy_dataset(6, hard=4, seed=2)
        p = random_params(5, 5, seed=2, scale=3.0)
        a, _ = sieve_dataset(p.with_sim("dot"), ds)
        b, _ = sieve_dataset(p.with_sim("cosine"), ds)
        assert [e.negative_ids for e in a.examples] == [e.negative_ids for e in b.examples]

    def test_second_pass_reapplies_rule(self):
        ds = toy_dataset(10, hard=6, seed=3)
        p = random_params(5, 5, seed=3, scale=4.0)
        once, _ = sieve_dataset(p, ds)
        twice, _ = sieve_dataset(p, once)
        assert {e.query_id: e.negative_ids for e in twice.examples} == oracle_decisions(p, once)
        for a, b in zip(once.examples, twice.examples):
            assert set(b.negative_ids) <= set(a.negative_ids)

    def test_empty_negatives(self):
        ds = toy_dataset(3, hard=0)
        sieved, report = sieve_dataset(identity_params(5), ds)
        assert all(q.threshold is None for q in report.queries)
        assert report.sieve_out_rate == 0.0

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            sieve_dataset(identity_params(4), toy_dataset(dim=5))

    def test_report_records(self):
        ds = toy_dataset(4, hard=3)
        _, report = sieve_dataset(identity_params(5, scale=2.0), ds)
        recs = report.records()
        assert len(recs) == 5
        assert set(recs[0]) == {"query_id", "th", "kept_ids", "dropped_ids"}
        assert recs[-1]["type"] == "summary"
        assert recs[-1]["sieve_out_rate"] == report.dropped / (report.kept + report.dropped)

    def test_planted_duplicate_of_positive_is_dropped(self):
        # a negative equal to the positive has the positive's loss, which is below the mean
        q = np.array([1.0, 0.2, 0.0])
        corpus = {"pos": np.array([1.0, 0.0, 0.0]), "dup": np.array([1.0, 0.0, 0.0]),
                  "far1": np.array([0.0, 1.0, 0.0]), "far2": np.array([0.0, 0.0, 1.0])}
        ds = Dataset([Example("q", q, "pos", ["far1", "dup", "far2"])], corpus)
        sieved, _ = sieve_dataset(identity_params(3, scale=10.0), ds)
        assert sieved.examples[0].negative_ids == ["far1", "far2"]

    def test_refine_and_sieve(self):
        ds = toy_dataset(6, hard=4, seed=5)
        p = random_params(5, 5, seed=5, scale=5.0)
        cfg = TrainConfig(beta=0.5, epochs=1, learning_rate=1e-7)
        sieved, report, result = refine_and_sieve(p, ds, cfg)
        assert len(result.trace) == 1
        direct, _ = sieve_dataset(result.params, ds)
        assert [e.negative_ids for e in sieved.examples] == [e.negative_ids for e in direct.examples]
