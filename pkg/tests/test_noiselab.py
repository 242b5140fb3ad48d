import json
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rclsieve.model import identity_params
from rclsieve.noiselab import (
    GridInstance,
    NoiseTransition,
    SyntheticSpec,
    constructed_instance,
    generate_synthetic,
    grid_risks,
    inject_false_negatives,
    run_beta_sweep,
    separation_auc,
    theorem_grid_check,
)
from rclsieve.trainer import TrainConfig

FIXTURES = Path(__file__).parent / "fixtures"
BETA_GRID = [round(0.05 * i, 2) for i in range(21)]


def small_spec(**kw):
    base = dict(num_queries=30, test_queries=10, distractors=20, seed=3)
    base.update(kw)
    return SyntheticSpec(**base)


class TestGenerator:
    def test_fixture_stats(self):
        expected = json.loads((FIXTURES / "synthetic_50.json").read_text())
        data = generate_synthetic(SyntheticSpec(num_queries=50, seed=7))
        ds = data.train
        q = np.stack([e.query for e in ds.examples])

        def mean_cos(pids):
            v = np.stack([ds.corpus[p] for p in pids])
            qq = np.repeat(q, len(pids) // len(q), axis=0)
            return float(np.mean(np.sum(qq * v, axis=1) / np.linalg.norm(qq, axis=1) / np.linalg.norm(v, axis=1)))

        assert len(ds.examples) == expected["num_train"]
        assert len(data.test.examples) == expected["num_test"]
        assert len(ds.corpus) == expected["corpus_size"]
        assert ds.examples[0].query_id == expected["first_query_id"]
        assert ds.examples[0].negative_ids == expected["first_negatives"]
        tol = dict(rel=1e-9, abs=1e-12)
        assert mean_cos([e.positive_id for e in ds.examples]) == pytest.approx(expected["mean_cos_positive"], **tol)
        assert mean_cos([e.relevant_ids[1] for e in ds.examples]) == pytest.approx(expected["mean_cos_relevant"], **tol)
        assert mean_cos([p for e in ds.examples for p in e.negative_ids]) == pytest.approx(expected["mean_cos_hard"],
                                                                                           **tol)
        np.testing.assert_allclose(ds.examples[0].query[:4], expected["first_query_head"], rtol=1e-9)

    def test_degenerate_clusters(self):
        spec = small_spec(cluster_noise_scale=1e-9, nuisance_scale=0.0)
        data = generate_synthetic(spec)
        for ex in data.train.examples:
            for pid in ex.relevant_ids:
                v = data.train.corpus[pid]
                cos = ex.query @ v / np.linalg.norm(ex.query) / np.linalg.norm(v)
                assert cos == pytest.approx(1.0, abs=1e-8)

    def test_relevant_closer_than_hard_negatives(self):
        data = generate_synthetic(SyntheticSpec(num_queries=100, seed=1, nuisance_scale=0.0))
        ds = data.train

        def cos(a, b):
            return a @ b / np.linalg.norm(a) / np.linalg.norm(b)

        rel = np.mean([cos(e.query, ds.corpus[e.positive_id]) for e in ds.examples])
        hard = np.mean([cos(e.query, ds.corpus[p]) for e in ds.examples for p in e.negative_ids])
        assert rel > hard

    def test_shapes_and_relevance(self):
        spec = small_spec()
        data = generate_synthetic(spec)
        assert len(data.train) == 30 and len(data.test) == 10
        assert data.train.corpus is not None and data.train.feature_dim == spec.feature_dim
        for ex in data.train.examples + data.test.examples:
            assert data.relevance[ex.query_id] == set(ex.relevant_ids)
            assert ex.positive_id in data.relevance[ex.query_id]
            assert len(ex.negative_ids) == spec.hard_negatives_per_query
        data.train.validate()
        data.test.validate()

    def test_deterministic(self):
        a = generate_synthetic(small_spec())
        b = generate_synthetic(small_spec())
        assert all(np.array_equal(a.train.corpus[k], b.train.corpus[k]) for k in a.train.corpus)

    @pytest.mark.parametrize("kw", [{"relevant_per_query": 1}, {"noise_rate": 1.0}, {"cluster_noise_scale": 0.0},
                                    {"topic_dim": 30}])
    def test_invalid_spec(self, kw):
        with pytest.raises(ValueError):
            SyntheticSpec(**kw)


class TestInjection:
    def test_zero_rate_is_clean(self):
        data = generate_synthetic(small_spec())
        noisy, ledger = inject_false_negatives(data.train, data.relevance, 0.0, 1)
        assert ledger == {}
        assert [e.negative_ids for e in noisy.examples] == [e.negative_ids for e in data.train.examples]

    def test_full_rate_plants_one_each(self):
        data = generate_synthetic(small_spec())
        noisy, ledger = inject_false_negatives(data.train, data.relevance, 1.0, 1)
        assert len(ledger) == len(data.train)
        for clean, ex in zip(data.train.examples, noisy.examples):
            added = set(ex.negative_ids) - set(clean.negative_ids)
            assert added == {ledger[ex.query_id]}
            assert len(ex.negative_ids) == len(clean.negative_ids) + 1
            assert ex.positive_id == clean.positive_id

    def test_binomial_count(self):
        data = generate_synthetic(SyntheticSpec(num_queries=1000, test_queries=0, distractors=0, seed=2))
        _, ledger = inject_false_negatives(data.train, data.relevance, 0.3, 13)
        sigma = math.sqrt(1000 * 0.3 * 0.7)
        assert abs(len(ledger) - 300) <= 3 * sigma

    def test_ledger_soundness(self):
        data = generate_synthetic(small_spec())
        noisy, ledger = inject_false_negatives(data.train, data.relevance, 0.5, 4)
        for qid, pid in ledger.items():
            assert pid in data.relevance[qid]
        noisy.validate()

    def test_planted_position_varies(self):
        data = generate_synthetic(small_spec(num_queries=60))
        noisy, ledger = inject_false_negatives(data.train, data.relevance, 1.0, 5)
        positions = {ex.negative_ids.index(ledger[ex.query_id]) for ex in noisy.examples}
        assert len(positions) > 3


class TestAUC:
    def test_perfect(self):
        assert separation_auc([0.1, 0.2], [0.3, 0.5, 0.9]) == 1.0
        assert separation_auc([1.0], [0.5]) == 0.0

    def test_null(self):
        rng = np.random.default_rng(0)
        auc = separation_auc(rng.normal(size=4000), rng.normal(size=4000))
        assert abs(auc - 0.5) < 0.02

    def test_ties_half(self):
        assert separation_auc([1.0, 1.0], [1.0]) == 0.5

    @given(st.lists(st.floats(-5, 5), min_size=1, max_size=25), st.lists(st.floats(-5, 5), min_size=1, max_size=25))
    def test_pairwise_oracle(self, a, b):
        pairs = [1.0 if x < y else 0.5 if x == y else 0.0 for x in a for y in b]
        oracle = sum(pairs) / len(pairs)
        assert separation_auc(a, b) == pytest.approx(oracle, abs=1e-12)

    @given(st.lists(st.integers(-5000, 5000), min_size=1, max_size=25),
           st.lists(st.integers(-5000, 5000), min_size=1, max_size=25))
    def test_monotone_invariance(self, a, b):
        # values on a 1e-3 grid, so these transforms cannot merge distinct values in floating point
        a = np.asarray(a) / 1000.0
        b = np.asarray(b) / 1000.0
        base = separation_auc(a, b)
        assert separation_auc(a**3, b**3) == pytest.approx(base, abs=1e-12)
        assert separation_auc(np.exp(a), np.exp(b)) == pytest.approx(base, abs=1e-12)
        assert separation_auc(np.arctan(a), np.arctan(b)) == pytest.approx(base, abs=1e-12)

    def test_empty(self):
        with pytest.raises(ValueError):
            separation_auc([], [1.0])


class TestSweep:
    def test_empty_ledger_rejected(self):
        data = generate_synthetic(small_spec())
        with pytest.raises(ValueError):
            run_beta_sweep(data.train, {}, [0.0], TrainConfig(), identity_params(32))

    def test_groups_and_determinism(self):
        data = generate_synthetic(small_spec())
        noisy, ledger = inject_false_negatives(data.train, data.relevance, 0.5, 1)
        cfg = TrainConfig(learning_rate=0.5, epochs=2, seed=1)
        base = identity_params(32, scale=20.0)
        a = run_beta_sweep(noisy, ledger, [0.0, 0.5], cfg, base)
        b = run_beta_sweep(noisy, ledger, [0.0, 0.5], cfg, base)
        assert [r.summary() for r in a] == [r.summary() for r in b]
        s = a[0].summary()
        assert s["planted_false_negative_count"] == len(ledger)
        assert s["true_hard_negative_count"] == 8 * len(noisy)
        assert s["positive_count"] == len(noisy)
        h = a[1].histogram(bins=10)
        assert len(h["bin_edges"]) == 11
        assert sum(h["counts"]["planted_false_negative"]) == len(ledger)


def brute_risks(instance, retention, point):
    """Clean, noisy and regularizer risks at one grid point, by explicit loops."""
    angles = [2 * math.pi * i / instance.grid_size for i in point]
    clean = noisy = reg = 0.0
    pairs = 0
    for (cands, pos), keep, qa in zip(instance.rows, retention, instance.query_angles):
        s = [instance.scale * math.cos(angles[c] - qa) for c in cands]
        lse = math.log(sum(math.exp(x) for x in s))
        losses = [lse - x for x in s]
        clean += losses[pos]
        noisy += keep * losses[pos]
        reg += sum(losses)
        pairs += len(cands)
    return clean / pairs, noisy / pairs, reg / pairs


class TestTheorem:
    def test_grid_risks_match_loops(self):
        inst = constructed_instance()
        t = NoiseTransition([0.7, 0.9])
        clean, noisy, reg = grid_risks(inst, t)
        for flat, point in [(0, (0, 0)), (5, (0, 5)), (31, (2, 7)), (143, (11, 11))]:
            c, n, r = brute_risks(inst, [0.7, 0.9], point)
            assert (clean[flat], noisy[flat], reg[flat]) == pytest.approx((c, n, r), abs=1e-12)

    def test_zero_noise_all_betas_pass(self):
        passed = theorem_grid_check(constructed_instance(), NoiseTransition([1.0, 1.0]), BETA_GRID)
        assert passed == BETA_GRID

    def test_noisy_instance(self):
        t = NoiseTransition([0.7, 0.9])
        lo, hi = t.beta_interval
        assert (lo, hi) == pytest.approx((0.1, 0.7), abs=1e-12)
        passed = theorem_grid_check(constructed_instance(), t, BETA_GRID)
        assert passed and all(0 <= b <= 1 for b in passed)
        assert 0.5 in passed
        assert all(b in passed for b in BETA_GRID if lo <= b <= hi)

    def test_over_regularization_fails(self):
        assert theorem_grid_check(constructed_instance(), NoiseTransition([0.7, 0.9]), [2.0]) == []

    def test_transition_validation(self):
        with pytest.raises(ValueError):
            NoiseTransition([0.5])
        with pytest.raises(ValueError):
            NoiseTransition([1.1])
        with pytest.raises(ValueError):
            NoiseTransition([])

    def test_grid_size_limit(self):
        big = GridInstance((0.0,), (((0, 1, 2, 3, 4, 5), 0),), num_passages=6, grid_size=12)
        with pytest.raises(ValueError):
            grid_risks(big, NoiseTransition([0.9]))

    def test_row_count_mismatch(self):
        with pytest.raises(ValueError):
            grid_risks(constructed_instance(), NoiseTransition([0.9]))
