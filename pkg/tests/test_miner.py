import numpy as np
import pytest

from duet.classify import FinetuneConfig, predict_batch
from duet.corpus import LabelCatalog, build_vocab, tokenize
from duet.encoder import EncoderConfig, init_params
from duet.evaluation import export_embeddings, labels_path_for
from duet.miner import (
    CorpusIndex,
    LccPool,
    MiningError,
    build_decision_pool,
    embed_corpus,
    load_index,
    mine_label_negatives,
    mine_lcc_pools,
    mine_ldm_pools,
    read_lcc_pools,
    read_ldm_pools,
    top_wrong_labels,
    topk_retrieve,
    train_miner_classifier,
    write_lcc_pools,
    write_ldm_pools,
)

import oracles
from conftest import case, make_catalog


def index_of(M, labels=None, ids=None):
    n = len(M)
    ids = ids or [f"c{i:03d}" for i in range(n)]
    labels = labels or [(0, 0)] * n
    return CorpusIndex(ids, np.asarray(M, dtype=float), labels)


def check_lcc_pool(pool: LccPool, labels: dict, pool_size=15):
    assert len(pool.negative_ids) == pool_size
    assert pool.anchor_id not in pool.negative_ids and pool.positive_id != pool.anchor_id
    assert labels[pool.positive_id] == labels[pool.anchor_id]
    assert all(labels[n] != labels[pool.anchor_id] for n in pool.negative_ids)


class TestEmbedCorpus:
    vocab = build_vocab([case("a", "x y z w")], None, 20)
    model = init_params(EncoderConfig(vocab_size=len(vocab), seed=0))

    def test_empty(self):
        idx = embed_corpus(self.model, [], self.vocab)
        assert len(idx) == 0 and idx.embeddings.shape == (0, 256)

    def test_shape_and_determinism(self, rng):
        cases = [case(f"c{i}", " ".join(rng.choice(list("xyzw"), size=5))) for i in range(100)]
        a = embed_corpus(self.model, cases, self.vocab)
        b = embed_corpus(self.model, cases, self.vocab)
        assert a.embeddings.shape == (100, 256) and np.array_equal(a.embeddings, b.embeddings)
        assert a.case_ids == [c.case_id for c in cases]

    def test_vocab_mismatch(self):
        other = init_params(EncoderConfig(vocab_size=len(self.vocab) + 1))
        with pytest.raises(MiningError):
            embed_corpus(other, [case("a")], self.vocab)

    def test_import_round_trip(self, tmp_path):
        cases = [case(f"c{i}", "x y" if i % 2 else "z", i % 3, i % 2) for i in range(7)]
        export_embeddings(self.model, cases, self.vocab, tmp_path / "m.bin")
        idx = load_index(tmp_path / "m.bin", labels_path_for(tmp_path / "m.bin"))
        direct = embed_corpus(self.model, cases, self.vocab)
        assert idx.case_ids == direct.case_ids and idx.labels == direct.labels
        assert np.array_equal(idx.embeddings, direct.embeddings.astype(np.float32))


class TestTopK:
    def test_two_items(self):
        idx = index_of([[1, 0], [0, 1]])
        for k in (1, 5):
            assert topk_retrieve(idx, "c000", k) == ["c001"]

    def test_duplicate_rows_tie_by_id(self):
        idx = index_of([[1, 0], [0.5, 0.5], [0.5, 0.5], [0.5, 0.5]], ids=["a", "z", "m", "b"])
        assert topk_retrieve(idx, "a", 3) == ["b", "m", "z"]

    def test_random_matches_oracle(self, rng):
        for _ in range(20):
            M = rng.normal(size=(20, 4))
            idx = index_of(M)
            anchor = idx.case_ids[int(rng.integers(20))]
            k = int(rng.integers(1, 20))
            assert topk_retrieve(idx, anchor, k) == oracles.topk_oracle(idx.case_ids, M, anchor, k)

    def test_missing_anchor(self):
        with pytest.raises(MiningError):
            topk_retrieve(index_of([[1, 0], [0, 1]]), "nope", 1)

    def test_bad_k(self):
        with pytest.raises(ValueError):
            topk_retrieve(index_of([[1, 0], [0, 1]]), "c000", 0)

    def test_index_validation(self):
        with pytest.raises(ValueError):
            CorpusIndex(["a", "a"], np.zeros((2, 2)), [(0, 0), (0, 0)])
        with pytest.raises(ValueError):
            CorpusIndex(["a"], np.zeros((2, 2)), [(0, 0)])


class TestLccMining:
    def test_nearest_same_label_is_positive(self):
        M = [[1, 0], [0.99, 0.1], [0.9, 0.3], [0, 1]]
        idx = index_of(M, labels=[(0, 0), (0, 0), (0, 0), (1, 1)])
        pools = mine_lcc_pools(idx, pool_size=1).pools
        assert pools[0].positive_id == "c001"

    def test_forced_pool(self, rng):
        # anchor, its same-label partner and 15 cases that each differ in some label
        M = rng.normal(size=(17, 3))
        labels = [(0, 0), (0, 0)] + [(1 + i % 3, i % 2) for i in range(15)]
        idx = index_of(M, labels)
        pool = mine_lcc_pools(idx).pools[0]
        assert pool.anchor_id == "c000" and pool.positive_id == "c001"
        assert sorted(pool.negative_ids) == [f"c{i:03d}" for i in range(2, 17)]
        assert not pool.backfilled

    def test_negatives_follow_ranking(self, rng):
        M = rng.normal(size=(40, 3))
        labels = [(i % 2, 0) for i in range(40)]
        idx = index_of(M, labels)
        pool = mine_lcc_pools(idx, pool_size=5).pools[0]
        ranked = [c for c in topk_retrieve(idx, "c000", 39) if idx.labels[idx.row(c)] != (0, 0)]
        assert pool.negative_ids == ranked[:5]

    def test_backfill_flagged(self, rng):
        M = rng.normal(size=(40, 3))
        labels = [(i % 2, 0) for i in range(40)]
        report = mine_lcc_pools(index_of(M, labels), pool_size=15, sweep_depth=10, seed=3)
        assert all(p.backfilled for p in report.pools)
        lab = dict(zip(index_of(M, labels).case_ids, labels))
        for p in report.pools:
            check_lcc_pool(p, lab)
            assert len(set(p.negative_ids)) == 15

    def test_backfill_deterministic(self, rng):
        M = rng.normal(size=(30, 3))
        idx = index_of(M, [(i % 3, 0) for i in range(30)])
        a = mine_lcc_pools(idx, sweep_depth=5, seed=1).pools
        b = mine_lcc_pools(idx, sweep_depth=5, seed=1).pools
        assert a == b

    def test_small_corpus_repeats_when_needed(self):
        idx = index_of([[1, 0], [0.9, 0.1], [0, 1], [0.2, 1]], labels=[(0, 0), (0, 0), (1, 0), (1, 0)])
        report = mine_lcc_pools(idx, pool_size=4)
        assert all(len(p.negative_ids) == 4 and p.backfilled for p in report.pools)

    def test_unpaired_anchor_skipped(self):
        idx = index_of([[1, 0], [0, 1], [0.5, 0.5]], labels=[(0, 0), (0, 0), (1, 1)])
        report = mine_lcc_pools(idx, pool_size=1)
        assert report.skipped == ["c002"] and len(report.pools) == 2

    def test_no_different_label(self):
        with pytest.raises(MiningError):
            mine_lcc_pools(index_of([[1, 0], [0, 1]]))

    def test_workers_same_output(self, rng):
        M = rng.normal(size=(60, 5))
        idx = index_of(M, [(i % 3, i % 2) for i in range(60)])
        assert mine_lcc_pools(idx, workers=1).pools == mine_lcc_pools(idx, workers=3).pools

    def test_synthetic_invariants(self, synth_corpus):
        cases, _ = synth_corpus
        vocab = build_vocab(cases, None, 2000)
        model = init_params(EncoderConfig(vocab_size=len(vocab), embed_dim=16, proj_dim=32))
        idx = embed_corpus(model, cases, vocab)
        report = mine_lcc_pools(idx)
        labels = {c.case_id: c.labels() for c in cases}
        assert not report.skipped and len(report.pools) == len(cases)
        for p in report.pools:
            check_lcc_pool(p, labels)

    def test_round_trip(self, tmp_path):
        pools = [LccPool("a", "b", ["c", "d"], True), LccPool("b", "a", ["d", "c"], False)]
        write_lcc_pools(tmp_path / "p.jsonl", pools)
        assert read_lcc_pools(tmp_path / "p.jsonl") == pools


def _toy_classifier(seed=0, epochs=50):
    cases = ([case(f"a{i}", "alpha alpha gamma", 0, 0) for i in range(10)]
             + [case(f"b{i}", "beta beta gamma", 1, 1) for i in range(10)])
    cat = make_catalog(2, 2)
    vocab = build_vocab(cases, cat, 100)
    enc = EncoderConfig(vocab_size=len(vocab), embed_dim=8, proj_dim=8, seed=seed)
    cfg = FinetuneConfig(epochs=epochs, learning_rate=1e-2, batch_size=8, seed=seed, tasks=("articles", "charges"))
    return train_miner_classifier(cases, cat, vocab, enc, cfg), cases, vocab


class TestMinerClassifier:
    def test_separable_toy_fits(self):
        clf, cases, vocab = _toy_classifier()
        preds = predict_batch(clf.model, clf.heads, [tokenize(c.fact_text, vocab) for c in cases])
        for task, attr in (("articles", "article_id"), ("charges", "charge_id")):
            assert [p.label for p in preds[task]] == [getattr(c, attr) for c in cases]

    def test_deterministic(self):
        a, _, _ = _toy_classifier(epochs=3)
        b, _, _ = _toy_classifier(epochs=3)
        assert np.array_equal(a.model.E, b.model.E)
        assert np.array_equal(a.heads["charges"].W, b.heads["charges"].W)

    def test_single_label_rejected(self):
        cases = [case(f"a{i}", "x y") for i in range(5)]
        with pytest.raises(MiningError):
            train_miner_classifier(cases, make_catalog(2, 2), build_vocab(cases, None, 10))

    def test_empty_rejected(self):
        with pytest.raises(MiningError):
            train_miner_classifier([], make_catalog(), build_vocab([], None, 10))


class TestLabelNegatives:
    def test_forced_set_ordered_by_logit(self):
        assert top_wrong_labels(np.array([0.1, 2.0, -1.0, 0.5]), [0, 1, 2, 3], 0, 3) == [1, 3, 2]

    def test_uniform_smallest_ids(self):
        assert top_wrong_labels(np.zeros(6), [10, 11, 12, 13, 14, 15], 11, 3) == [10, 12, 13]

    def test_random_matches_argsort(self, rng):
        for _ in range(50):
            logits = rng.normal(size=8)
            ids = sorted(rng.choice(100, size=8, replace=False).tolist())
            true = ids[int(rng.integers(8))]
            ranked = sorted(zip(-logits, ids))
            want = [lab for _, lab in ranked if lab != true][:3]
            assert top_wrong_labels(logits, ids, true, 3) == want

    def test_too_few_labels(self):
        with pytest.raises(MiningError):
            top_wrong_labels(np.zeros(3), [0, 1, 2], 0, 3)

    def test_mine_label_negatives(self):
        cases = [case(f"c{i}", f"t{i % 4} u", i % 4, i % 4) for i in range(16)]
        cat = make_catalog(4, 4)
        vocab = build_vocab(cases, cat, 100)
        clf = train_miner_classifier(cases, cat, vocab, EncoderConfig(len(vocab), 8, 8),
                                     FinetuneConfig(epochs=2, learning_rate=1e-2, tasks=("articles", "charges")))
        arts, chgs = mine_label_negatives(clf, cases[0])
        assert sorted(arts) == [1, 2, 3] and sorted(chgs) == [1, 2, 3]


class TestDecisionPool:
    def test_enumeration(self):
        pool = build_decision_pool((0, 6), [1, 2, 3], [7, 8, 9])
        want = [(a, c) for a in (0, 1, 2, 3) for c in (6, 7, 8, 9) if (a, c) != (0, 6)]
        assert pool.decision_negative_ids == want and len(want) == 15

    def test_true_pair_excluded(self, rng):
        for _ in range(20):
            labels = rng.choice(50, size=8, replace=False).tolist()
            pool = build_decision_pool((labels[0], labels[4]), labels[1:4], labels[5:8])
            assert len(set(pool.decision_negative_ids)) == 15
            assert (labels[0], labels[4]) not in pool.decision_negative_ids

    @pytest.mark.parametrize("arts,chgs", [([1, 1, 2], [7, 8, 9]), ([0, 1, 2], [7, 8, 9]), ([1, 2, 3], [6, 7, 8])])
    def test_bad_inputs(self, arts, chgs):
        with pytest.raises(MiningError):
            build_decision_pool((0, 6), arts, chgs)

    def test_mine_ldm_on_four_label_catalog(self):
        cases = [case(f"c{i}", f"t{i % 4} u", i % 4, (i + 1) % 4) for i in range(16)]
        cat = make_catalog(4, 4)
        vocab = build_vocab(cases, cat, 100)
        clf = train_miner_classifier(cases, cat, vocab, EncoderConfig(len(vocab), 8, 8),
                                     FinetuneConfig(epochs=1, tasks=("articles", "charges")))
        pools = mine_ldm_pools(clf, cases, batch_size=5)
        assert [p.anchor_id for p in pools] == [c.case_id for c in cases]
        assert all(len(set(p.decision_negative_ids)) == 15 for p in pools)

    def test_round_trip(self, tmp_path):
        cases = [case("a", article=0, charge=6)]
        pools = [build_decision_pool((0, 6), [1, 2, 3], [7, 8, 9], "a")]
        write_ldm_pools(tmp_path / "p.jsonl", pools)
        assert read_ldm_pools(tmp_path / "p.jsonl", cases) == pools
        with pytest.raises(MiningError):
            read_ldm_pools(tmp_path / "p.jsonl", [case("b")])
