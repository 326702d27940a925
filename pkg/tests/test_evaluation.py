import numpy as np
import pytest

from corpus_utils import small_encoder_cfg, tiny_corpus
from speechdex.errors import DataError, ShapeError
from speechdex.evaluation import (
    EvalReport,
    RetrievalIndex,
    bleu_tokenize,
    corpus_bleu,
    evaluate_s2t,
    evaluate_s2tt,
    recall_at_1,
    report_table,
    retrieve_top_k,
    wer,
    write_csv,
    write_tsv,
)
from speechdex.model import init_params


def index_of(embs):
    m = embs.shape[0]
    return RetrievalIndex(np.asarray(embs, dtype=np.float64),
                          [f"text {i}" for i in range(m)], ["en"] * m)


# ---------------------------------------------------------------------------
# retrieval
# ---------------------------------------------------------------------------

def test_retrieve_orthonormal_query_hits_itself():
    idx = index_of(np.eye(4))
    assert retrieve_top_k(np.eye(4)[2], idx, k=1) == [2]


def test_retrieve_ties_go_to_ascending_index():
    idx = index_of(np.ones((5, 3)))
    assert retrieve_top_k(np.ones(3), idx, k=5) == [0, 1, 2, 3, 4]


def test_retrieve_matches_argsort_oracle():
    rng = np.random.default_rng(0)
    for _ in range(50):
        m, p = int(rng.integers(2, 30)), int(rng.integers(2, 8))
        embs = rng.normal(size=(m, p))
        q = rng.normal(size=p)
        idx = index_of(embs)
        got = retrieve_top_k(q, idx, k=m)
        scores = embs @ q
        expected = sorted(range(m), key=lambda j: (-scores[j], j))
        assert got == expected


def test_retrieve_full_k_is_permutation():
    rng = np.random.default_rng(1)
    idx = index_of(rng.normal(size=(10, 4)))
    out = retrieve_top_k(rng.normal(size=4), idx, k=10)
    assert sorted(out) == list(range(10))


def test_retrieve_rejects_bad_inputs():
    idx = index_of(np.eye(3))
    with pytest.raises(ShapeError, match="dim"):
        retrieve_top_k(np.ones(5), idx, k=1)
    with pytest.raises(ShapeError, match="k="):
        retrieve_top_k(np.ones(3), idx, k=4)


def test_recall_at_1_perfect_and_adversarial():
    idx = index_of(np.eye(4))
    queries = np.eye(4)
    assert recall_at_1(queries, [0, 1, 2, 3], idx) == 1.0
    assert recall_at_1(queries, [1, 2, 3, 0], idx) == 0.0


def test_recall_matches_exhaustive_count():
    rng = np.random.default_rng(2)
    embs = rng.normal(size=(20, 6))
    queries = rng.normal(size=(40, 6))
    gold = rng.integers(0, 20, size=40)
    idx = index_of(embs)
    got = recall_at_1(queries, list(gold), idx)
    hits = sum((embs @ q).argmax() == g for q, g in zip(queries, gold))
    assert got == pytest.approx(hits / 40)


# ---------------------------------------------------------------------------
# WER
# ---------------------------------------------------------------------------

def wer_dp_oracle(ref, hyp):
    """Full-matrix DP, independent of the two-row implementation."""
    la, lb = len(ref), len(hyp)
    d = np.zeros((la + 1, lb + 1), dtype=int)
    d[:, 0] = np.arange(la + 1)
    d[0, :] = np.arange(lb + 1)
    for i in range(1, la + 1):
        for j in range(1, lb + 1):
            cost = 0 if ref[i - 1] == hyp[j - 1] else 1
            d[i, j] = min(d[i - 1, j - 1] + cost, d[i - 1, j] + 1, d[i, j - 1] + 1)
    return d[la, lb] / la


def test_wer_examples():
    assert wer("hello world".split(), "hello world".split()) == 0.0
    assert wer("a b c".split(), "a x c".split()) == pytest.approx(1 / 3)
    assert wer(["a"], "a b c".split()) == 2.0


def test_wer_empty_reference_errors():
    with pytest.raises(DataError, match="non-empty"):
        wer([], ["a"])


def test_wer_matches_dp_oracle_random():
    rng = np.random.default_rng(3)
    vocab = [f"w{i}" for i in range(12)]
    for _ in range(100):
        ref = [vocab[i] for i in rng.integers(0, 12, rng.integers(1, 15))]
        hyp = [vocab[i] for i in rng.integers(0, 12, rng.integers(0, 15))]
        assert wer(ref, hyp) == pytest.approx(wer_dp_oracle(ref, hyp))


def test_wer_levenshtein_triangle_bound():
    rng = np.random.default_rng(4)
    vocab = ["x", "y", "z", "q"]
    for _ in range(50):
        a, b, c = (list(rng.choice(vocab, size=rng.integers(1, 10))) for _ in range(3))
        lev_ab = wer(a, b) * len(a)
        lev_bc = wer(b, c) * len(b)
        lev_ac = wer(a, c) * len(a)
        assert lev_ac <= lev_ab + lev_bc + 1e-9


# ---------------------------------------------------------------------------
# BLEU
# ---------------------------------------------------------------------------

def test_bleu_identity_is_100():
    corpus = ["four words are here", "this sentence has five words"]
    assert corpus_bleu(corpus, corpus) == 100.0


def test_bleu_zero_fourgram_overlap_is_zero():
    assert corpus_bleu(["a b c d e"], ["v w x y z"]) == 0.0


def test_bleu_count_mismatch_errors():
    with pytest.raises(DataError, match="hypotheses"):
        corpus_bleu(["a"], ["a", "b"])


def test_bleu_fixture_oracle_values():
    # reference values computed once with sacrebleu's corpus_bleu
    # (smooth_method="none"; tokenize="none" / "13a" respectively)
    hyps = ["the quick brown fox jumps over the lazy dog",
            "a stitch in time saves nine little words here"]
    refs = ["the quick brown fox jumped over the lazy dog",
            "a stitch in time saves nine words right here"]
    assert corpus_bleu(hyps, refs) == pytest.approx(61.7615, abs=5e-5)

    hyps2 = ["hello, world!", "it rains today and the sun hides away now"]
    refs2 = ["hello, world!", "it rains today but the sun hides away now"]
    assert corpus_bleu(hyps2, refs2) == pytest.approx(68.1561, abs=5e-5)


def test_bleu_invariant_under_corpus_permutation():
    rng = np.random.default_rng(5)
    hyps = ["alpha beta gamma delta", "one two three four five", "red green blue black white"]
    refs = ["alpha beta gamma delta epsilon", "one two four three five", "red green blue white black"]
    base = corpus_bleu(hyps, refs)
    perm = rng.permutation(3)
    assert corpus_bleu([hyps[i] for i in perm], [refs[i] for i in perm]) \
        == pytest.approx(base, rel=1e-12)


def test_bleu_tokenizer_splits_punctuation():
    assert bleu_tokenize("hello, world!") == ["hello", ",", "world", "!"]
    assert bleu_tokenize("Mixed CASE stays") == ["Mixed", "CASE", "stays"]


# ---------------------------------------------------------------------------
# evaluation harnesses
# ---------------------------------------------------------------------------

def test_untrained_encoder_sits_at_chance(tmp_path):
    c = tiny_corpus(tmp_path, test_pairs_per_lang=32, train_pairs_per_lang=16, seed=21)
    cfg = small_encoder_cfg(c["v"], c["cb"])
    params = init_params(cfg, seed=0)
    report = evaluate_s2t(params, cfg, c["test"], c["v"], c["cb"])
    # pool of 32 per language: chance 1/32, binomial 99% interval on 64 queries
    p = 1 / 32
    half_width = 2.576 * np.sqrt(p * (1 - p) / 64)
    assert report.aggregate["r_at_1"] <= p + half_width + 1e-9
    assert report.aggregate["wer"] > 0


def test_singleton_pools_force_perfect_retrieval(tmp_path):
    # with one candidate per language, top-1 is always gold: R@1=1 and WER=0
    c = tiny_corpus(tmp_path, test_pairs_per_lang=1, train_pairs_per_lang=8, seed=5)
    cfg = small_encoder_cfg(c["v"], c["cb"])
    params = init_params(cfg, seed=1)
    report = evaluate_s2t(params, cfg, c["test"], c["v"], c["cb"])
    assert report.aggregate["r_at_1"] == 1.0
    assert report.aggregate["wer"] == 0.0


def test_s2tt_gold_retrieval_gives_bleu_100(tmp_path):
    c = tiny_corpus(tmp_path, num_languages=3, train_pairs_per_lang=8,
                    test_pairs_per_lang=1, concepts_min=4, concepts_max=5,
                    s2tt_pairs=[("syn1", "syn2")], s2tt_test_pairs=1, seed=9)
    from speechdex.data import load_manifest
    s2tt = load_manifest(c["paths"]["test_s2tt"])
    cfg = small_encoder_cfg(c["v"], c["cb"])
    params = init_params(cfg, seed=2)
    report = evaluate_s2tt(params, cfg, s2tt, c["v"], c["cb"])
    assert report.per_language["syn1"]["r_at_1"] == 1.0
    assert report.per_language["syn1"]["bleu"] == 100.0


def test_s2tt_untrained_near_random_pairing_baseline(tmp_path):
    c = tiny_corpus(tmp_path, num_languages=3, train_pairs_per_lang=8,
                    test_pairs_per_lang=1, s2tt_pairs=[("syn1", "syn2")],
                    s2tt_test_pairs=48, seed=13)
    from speechdex.data import load_manifest
    s2tt = load_manifest(c["paths"]["test_s2tt"])
    cfg = small_encoder_cfg(c["v"], c["cb"])
    params = init_params(cfg, seed=3)
    report = evaluate_s2tt(params, cfg, s2tt, c["v"], c["cb"])
    refs = [r.translation["text"] for r in s2tt]
    rng = np.random.default_rng(0)
    baselines = []
    for _ in range(20):
        perm = rng.permutation(len(refs))
        baselines.append(corpus_bleu([refs[i] for i in perm], refs))
    spread = max(5.0, 4 * np.std(baselines))
    assert abs(report.per_language["syn1"]["bleu"] - np.mean(baselines)) <= spread


def test_eval_report_round_trip_and_rendering(tmp_path):
    report = EvalReport(
        "s2t",
        {"syn0": {"r_at_1": 0.5, "wer": 0.25, "count": 8},
         "syn1": {"r_at_1": 1.0, "wer": 0.0, "count": 8}},
        {"r_at_1": 0.75, "wer": 0.125, "languages": 2, "queries": 16})
    path = str(tmp_path / "report.json")
    report.to_json(path)
    loaded = EvalReport.from_json(path)
    assert loaded.per_language == report.per_language
    table = report_table(loaded)
    assert "syn0" in table and "ALL" in table
    write_csv(loaded, str(tmp_path / "r.csv"))
    write_tsv(loaded, str(tmp_path / "r.tsv"))
    assert open(tmp_path / "r.csv").read().startswith("language,r_at_1,wer,count")
    assert len(open(tmp_path / "r.tsv").read().strip().splitlines()) == 3
