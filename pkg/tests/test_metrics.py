import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import wasserstein_distance

from emqap.encoder import EncoderConfig, LayeredEncoder, Vocab
from emqap.metrics import (
    Bag,
    MetricReport,
    UnscoreableText,
    build_report,
    build_swms_bag,
    emd,
    exact_match,
    lcs_length,
    markdown_row,
    nearest_neighbors,
    normalize_answer,
    pca_project,
    rank_neighbors,
    rouge_l,
    score_pair,
    swms,
    word_representations,
)
from emqap.mtl import QARecord
from emqap.retrieval import EmbeddingTable
from oracles import emd_enumerate, lcs_brute

TOKENS = st.lists(st.sampled_from("abcde"), max_size=8)


# exact match and ROUGE-L

def test_normalize_answer():
    assert normalize_answer("  Press  OK, then Wait! ") == "press ok then wait"
    assert normalize_answer("on/off") == "on off"


def test_exact_match():
    assert exact_match("Press OK.", "press ok") == 1
    assert exact_match("press ok", "press") == 0
    assert exact_match("", "") == 1


def test_lcs_example():
    assert lcs_length(list("abcd"), list("acd")) == 3
    assert lcs_length([], list("abc")) == 0


@given(TOKENS, TOKENS)
@settings(max_examples=300)
def test_lcs_matches_brute_force(a, b):
    assert lcs_length(a, b) == lcs_brute(a, b)


def test_rouge_example():
    p, r, f = rouge_l(list("abcd"), list("acd"))
    assert (p, r) == (0.75, 1.0)
    assert f == pytest.approx(6 / 7)


def test_rouge_empty_and_identical():
    assert rouge_l("", "a b") == (0.0, 0.0, 0.0)
    assert rouge_l("press the button", "press the button") == (1.0, 1.0, 1.0)


@given(TOKENS, TOKENS)
@settings(max_examples=300)
def test_rouge_bounds_and_swap(a, b):
    p, r, f = rouge_l(a, b)
    p2, r2, f2 = rouge_l(b, a)
    assert all(0.0 <= x <= 1.0 for x in (p, r, f))
    assert (p, r) == (r2, p2) and f == pytest.approx(f2)
    assert min(p, r) - 1e-12 <= f <= max(p, r) + 1e-12


# EMD and S+WMS

def _bag(rng, n, dim=2):
    return Bag.normalized(rng.normal(size=(n, dim)), rng.uniform(0.1, 1.0, size=n))


def test_bag_validation():
    with pytest.raises(ValueError):
        Bag(np.zeros((2, 2)), np.array([0.5, 0.4]))
    with pytest.raises(ValueError):
        Bag(np.zeros((2, 2)), np.array([1.0, 0.0]))
    with pytest.raises(ValueError):
        Bag(np.zeros(2), np.array([1.0]))


def test_emd_single_points_is_distance():
    a = Bag(np.array([[0.0, 0.0]]), np.array([1.0]))
    b = Bag(np.array([[3.0, 4.0]]), np.array([1.0]))
    assert emd(a, b) == pytest.approx(5.0)


def test_emd_two_point_closed_form():
    # half the mass moves 2 units: 0.5 * 2
    a = Bag(np.array([[0.0], [1.0]]), np.array([0.5, 0.5]))
    b = Bag(np.array([[1.0], [2.0]]), np.array([0.5, 0.5]))
    assert emd(a, b) == pytest.approx(1.0)


def test_emd_dimension_mismatch():
    with pytest.raises(ValueError):
        emd(Bag(np.zeros((1, 2)), np.ones(1)), Bag(np.zeros((1, 3)), np.ones(1)))


@given(st.integers(0, 10**6), st.integers(1, 4), st.integers(1, 4))
@settings(max_examples=60, deadline=None)
def test_emd_matches_enumeration_oracle(seed, m, n):
    rng = np.random.default_rng(seed)
    a, b = _bag(rng, m), _bag(rng, n)
    assert emd(a, b) == pytest.approx(emd_enumerate(a.points, a.masses, b.points, b.masses), abs=1e-9)


@given(st.integers(0, 10**6), st.integers(1, 6), st.integers(1, 6))
@settings(max_examples=60, deadline=None)
def test_emd_matches_one_dimensional_closed_form(seed, m, n):
    rng = np.random.default_rng(seed)
    a, b = _bag(rng, m, 1), _bag(rng, n, 1)
    want = wasserstein_distance(a.points[:, 0], b.points[:, 0], a.masses, b.masses)
    assert emd(a, b) == pytest.approx(want, abs=1e-9)


@given(st.integers(0, 10**6))
@settings(max_examples=60, deadline=None)
def test_emd_metric_properties(seed):
    rng = np.random.default_rng(seed)
    a, b, c = (_bag(rng, int(rng.integers(1, 5))) for _ in range(3))
    assert emd(a, a) == pytest.approx(0.0, abs=1e-9)
    assert emd(a, b) == pytest.approx(emd(b, a), abs=1e-9)
    assert emd(a, c) <= emd(a, b) + emd(b, c) + 1e-7
    assert emd(a, b) >= 0


def table():
    return EmbeddingTable(2, {
        "press": np.array([1.0, 0.0]),
        "button": np.array([0.0, 1.0]),
        "power": np.array([1.0, 1.0]),
        "menu": np.array([-1.0, 0.5]),
    })


def test_swms_bag_layout():
    bag = build_swms_bag("Press power. Press menu now.", table())
    # words (menu, power, press) then two sentence points
    assert len(bag.masses) == 5
    assert bag.masses == pytest.approx(np.array([1, 1, 2, 2, 3]) / 9)
    assert bag.points[3] == pytest.approx([1.0, 0.5])


def test_swms_unscoreable():
    with pytest.raises(UnscoreableText):
        build_swms_bag("zebra giraffe", table())
    assert score_pair("zebra", "press", table())["swms"] == 0.0


def test_swms_identity_symmetry_and_mapping():
    t = table()
    a, b = "press the power button", "open the menu"
    assert swms(a, a, t) == pytest.approx(1.0)
    assert swms(a, b, t) == pytest.approx(swms(b, a, t))
    d = emd(build_swms_bag(a, t), build_swms_bag(b, t))
    assert swms(a, b, t) == pytest.approx(math.exp(-d))
    assert 0 < swms(a, b, t) < 1


def test_swms_closer_text_scores_higher():
    t = table()
    ref = "press power"
    assert swms("press power button", ref, t) > swms("menu", ref, t)


# PCA and neighbours

def test_pca_line_is_one_dimensional():
    x = np.outer(np.arange(5.0), [1.0, 2.0, 2.0])
    proj = pca_project(x, 3)
    assert proj.shape == (5, 3)
    assert np.abs(proj[:, 1:]).max() < 1e-9
    assert np.abs(proj[:, 0]) == pytest.approx(np.abs(np.arange(5.0) - 2) * 3)


def test_pca_keeps_at_most_dim_components():
    assert pca_project(np.random.default_rng(0).normal(size=(6, 2)), 3).shape == (6, 2)


def test_rank_neighbors_example():
    words = ["a", "b", "c", "d"]
    vecs = np.array([[1.0, 0.0], [0.9, 0.1], [0.0, 1.0], [-1.0, 0.0]])
    nn = rank_neighbors(words, vecs, 2)
    assert nn["a"] == ["b", "c"]
    assert nn["d"] == ["c", "b"]
    with pytest.raises(ValueError):
        rank_neighbors(words, vecs, 4)


def test_nearest_neighbors_on_encoder():
    v = Vocab(["tv", "remote", "battery", "menu", "power", "screen", "cable"])
    enc = LayeredEncoder(EncoderConfig(len(v), d_model=8, n_layers=1, n_heads=2, d_ff=16, max_len=16), v)
    words = ["tv", "remote", "battery", "menu", "power", "screen", "cable"]
    nn = nearest_neighbors(words, enc, k=5, probes=["the tv remote", "charge the battery"])
    assert set(nn) == set(words)
    for w, ns in nn.items():
        assert len(ns) == 5 and w not in ns and len(set(ns)) == 5
    assert word_representations(words, enc).shape == (7, 8)
    with pytest.raises(KeyError):
        word_representations(["zebra"], enc)
    with pytest.raises(ValueError):
        nearest_neighbors(words, enc, k=7)


# reports

def _records():
    return [
        QARecord("q1", "?", "factual", "g1", "m", "s", (0,), "press the power button"),
        QARecord("q2", "?", "factual", "g2", "m", "s", (0,), "open the menu", ("press menu",)),
    ]


def test_report_aggregates_are_row_means():
    rep = build_report({"q1": "press the power button", "q2": "menu"}, _records(), table(), {"model": "X"})
    assert rep.n_references == 2
    agg = rep.aggregates()
    for c in ("em", "rouge_f1", "swms"):
        assert agg[c] == pytest.approx(np.mean([r[c] for r in rep.rows]))
    assert agg["em_ref1"] == 0.0  # only q2 has a second reference
    assert rep.rows[0]["em_ref1"] is None
    assert all(0 <= r[c] <= 1 for r in rep.rows for c in rep.columns() if r[c] is not None)


def test_report_missing_prediction_scores_zero():
    rep = build_report({}, _records()[:1], None)
    assert rep.rows[0]["em"] == 0.0 and rep.rows[0]["swms"] is None


def test_report_csv_layout():
    rep = build_report({"q1": "press the power button"}, _records()[:1], table())
    lines = rep.to_csv().splitlines()
    assert lines[0] == "qid,em,rouge_p,rouge_r,rouge_f1,swms"
    assert lines[1] == "q1,1.000000,1.000000,1.000000,1.000000,1.000000"
    assert lines[-1].startswith("mean,")


def test_markdown_row_reference_format():
    # reference layout row, used only to pin formatting
    block = {"em": 0.311, "rouge_p": 0.801, "rouge_r": 0.541, "rouge_f1": 0.604, "swms": 0.354}
    assert markdown_row("EMQAP-S", block) == "| EMQAP-S | 0.311 | 0.801 | 0.541 | 0.604 | 0.354 |\n"


def test_markdown_multi_reference_blocks():
    rep = build_report({"q1": "x", "q2": "press menu"}, _records(), table())
    md = rep.to_markdown().splitlines()
    assert md[0] == "| GT | EM | P | R | F1 | S+WMS |"
    assert md[2].startswith("| AGT |") and md[3].startswith("| CGT |")
    single = MetricReport(rows=[{"qid": "a", **dict.fromkeys(["em", "rouge_p", "rouge_r", "rouge_f1", "swms"], 0.5)}], metadata={"model": "MTL-S"})
    assert single.to_markdown().splitlines()[-1] == "| MTL-S | 0.500 | 0.500 | 0.500 | 0.500 | 0.500 |"


# worked examples

def test_normalize_idempotent_and_em_edge_cases():
    once = normalize_answer("Press OK.")
    assert once == "press ok" and normalize_answer(once) == once
    assert normalize_answer("") == ""
    assert exact_match("Press OK", "PRESS ok") == 1
    assert exact_match("power", "menu") == 0


def test_lcs_identity_and_disjoint():
    a = list("abcab")
    assert lcs_length(a, a) == len(a)
    assert lcs_length(list("abc"), list("xyz")) == 0


def test_swms_bag_single_word():
    bag = build_swms_bag("power", table())
    assert len(bag.masses) == 2
    assert bag.masses.tolist() == [0.5, 0.5]
    assert np.array_equal(bag.points[0], bag.points[1])


def test_swms_bag_word_frequency():
    bag = build_swms_bag("press press power", table())
    # words sorted: power, press; then one sentence point
    assert bag.masses[1] == pytest.approx(2 * bag.masses[0])
    assert bag.masses.sum() == pytest.approx(1.0)


def test_emd_hand_placed_two_by_two():
    a = Bag(np.array([[0.0, 0.0], [2.0, 0.0]]), np.array([0.5, 0.5]))
    b = Bag(np.array([[0.0, 1.0], [2.0, 1.0]]), np.array([0.5, 0.5]))
    assert emd(a, b) == pytest.approx(1.0, abs=1e-9)
    assert emd(a, b) == pytest.approx(emd_enumerate(a.points, a.masses, b.points, b.masses), abs=1e-9)


def test_neighbors_two_words_and_duplicates():
    assert rank_neighbors(["a", "b"], np.array([[1.0, 0.0], [0.0, 1.0]]), 1) == {"a": ["b"], "b": ["a"]}
    vecs = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 0.0, 0.0]])
    assert rank_neighbors(["a", "b", "c"], vecs, 1)["a"] == ["c"]


def test_neighbors_match_exhaustive_cosine_sort():
    rng = np.random.default_rng(0)
    vecs = rng.normal(size=(6, 3))
    words = [f"w{i}" for i in range(6)]
    got = rank_neighbors(words, vecs, 3)
    for i, w in enumerate(words):
        cos = [(1 - vecs[i] @ vecs[j] / np.linalg.norm(vecs[i]) / np.linalg.norm(vecs[j]), j) for j in range(6) if j != i]
        assert got[w] == [words[j] for _, j in sorted(cos)[:3]]
