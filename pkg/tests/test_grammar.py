from collections import Counter
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from progdistill.grammar import (GrammarError, OracleUnavailable, SamplingError, apply_masking, boundary_positions,
                                 bundled_grammar, exact_masked_posterior, export_jsonl, inside_probability,
                                 layered_grammar, load_grammar, mask_arrays, ngram_window, sample_sentence,
                                 save_grammar, validate_tree)

DATA = Path(__file__).parent / "data"

# three nonterminals, asymmetric probabilities, recursion through B
SKEWED = """
root: S
S -> A B [0.6]
S -> B A [0.3]
S -> a [0.1]
A -> a [0.5]
A -> a B [0.3]
A -> b [0.2]
B -> b [0.7]
B -> A c [0.3]
"""


def test_minimal_grammar():
    g = load_grammar("root: S\nS -> a [1.0]\n")
    assert g.nonterminals == ["S"]
    assert g.terminals == ["a"]


def test_probability_sum_error_names_total():
    with pytest.raises(GrammarError, match="probability sum 1.1"):
        load_grammar("root: S\nS -> a [0.6]\nS -> b [0.5]\n")


def test_small_drift_is_renormalized():
    g = load_grammar("root: S\nS -> a [0.5]\nS -> b [0.5000004]\n")
    assert abs(sum(r.prob for r in g.rules) - 1.0) < 1e-15


@pytest.mark.parametrize("text,where", [
    ("S -> a [1.0]\n", "root"),
    ("root: S\nS a\n", "line 2"),
    ("root: S\nS -> a [x]\n", "line 2"),
    ("root: S\nS -> [1.0]\n", "line 2"),
    ("root: S\nterminals: a\nS -> a b [1.0]\n", "line 3"),
    ("root: T\nS -> a\n", "root"),
])
def test_malformed_text(text, where):
    with pytest.raises(GrammarError, match=where):
        load_grammar(text)


def test_cfg3b_style_golden_round_trip():
    g = bundled_grammar("cfg3b_style")
    text = save_grammar(g)
    assert text == (DATA / "cfg3b_style.canonical.cfg").read_text()
    again = load_grammar(text)
    assert again.rules == g.rules
    assert save_grammar(again) == text


def test_single_derivation():
    g = load_grammar("root: S\nS -> A B [1.0]\nA -> a [1.0]\nB -> b [1.0]\n")
    words, tree = sample_sentence(g, np.random.default_rng(0))
    assert words == ["a", "b"]
    assert tree.depth == 2


def test_binary_choice_frequency():
    g = load_grammar("root: S\nS -> a [0.5]\nS -> b [0.5]\n")
    rng = np.random.default_rng(3)
    n = sum(sample_sentence(g, rng)[0] == ["a"] for _ in range(10_000))
    assert 0.47 <= n / 10_000 <= 0.53


def test_runaway_derivation_raises():
    g = load_grammar("root: S\nS -> S S [0.9]\nS -> a [0.1]\n")
    with pytest.raises(SamplingError):
        sample_sentence(g, np.random.default_rng(0), max_nodes=500)


@pytest.mark.parametrize("name", ["tiny", "cfg3b_style", "fig2"])
def test_sampled_trees_validate(name):
    g = bundled_grammar(name)
    rng = np.random.default_rng(8)
    for _ in range(20):
        words, tree = sample_sentence(g, rng)
        assert validate_tree(g, tree, words)
        assert tree.is_depth_uniform()


def test_validate_rejects_foreign_expansion():
    g = bundled_grammar("fig2")
    _, tree = sample_sentence(g, np.random.default_rng(0))
    tree.root.children[0].symbol = "VP"
    assert not validate_tree(g, tree)


def test_fig2_boundaries():
    g = bundled_grammar("fig2")
    words, tree = sample_sentence(g, np.random.default_rng(0))
    assert words == ["The", "cat", "ran", "away"]
    got = [(words[p], s) for p, s in boundary_positions(tree, 2)]
    assert got == [("cat", "NP"), ("away", "VP")]
    assert [p for p, _ in boundary_positions(tree, 1)] == [0, 1, 2, 3]


def test_single_child_root_boundary_is_last_position():
    g = load_grammar("root: S\nS -> X [1.0]\nX -> a b c [1.0]\n")
    words, tree = sample_sentence(g, np.random.default_rng(0))
    assert boundary_positions(tree, 1) == [(2, "X")]


def test_boundary_level_out_of_range():
    _, tree = sample_sentence(bundled_grammar("fig2"), np.random.default_rng(0))
    for bad in (0, 3):
        with pytest.raises(ValueError):
            boundary_positions(tree, bad)


def test_boundaries_nest_on_sampled_trees():
    g = bundled_grammar("cfg3b_style")
    rng = np.random.default_rng(2)
    for _ in range(5):
        _, tree = sample_sentence(g, rng)
        sets = [set(p for p, _ in boundary_positions(tree, l)) for l in range(1, tree.depth)]
        for lo, hi in zip(sets, sets[1:]):
            assert hi <= lo


def test_masking_rates_and_invariant():
    rng = np.random.default_rng(11)
    tokens = rng.integers(0, 7, size=10_000)
    ex = apply_masking(tokens, 0.3, rng, 7)
    assert 0.29 <= len(ex.masked) / 10_000 <= 0.31
    kinds = Counter(ex.kinds)
    assert 0.78 <= kinds["mask"] / len(ex.masked) <= 0.82
    outside = np.setdiff1d(np.arange(10_000), ex.masked)
    assert np.array_equal(ex.input[outside], tokens[outside])
    assert np.all(ex.input[ex.masked][np.array(ex.kinds) == "mask"] == 7)


def test_tiny_rate_masks_nothing():
    ex = apply_masking(np.arange(10), 1e-9, np.random.default_rng(0), 10)
    assert ex.masked.size == 0


def test_masking_rejects_bad_rate():
    with pytest.raises(ValueError):
        apply_masking(np.arange(3), 0.0, np.random.default_rng(0), 3)


def test_mask_arrays_respects_padding():
    tok = np.zeros((4, 6), dtype=np.int64)
    valid = np.zeros((4, 6), bool)
    valid[:, :3] = True
    _, in_m, kind = mask_arrays(tok, 0.9, np.random.default_rng(0), 5, 5, valid)
    assert not in_m[:, 3:].any()
    assert np.all(kind[~in_m] == -1)


def test_export_jsonl(tmp_path):
    rng = np.random.default_rng(0)
    exs = [apply_masking(np.arange(5), 0.5, rng, 5) for _ in range(3)]
    assert export_jsonl(exs, tmp_path / "m.jsonl") == 3
    assert len((tmp_path / "m.jsonl").read_text().splitlines()) == 3


def test_ngram_windows_on_example_sentence():
    words = ["The", "cat", "ran", "away"]
    tri = ngram_window(1, 3, 4)
    assert [words[j] for j in tri] == ["The", "cat", "ran"]
    assert [words[j] for j in tri if j != 1] == ["The", "ran"]
    assert [words[j] for j in ngram_window(1, 5, 4)] == words
    assert ngram_window(0, 3, 4, "left") == []
    assert ngram_window(3, 3, 4, "left") == [1, 2]


@settings(max_examples=80, deadline=None)
@given(st.integers(1, 30).flatmap(lambda h: st.tuples(st.just(h), st.integers(0, h - 1), st.integers(1, 9))))
def test_centered_window_contains_position(args):
    h, i, n = args
    w = ngram_window(i, n, h)
    assert i in w
    assert len(w) <= n
    assert w == list(range(w[0], w[-1] + 1))


def test_posterior_point_mass():
    g = load_grammar("root: S\nS -> a b [1.0]\n")
    post = exact_masked_posterior(g, [None, g.token_id["b"]], 0)
    assert post[g.token_id["a"]] == 1.0


def test_posterior_symmetric_pair():
    g = load_grammar("root: S\nS -> a a [0.5]\nS -> a b [0.5]\n")
    post = exact_masked_posterior(g, [g.token_id["a"], None], 1)
    assert np.allclose(post, [0.5, 0.5], atol=1e-15)


def test_posterior_impossible_evidence():
    g = load_grammar("root: S\nS -> a b [1.0]\n")
    with pytest.raises(ValueError):
        exact_masked_posterior(g, [g.token_id["b"], None], 1)


def test_oracle_budget():
    g = bundled_grammar("tiny")
    with pytest.raises(OracleUnavailable):
        inside_probability(g, [None] * 40, max_len=32)


def test_inside_length_distribution_sums_to_one():
    g = load_grammar(SKEWED)
    total = sum(inside_probability(g, [None] * h) for h in range(1, 40))
    assert abs(total - 1.0) < 1e-6


def test_unary_chain_handled():
    g = load_grammar("root: S\nS -> X [1.0]\nX -> Y [0.5]\nX -> a [0.5]\nY -> b [1.0]\n")
    assert abs(inside_probability(g, [g.token_id["b"]]) - 0.5) < 1e-15


def test_oracle_matches_rejection_sampling():
    g = load_grammar(SKEWED)
    a = g.token_id["a"]
    observed = [a, None, None]
    exact = exact_masked_posterior(g, observed, 2)
    assert abs(exact.sum() - 1.0) < 1e-12
    rng = np.random.default_rng(21)
    hits = np.zeros(g.vocab_size)
    for _ in range(100_000):
        words, _ = sample_sentence(g, rng)
        if len(words) == 3 and words[0] == "a":
            hits[g.token_id[words[2]]] += 1
    assert hits.sum() > 2000
    assert 0.5 * np.abs(hits / hits.sum() - exact).sum() <= 0.02


def test_layered_grammar_shape():
    g = layered_grammar(4, 3, 2, [2, 3], 3, np.random.default_rng(0))
    assert len(g.nonterminals) == 1 + 3 * 3
    for a in g.nonterminals:
        assert abs(sum(r.prob for r in g.rules_for(a)) - 1.0) < 1e-9
        for r in g.rules_for(a):
            assert all(x != y for x, y in zip(r.rhs, r.rhs[1:]))
    words, tree = sample_sentence(g, np.random.default_rng(1))
    assert tree.depth == 4
