import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_kg
from hybridkg.embedding import EmbeddingState
from hybridkg.graph import Dictionary, KnowledgeGraph, Triple
from hybridkg.rules import (Atom, GroundingEngine, MiningCache, Rule, RuleMiner, body_groundings,
                            const, embedding_confidence, head_rule, infer_heads, mine, quality,
                            read_rules, refine, select_top_k, standard_confidence, support, var,
                            write_rules)
from hybridkg.scoring import make_score_function
from hybridkg.synthetic import make_planted_kg, planted_rules
from oracles import groundings_by_enumeration

X, Y, Z = var(0), var(1), var(2)


def small_state(kg, seed=0, kind="distmult"):
    return EmbeddingState.random(make_score_function(kind, 4), kg.n_entities, kg.n_relations,
                                 np.random.default_rng(seed))


# ---------------------------------------------------------------- grounding


def test_identity_rule_infers_the_relation():
    kg = KnowledgeGraph([(0, 0, 1), (1, 0, 2), (0, 1, 2)], 3, 2)
    rule = Rule(Atom(0, X, Y), (Atom(0, X, Y),))
    assert infer_heads(kg, rule) == {Triple(0, 0, 1), Triple(1, 0, 2)}
    assert support(kg, rule) == kg.relation_size(0)
    assert standard_confidence(kg, rule) == 1.0


def test_teammate_rule_on_sports_fixture():
    ents = Dictionary(["Messi", "Iniesta", "Dembele", "Barcelona", "Ronaldo", "Buffon", "Juventus"])
    rels = Dictionary(["playsFor", "teamMate"])
    e, r = ents.__getitem__, rels.__getitem__
    facts = [(e(p), r("playsFor"), e(c)) for p, c in
             [("Messi", "Barcelona"), ("Iniesta", "Barcelona"), ("Dembele", "Barcelona"),
              ("Ronaldo", "Juventus"), ("Buffon", "Juventus")]]
    kg = KnowledgeGraph(facts, len(ents), len(rels))
    pf, tm = r("playsFor"), r("teamMate")
    rule = Rule(Atom(tm, X, Y), (Atom(pf, X, Z), Atom(pf, Y, Z)))
    heads = infer_heads(kg, rule)
    assert Triple(e("Messi"), tm, e("Iniesta")) in heads
    assert Triple(e("Ronaldo"), tm, e("Messi")) not in heads
    assert heads == groundings_by_enumeration(kg.triples, kg.n_entities, rule)[0]


def test_body_that_never_grounds_has_zero_support():
    kg = KnowledgeGraph([(0, 0, 1), (2, 1, 3)], 4, 2)
    rule = Rule(Atom(0, X, Y), (Atom(0, X, Z), Atom(1, Z, Y)))
    assert support(kg, rule) == 0
    with pytest.raises(ValueError, match="undefined"):
        standard_confidence(kg, rule)


def test_standard_confidence_fixture():
    r, s = 0, 1
    body = [(0, s, 1), (1, s, 2), (2, s, 3), (3, s, 4), (4, s, 5)]
    heads = [(0, r, 1), (1, r, 2), (2, r, 3)]
    kg = KnowledgeGraph(body + heads, 6, 2)
    assert len(kg) == 8
    rule = Rule(Atom(r, X, Y), (Atom(s, X, Y),))
    assert body_groundings(kg, rule) == 5
    assert standard_confidence(kg, rule) == pytest.approx(0.6)
    inferred, supp = groundings_by_enumeration(kg.triples, 6, rule)
    assert (len(inferred), supp) == (5, 3)


def test_open_or_disconnected_rules_are_rejected():
    kg = KnowledgeGraph([(0, 0, 1)], 3, 2)
    with pytest.raises(ValueError, match="not closed"):
        infer_heads(kg, Rule(Atom(0, X, Y), (Atom(1, X, Z),)))
    with pytest.raises(ValueError, match="empty body"):
        infer_heads(kg, head_rule(0))


@pytest.mark.parametrize("trial", range(25))
def test_engine_matches_enumeration_on_all_short_rules(trial):
    rng = np.random.default_rng(trial)
    kg = random_kg(rng, 7, 3, 25)
    engine = GroundingEngine(kg)
    seen = 0
    for r in range(3):
        level = [head_rule(r)]
        for _ in range(2):
            level = [c for rule in level for c in refine(rule, kg, 3, np.arange(7), 0.0)]
            for cand in level:
                if not (cand.is_closed() and cand.is_connected()):
                    continue
                S, supp = groundings_by_enumeration(kg.triples, 7, cand)
                proj = engine.project(cand)
                xs, ys = proj.pairs()
                assert {Triple(x, cand.head.relation, y) for x, y in zip(xs.tolist(), ys.tolist())} == S
                assert engine.support(cand, proj) == supp
                seen += 1
    assert seen > 0


@pytest.mark.parametrize("trial", range(4))
def test_dense_and_sparse_engines_agree(trial):
    rng = np.random.default_rng(100 + trial)
    kg = random_kg(rng, 12, 3, 60)
    dense, sparse = GroundingEngine(kg, dense=True), GroundingEngine(kg, dense=False)
    consts = np.arange(12)
    for r in range(3):
        level = [head_rule(r)]
        for _ in range(2):
            level = [c for rule in level for c in refine(rule, kg, 3, consts, 0.0)]
            for cand in level:
                a, b = dense.project(cand), sparse.project(cand)
                assert a.size() == b.size()
                for u, v in zip(a.pairs(), b.pairs()):
                    assert np.array_equal(u, v)
                assert dense.support(cand, a) == sparse.support(cand, b)


# ---------------------------------------------------------------- measures


def test_embedding_confidence_single_prediction_at_zero_score():
    kg = KnowledgeGraph([(0, 1, 1)], 2, 2)
    state = EmbeddingState(make_score_function("distmult", 3), np.zeros((2, 3)), np.zeros((2, 3)))
    rule = Rule(Atom(0, X, Y), (Atom(1, X, Y),))
    assert embedding_confidence(kg, rule, state) == 0.5


def test_embedding_confidence_is_the_mean_truth():
    kg = KnowledgeGraph([(0, 1, 1), (0, 1, 2)], 3, 2)
    logit = lambda p: np.log(p / (1 - p))  # noqa: E731
    E = np.array([[1.0], [logit(0.2)], [logit(0.8)]])
    state = EmbeddingState(make_score_function("distmult", 1), E, np.ones((2, 1)))
    rule = Rule(Atom(0, X, Y), (Atom(1, X, Y),))
    assert embedding_confidence(kg, rule, state) == pytest.approx(0.5)


def test_embedding_confidence_undefined_without_new_predictions():
    kg = KnowledgeGraph([(0, 1, 1), (0, 0, 1)], 2, 2)
    rule = Rule(Atom(0, X, Y), (Atom(1, X, Y),))
    with pytest.raises(ValueError, match="undefined"):
        embedding_confidence(kg, rule, small_state(kg))


def test_embedding_confidence_cap_uses_a_sample(rng):
    kg = random_kg(rng, 60, 2, 1500)
    rule = Rule(Atom(0, X, Y), (Atom(1, X, Z), Atom(1, Z, Y)))
    state = small_state(kg)
    full = embedding_confidence(kg, rule, state, cap=10**9)
    capped = embedding_confidence(kg, rule, state, cap=500)
    assert capped != full and abs(capped - full) < 0.05
    assert capped == embedding_confidence(kg, rule, state, cap=500)


@pytest.mark.parametrize("sc,ec,omega,q", [(0.3, 0.9, 0.0, 0.3), (0.3, 0.9, 1.0, 0.9),
                                           (0.4, 0.6, 0.5, 0.5), (0.7, None, 0.5, 0.7)])
def test_quality(sc, ec, omega, q):
    assert quality(sc, ec, omega) == pytest.approx(q)


@given(st.floats(0, 1), st.floats(0.001, 0.999), st.floats(0.001, 0.999), st.floats(0.01, 1))
def test_quality_monotone_in_ec(sc, ec1, ec2, omega):
    lo, hi = sorted((ec1, ec2))
    assert quality(sc, lo, omega) <= quality(sc, hi, omega)


# ---------------------------------------------------------------- refinement


def test_closing_refinements_of_head_only_rule():
    r, s = 0, 1
    kg = KnowledgeGraph([(0, r, 1), (1, s, 2)], 3, 2)
    got = refine(head_rule(r), kg, operators=("closing",))
    expected = {Rule(Atom(r, X, Y), (b,)).canonical().encoding()
                for b in (Atom(s, X, Y), Atom(s, Y, X), Atom(r, Y, X))}
    # 2 relations x 2 ordered variable pairs, minus the body equal to the head
    assert len(got) == 3
    assert {c.encoding() for c in got} == expected


def test_refine_at_max_length_is_empty():
    kg = KnowledgeGraph([(0, 0, 1)], 2, 1)
    rule = Rule(Atom(0, X, Y), (Atom(0, X, Z), Atom(0, Z, Y)))
    assert refine(rule, kg, max_len=3) == []


@pytest.mark.parametrize("trial", range(5))
def test_refine_adds_exactly_one_atom_and_dedups(trial):
    rng = np.random.default_rng(trial)
    kg = random_kg(rng, 8, 3, 30)
    for r in range(3):
        children = refine(head_rule(r), kg, 3, np.arange(8), 0.0)
        encs = [c.encoding() for c in children]
        assert len(encs) == len(set(encs))
        assert all(len(c) == 2 for c in children)
        for c in children:
            a = c.body[0]
            # no reflexive atoms, no ground atoms
            assert not (a.subject == a.object)
            assert a.subject.is_var or a.object.is_var


def test_canonical_form_merges_alpha_equivalent_rules():
    a = Rule(Atom(0, var(5), var(7)), (Atom(1, var(5), var(9)), Atom(2, var(9), var(7))))
    b = Rule(Atom(0, X, Y), (Atom(2, Z, Y), Atom(1, X, Z)))
    assert a.canonical() == b.canonical()
    assert a.canonical().encoding() == b.canonical().encoding()
    c = Rule(Atom(0, X, Y), (Atom(1, Y, Z), Atom(2, Z, X)))
    assert c.canonical() != b.canonical()


# ---------------------------------------------------------------- mining


def _check_against_oracle(kg, mined, min_hc, max_len):
    encs = set()
    for rule, m in mined:
        assert rule.is_closed() and rule.is_connected() and len(rule) <= max_len
        assert m.head_coverage > min_hc
        S, supp = groundings_by_enumeration(kg.triples, kg.n_entities, rule)
        assert m.support == supp
        assert m.body_groundings == len(S)
        assert m.standard_confidence == supp / len(S)
        assert m.head_coverage == supp / kg.relation_size(rule.head.relation)
        assert m.num_new_predictions == len(S) - supp
        assert rule.canonical().encoding() not in encs
        encs.add(rule.canonical().encoding())


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10**6))
def test_mined_rules_match_oracle(seed):
    rng = np.random.default_rng(seed)
    kg = random_kg(rng, 8, 3, int(rng.integers(10, 40)))
    mined = mine(kg, small_state(kg, seed), omega=0.5, min_hc=0.05)
    _check_against_oracle(kg, mined, 0.05, 3)


@pytest.mark.parametrize("trial", range(6))
def test_omega_zero_matches_classical_miner(trial):
    rng = np.random.default_rng(trial)
    kg = random_kg(rng, 10, 3, 40)
    with_ec = mine(kg, small_state(kg, trial), omega=0.0, min_hc=0.05)
    classical = mine(kg, None, omega=0.0, min_hc=0.05)
    assert [m.rule for m in with_ec] == [m.rule for m in classical]
    assert [m.metrics.quality for m in with_ec] == [m.metrics.standard_confidence for m in classical]
    by_sc = sorted(classical, key=lambda m: (-m.metrics.standard_confidence, m.rule.encoding()))
    assert [m.rule for m in by_sc] == [m.rule for m in classical]


def test_mining_is_deterministic(rng):
    kg = random_kg(rng, 15, 3, 80)
    a = mine(kg, small_state(kg), 0.5, 0.02)
    b = mine(kg, small_state(kg), 0.5, 0.02)
    assert [(m.rule, m.metrics) for m in a] == [(m.rule, m.metrics) for m in b]
    qs = [m.metrics.quality for m in a]
    assert qs == sorted(qs, reverse=True)


def test_single_triple_graph():
    kg = KnowledgeGraph([(0, 0, 1)], 2, 1)
    out = mine(kg, small_state(kg), 0.5)
    assert out == mine(kg, small_state(kg), 0.5)
    # whatever survives only restates the single fact
    assert all(m.metrics.support == 1 and m.metrics.num_new_predictions == 0 for m in out)


def test_symmetric_relation_confidence():
    rng = np.random.default_rng(0)
    pairs = set()
    while len(pairs) < 210:
        a, b = sorted(rng.choice(200, 2, replace=False).tolist())
        pairs.add((a, b))
    pairs = sorted(pairs)
    # 190 mutual pairs plus 20 one-way facts: SC = 380 / 400
    facts = [(a, 0, b) for a, b in pairs[:190]] + [(b, 0, a) for a, b in pairs[:190]]
    facts += [(a, 0, b) for a, b in pairs[190:]]
    kg = KnowledgeGraph(facts, 200, 1)
    sym = Rule(Atom(0, X, Y), (Atom(0, Y, X),)).canonical()
    mined = {m.rule: m.metrics for m in mine(kg, small_state(kg), 0.5)}
    assert mined[sym].standard_confidence == pytest.approx(0.95, abs=0.02)


def test_planted_composition_confidence():
    data = make_planted_kg(n_entities=200, holdout=0.1, seed=3)
    comp = planted_rules()[0]
    mined = {m.rule: m.metrics for m in mine(data.train, small_state(data.train), 0.5)}
    assert comp in mined
    sc = standard_confidence(data.train, comp)
    assert mined[comp].standard_confidence == sc >= 0.85


def test_min_head_coverage_prunes():
    data = make_planted_kg(n_entities=100, seed=1)
    state = small_state(data.train)
    loose = mine(data.train, state, 0.5, min_hc=0.05)
    strict = mine(data.train, state, 0.5, min_hc=0.9)
    assert len(strict) < len(loose)
    assert all(m.metrics.head_coverage > 0.9 for m in strict)


def test_cache_gives_identical_output():
    data = make_planted_kg(n_entities=80, seed=2)
    kg = data.train
    cache = MiningCache(kg)
    for seed in range(3):
        state = small_state(kg, seed, "rotate")
        plain = mine(kg, state, 0.5, 0.03, cache=None)
        cached = mine(kg, state, 0.5, 0.03, cache=cache)
        assert [(m.rule, m.metrics) for m in plain] == [(m.rule, m.metrics) for m in cached]


def test_cache_bound_to_its_graph():
    a = KnowledgeGraph([(0, 0, 1)], 2, 1)
    b = KnowledgeGraph([(1, 0, 0)], 2, 1)
    with pytest.raises(ValueError, match="different graph"):
        mine(a, None, 0.0, cache=MiningCache(b))


def test_state_required_for_positive_omega():
    kg = KnowledgeGraph([(0, 0, 1)], 2, 1)
    with pytest.raises(ValueError):
        mine(kg, None, 0.5)


def test_select_top_k_tie_break(rng):
    kg = random_kg(rng, 10, 3, 50)
    mined = mine(kg, None, 0.0, 0.02)
    keys = sorted((-m.metrics.quality, -m.metrics.support, m.rule.encoding()) for m in mined)
    top = select_top_k(mined, 5)
    assert [(-m.metrics.quality, -m.metrics.support, m.rule.encoding()) for m in top] == keys[:5]


def test_rule_file_round_trip(tmp_path):
    data = make_planted_kg(n_entities=60, seed=0)
    mined = mine(data.train, small_state(data.train), 0.5, 0.03)[:20]
    path = tmp_path / "rules.tsv"
    write_rules(path, mined, data.entities, data.relations)
    again = read_rules(path, data.entities, data.relations)
    assert [m.rule.canonical() for m in again] == [m.rule for m in mined]
    for a, b in zip(again, mined):
        assert a.metrics.support == b.metrics.support
        assert a.metrics.quality == pytest.approx(b.metrics.quality, abs=1e-6)


def test_instantiated_atoms_are_mined():
    nat, lives, cap = 0, 1, 2
    facts = [(i, nat, 0) for i in range(1, 30)] + [(i, lives, 50) for i in range(1, 30)]
    facts.append((50, cap, 0))
    kg = KnowledgeGraph(facts, 60, 3)
    rule = Rule(Atom(lives, X, Y), (Atom(nat, X, const(0)), Atom(cap, Y, const(0)))).canonical()
    mined = {m.rule: m.metrics for m in mine(kg, None, 0.0, 0.01)}
    assert mined[rule].support == 29
    assert mined[rule].standard_confidence == 1.0


def test_rule_miner_estimator():
    data = make_planted_kg(n_entities=80, seed=0)
    est = RuleMiner(omega=0.0, min_head_coverage=0.05, top_k=3).fit(data.train)
    assert est.get_params()["top_k"] == 3
    inferred = est.inferred_triples()
    assert inferred.shape[1] == 3 and not data.train.contains_many(inferred).any()
    assert est.predict(inferred).all()
