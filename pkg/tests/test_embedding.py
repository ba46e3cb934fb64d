import numpy as np
import pytest
from scipy import stats
from sklearn.base import clone

from hybridkg.embedding import (EmbeddingState, KGEmbedding, TrainConfig, embedding_learning,
                                negative_sample, spawn_rngs)
from hybridkg.graph import KnowledgeGraph
from hybridkg.scoring import make_score_function
from hybridkg.synthetic import make_planted_kg


def test_saturated_graph_has_no_negatives():
    full = KnowledgeGraph([(h, 0, t) for h in range(2) for t in range(2)], 2, 1)
    with pytest.raises(RuntimeError, match="too dense"):
        negative_sample(full, full.triples[:1], 1, np.random.default_rng(0))


def test_negative_cardinality_and_labels(rng):
    kg = KnowledgeGraph([(0, 0, 1), (1, 0, 2), (2, 0, 3), (3, 0, 4)], 30, 1)
    neg = negative_sample(kg, kg.triples[:3], 2, rng)
    assert neg.shape == (6, 3)
    assert not kg.contains_many(neg).any()
    # each negative differs from its source positive in exactly one of head/tail
    src = np.repeat(kg.triples[:3], 2, axis=0)
    changed = (neg != src)
    assert np.all(changed[:, 1] == 0)
    assert np.all(changed[:, [0, 2]].sum(1) == 1)


def test_corrupted_entities_are_uniform():
    n = 50
    kg = KnowledgeGraph([(0, 0, 1), (2, 0, 1), (0, 0, 3)], n, 1)
    batch = np.array([[0, 0, 1]])
    neg = negative_sample(kg, np.repeat(batch, 100_000, 0), 1, np.random.default_rng(7))
    head_side = neg[:, 2] == 1
    # fair coin between the two sides
    assert abs(head_side.mean() - 0.5) < 3 * np.sqrt(0.25 / len(neg))
    for side, mask, banned in ((0, head_side, {0, 2}), (2, ~head_side, {1, 3})):
        allowed = [e for e in range(n) if e not in banned]
        counts = np.bincount(neg[mask, side], minlength=n)
        assert counts[list(banned)].sum() == 0
        assert stats.chisquare(counts[allowed]).pvalue > 0.01


def test_zero_steps_returns_unchanged_state(rng):
    state = EmbeddingState.random(make_score_function("transe", 4), 5, 1, rng)
    out, losses = embedding_learning(state, [(0, 0, 1)], TrainConfig(inner_steps=0))
    assert out.equals(state) and losses == []


def test_training_is_deterministic():
    kg = make_planted_kg(n_entities=60, seed=1).train
    runs = [KGEmbedding("complex", 8, n_steps=30, random_state=3).fit(kg).state_ for _ in range(2)]
    assert runs[0].equals(runs[1])


def test_input_state_is_not_modified(rng):
    state = EmbeddingState.random(make_score_function("distmult", 4), 6, 2, rng)
    snapshot = state.copy()
    embedding_learning(state, [(0, 0, 1), (2, 1, 3)], TrainConfig(inner_steps=5))
    assert state.equals(snapshot)


def test_untouched_parameters_are_bit_identical(rng):
    state = EmbeddingState.random(make_score_function("rotate", 4), 40, 3, rng)
    pos = [(0, 0, 1)]
    out, _ = embedding_learning(state, pos, TrainConfig(inner_steps=1, batch_size=1),
                                np.random.default_rng(0))
    touched_e = np.flatnonzero(np.any(out.entity != state.entity, axis=1))
    assert np.array_equal(out.relation[1:], state.relation[1:])
    # positive plus one corruption touch at most three entities
    assert len(touched_e) <= 3 and {0, 1} <= set(touched_e.tolist()) | {0, 1}


def test_transe_separates_positives_from_negatives():
    rng = np.random.default_rng(0)
    pos = np.column_stack([rng.integers(0, 15, 20), rng.integers(0, 2, 20), rng.integers(0, 15, 20)])
    kg = KnowledgeGraph(pos, 15, 2)
    est = KGEmbedding("transe", 16, n_steps=500, learning_rate=0.1, batch_size=20,
                      random_state=0).fit(kg)
    neg = negative_sample(kg, np.repeat(kg.triples, 20, 0), 1, np.random.default_rng(1))
    margin = est.state_.truth(kg.triples).mean() - est.state_.truth(neg).mean()
    assert margin > 0
    # measured 0.11759 when this fixture was frozen; TransE truths stay below 0.5
    assert margin == pytest.approx(0.11759, abs=0.01)


def test_loss_decreases_on_most_seeds():
    kg = make_planted_kg(n_entities=100, seed=0).train
    epoch = int(np.ceil(len(kg) / TrainConfig().batch_size))
    ok = 0
    seeds = range(20)
    for seed in seeds:
        init, train = spawn_rngs(seed)[:2]
        state = EmbeddingState.random(make_score_function("rotate", 32), kg.n_entities, kg.n_relations, init)
        _, losses = embedding_learning(state, kg.triples, TrainConfig(seed=seed), train, kg)
        ok += np.mean(losses[-epoch:]) <= np.mean(losses[:epoch])
    assert ok >= 0.95 * len(seeds)


def test_fixed_negatives_flag(rng):
    kg = make_planted_kg(n_entities=40, seed=0).train
    cfg = TrainConfig(inner_steps=10, resample_negatives=False)
    state = EmbeddingState.random(make_score_function("distmult", 4), kg.n_entities, kg.n_relations, rng)
    out, losses = embedding_learning(state, kg.triples, cfg, np.random.default_rng(0), kg)
    assert len(losses) == 10 and np.isfinite(out.entity).all()


def test_non_finite_parameters_abort():
    state = EmbeddingState(make_score_function("distmult", 2), np.full((2, 2), 1e200), np.ones((1, 2)))
    with pytest.raises(FloatingPointError, match="step 0"):
        with np.errstate(all="ignore"):
            embedding_learning(state, [(0, 0, 1)], TrainConfig(inner_steps=3, learning_rate=1e200))


@pytest.mark.parametrize("bad", [dict(learning_rate=0), dict(batch_size=0), dict(optimizer="adam"),
                                 dict(negatives_per_positive=0)])
def test_train_config_validation(bad):
    with pytest.raises(ValueError):
        TrainConfig(**bad)


def test_estimator_api():
    est = KGEmbedding("distmult", dim=4, n_steps=5)
    params = est.get_params()
    assert params["dim"] == 4 and params["model"] == "distmult"
    twin = clone(est).set_params(dim=6)
    assert twin.dim == 6 and est.dim == 4
    kg = make_planted_kg(n_entities=30, seed=0).train
    est.fit(kg)
    proba = est.predict_proba(kg.triples[:5])
    assert proba.shape == (5, 2) and np.allclose(proba.sum(1), 1)
    assert set(est.predict(kg.triples[:5]).tolist()) <= {0, 1}
