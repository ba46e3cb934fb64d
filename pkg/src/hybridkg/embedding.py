"""Embedding state, cross-entropy training and uniform negative sampling."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.special import expit
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_labels, check_positive_int, check_triples
from .graph import KnowledgeGraph
from .scoring import ScoreFunction, make_score_function

logger = logging.getLogger(__name__)

_TINY = np.finfo(np.float64).tiny
_ONE_MINUS = np.nextafter(1.0, 0.0)


def sigmoid(z):
    """Logistic function, clipped so the result stays strictly inside (0, 1)."""
    return np.clip(expit(z), _TINY, _ONE_MINUS)


def spawn_rngs(seed, n: int = 4) -> list[np.random.Generator]:
    """Independent generators for (init, training, sampling, evaluation)."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


@dataclass
class EmbeddingState:
    model: ScoreFunction
    entity: np.ndarray
    relation: np.ndarray

    @classmethod
    def random(cls, model: ScoreFunction, n_entities: int, n_relations: int,
               rng: np.random.Generator | int | None = None) -> "EmbeddingState":
        rng = np.random.default_rng(rng)
        E, R = model.init_params(n_entities, n_relations, rng)
        return cls(model, E, R)

    @property
    def n_entities(self) -> int:
        return self.entity.shape[0]

    @property
    def n_relations(self) -> int:
        return self.relation.shape[0]

    def copy(self) -> "EmbeddingState":
        return EmbeddingState(self.model, self.entity.copy(), self.relation.copy())

    def gather(self, triples):
        t = check_triples(triples, self.n_entities, self.n_relations)
        return self.entity[t[:, 0]], self.relation[t[:, 1]], self.entity[t[:, 2]]

    def score(self, triples) -> np.ndarray:
        return self.model.score(*self.gather(triples))

    def truth(self, triples) -> np.ndarray:
        return sigmoid(self.score(triples))

    def score_heads(self, relation: int, tail: int) -> np.ndarray:
        """Scores of (e, relation, tail) for every entity e."""
        return self.model.score(self.entity, self.relation[relation][None], self.entity[tail][None])

    def score_tails(self, head: int, relation: int) -> np.ndarray:
        """Scores of (head, relation, e) for every entity e."""
        return self.model.score(self.entity[head][None], self.relation[relation][None], self.entity)

    def equals(self, other: "EmbeddingState") -> bool:
        return (self.model == other.model and np.array_equal(self.entity, other.entity)
                and np.array_equal(self.relation, other.relation))


def score(state: EmbeddingState, t) -> float:
    return float(state.score(np.asarray(t).reshape(1, 3))[0])


def truth(state: EmbeddingState, t) -> float:
    return float(state.truth(np.asarray(t).reshape(1, 3))[0])


def _per_example_loss(phi, y):
    # -y log s(phi) - (1-y) log(1 - s(phi)), written with softplus to stay finite
    return y * np.logaddexp(0.0, -phi) + (1.0 - y) * np.logaddexp(0.0, phi)


def loss(state: EmbeddingState, triples, labels) -> float:
    """Mean binary cross-entropy between truth values and labels."""
    t = check_triples(triples)
    if len(t) == 0:
        raise ValueError("loss of an empty batch is undefined")
    y = check_labels(labels, len(t))
    return float(_per_example_loss(state.score(t), y).mean())


class Gradient(NamedTuple):
    """Row-sparse gradient: unique touched row ids and their summed gradients."""

    entity_idx: np.ndarray
    entity: np.ndarray
    relation_idx: np.ndarray
    relation: np.ndarray

    def dense(self, state: EmbeddingState):
        gE = np.zeros_like(state.entity)
        gR = np.zeros_like(state.relation)
        gE[self.entity_idx] = self.entity
        gR[self.relation_idx] = self.relation
        return gE, gR


def _accumulate(idx, rows):
    uniq, inv = np.unique(idx, return_inverse=True)
    acc = np.zeros((len(uniq),) + rows.shape[1:])
    np.add.at(acc, inv, rows)
    return uniq, acc


def loss_and_gradient(state: EmbeddingState, triples, labels) -> tuple[float, Gradient]:
    t = check_triples(triples, state.n_entities, state.n_relations)
    if len(t) == 0:
        raise ValueError("gradient of an empty batch is undefined")
    y = check_labels(labels, len(t))
    H, R, T = state.entity[t[:, 0]], state.relation[t[:, 1]], state.entity[t[:, 2]]
    phi, gH, gR, gT = state.model.score_grad(H, R, T)
    value = float(_per_example_loss(phi, y).mean())
    coef = (expit(phi) - y) / len(t)
    shape = (-1,) + (1,) * (gR.ndim - 1)
    ent_idx, ent_grad = _accumulate(
        np.concatenate([t[:, 0], t[:, 2]]),
        np.concatenate([coef[:, None] * gH, coef[:, None] * gT]),
    )
    rel_idx, rel_grad = _accumulate(t[:, 1], coef.reshape(shape) * gR)
    return value, Gradient(ent_idx, ent_grad, rel_idx, rel_grad)


def gradient(state: EmbeddingState, triples, labels) -> Gradient:
    """Exact gradient of :func:`loss` with respect to the touched parameter rows."""
    return loss_and_gradient(state, triples, labels)[1]


def negative_sample(positive: KnowledgeGraph, batch, ratio: int, rng: np.random.Generator,
                    n_entities: int | None = None, max_retries: int = 1000) -> np.ndarray:
    """Corrupt each positive ``ratio`` times by replacing its head or tail (fair coin).

    Replacement entities are uniform over all entities; a corrupted triple
    that is itself in ``positive`` is redrawn (same side) up to
    ``max_retries`` times before giving up. Returned triples carry label 0.
    """
    ratio = check_positive_int(ratio, "ratio")
    batch = check_triples(batch)
    n_entities = positive.n_entities if n_entities is None else int(n_entities)
    neg = np.repeat(batch, ratio, axis=0)
    col = np.where(rng.random(len(neg)) < 0.5, 0, 2)
    pending = np.arange(len(neg))
    for _ in range(max_retries):
        if len(pending) == 0:
            break
        neg[pending, col[pending]] = rng.integers(0, n_entities, size=len(pending))
        pending = pending[positive.contains_many(neg[pending])]
    if len(pending):
        raise RuntimeError(
            f"no valid negative found for {len(pending)} slot(s) after {max_retries} draws; "
            "the graph is too dense for uniform corruption"
        )
    return neg


@dataclass
class TrainConfig:
    learning_rate: float = 0.5
    batch_size: int = 256
    negatives_per_positive: int = 1
    inner_steps: int = 100
    seed: int = 0
    optimizer: str = "sgd"
    # False: draw one negative set per call and reuse it for every step
    resample_negatives: bool = True

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        check_positive_int(self.batch_size, "batch_size")
        check_positive_int(self.negatives_per_positive, "negatives_per_positive")
        check_positive_int(self.inner_steps, "inner_steps", allow_zero=True)
        if self.optimizer not in ("sgd", "adagrad"):
            raise ValueError("optimizer must be 'sgd' or 'adagrad'")


@dataclass
class _Optimizer:
    kind: str
    lr: float
    accum: dict = field(default_factory=dict)

    def apply(self, name: str, table: np.ndarray, idx: np.ndarray, grad: np.ndarray):
        if self.kind == "sgd":
            table[idx] -= self.lr * grad
            return
        acc = self.accum.setdefault(name, np.zeros_like(table))
        acc[idx] += grad * grad
        table[idx] -= self.lr * grad / (np.sqrt(acc[idx]) + 1e-10)


def embedding_learning(state: EmbeddingState, positives, cfg: TrainConfig,
                       rng: np.random.Generator | None = None,
                       known: KnowledgeGraph | None = None) -> tuple[EmbeddingState, list[float]]:
    """Run ``cfg.inner_steps`` minibatch steps on positives plus fresh negatives.

    ``known`` is the set negatives must avoid; it defaults to the positives.
    Returns a new state (the input is not modified) and the per-step losses.
    """
    pos = check_triples(positives, state.n_entities, state.n_relations)
    if len(pos) == 0:
        raise ValueError("embedding_learning needs at least one positive triple")
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    known = KnowledgeGraph(pos, state.n_entities, state.n_relations) if known is None else known
    state = state.copy()
    losses: list[float] = []
    if cfg.inner_steps == 0:
        return state, losses

    opt = _Optimizer(cfg.optimizer, cfg.learning_rate)
    ratio = cfg.negatives_per_positive
    fixed_neg = None
    if not cfg.resample_negatives:
        fixed_neg = negative_sample(known, pos, ratio, rng, state.n_entities).reshape(len(pos), ratio, 3)
    B = min(cfg.batch_size, len(pos))
    order = rng.permutation(len(pos))
    cursor = 0
    for step in range(cfg.inner_steps):
        if cursor + B > len(order):
            order = rng.permutation(len(pos))
            cursor = 0
        idx = order[cursor:cursor + B]
        cursor += B
        batch = pos[idx]
        if fixed_neg is None:
            neg = negative_sample(known, batch, ratio, rng, state.n_entities)
        else:
            neg = fixed_neg[idx].reshape(-1, 3)
        triples = np.concatenate([batch, neg])
        labels = np.concatenate([np.ones(len(batch)), np.zeros(len(neg))])
        value, g = loss_and_gradient(state, triples, labels)
        losses.append(value)
        opt.apply("entity", state.entity, g.entity_idx, g.entity)
        opt.apply("relation", state.relation, g.relation_idx, g.relation)
        if not (np.isfinite(state.entity[g.entity_idx]).all()
                and np.isfinite(state.relation[g.relation_idx]).all()):
            raise FloatingPointError(f"non-finite parameters after training step {step}")
    return state, losses


class KGEmbedding(BaseEstimator):
    """Standalone knowledge-graph embedding trained with binary cross-entropy.

    Parameters
    ----------
    model : {'transe', 'distmult', 'complex', 'rotate', 'bilinear'}
    dim : int
        Embedding dimension (complex models use ``2 * dim`` reals per entity).
    norm : {1, 2}
        Norm used by the distance-based scorers.
    n_steps : int
        Number of minibatch steps.
    random_state : int
        Seed; a fixed seed gives bit-identical parameters.
    """

    def __init__(self, model="rotate", dim=200, norm=2, learning_rate=0.5, batch_size=256,
                 neg_ratio=1, n_steps=100, optimizer="sgd", resample_negatives=True,
                 random_state=0):
        self.model = model
        self.dim = dim
        self.norm = norm
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.neg_ratio = neg_ratio
        self.n_steps = n_steps
        self.optimizer = optimizer
        self.resample_negatives = resample_negatives
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        return TrainConfig(self.learning_rate, self.batch_size, self.neg_ratio, self.n_steps,
                           self.random_state, self.optimizer, self.resample_negatives)

    def fit(self, X, y=None, n_entities=None, n_relations=None, init_state=None):
        """Fit on positive triples ``X``; ``y`` is ignored (all positives)."""
        kg = X if isinstance(X, KnowledgeGraph) else KnowledgeGraph(X, n_entities, n_relations)
        cfg = self._train_config()
        init_rng, train_rng, *_ = spawn_rngs(self.random_state)
        if init_state is None:
            scorer = make_score_function(self.model, self.dim, self.norm)
            init_state = EmbeddingState.random(scorer, kg.n_entities, kg.n_relations, init_rng)
        self.state_, self.loss_curve_ = embedding_learning(init_state, kg.triples, cfg, train_rng, kg)
        self.n_entities_ = kg.n_entities
        self.n_relations_ = kg.n_relations
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "state_")
        return self.state_.score(X)

    def predict_proba(self, X) -> np.ndarray:
        xi = sigmoid(self.decision_function(X))
        return np.column_stack([1.0 - xi, xi])

    def predict(self, X) -> np.ndarray:
        return (self.decision_function(X) > 0).astype(int)
