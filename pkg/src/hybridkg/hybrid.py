"""Cross-feedback loop: embeddings guide rule mining, rules augment training data."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_positive_int, check_triples, check_unit_interval
from .embedding import EmbeddingState, TrainConfig, embedding_learning, sigmoid, spawn_rngs
from .evaluation import MetricsSummary, evaluate
from .graph import KnowledgeGraph, Triple
from .rules import DEFAULT_EC_CAP, GroundingEngine, MinedRule, MiningCache, Rule, mine, select_top_k
from .scoring import ScoreFunction, make_score_function

logger = logging.getLogger(__name__)


def inferred_set(kg0: KnowledgeGraph, rules: Sequence[Rule]) -> set[Triple]:
    """Union of the rules' predictions minus the triples already in ``kg0``."""
    engine = GroundingEngine(kg0)
    out: set[Triple] = set()
    for rule in rules:
        rule = getattr(rule, "rule", rule)
        xs, ys = engine.project(rule.canonical()).pairs()
        if len(xs) == 0:
            continue
        trip = np.column_stack([xs, np.full(len(xs), rule.head.relation), ys])
        trip = trip[~kg0.contains_many(trip)]
        out.update(Triple(*row) for row in trip.tolist())
    return out


def sampling_distribution(g_t, state: EmbeddingState, beta: float) -> np.ndarray:
    """First-draw probabilities: softmax of ``beta * score`` over ``g_t``."""
    logits = beta * state.score(check_triples(g_t))
    logits -= logits.max()
    w = np.exp(logits)
    return w / w.sum()


def importance_sample(g_t, state: EmbeddingState, beta: float, budget: int,
                      rng: np.random.Generator) -> np.ndarray:
    """Draw ``min(budget, |g_t|)`` triples without replacement, in draw order.

    Each draw picks from the not-yet-drawn triples with probability
    proportional to ``exp(beta * score)``. Implemented with Gumbel-top-k,
    which yields exactly this sequential renormalised scheme. All returned
    triples are positives (label 1).
    """
    g_t = check_triples(sorted(g_t) if isinstance(g_t, (set, frozenset)) else g_t)
    if len(g_t) == 0:
        raise ValueError("cannot sample from an empty inferred set")
    budget = check_positive_int(budget, "budget")
    keys = beta * state.score(g_t) + rng.gumbel(size=len(g_t))
    n = min(budget, len(g_t))
    order = np.argsort(-keys, kind="stable")[:n]
    return g_t[order]


@dataclass
class HybridConfig:
    omega: float = 0.5
    beta: float = 1.0
    top_k: int = 50
    n_iterations: int = 10
    # draws per iteration; None means ceil(sample_fraction * |G_T|)
    sample_budget: int | None = None
    sample_fraction: float = 0.5
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0
    min_head_coverage: float = 0.01
    max_rule_length: int = 3
    ec_sample_cap: int = DEFAULT_EC_CAP
    patience: int | None = 2
    warm_start: bool = True
    accumulate_rules: bool = False
    pooled_metrics: bool = False

    def __post_init__(self):
        check_unit_interval(self.omega, "omega")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        check_positive_int(self.top_k, "top_k", allow_zero=True)
        check_positive_int(self.n_iterations, "n_iterations")
        if self.sample_budget is not None:
            check_positive_int(self.sample_budget, "sample_budget")
        if not 0 < self.sample_fraction <= 1:
            raise ValueError("sample_fraction must be in (0, 1]")
        if self.patience is not None:
            check_positive_int(self.patience, "patience")

    def budget_for(self, n_inferred: int) -> int:
        if self.sample_budget is not None:
            return self.sample_budget
        return max(1, math.ceil(self.sample_fraction * n_inferred))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class IterationReport:
    iteration: int
    rules_mined: int
    rules_selected: int
    g_t_size: int
    sampled: int
    added: int
    n_positive: int
    train_loss: float
    valid_mrr: float = math.nan
    valid_hits10: float = math.nan
    valid: MetricsSummary | None = None


@dataclass
class HybridResult:
    state: EmbeddingState
    rules: list[MinedRule]
    reports: list[IterationReport]
    best_iteration: int

    def __iter__(self):
        return iter((self.state, self.rules, self.reports))


def run(kg0: KnowledgeGraph, model: ScoreFunction, cfg: HybridConfig,
        valid: KnowledgeGraph | None = None, filter_kg: KnowledgeGraph | None = None,
        init_state: EmbeddingState | None = None) -> HybridResult:
    """Alternate embedding learning, rule mining on ``kg0`` and sampled augmentation.

    Rules are always mined from the original graph. When ``valid`` is
    given, the state with the best validation MRR is returned and the loop
    stops after ``cfg.patience`` iterations without improvement.
    ``filter_kg`` (default ``kg0`` plus ``valid``) filters validation ranks.
    """
    if len(kg0) == 0:
        raise ValueError("the training graph is empty")
    init_rng, train_rng, sample_rng, _ = spawn_rngs(cfg.seed)
    n_e, n_r = kg0.n_entities, kg0.n_relations
    state = EmbeddingState.random(model, n_e, n_r, init_rng) if init_state is None else init_state.copy()
    if valid is not None and filter_kg is None:
        filter_kg = kg0.union(valid)

    positives = kg0
    cache = MiningCache(kg0)
    rules: list[MinedRule] = []
    reports: list[IterationReport] = []
    best_state, best_mrr, best_iter, stale = state, -math.inf, 0, 0
    for i in range(1, cfg.n_iterations + 1):
        if not cfg.warm_start and i > 1:
            state = EmbeddingState.random(model, n_e, n_r, init_rng)
        state, losses = embedding_learning(state, positives.triples, cfg.train, train_rng, positives)

        n_mined = 0
        sampled = np.empty((0, 3), dtype=np.int64)
        g_t: set = set()
        if cfg.top_k > 0:
            mined = mine(kg0, state, cfg.omega, cfg.min_head_coverage, cfg.max_rule_length,
                         cfg.ec_sample_cap, cfg.seed, cache=cache)
            n_mined = len(mined)
            pool = mined + rules if cfg.accumulate_rules else mined
            if cfg.accumulate_rules:
                seen, uniq = set(), []
                for m in pool:
                    if m.rule.encoding() not in seen:
                        seen.add(m.rule.encoding())
                        uniq.append(m)
                pool = uniq
            rules = select_top_k(pool, cfg.top_k)
            if not rules:
                logger.info("iteration %d: no rules mined, no augmentation", i)
            g_t = inferred_set(kg0, [m.rule for m in rules]) if rules else set()
            if g_t:
                sampled = importance_sample(g_t, state, cfg.beta, cfg.budget_for(len(g_t)), sample_rng)

        before = len(positives)
        if len(sampled):
            positives = KnowledgeGraph(np.concatenate([positives.triples, sampled]), n_e, n_r)
        report = IterationReport(
            iteration=i, rules_mined=n_mined, rules_selected=len(rules), g_t_size=len(g_t),
            sampled=len(sampled), added=len(positives) - before, n_positive=len(positives),
            train_loss=float(np.mean(losses)) if losses else math.nan,
        )
        if valid is not None and len(valid):
            summary = evaluate(state, valid.triples, filter_kg, seed=cfg.seed, pooled=cfg.pooled_metrics)
            report.valid = summary
            report.valid_mrr = summary.mrr
            report.valid_hits10 = summary.hits.get(10, math.nan)
            if summary.mrr > best_mrr:
                best_state, best_mrr, best_iter, stale = state, summary.mrr, i, 0
            else:
                stale += 1
        else:
            best_state, best_iter = state, i
        reports.append(report)
        logger.info("iteration %d: %s", i, report)
        if cfg.patience is not None and stale >= cfg.patience:
            logger.info("early stop after iteration %d (best %d)", i, best_iter)
            break
    return HybridResult(best_state, rules, reports, best_iter)


HISTORY_COLUMNS = ("iter", "rules_mined", "rules_selected", "g_t_size", "sampled", "train_loss",
                   "valid_mrr", "valid_hits10")


def write_history_csv(path, reports: Sequence[IterationReport]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(HISTORY_COLUMNS)
        for rep in reports:
            w.writerow([rep.iteration, rep.rules_mined, rep.rules_selected, rep.g_t_size,
                        rep.sampled, f"{rep.train_loss:.6f}", f"{rep.valid_mrr:.6f}",
                        f"{rep.valid_hits10:.6f}"])


class HybridLearner(BaseEstimator):
    """Estimator running the cross-feedback loop end to end.

    After ``fit``: ``state_`` (best embedding), ``rules_`` (selected
    rules with metrics) and ``history_`` (one report per global iteration).
    """

    def __init__(self, model="rotate", dim=200, norm=2, learning_rate=0.5, batch_size=256,
                 neg_ratio=1, inner_steps=100, optimizer="sgd", omega=0.5, beta=1.0, top_k=50,
                 n_iterations=10, sample_fraction=0.5, sample_budget=None, min_head_coverage=0.01,
                 max_rule_length=3, patience=2, warm_start=True, random_state=0):
        self.model = model
        self.dim = dim
        self.norm = norm
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.neg_ratio = neg_ratio
        self.inner_steps = inner_steps
        self.optimizer = optimizer
        self.omega = omega
        self.beta = beta
        self.top_k = top_k
        self.n_iterations = n_iterations
        self.sample_fraction = sample_fraction
        self.sample_budget = sample_budget
        self.min_head_coverage = min_head_coverage
        self.max_rule_length = max_rule_length
        self.patience = patience
        self.warm_start = warm_start
        self.random_state = random_state

    def get_config(self) -> HybridConfig:
        train = TrainConfig(self.learning_rate, self.batch_size, self.neg_ratio, self.inner_steps,
                            self.random_state, self.optimizer)
        return HybridConfig(
            omega=self.omega, beta=self.beta, top_k=self.top_k, n_iterations=self.n_iterations,
            sample_budget=self.sample_budget, sample_fraction=self.sample_fraction, train=train,
            seed=self.random_state, min_head_coverage=self.min_head_coverage,
            max_rule_length=self.max_rule_length, patience=self.patience,
            warm_start=self.warm_start,
        )

    def fit(self, X, y=None, valid=None, n_entities=None, n_relations=None):
        kg = X if isinstance(X, KnowledgeGraph) else KnowledgeGraph(X, n_entities, n_relations)
        if valid is not None and not isinstance(valid, KnowledgeGraph):
            valid = KnowledgeGraph(valid, kg.n_entities, kg.n_relations)
        scorer = make_score_function(self.model, self.dim, self.norm)
        result = run(kg, scorer, self.get_config(), valid)
        self.state_ = result.state
        self.rules_ = result.rules
        self.history_ = result.reports
        self.best_iteration_ = result.best_iteration
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "state_")
        return self.state_.score(X)

    def predict_proba(self, X) -> np.ndarray:
        xi = sigmoid(self.decision_function(X))
        return np.column_stack([1.0 - xi, xi])

    def predict(self, X) -> np.ndarray:
        return (self.decision_function(X) > 0).astype(int)
