"""Filtered link-prediction ranking, MRR/Hits@N and rule precision."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from ._validation import check_triples, check_unit_interval
from .embedding import EmbeddingState
from .graph import KnowledgeGraph, Triple, sparsity

HITS_AT = (1, 3, 10)


class RankResult(NamedTuple):
    triple: Triple
    head_rank: int
    tail_rank: int


@dataclass
class MetricsSummary:
    mrr: float
    hits: dict[int, float] = field(default_factory=dict)
    n_triples: int = 0


def _rank(scores: np.ndarray, true_idx: int, excluded, rng: np.random.Generator) -> int:
    target = scores[true_idx]
    keep = np.ones(len(scores), dtype=bool)
    if excluded:
        keep[list(excluded)] = False
    keep[true_idx] = False
    better = int(np.count_nonzero(scores[keep] > target))
    ties = int(np.count_nonzero(scores[keep] == target))
    # the true entity lands at a uniformly random position inside its tie group
    return better + 1 + int(rng.integers(0, ties + 1))


def rank_triplet(state: EmbeddingState, t, filter_kg: KnowledgeGraph | None,
                 rng: np.random.Generator) -> RankResult:
    """Head and tail rank of ``t`` among all corruptions.

    Corruptions present in ``filter_kg`` are removed first (filtered
    setting); pass ``None`` for raw ranks.
    """
    h, r, tl = (int(x) for x in t)
    head_scores = state.score_heads(r, tl)
    tail_scores = state.score_tails(h, r)
    if filter_kg is None:
        ex_h = ex_t = ()
    else:
        ex_h = filter_kg.heads_of.get((r, tl), ())
        ex_t = filter_kg.tails_of.get((r, h), ())
    return RankResult(Triple(h, r, tl), _rank(head_scores, h, ex_h, rng),
                      _rank(tail_scores, tl, ex_t, rng))


def rank_triplets(state: EmbeddingState, triples, filter_kg: KnowledgeGraph | None,
                  seed: int = 0) -> list[RankResult]:
    """Rank every triple; triple ``i`` draws its tie breaks from a stream seeded by (seed, i)."""
    arr = check_triples(triples, state.n_entities, state.n_relations)
    return [rank_triplet(state, row, filter_kg, np.random.default_rng([seed, i]))
            for i, row in enumerate(arr)]


def summarize(results: Sequence[RankResult], pooled: bool = False,
              hits_at: Iterable[int] = HITS_AT) -> MetricsSummary:
    """MRR and Hits@N.

    By default head and tail ranks are averaged per triple before taking
    reciprocals and thresholds. ``pooled=True`` treats head and tail ranks
    as separate queries instead, the convention most baselines report.
    """
    if len(results) == 0:
        raise ValueError("cannot summarise an empty result list")
    heads = np.array([r.head_rank for r in results], dtype=np.float64)
    tails = np.array([r.tail_rank for r in results], dtype=np.float64)
    ranks = np.concatenate([heads, tails]) if pooled else (heads + tails) / 2.0
    return MetricsSummary(
        mrr=float(np.mean(1.0 / ranks)),
        hits={n: float(np.mean(ranks <= n)) for n in hits_at},
        n_triples=len(results),
    )


def evaluate(state: EmbeddingState, triples, filter_kg: KnowledgeGraph | None,
             seed: int = 0, pooled: bool = False) -> MetricsSummary:
    return summarize(rank_triplets(state, triples, filter_kg, seed), pooled=pooled)


def rule_precision(rules, kg_train: KnowledgeGraph, kg_test: KnowledgeGraph) -> float:
    """Share of the rules' new predictions (w.r.t. ``kg_train``) found in ``kg_test``.

    Returns NaN when the rules predict nothing new.
    """
    from .hybrid import inferred_set

    rules = [getattr(r, "rule", r) for r in rules]
    g_t = inferred_set(kg_train, rules)
    if not g_t:
        return math.nan
    hits = sum(1 for t in g_t if kg_test.contains(t))
    return hits / len(g_t)


def sparse_filter(eval_set, kg_train: KnowledgeGraph, threshold: float,
                  mode: str = "either") -> np.ndarray:
    """Keep evaluation triples whose entities are sparse in ``kg_train``.

    ``mode`` decides which endpoint must exceed ``threshold``: ``"either"``,
    ``"both"``, ``"head"`` or ``"tail"``.
    """
    threshold = check_unit_interval(threshold, "threshold")
    arr = check_triples(eval_set, kg_train.n_entities)
    if len(arr) == 0:
        return arr
    sp_all = sparsity(kg_train, np.arange(kg_train.n_entities))
    sh = sp_all[arr[:, 0]] > threshold
    st = sp_all[arr[:, 2]] > threshold
    masks = {"either": sh | st, "both": sh & st, "head": sh, "tail": st}
    try:
        keep = masks[mode]
    except KeyError:
        raise ValueError(f"unknown mode {mode!r}") from None
    return arr[keep]


METRICS_COLUMNS = ("split", "model", "mrr", "hits1", "hits3", "hits10", "n_triples")


def write_metrics_csv(path, rows: Sequence[tuple[str, str, MetricsSummary]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(METRICS_COLUMNS)
        for split, model, m in rows:
            w.writerow([split, model, f"{m.mrr:.6f}", f"{m.hits.get(1, math.nan):.6f}",
                        f"{m.hits.get(3, math.nan):.6f}", f"{m.hits.get(10, math.nan):.6f}",
                        m.n_triples])


def write_rank_dump(path, results: Sequence[RankResult], entities=None, relations=None) -> None:
    ename = entities.name if entities is not None else str
    rname = relations.name if relations is not None else str
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["h", "r", "t", "head_rank", "tail_rank"])
        for res in results:
            h, r, t = res.triple
            w.writerow([ename(h), rname(r), ename(t), res.head_rank, res.tail_rank])
