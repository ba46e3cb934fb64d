"""Synthetic graphs with planted Horn rules, for tests and the bundled demo."""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .graph import Dictionary, KnowledgeGraph
from .rules import Atom, Rule, var

RELATION_NAMES = ("p", "q", "s", "r", "a", "b")


@dataclass
class PlantedKG:
    train: KnowledgeGraph
    valid: KnowledgeGraph
    test: KnowledgeGraph
    rules: list[Rule]
    entities: Dictionary
    relations: Dictionary


def planted_rules() -> list[Rule]:
    """The three planted rules, in canonical form.

    composition ``p(X,Z) & q(Z,Y) -> s(X,Y)``, symmetry ``r(Y,X) -> r(X,Y)``
    and inversion ``a(Y,X) -> b(X,Y)``.
    """
    X, Y, Z = var(0), var(1), var(2)
    p, q, s, r, a, b = range(6)
    return [
        Rule(Atom(s, X, Y), (Atom(p, X, Z), Atom(q, Z, Y))).canonical(),
        Rule(Atom(r, X, Y), (Atom(r, Y, X),)).canonical(),
        Rule(Atom(b, X, Y), (Atom(a, Y, X),)).canonical(),
    ]


class _GirthGraph:
    """Undirected simple graph that only accepts edges keeping every cycle longer than 4."""

    def __init__(self, n: int):
        self.adj: list[set[int]] = [set() for _ in range(n)]

    def ball(self, x: int, radius: int = 3) -> set[int]:
        seen, frontier = {x}, [x]
        for _ in range(radius):
            frontier = [w for u in frontier for w in self.adj[u] if w not in seen]
            seen.update(frontier)
        return seen

    def add(self, x: int, y: int) -> None:
        self.adj[x].add(y)
        self.adj[y].add(x)


def _injective_edges(rng, graph: _GirthGraph, n_entities: int) -> list[tuple[int, int]]:
    """A partial injective map x -> y whose edges never close a cycle of length <= 4."""
    free = np.ones(n_entities, dtype=bool)
    edges = []
    for x in rng.permutation(n_entities).tolist():
        ok = free.copy()
        ok[list(graph.ball(x))] = False
        cand = np.flatnonzero(ok)
        if len(cand) == 0:
            continue
        y = int(rng.choice(cand))
        free[y] = False
        graph.add(x, y)
        edges.append((x, y))
    return sorted(edges)


def _matching_edges(rng, graph: _GirthGraph, n_entities: int) -> list[tuple[int, int]]:
    """A partial matching, one direction per pair, with the same cycle constraint."""
    free = np.ones(n_entities, dtype=bool)
    edges = []
    for x in rng.permutation(n_entities).tolist():
        if not free[x]:
            continue
        free[x] = False
        ok = free.copy()
        ok[list(graph.ball(x))] = False
        cand = np.flatnonzero(ok)
        if len(cand) == 0:
            continue
        y = int(rng.choice(cand))
        free[y] = False
        graph.add(x, y)
        edges.append((x, y))
    return sorted(edges)


def _compose(p_edges, q_edges) -> dict[tuple[int, int], tuple[int, int]]:
    """Edges of q after p, each mapped to the p edge it came from."""
    q_out: dict[int, list[int]] = {}
    for z, y in q_edges:
        q_out.setdefault(z, []).append(y)
    return {(x, y): (x, z) for x, z in p_edges for y in q_out.get(z, ()) if x != y}


def _stray_triangle(comp, p_edges, q_edges, others) -> tuple[str, tuple[int, int]] | None:
    """Find a triangle through a composed edge other than its own p/q path.

    ``others`` holds the base edges outside p and q. Returns the edge to
    drop, tagged ``"other"`` or ``"p"``, or None when clean.
    """
    adj: dict[int, dict[int, list]] = {}

    def link(u, v, tag):
        adj.setdefault(u, {}).setdefault(v, []).append(tag)
        adj.setdefault(v, {}).setdefault(u, []).append(tag)

    for (x, y), pe in comp.items():
        link(x, y, ("p", pe))
    for u, v in p_edges:
        link(u, v, ("p", (u, v)))
    for u, v in q_edges:
        link(u, v, ("q", (u, v)))
    for u, v in others:
        link(u, v, ("other", (u, v)))
    for (x, y), pe in sorted(comp.items()):
        for w in sorted(set(adj[x]) & set(adj[y]) - {x, y, pe[1]}):
            tags = adj[x][w] + adj[w][y]
            stray = [t for t in tags if t[0] == "other"]
            return stray[0] if stray else ("p", pe)
    return None


def make_planted_kg(n_entities: int = 200, holdout: float = 0.1, valid_fraction: float = 0.0,
                    n_noise_relations: int = 1, seed: int = 0) -> PlantedKG:
    """Generate a graph whose implied edges follow three planted rules.

    Base edges of ``p``, ``q``, ``a`` and the noise relations are near
    permutations and ``r`` starts from a near-perfect matching. Taken
    together as an undirected graph, base edges contain no cycle shorter
    than 5. Degrees are therefore flat (no entity is frequent enough to
    support a rule with a constant) and no two relations share an entity
    pair or close a triangle by chance, so the planted rules are the only
    structure with real support. Composed ``s`` edges that would still
    close a stray triangle have one of its edges removed. Every edge
    the planted rules imply from them is added, except a ``holdout``
    fraction which is withheld. Of the withheld edges, ``valid_fraction``
    go to the validation split and the rest to the test split. Noise
    relations carry cycle edges unrelated to any rule.
    """
    if n_entities < 3:
        raise ValueError("need at least 3 entities")
    rng = np.random.default_rng(seed)
    entities = Dictionary(f"e{i}" for i in range(n_entities))
    names = RELATION_NAMES + tuple(f"noise{i}" for i in range(n_noise_relations))
    relations = Dictionary(names)
    p, q, s, r, a, b = range(6)

    graph = _GirthGraph(n_entities)
    p_edges = _injective_edges(rng, graph, n_entities)
    q_edges = _injective_edges(rng, graph, n_entities)
    r_base = _matching_edges(rng, graph, n_entities)
    a_edges = _injective_edges(rng, graph, n_entities)

    noise = [_injective_edges(rng, graph, n_entities) for _ in range(n_noise_relations)]

    # composed edges can still close triangles with the rest; break them
    typed = {**{e: r for e in r_base}, **{e: a for e in a_edges}}
    for k, edges in enumerate(noise):
        typed.update({e: 6 + k for e in edges})
    p_set = set(p_edges)
    while True:
        comp = _compose(sorted(p_set), q_edges)
        hit = _stray_triangle(comp, p_set, q_edges, typed)
        if hit is None:
            break
        kind, edge = hit
        if kind == "other":
            del typed[edge if edge in typed else edge[::-1]]
        else:
            p_set.discard(edge)
    p_edges = sorted(p_set)

    base = {(h, p, t) for h, t in p_edges} | {(h, q, t) for h, t in q_edges}
    base |= {(h, rel, t) for (h, t), rel in typed.items()}
    r_base = [e for e, rel in typed.items() if rel == r]
    a_edges = [e for e, rel in typed.items() if rel == a]

    implied = {(x, s, y) for x, y in comp}
    implied |= {(t, r, h) for h, t in r_base}
    implied |= {(t, b, h) for h, t in a_edges}
    implied -= base
    implied = sorted(implied)

    n_hold = int(round(holdout * len(implied)))
    held_idx = rng.choice(len(implied), size=n_hold, replace=False)
    held = [implied[i] for i in sorted(held_idx)]
    held_set = set(held)
    kept = [t for t in implied if t not in held_set]
    n_valid = int(round(valid_fraction * len(held)))
    perm = rng.permutation(len(held))
    valid = [held[i] for i in sorted(perm[:n_valid])]
    test = [held[i] for i in sorted(perm[n_valid:])]

    n_r = len(relations)
    train = KnowledgeGraph(sorted(base) + kept, n_entities, n_r)
    return PlantedKG(
        train=train,
        valid=KnowledgeGraph(valid, n_entities, n_r),
        test=KnowledgeGraph(test, n_entities, n_r),
        rules=planted_rules(),
        entities=entities,
        relations=relations,
    )


def demo_files() -> dict[str, Path]:
    """Paths of the bundled demo splits (about 200 training triples, planted rules)."""
    root = resources.files("hybridkg") / "data" / "demo"
    return {split: Path(str(root / f"{split}.tsv")) for split in ("train", "valid", "test")}
