"""Horn-rule search over a knowledge graph with embedding-guided quality.

Rules have a head atom ``r(X, Y)`` and up to two body atoms. Groundings are
evaluated with sparse boolean joins: a closed rule of length <= 3 never has
more than one variable besides X and Y, so every body reduces to products
and element-wise intersections of relation adjacency matrices.

Rule semantics are over the finite entity set: a head variable that the
body does not constrain ranges over all entities.
"""

from __future__ import annotations

import heapq
import itertools
import logging
import math
import zlib
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
import scipy.sparse as sp
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_positive_int, check_triples, check_unit_interval
from .embedding import EmbeddingState
from .graph import Dictionary, KnowledgeGraph, Triple

logger = logging.getLogger(__name__)

MAX_RULE_LENGTH = 3
DEFAULT_EC_CAP = 10_000


class Term(NamedTuple):
    is_var: bool
    value: int

    def __repr__(self) -> str:
        return f"?{self.value}" if self.is_var else f"e{self.value}"


def var(i: int) -> Term:
    return Term(True, int(i))


def const(e: int) -> Term:
    return Term(False, int(e))


class Atom(NamedTuple):
    relation: int
    subject: Term
    object: Term

    def terms(self):
        return (self.subject, self.object)


def _atom_key(a: Atom) -> tuple:
    return (a.relation, int(not a.subject.is_var), a.subject.value,
            int(not a.object.is_var), a.object.value)


@dataclass(frozen=True)
class Rule:
    head: Atom
    body: tuple[Atom, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "body", tuple(self.body))

    def __len__(self) -> int:
        return 1 + len(self.body)

    def atoms(self):
        return (self.head,) + self.body

    def variables(self) -> set[int]:
        return {t.value for a in self.atoms() for t in a.terms() if t.is_var}

    def is_closed(self) -> bool:
        counts: dict[int, int] = {}
        for a in self.atoms():
            for t in a.terms():
                if t.is_var:
                    counts[t.value] = counts.get(t.value, 0) + 1
        return all(c >= 2 for c in counts.values())

    def is_connected(self) -> bool:
        atoms = self.atoms()
        seen = {0}
        frontier = [0]
        while frontier:
            i = frontier.pop()
            ti = set(atoms[i].terms())
            for j, a in enumerate(atoms):
                if j not in seen and ti & set(a.terms()):
                    seen.add(j)
                    frontier.append(j)
        return len(seen) == len(atoms)

    def canonical(self) -> "Rule":
        """Alpha-equivalence representative: minimal encoding over body orders."""
        cached = self.__dict__.get("_canonical")
        if cached is not None:
            return cached
        best_key, best_atoms = None, None
        for perm in itertools.permutations(self.body):
            mapping: dict[int, int] = {}
            atoms = []
            for a in (self.head,) + perm:
                terms = []
                for t in (a.subject, a.object):
                    if t.is_var:
                        if t.value not in mapping:
                            mapping[t.value] = len(mapping)
                        t = var(mapping[t.value])
                    terms.append(t)
                atoms.append(Atom(a.relation, terms[0], terms[1]))
            key = tuple(_atom_key(x) for x in atoms)
            if best_key is None or key < best_key:
                best_key, best_atoms = key, atoms
        best = Rule(best_atoms[0], tuple(best_atoms[1:]))
        object.__setattr__(best, "_encoding", best_key)
        object.__setattr__(best, "_canonical", best)
        object.__setattr__(self, "_canonical", best)
        return best

    def encoding(self) -> tuple:
        enc = self.__dict__.get("_encoding")
        if enc is None:
            enc = tuple(_atom_key(a) for a in self.atoms())
            object.__setattr__(self, "_encoding", enc)
        return enc

    def __lt__(self, other: "Rule") -> bool:
        return self.encoding() < other.encoding()

    def format(self, entities: Dictionary | None = None, relations: Dictionary | None = None) -> str:
        """Human-readable ``?a  rel  ?c  ?c  rel2  ?b   => ?a  rel  ?b``."""

        def term(t: Term) -> str:
            if t.is_var:
                return "?" + _var_name(t.value)
            return entities.name(t.value) if entities is not None else f"e{t.value}"

        def atom(a: Atom) -> str:
            rel = relations.name(a.relation) if relations is not None else f"r{a.relation}"
            return f"{term(a.subject)}  {rel}  {term(a.object)}"

        body = "  ".join(atom(a) for a in self.body)
        return f"{body}   => {atom(self.head)}"


def _var_name(i: int) -> str:
    letters = "abcdefghijklmnopqrstuvwxyz"
    return letters[i] if i < 26 else f"v{i}"


def head_rule(relation: int) -> Rule:
    return Rule(Atom(int(relation), var(0), var(1)))


def parse_rule(text: str, entities: Dictionary, relations: Dictionary) -> Rule:
    body_txt, head_txt = text.split("=>")

    def atoms(chunk: str) -> list[Atom]:
        toks = [t for t in chunk.strip().split("  ") if t.strip()]
        toks = [t.strip() for t in toks]
        if len(toks) % 3:
            raise ValueError(f"cannot parse atoms from {chunk!r}")
        names: list[Atom] = []
        for i in range(0, len(toks), 3):
            s, r, o = toks[i:i + 3]
            names.append(Atom(relations[r], _parse_term(s, entities), _parse_term(o, entities)))
        return names

    head = atoms(head_txt)
    if len(head) != 1:
        raise ValueError(f"rule must have exactly one head atom: {text!r}")
    return Rule(head[0], tuple(atoms(body_txt)))


def _parse_term(tok: str, entities: Dictionary) -> Term:
    if tok.startswith("?") and tok not in entities:
        name = tok[1:]
        if len(name) == 1:
            return var(ord(name) - ord("a"))
        return var(int(name[1:]))
    return const(entities[tok])


@dataclass
class RuleMetrics:
    support: int
    body_groundings: int
    standard_confidence: float
    head_coverage: float
    embedding_confidence: float | None
    quality: float
    num_new_predictions: int

    @property
    def ec_defined(self) -> bool:
        return self.embedding_confidence is not None


# --------------------------------------------------------------------------
# grounding engine


class _Projection(NamedTuple):
    """Set of (x, y) head bindings: matrix AND row-mask AND column-mask.

    ``matrix`` is a dense boolean array on small graphs and a CSR matrix
    otherwise. ``None`` components are unconstrained; ``empty``
    short-circuits.
    """

    matrix: np.ndarray | sp.csr_matrix | None
    xmask: np.ndarray | None
    ymask: np.ndarray | None
    empty: bool
    n: int

    def size(self) -> int:
        if self.empty:
            return 0
        if self.matrix is not None:
            if isinstance(self.matrix, np.ndarray):
                return int(np.count_nonzero(self.matrix))
            return int(self.matrix.nnz)
        nx = self.n if self.xmask is None else int(self.xmask.sum())
        ny = self.n if self.ymask is None else int(self.ymask.sum())
        return nx * ny

    def contains(self, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        if self.empty:
            return np.zeros(len(xs), dtype=bool)
        keep = np.ones(len(xs), dtype=bool)
        if self.xmask is not None:
            keep &= self.xmask[xs]
        if self.ymask is not None:
            keep &= self.ymask[ys]
        if self.matrix is not None and len(xs):
            if isinstance(self.matrix, np.ndarray):
                keep &= self.matrix[xs, ys]
            else:
                keep &= np.asarray(self.matrix[xs, ys]).ravel() != 0
        return keep

    def _matrix_pairs(self):
        # row-major order in both representations
        if isinstance(self.matrix, np.ndarray):
            xs, ys = np.nonzero(self.matrix)
            return xs.astype(np.int64), ys.astype(np.int64)
        coo = self.matrix.tocoo()
        order = np.lexsort((coo.col, coo.row))
        return coo.row[order].astype(np.int64), coo.col[order].astype(np.int64)

    def pairs(self) -> tuple[np.ndarray, np.ndarray]:
        if self.empty:
            return np.empty(0, np.int64), np.empty(0, np.int64)
        if self.matrix is not None:
            return self._matrix_pairs()
        xs = np.arange(self.n) if self.xmask is None else np.flatnonzero(self.xmask)
        ys = np.arange(self.n) if self.ymask is None else np.flatnonzero(self.ymask)
        return np.repeat(xs, len(ys)), np.tile(ys, len(xs))

    def sample_pairs(self, k: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Uniform sample of ``k`` distinct pairs (all pairs if fewer), in sorted order."""
        total = self.size()
        if total <= k:
            return self.pairs()
        pick = np.sort(rng.choice(total, size=k, replace=False))
        if self.matrix is not None:
            xs, ys = self._matrix_pairs()
            return xs[pick], ys[pick]
        xs = np.arange(self.n) if self.xmask is None else np.flatnonzero(self.xmask)
        ys = np.arange(self.n) if self.ymask is None else np.flatnonzero(self.ymask)
        return xs[pick // len(ys)], ys[pick % len(ys)]


# graphs with at most this many entities are joined with dense boolean arrays
DENSE_LIMIT = 1024


class _DenseOps:
    @staticmethod
    def adj(engine, r):
        return engine._dense_adjacency(r)

    @staticmethod
    def transpose(M):
        return M.T

    @staticmethod
    def both(M, N):
        return M & N

    @staticmethod
    def diagonal(M):
        return M.diagonal().copy()

    @staticmethod
    def join(Mx, My, zmask):
        if zmask is not None:
            Mx, My = Mx[:, zmask], My[:, zmask]
        return (Mx.astype(np.float32) @ My.T.astype(np.float32)) > 0

    @staticmethod
    def any_rows(M, zmask):
        if zmask is not None:
            M = M[:, zmask]
        return M.any(axis=1)

    @staticmethod
    def mask(M, xmask, ymask):
        M = M.copy()
        if xmask is not None:
            M &= xmask[:, None]
        if ymask is not None:
            M &= ymask[None, :]
        return M, not M.any()


class _SparseOps:
    @staticmethod
    def adj(engine, r):
        return engine.adjacency(r)

    @staticmethod
    def transpose(M):
        return M.T.tocsr()

    @staticmethod
    def both(M, N):
        return M.multiply(N).tocsr()

    @staticmethod
    def diagonal(M):
        return M.diagonal() != 0

    @staticmethod
    def join(Mx, My, zmask):
        if zmask is not None:
            zdiag = sp.diags(zmask.astype(np.float64))
            Mx = (Mx @ zdiag).tocsr()
        return (Mx @ My.T).tocsr()

    @staticmethod
    def any_rows(M, zmask):
        if zmask is not None:
            M = M @ sp.diags(zmask.astype(np.float64))
        return np.asarray(M.sum(axis=1)).ravel() > 0

    @staticmethod
    def mask(M, xmask, ymask):
        M = M.tocsr(copy=True)
        if xmask is not None:
            M = sp.diags(xmask.astype(np.float64)) @ M
        if ymask is not None:
            M = M @ sp.diags(ymask.astype(np.float64))
        M = sp.csr_matrix(M)
        M.data = (M.data != 0).astype(np.float64)
        M.eliminate_zeros()
        return M, M.nnz == 0


class GroundingEngine:
    """Evaluates rule bodies against one knowledge graph, caching adjacency matrices."""

    def __init__(self, kg: KnowledgeGraph, dense: bool | None = None):
        self.kg = kg
        self.n = kg.n_entities
        self.dense = self.n <= DENSE_LIMIT if dense is None else bool(dense)
        self._ops = _DenseOps if self.dense else _SparseOps
        self._adj: dict[int, sp.csr_matrix] = {}
        self._transposed: dict[int, sp.csr_matrix] = {}
        self._dense: dict[int, np.ndarray] = {}

    def adjacency(self, r: int) -> sp.csr_matrix:
        mat = self._adj.get(r)
        if mat is None:
            mat = self.kg.adjacency(r).astype(np.float64)
            self._adj[r] = mat
        return mat

    def _dense_adjacency(self, r: int) -> np.ndarray:
        mat = self._dense.get(r)
        if mat is None:
            mat = self.adjacency(r).toarray() != 0
            self._dense[r] = mat
        return mat

    def _row_mask(self, r: int, e: int) -> np.ndarray:
        if self.dense:
            return self._dense_adjacency(r)[e].copy()
        A = self.adjacency(r)
        mask = np.zeros(self.n, dtype=bool)
        mask[A.indices[A.indptr[e]:A.indptr[e + 1]]] = True
        return mask

    def _column_mask(self, r: int, e: int) -> np.ndarray:
        if self.dense:
            return self._dense_adjacency(r)[:, e].copy()
        At = self._transposed.get(r)
        if At is None:
            At = self.adjacency(r).T.tocsr()
            self._transposed[r] = At
        mask = np.zeros(self.n, dtype=bool)
        mask[At.indices[At.indptr[e]:At.indptr[e + 1]]] = True
        return mask

    def project(self, rule: Rule) -> _Projection:
        """Head-variable bindings (X, Y) for which the body is satisfiable."""
        head = rule.head
        if not (head.subject.is_var and head.object.is_var and head.subject != head.object):
            raise ValueError("rule heads must be r(X, Y) over two distinct variables")
        X, Y = head.subject.value, head.object.value
        ops = self._ops
        vecs: dict[int, np.ndarray] = {}
        pairs: dict[tuple[int, int], object] = {}
        empty = False

        def and_vec(v, mask):
            vecs[v] = mask if v not in vecs else vecs[v] & mask

        for atom in rule.body:
            s, o = atom.subject, atom.object
            if not s.is_var and not o.is_var:
                if not self.kg.contains((s.value, atom.relation, o.value)):
                    empty = True
            elif s.is_var and o.is_var:
                A = ops.adj(self, atom.relation)
                if s.value == o.value:
                    and_vec(s.value, ops.diagonal(A))
                    continue
                u, w = sorted((s.value, o.value))
                M = A if (s.value, o.value) == (u, w) else ops.transpose(A)
                pairs[(u, w)] = M if (u, w) not in pairs else ops.both(pairs[(u, w)], M)
            elif s.is_var:
                and_vec(s.value, self._column_mask(atom.relation, o.value))
            else:
                and_vec(o.value, self._row_mask(atom.relation, s.value))

        others = ({v for key in pairs for v in key} | set(vecs)) - {X, Y}
        if len(others) > 1:
            raise NotImplementedError("bodies with more than one non-head variable are not supported")
        matrix = None
        if (min(X, Y), max(X, Y)) in pairs:
            matrix = pairs[(min(X, Y), max(X, Y))]
            if X > Y:
                matrix = ops.transpose(matrix)
        if others:
            (z,) = others
            zmask = vecs.get(z)

            def oriented(v):
                key = (min(v, z), max(v, z))
                if key not in pairs:
                    return None
                M = pairs[key]
                return M if v < z else ops.transpose(M)  # rows: v, cols: z

            Mx, My = oriented(X), oriented(Y)
            if Mx is not None and My is not None:
                joined = ops.join(Mx, My, zmask)
                matrix = joined if matrix is None else ops.both(matrix, joined)
            elif Mx is not None:
                and_vec(X, ops.any_rows(Mx, zmask))
            elif My is not None:
                and_vec(Y, ops.any_rows(My, zmask))
            elif zmask is not None and not zmask.any():
                empty = True

        xmask, ymask = vecs.get(X), vecs.get(Y)
        if matrix is not None:
            matrix, none_left = ops.mask(matrix, xmask, ymask)
            xmask = ymask = None
            empty = empty or none_left
        elif (xmask is not None and not xmask.any()) or (ymask is not None and not ymask.any()):
            empty = True
        return _Projection(matrix, xmask, ymask, empty, self.n)

    def head_pairs(self, r: int) -> tuple[np.ndarray, np.ndarray]:
        pairs = self.kg.by_relation.get(int(r))
        if pairs is None:
            return np.empty(0, np.int64), np.empty(0, np.int64)
        return pairs[:, 0], pairs[:, 1]

    def support(self, rule: Rule, proj: _Projection | None = None) -> int:
        proj = self.project(rule) if proj is None else proj
        hx, hy = self.head_pairs(rule.head.relation)
        return int(proj.contains(hx, hy).sum())


def _rule_seed(seed: int, rule: Rule) -> list[int]:
    return [int(seed), zlib.crc32(repr(rule.encoding()).encode())]


def _check_output_rule(rule: Rule) -> Rule:
    if not rule.body:
        raise ValueError("rule has an empty body")
    if not rule.is_closed():
        raise ValueError(f"rule is not closed: {rule}")
    if not rule.is_connected():
        raise ValueError(f"rule is not connected: {rule}")
    return rule.canonical()


def _new_prediction_sample(engine: GroundingEngine, rule: Rule, proj: _Projection,
                           cap: int, rng: np.random.Generator):
    """Sample (at most ``cap``) of the predictions not already in the graph."""
    r = rule.head.relation
    support = engine.support(rule, proj)
    if proj.size() - support <= 0:
        return np.empty(0, np.int64), np.empty(0, np.int64)
    xs, ys = proj.sample_pairs(cap + support, rng)
    trip = np.column_stack([xs, np.full(len(xs), r), ys])
    keep = np.flatnonzero(~engine.kg.contains_many(trip))
    if len(keep) > cap:
        keep = np.sort(rng.choice(keep, size=cap, replace=False))
    return xs[keep], ys[keep]


def infer_heads(kg: KnowledgeGraph, rule: Rule, engine: GroundingEngine | None = None) -> set[Triple]:
    """All head triples inferred by some grounding of the body in ``kg``."""
    rule = _check_output_rule(rule)
    engine = GroundingEngine(kg) if engine is None else engine
    xs, ys = engine.project(rule).pairs()
    r = rule.head.relation
    return {Triple(x, r, y) for x, y in zip(xs.tolist(), ys.tolist())}


def support(kg: KnowledgeGraph, rule: Rule) -> int:
    """Number of inferred head triples that are present in ``kg``."""
    rule = _check_output_rule(rule)
    return GroundingEngine(kg).support(rule)


def body_groundings(kg: KnowledgeGraph, rule: Rule) -> int:
    rule = _check_output_rule(rule)
    return GroundingEngine(kg).project(rule).size()


def standard_confidence(kg: KnowledgeGraph, rule: Rule) -> float:
    rule = _check_output_rule(rule)
    engine = GroundingEngine(kg)
    proj = engine.project(rule)
    n_body = proj.size()
    if n_body == 0:
        raise ValueError("standard confidence is undefined: the body has no groundings")
    return engine.support(rule, proj) / n_body


def embedding_confidence(kg0: KnowledgeGraph, rule: Rule, state: EmbeddingState,
                         cap: int = DEFAULT_EC_CAP, seed: int = 0) -> float:
    """Mean truth value of the rule's predictions that are absent from ``kg0``.

    Above ``cap`` predictions the mean is taken over a seeded uniform sample.
    """
    rule = _check_output_rule(rule)
    engine = GroundingEngine(kg0)
    ec = _embedding_confidence(engine, rule, engine.project(rule), state, cap, seed)
    if ec is None:
        raise ValueError("embedding confidence is undefined: the rule predicts nothing new")
    return ec


def _embedding_confidence(engine, rule, proj, state, cap, seed):
    rng = np.random.default_rng(_rule_seed(seed, rule))
    xs, ys = _new_prediction_sample(engine, rule, proj, cap, rng)
    if len(xs) == 0:
        return None
    trip = np.column_stack([xs, np.full(len(xs), rule.head.relation), ys])
    return float(np.mean(state.truth(trip)))


def quality(sc: float, ec: float | None, omega: float) -> float:
    """Weighted mix of standard and embedding confidence; SC alone if EC is undefined."""
    if ec is None:
        return float(sc)
    return (1.0 - omega) * sc + omega * ec


def rule_metrics(engine: GroundingEngine, rule: Rule, state: EmbeddingState | None, omega: float,
                 cap: int = DEFAULT_EC_CAP, seed: int = 0,
                 proj: _Projection | None = None) -> RuleMetrics:
    proj = engine.project(rule) if proj is None else proj
    supp = engine.support(rule, proj)
    n_body = proj.size()
    n_head = engine.kg.relation_size(rule.head.relation)
    sc = supp / n_body if n_body else 0.0
    hc = supp / n_head if n_head else 0.0
    ec = None if state is None else _embedding_confidence(engine, rule, proj, state, cap, seed)
    return RuleMetrics(supp, n_body, sc, hc, ec, quality(sc, ec, omega), n_body - supp)


# --------------------------------------------------------------------------
# search

OPERATORS = ("dangling", "instantiated", "closing")


def constant_candidates(kg: KnowledgeGraph, min_hc: float) -> np.ndarray:
    """Entities frequent enough to be used as constants in instantiated atoms."""
    threshold = max(1.0, min_hc * len(kg))
    return np.flatnonzero(kg.entity_freq >= threshold)


def _relation_constants(kg: KnowledgeGraph, constants: np.ndarray) -> dict:
    """relation -> (allowed subject constants, allowed object constants)."""
    cache = kg.__dict__.setdefault("_rule_constants", {})
    key = tuple(constants.tolist())
    out = cache.get(key)
    if out is None:
        allowed = set(key)
        out = {r: (sorted(set(p[:, 0].tolist()) & allowed), sorted(set(p[:, 1].tolist()) & allowed))
               for r, p in kg.by_relation.items()}
        cache.clear()
        cache[key] = out
    return out


def refine(rule: Rule, kg: KnowledgeGraph, max_len: int = MAX_RULE_LENGTH,
           constants: np.ndarray | None = None, min_hc: float = 0.01,
           operators: Sequence[str] = OPERATORS) -> list[Rule]:
    """Extend ``rule`` by one body atom with each requested operator.

    Candidates are canonicalised and deduplicated. Atoms identical to the
    head or to an existing body atom, reflexive atoms, and variable-free
    atoms are not generated. A candidate that reaches ``max_len`` without
    being closed can never be output, so it is dropped here.
    """
    if len(rule) >= max_len:
        return []
    bad = set(operators) - set(OPERATORS)
    if bad:
        raise ValueError(f"unknown operators {sorted(bad)}")
    if constants is None and "instantiated" in operators:
        constants = constant_candidates(kg, min_hc)
    by_rel_constants = _relation_constants(kg, constants) if "instantiated" in operators else {}
    rels = sorted(kg.by_relation)
    vars_ = sorted(rule.variables())
    shared = [var(v) for v in vars_] + sorted(
        {t for a in rule.atoms() for t in a.terms() if not t.is_var})
    fresh = var(max(vars_) + 1)
    existing = set(rule.atoms())
    last = len(rule) + 1 == max_len

    atoms: list[Atom] = []
    for r in rels:
        if "dangling" in operators and not last:
            for u in shared:
                atoms.append(Atom(r, u, fresh))
                atoms.append(Atom(r, fresh, u))
        if "instantiated" in operators:
            subs, objs = by_rel_constants[r]
            for v in vars_:
                atoms.extend(Atom(r, var(v), const(c)) for c in objs)
                atoms.extend(Atom(r, const(c), var(v)) for c in subs)
        if "closing" in operators:
            for u, w in itertools.permutations(shared, 2):
                if u.is_var or w.is_var:
                    atoms.append(Atom(r, u, w))

    out: dict[tuple, Rule] = {}
    for atom in atoms:
        if atom in existing:
            continue
        cand = Rule(rule.head, rule.body + (atom,))
        if last and not cand.is_closed():
            continue
        cand = cand.canonical()
        out.setdefault(cand.encoding(), cand)
    return list(out.values())


@dataclass
class MinedRule:
    rule: Rule
    metrics: RuleMetrics

    def __iter__(self):
        return iter((self.rule, self.metrics))


def _instantiated_children(engine: GroundingEngine, rule: Rule, proj: _Projection,
                           constants: np.ndarray, min_hc: float, max_len: int,
                           coverage: dict) -> list[Rule]:
    """Instantiated-atom refinements whose head coverage exceeds ``min_hc``.

    Adding ``s(V, c)`` with V a head variable keeps every other body
    binding intact, so the child's support for all constants c at once is
    a weighted row (or column) sum of the adjacency of ``s`` over the
    parent's supported head facts. Only constants that pass are turned into
    rules; their coverage is stored in ``coverage``. Instantiating a
    non-head variable can never close a rule of length <= 3, so it is not
    generated here.
    """
    kg = engine.kg
    r = rule.head.relation
    n_head = kg.relation_size(r)
    if n_head == 0:
        return []
    hx, hy = engine.head_pairs(r)
    ok = proj.contains(hx, hy)
    last = len(rule) + 1 == max_len
    counts: dict[int, int] = {}
    for a in rule.atoms():
        for t in a.terms():
            if t.is_var:
                counts[t.value] = counts.get(t.value, 0) + 1
    open_vars = {v for v, c in counts.items() if c < 2}
    allowed = np.zeros(kg.n_entities, dtype=bool)
    allowed[constants] = True
    existing = set(rule.atoms())
    out = []
    for head_var, values in ((rule.head.subject.value, hx[ok]), (rule.head.object.value, hy[ok])):
        if last and not open_vars <= {head_var}:
            continue
        w = np.bincount(values, minlength=kg.n_entities).astype(np.float64)
        for s_rel in sorted(kg.by_relation):
            A = engine.adjacency(s_rel)
            # s(V, c): sum_v w[v] A[v, c];  s(c, V): sum_v A[c, v] w[v]
            for const_is_object, supp in ((True, A.T @ w), (False, A @ w)):
                hits = np.flatnonzero((supp / n_head > min_hc) & allowed)
                for c in hits.tolist():
                    atom = (Atom(s_rel, var(head_var), const(c)) if const_is_object
                            else Atom(s_rel, const(c), var(head_var)))
                    if atom in existing:
                        continue
                    child = Rule(rule.head, rule.body + (atom,)).canonical()
                    coverage.setdefault(child.encoding(), float(supp[c]) / n_head)
                    out.append(child)
    return out


class MiningCache:
    """Embedding-independent mining work on one graph, reusable across calls.

    Projections, head coverage, refinements, classical measures and the
    sampled new predictions of every rule visited depend only on the graph
    and the search settings, so a loop that re-mines the same graph with
    successive embeddings only pays for scoring after the first call.
    """

    # cap on cached prediction pairs (int32 pairs) held across all rules
    SAMPLE_BUDGET = 20_000_000

    def __init__(self, kg: KnowledgeGraph):
        self.kg = kg
        self.engine = GroundingEngine(kg)
        self._settings = None

    def bind(self, min_hc: float, max_len: int, ec_cap: int, seed: int) -> None:
        settings = (min_hc, max_len, ec_cap, seed)
        if settings == self._settings:
            return
        self._settings = settings
        self.min_hc, self.max_len, self.ec_cap, self.seed = settings
        self.constants = constant_candidates(self.kg, min_hc)
        self.projections: dict[tuple, _Projection] = {}
        self.coverage: dict[tuple, float] = {}
        self.children: dict[tuple, list[Rule]] = {}
        self.classical: dict[tuple, tuple] = {}
        self.samples: dict[tuple, np.ndarray] = {}
        self._sampled = 0

    def projection(self, rule: Rule) -> _Projection:
        key = rule.encoding()
        proj = self.projections.get(key)
        if proj is None:
            proj = self.engine.project(rule)
            self.projections[key] = proj
        return proj

    def head_coverage(self, rule: Rule) -> float:
        key = rule.encoding()
        hc = self.coverage.get(key)
        if hc is None:
            proj = self.engine.project(rule)
            n_head = self.kg.relation_size(rule.head.relation)
            hc = self.engine.support(rule, proj) / n_head if n_head else 0.0
            self.coverage[key] = hc
            if hc > self.min_hc:
                self.projections[key] = proj
        return hc

    def refinements(self, rule: Rule) -> list[Rule]:
        key = rule.encoding()
        out = self.children.get(key)
        if out is None:
            out = refine(rule, self.kg, self.max_len, self.constants, self.min_hc,
                         operators=("dangling", "closing"))
            out += _instantiated_children(self.engine, rule, self.projection(rule), self.constants,
                                          self.min_hc, self.max_len, self.coverage)
            self.children[key] = out
        return out

    def _classical(self, rule: Rule) -> tuple:
        key = rule.encoding()
        got = self.classical.get(key)
        if got is None:
            proj = self.projection(rule)
            supp = self.engine.support(rule, proj)
            n_body = proj.size()
            n_head = self.kg.relation_size(rule.head.relation)
            got = (supp, n_body, supp / n_body if n_body else 0.0,
                   supp / n_head if n_head else 0.0)
            self.classical[key] = got
        return got

    def new_predictions(self, rule: Rule) -> np.ndarray:
        """(k, 3) sample of unobserved predictions, at most ``ec_cap`` rows."""
        key = rule.encoding()
        trip = self.samples.get(key)
        if trip is None:
            rng = np.random.default_rng(_rule_seed(self.seed, rule))
            xs, ys = _new_prediction_sample(self.engine, rule, self.projection(rule),
                                            self.ec_cap, rng)
            trip = np.column_stack([xs, np.full(len(xs), rule.head.relation), ys])
            if self._sampled + len(trip) <= self.SAMPLE_BUDGET:
                self.samples[key] = trip
                self._sampled += len(trip)
        return trip

    def prefetch_ec(self, state: EmbeddingState) -> dict[tuple, float]:
        """Embedding confidence of every rule whose sample is cached, scored in bulk."""
        keys = [k for k, t in self.samples.items() if len(t)]
        if not keys:
            return {}
        lengths = np.array([len(self.samples[k]) for k in keys])
        trip = np.concatenate([self.samples[k] for k in keys])
        # keep each gathered batch to a few million floats
        width = max(state.model.entity_width, int(np.prod(state.model.relation_shape)))
        chunk = max(256, (1 << 21) // width)
        truth = np.concatenate([state.truth(trip[i:i + chunk]) for i in range(0, len(trip), chunk)])
        starts = np.concatenate([[0], np.cumsum(lengths)[:-1]])
        return {k: float(np.mean(truth[o:o + n])) for k, o, n in zip(keys, starts, lengths)}

    def metrics(self, rule: Rule, state: EmbeddingState | None, omega: float,
                prefetched: dict | None = None) -> RuleMetrics:
        supp, n_body, sc, hc = self._classical(rule)
        ec = None
        if state is not None:
            ec = None if prefetched is None else prefetched.get(rule.encoding())
            if ec is None:
                trip = self.new_predictions(rule)
                ec = float(np.mean(state.truth(trip))) if len(trip) else None
        return RuleMetrics(supp, n_body, sc, hc, ec, quality(sc, ec, omega), n_body - supp)


def mine(kg0: KnowledgeGraph, state: EmbeddingState | None, omega: float = 0.5,
         min_hc: float = 0.01, max_len: int = MAX_RULE_LENGTH, ec_cap: int = DEFAULT_EC_CAP,
         seed: int = 0, cache: MiningCache | None = None) -> list[MinedRule]:
    """Best-first rule search with head-coverage and quality pruning.

    Partial rules are dequeued by head coverage (ties: canonical encoding).
    Closed and connected rules are emitted; the rest are refined. A
    candidate is kept when its head coverage exceeds ``min_hc`` and, once
    its parent has a non-empty body, its quality strictly exceeds the
    parent's. A candidate rejected under one parent can still be reached
    through another, so the emitted set does not depend on queue order.

    Pass the same ``cache`` to repeated calls on one graph to reuse every
    embedding-independent result.
    """
    omega = check_unit_interval(omega, "omega")
    min_hc = check_unit_interval(min_hc, "min_hc")
    max_len = check_positive_int(max_len, "max_len")
    if max_len > MAX_RULE_LENGTH:
        raise ValueError(f"max_len above {MAX_RULE_LENGTH} is not supported")
    if state is None and omega > 0:
        raise ValueError("an embedding state is required when omega > 0")
    if cache is None:
        cache = MiningCache(kg0)
    elif cache.kg is not kg0:
        raise ValueError("the mining cache belongs to a different graph")
    cache.bind(min_hc, max_len, ec_cap, seed)

    scored: dict[tuple, RuleMetrics] = {}
    prefetched = cache.prefetch_ec(state) if state is not None else None

    def metrics(rule: Rule) -> RuleMetrics:
        key = rule.encoding()
        m = scored.get(key)
        if m is None:
            m = cache.metrics(rule, state, omega, prefetched)
            scored[key] = m
        return m

    queue: list = []
    accepted: set[tuple] = set()
    for r in sorted(kg0.by_relation):
        rule = head_rule(r)
        accepted.add(rule.encoding())
        heapq.heappush(queue, (-1.0, rule.encoding(), rule))

    emitted: list[MinedRule] = []
    n_evaluated = 0
    while queue:
        _, _, rule = heapq.heappop(queue)
        if rule.body and rule.is_closed() and rule.is_connected():
            emitted.append(MinedRule(rule, metrics(rule)))
            continue
        if len(rule) >= max_len:
            continue
        parent_q = metrics(rule).quality if rule.body else None
        for child in cache.refinements(rule):
            key = child.encoding()
            if key in accepted:
                continue
            n_evaluated += 1
            hc = cache.head_coverage(child)
            if hc <= min_hc:
                continue
            if parent_q is not None and not metrics(child).quality > parent_q:
                continue
            accepted.add(key)
            heapq.heappush(queue, (-hc, key, child))
    logger.debug("mined %d rules (%d candidates evaluated)", len(emitted), n_evaluated)
    emitted.sort(key=lambda m: (-m.metrics.quality, m.rule.encoding()))
    return emitted


def select_top_k(mined: Sequence[MinedRule], k: int) -> list[MinedRule]:
    """Top-``k`` by quality; ties broken by support (desc) then canonical encoding."""
    ranked = sorted(mined, key=lambda m: (-m.metrics.quality, -m.metrics.support, m.rule.encoding()))
    return ranked[:k]


# --------------------------------------------------------------------------
# rule files

RULE_FILE_COLUMNS = ("support", "body_groundings", "standard_confidence", "head_coverage",
                     "embedding_confidence", "quality", "num_new_predictions")


def write_rules(path, mined: Sequence[MinedRule], entities: Dictionary | None = None,
                relations: Dictionary | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# rule\t" + "\t".join(RULE_FILE_COLUMNS) + "\n")
        for rule, m in mined:
            ec = "nan" if m.embedding_confidence is None else f"{m.embedding_confidence:.6f}"
            fh.write(
                f"{rule.format(entities, relations)}\t{m.support}\t{m.body_groundings}\t"
                f"{m.standard_confidence:.6f}\t{m.head_coverage:.6f}\t{ec}\t{m.quality:.6f}\t"
                f"{m.num_new_predictions}\n"
            )


def read_rules(path, entities: Dictionary, relations: Dictionary) -> list[MinedRule]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            cols = line.split("\t")
            if len(cols) != 1 + len(RULE_FILE_COLUMNS):
                raise ValueError(f"{path}:{lineno}: expected {1 + len(RULE_FILE_COLUMNS)} columns")
            rule = parse_rule(cols[0], entities, relations)
            ec = float(cols[5])
            out.append(MinedRule(rule, RuleMetrics(
                support=int(cols[1]), body_groundings=int(cols[2]),
                standard_confidence=float(cols[3]), head_coverage=float(cols[4]),
                embedding_confidence=None if math.isnan(ec) else ec,
                quality=float(cols[6]), num_new_predictions=int(cols[7]),
            )))
    return out


class RuleMiner(BaseEstimator):
    """Estimator wrapper around :func:`mine`.

    ``fit`` takes the observed triples and an embedding (an
    :class:`EmbeddingState` or a fitted estimator exposing ``state_``).
    ``predict`` says whether any of the top rules infers each query triple.
    """

    def __init__(self, omega=0.5, min_head_coverage=0.01, max_length=3, top_k=None,
                 ec_sample_cap=DEFAULT_EC_CAP, random_state=0):
        self.omega = omega
        self.min_head_coverage = min_head_coverage
        self.max_length = max_length
        self.top_k = top_k
        self.ec_sample_cap = ec_sample_cap
        self.random_state = random_state

    def fit(self, X, y=None, embedding=None, n_entities=None, n_relations=None):
        kg = X if isinstance(X, KnowledgeGraph) else KnowledgeGraph(X, n_entities, n_relations)
        state = getattr(embedding, "state_", embedding)
        self.mined_ = mine(kg, state, self.omega, self.min_head_coverage, self.max_length,
                           self.ec_sample_cap, self.random_state)
        self.rules_ = [m.rule for m in self.mined_]
        self.kg_ = kg
        return self

    def _selected(self):
        check_is_fitted(self, "mined_")
        if self.top_k is None:
            return list(self.mined_)
        return select_top_k(self.mined_, self.top_k)

    def inferred_triples(self) -> np.ndarray:
        """New triples (absent from the fitted graph) predicted by the selected rules."""
        from .hybrid import inferred_set

        triples = inferred_set(self.kg_, [m.rule for m in self._selected()])
        return np.array(sorted(triples), dtype=np.int64).reshape(-1, 3)

    def predict(self, X) -> np.ndarray:
        X = check_triples(X, self.kg_.n_entities, self.kg_.n_relations)
        engine = GroundingEngine(self.kg_)
        hit = np.zeros(len(X), dtype=bool)
        for m in self._selected():
            proj = engine.project(m.rule)
            sel = X[:, 1] == m.rule.head.relation
            if sel.any():
                hit[sel] |= proj.contains(X[sel, 0], X[sel, 2])
        return hit.astype(int)
