"""Interned, immutable triple store with the indexes needed for rule grounding."""

from __future__ import annotations

import logging
from collections import defaultdict
from functools import cached_property
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np
import scipy.sparse as sp

from ._validation import check_triples

logger = logging.getLogger(__name__)


class Triple(NamedTuple):
    head: int
    relation: int
    tail: int


class LabeledTriple(NamedTuple):
    triple: Triple
    label: int


class Dictionary:
    """Bijective string <-> dense integer id map, ids assigned in first-seen order."""

    def __init__(self, names: Iterable[str] = ()):
        self._forward: dict[str, int] = {}
        self._reverse: list[str] = []
        for name in names:
            self.add(name)

    def add(self, name: str) -> int:
        idx = self._forward.get(name)
        if idx is None:
            idx = len(self._reverse)
            self._forward[name] = idx
            self._reverse.append(name)
        return idx

    def __getitem__(self, name: str) -> int:
        return self._forward[name]

    def __contains__(self, name: str) -> bool:
        return name in self._forward

    def __len__(self) -> int:
        return len(self._reverse)

    def __iter__(self):
        return iter(self._reverse)

    def get(self, name: str, default=None):
        return self._forward.get(name, default)

    def name(self, idx: int) -> str:
        return self._reverse[idx]

    def dump(self, path) -> None:
        """Write ``id\\tstring`` lines."""
        with open(path, "w", encoding="utf-8") as fh:
            for i, name in enumerate(self._reverse):
                fh.write(f"{i}\t{name}\n")

    @classmethod
    def load(cls, path) -> "Dictionary":
        d = cls()
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.rstrip("\n")
                if not line:
                    continue
                idx, name = line.split("\t", 1)
                if int(idx) != len(d):
                    raise ValueError(f"{path}:{lineno}: ids must be dense and ordered")
                d.add(name)
        return d


class KnowledgeGraph:
    """Immutable set of (head, relation, tail) id triples.

    Duplicates passed to the constructor are dropped (first occurrence kept)
    and counted in ``n_duplicates``. Index structures are built lazily but
    never change after construction.
    """

    def __init__(self, triples, n_entities: int | None = None, n_relations: int | None = None):
        arr = check_triples(triples)
        if n_entities is None:
            n_entities = int(max(arr[:, 0].max(initial=-1), arr[:, 2].max(initial=-1)) + 1)
        if n_relations is None:
            n_relations = int(arr[:, 1].max(initial=-1) + 1)
        arr = check_triples(arr, n_entities, n_relations)
        self.n_entities = int(n_entities)
        self.n_relations = int(n_relations)

        keys = self._encode(arr)
        _, first = np.unique(keys, return_index=True)
        first.sort()
        self.n_duplicates = len(arr) - len(first)
        arr = np.ascontiguousarray(arr[first])
        arr.setflags(write=False)
        self.triples = arr
        self._keys = np.sort(keys[first])

    def _encode(self, arr) -> np.ndarray:
        arr = np.asarray(arr, dtype=np.int64)
        return (arr[..., 0] * self.n_relations + arr[..., 1]) * self.n_entities + arr[..., 2]

    def __len__(self) -> int:
        return len(self.triples)

    def __iter__(self):
        return (Triple(*map(int, row)) for row in self.triples)

    def __contains__(self, t) -> bool:
        return self.contains(t)

    def __repr__(self) -> str:
        return (f"KnowledgeGraph(n_triples={len(self)}, n_entities={self.n_entities}, "
                f"n_relations={self.n_relations})")

    def contains(self, t) -> bool:
        return tuple(int(x) for x in t) in self.exists

    def contains_many(self, triples) -> np.ndarray:
        """Vectorised membership test for an (n, 3) array."""
        arr = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
        if len(self._keys) == 0:
            return np.zeros(len(arr), dtype=bool)
        keys = self._encode(arr)
        pos = np.searchsorted(self._keys, keys)
        pos = np.minimum(pos, len(self._keys) - 1)
        return self._keys[pos] == keys

    @cached_property
    def exists(self) -> frozenset:
        return frozenset(map(tuple, self.triples.tolist()))

    @cached_property
    def by_relation(self) -> dict[int, np.ndarray]:
        """relation -> (n_r, 2) array of (head, tail) pairs, in triple order."""
        out = {}
        order = np.argsort(self.triples[:, 1], kind="stable")
        rels, starts = np.unique(self.triples[order, 1], return_index=True)
        bounds = list(starts[1:]) + [len(order)]
        for r, lo, hi in zip(rels, starts, bounds):
            pairs = self.triples[order[lo:hi]][:, [0, 2]]
            pairs.setflags(write=False)
            out[int(r)] = pairs
        return out

    @cached_property
    def heads_of(self) -> dict[tuple[int, int], frozenset]:
        acc = defaultdict(set)
        for h, r, t in self.triples.tolist():
            acc[(r, t)].add(h)
        return {k: frozenset(v) for k, v in acc.items()}

    @cached_property
    def tails_of(self) -> dict[tuple[int, int], frozenset]:
        acc = defaultdict(set)
        for h, r, t in self.triples.tolist():
            acc[(r, h)].add(t)
        return {k: frozenset(v) for k, v in acc.items()}

    @cached_property
    def entity_freq(self) -> np.ndarray:
        # a reflexive triple r(e, e) counts once for e
        h, t = self.triples[:, 0], self.triples[:, 2]
        n = self.n_entities
        freq = np.bincount(h, minlength=n) + np.bincount(t, minlength=n)
        freq -= np.bincount(h[h == t], minlength=n)
        freq.setflags(write=False)
        return freq

    def relation_size(self, r: int) -> int:
        pairs = self.by_relation.get(int(r))
        return 0 if pairs is None else len(pairs)

    def adjacency(self, r: int) -> sp.csr_matrix:
        """Boolean (n_entities x n_entities) adjacency matrix of relation ``r``."""
        cache = self.__dict__.setdefault("_adjacency", {})
        mat = cache.get(r)
        if mat is None:
            pairs = self.by_relation.get(int(r), np.empty((0, 2), dtype=np.int64))
            n = self.n_entities
            mat = sp.csr_matrix(
                (np.ones(len(pairs), dtype=bool), (pairs[:, 0], pairs[:, 1])), shape=(n, n)
            )
            cache[r] = mat
        return mat

    def union(self, *others: "KnowledgeGraph") -> "KnowledgeGraph":
        n_e = max([self.n_entities] + [o.n_entities for o in others])
        n_r = max([self.n_relations] + [o.n_relations for o in others])
        arr = np.concatenate([self.triples] + [o.triples for o in others])
        return KnowledgeGraph(arr, n_e, n_r)


def sparsity(kg: KnowledgeGraph, e: int | np.ndarray) -> float | np.ndarray:
    """Normalised inverse participation frequency of entity ``e`` (scalar or array).

    The min/max frequencies are taken over every entity id of ``kg``,
    including ids that never occur (frequency 0).
    """
    if len(kg) == 0:
        raise ValueError("sparsity is undefined on an empty graph")
    freq = kg.entity_freq
    lo, hi = freq.min(), freq.max()
    if hi == lo:
        raise ValueError("sparsity is undefined: all entities have the same frequency")
    out = 1.0 - (freq[e] - lo) / (hi - lo)
    return float(out) if np.ndim(out) == 0 else out


def _read_tsv(path, entity_dict: Dictionary, relation_dict: Dictionary) -> np.ndarray:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
            h, r, t = parts
            rows.append((entity_dict.add(h), relation_dict.add(r), entity_dict.add(t)))
    return np.array(rows, dtype=np.int64).reshape(-1, 3)


def load_tsv(path, entity_dict: Dictionary | None = None,
             relation_dict: Dictionary | None = None) -> KnowledgeGraph:
    """Load a ``head\\trelation\\ttail`` file, interning names into the dictionaries.

    The returned graph is sized to the dictionaries as they stand after
    reading this file. Use :func:`load_dataset` to size several splits
    consistently.
    """
    entity_dict = Dictionary() if entity_dict is None else entity_dict
    relation_dict = Dictionary() if relation_dict is None else relation_dict
    arr = _read_tsv(path, entity_dict, relation_dict)
    kg = KnowledgeGraph(arr, len(entity_dict), len(relation_dict))
    if kg.n_duplicates:
        logger.info("%s: dropped %d duplicate triples", path, kg.n_duplicates)
    return kg


class Dataset(NamedTuple):
    train: KnowledgeGraph
    valid: KnowledgeGraph | None
    test: KnowledgeGraph | None
    entities: Dictionary
    relations: Dictionary


def load_dataset(train, valid=None, test=None, entities: Dictionary | None = None,
                 relations: Dictionary | None = None) -> Dataset:
    """Load train/valid/test splits with shared dictionaries (train interned first)."""
    entities = Dictionary() if entities is None else entities
    relations = Dictionary() if relations is None else relations
    arrays = [None if p is None else _read_tsv(p, entities, relations) for p in (train, valid, test)]
    n_e, n_r = len(entities), len(relations)
    kgs = []
    for p, arr in zip((train, valid, test), arrays):
        if arr is None:
            kgs.append(None)
            continue
        kg = KnowledgeGraph(arr, n_e, n_r)
        if kg.n_duplicates:
            logger.info("%s: dropped %d duplicate triples", p, kg.n_duplicates)
        kgs.append(kg)
    return Dataset(kgs[0], kgs[1], kgs[2], entities, relations)


def write_tsv(kg: KnowledgeGraph | np.ndarray, path, entities: Dictionary | None = None,
              relations: Dictionary | None = None) -> None:
    """Write triples as TSV; ids are written verbatim when no dictionary is given."""
    arr = kg.triples if isinstance(kg, KnowledgeGraph) else np.asarray(kg)
    ename = entities.name if entities is not None else str
    rname = relations.name if relations is not None else str
    with open(Path(path), "w", encoding="utf-8") as fh:
        for h, r, t in arr.tolist():
            fh.write(f"{ename(h)}\t{rname(r)}\t{ename(t)}\n")
