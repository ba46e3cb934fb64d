"""Input checks shared by the estimators and the functional API."""

from __future__ import annotations

import numbers

import numpy as np


def check_triples(X, n_entities: int | None = None, n_relations: int | None = None) -> np.ndarray:
    """Return ``X`` as a C-contiguous (n, 3) int64 array of (head, relation, tail) ids.

    Accepts arrays, lists of tuples, and anything exposing a ``triples``
    attribute (e.g. a ``KnowledgeGraph``).
    """
    X = getattr(X, "triples", X)
    arr = np.asarray(X)
    if arr.size == 0:
        return np.empty((0, 3), dtype=np.int64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"expected an (n, 3) array of triples, got shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.integer):
        if not np.all(np.equal(np.mod(arr, 1), 0)):
            raise ValueError("triple ids must be integers")
    arr = np.ascontiguousarray(arr, dtype=np.int64)
    if arr.min() < 0:
        raise ValueError("triple ids must be non-negative")
    if n_entities is not None and max(arr[:, 0].max(), arr[:, 2].max()) >= n_entities:
        raise ValueError(f"entity id out of range (n_entities={n_entities})")
    if n_relations is not None and arr[:, 1].max() >= n_relations:
        raise ValueError(f"relation id out of range (n_relations={n_relations})")
    return arr


def check_labels(y, n: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if len(y) != n:
        raise ValueError(f"got {len(y)} labels for {n} triples")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    return y


def check_unit_interval(value, name: str) -> float:
    if not isinstance(value, numbers.Real) or not 0.0 <= value <= 1.0:
        raise ValueError(f"{name} must be in [0, 1], got {value!r}")
    return float(value)


def check_positive_int(value, name: str, allow_zero: bool = False) -> int:
    lo = 0 if allow_zero else 1
    if not isinstance(value, numbers.Integral) or value < lo:
        kind = "non-negative" if allow_zero else "positive"
        raise ValueError(f"{name} must be a {kind} integer, got {value!r}")
    return int(value)
