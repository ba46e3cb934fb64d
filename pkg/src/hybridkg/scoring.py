"""Triple score functions with analytic gradients.

Every scorer works on gathered parameter rows: ``H`` and ``T`` are entity
rows, ``R`` relation rows, all with a leading batch axis that broadcasts.
Complex-valued models store ``[real | imag]`` halves side by side.
"""

from __future__ import annotations

import numpy as np


class ScoreFunction:
    kind = ""

    def __init__(self, dim: int, norm: int = 2):
        if dim < 1:
            raise ValueError("dim must be positive")
        if norm not in (1, 2):
            raise ValueError("norm must be 1 or 2")
        self.dim = int(dim)
        self.norm = int(norm)

    def __repr__(self) -> str:
        return f"{type(self).__name__}(dim={self.dim}, norm={self.norm})"

    def __eq__(self, other) -> bool:
        return (type(self) is type(other) and self.dim == other.dim
                and self.norm == other.norm)

    @property
    def entity_width(self) -> int:
        return self.dim

    @property
    def relation_shape(self) -> tuple[int, ...]:
        return (self.dim,)

    def init_params(self, n_entities: int, n_relations: int, rng: np.random.Generator):
        bound = 6.0 / np.sqrt(self.dim)
        E = rng.uniform(-bound, bound, size=(n_entities, self.entity_width))
        R = rng.uniform(-bound, bound, size=(n_relations, *self.relation_shape))
        return E, R

    def score(self, H, R, T) -> np.ndarray:
        raise NotImplementedError

    def score_grad(self, H, R, T):
        """Return ``(phi, dphi/dH, dphi/dR, dphi/dT)`` for row-aligned inputs."""
        raise NotImplementedError


def _safe_div(num, den):
    out = np.zeros(np.broadcast_shapes(num.shape, den.shape))
    np.divide(num, den, out=out, where=den > 0)
    return out


class TransE(ScoreFunction):
    kind = "transe"

    def score(self, H, R, T):
        diff = H + R - T
        if self.norm == 1:
            return -np.abs(diff).sum(-1)
        return -np.sqrt((diff * diff).sum(-1))

    def score_grad(self, H, R, T):
        diff = H + R - T
        if self.norm == 1:
            phi = -np.abs(diff).sum(-1)
            g = -np.sign(diff)
        else:
            n = np.sqrt((diff * diff).sum(-1))
            phi = -n
            g = -_safe_div(diff, n[:, None])
        return phi, g, g.copy(), -g


class DistMult(ScoreFunction):
    kind = "distmult"

    def score(self, H, R, T):
        return (H * R * T).sum(-1)

    def score_grad(self, H, R, T):
        return (H * R * T).sum(-1), R * T, H * T, H * R


class ComplEx(ScoreFunction):
    """Re(<h, r, conj(t)>) over d complex coordinates."""

    kind = "complex"

    @property
    def entity_width(self):
        return 2 * self.dim

    @property
    def relation_shape(self):
        return (2 * self.dim,)

    def _split(self, X):
        return X[..., : self.dim], X[..., self.dim:]

    def score(self, H, R, T):
        hr, hi = self._split(H)
        rr, ri = self._split(R)
        tr, ti = self._split(T)
        return (hr * rr * tr + hi * rr * ti + hr * ri * ti - hi * ri * tr).sum(-1)

    def score_grad(self, H, R, T):
        hr, hi = self._split(H)
        rr, ri = self._split(R)
        tr, ti = self._split(T)
        phi = (hr * rr * tr + hi * rr * ti + hr * ri * ti - hi * ri * tr).sum(-1)
        gH = np.concatenate([rr * tr + ri * ti, rr * ti - ri * tr], -1)
        gR = np.concatenate([hr * tr + hi * ti, hr * ti - hi * tr], -1)
        gT = np.concatenate([hr * rr - hi * ri, hi * rr + hr * ri], -1)
        return phi, gH, gR, gT


class RotatE(ScoreFunction):
    """-||h o r - t|| with r = exp(i * theta); relations store the phases theta.

    ``norm=2`` takes the Euclidean norm of the complex difference vector;
    ``norm=1`` sums the per-coordinate moduli.
    """

    kind = "rotate"

    @property
    def entity_width(self):
        return 2 * self.dim

    def init_params(self, n_entities, n_relations, rng):
        bound = 6.0 / np.sqrt(self.dim)
        E = rng.uniform(-bound, bound, size=(n_entities, self.entity_width))
        R = rng.uniform(-np.pi, np.pi, size=(n_relations, self.dim))
        return E, R

    def _residual(self, H, R, T):
        d = self.dim
        hr, hi = H[..., :d], H[..., d:]
        tr, ti = T[..., :d], T[..., d:]
        c, s = np.cos(R), np.sin(R)
        re = hr * c - hi * s - tr
        im = hr * s + hi * c - ti
        return re, im, hr, hi, c, s

    def score(self, H, R, T):
        re, im, *_ = self._residual(H, R, T)
        if self.norm == 1:
            return -np.sqrt(re * re + im * im).sum(-1)
        return -np.sqrt((re * re + im * im).sum(-1))

    def score_grad(self, H, R, T):
        re, im, hr, hi, c, s = self._residual(H, R, T)
        if self.norm == 1:
            mod = np.sqrt(re * re + im * im)
            phi = -mod.sum(-1)
            a, b = -_safe_div(re, mod), -_safe_div(im, mod)
        else:
            n = np.sqrt((re * re + im * im).sum(-1))
            phi = -n
            a, b = -_safe_div(re, n[:, None]), -_safe_div(im, n[:, None])
        # a = dphi/dre, b = dphi/dim
        gH = np.concatenate([a * c + b * s, -a * s + b * c], -1)
        gT = np.concatenate([-a, -b], -1)
        gR = a * (-hr * s - hi * c) + b * (hr * c - hi * s)
        return phi, gH, gR, gT


class Bilinear(ScoreFunction):
    """h^T M_r t with a full d x d matrix per relation."""

    kind = "bilinear"

    @property
    def relation_shape(self):
        return (self.dim, self.dim)

    def score(self, H, R, T):
        return np.einsum("...i,...ij,...j->...", H, R, T)

    def score_grad(self, H, R, T):
        MT = np.einsum("nij,nj->ni", R, T)
        phi = (H * MT).sum(-1)
        gH = MT
        gR = H[:, :, None] * T[:, None, :]
        gT = np.einsum("nij,ni->nj", R, H)
        return phi, gH, gR, gT


SCORE_FUNCTIONS = {cls.kind: cls for cls in (TransE, DistMult, ComplEx, RotatE, Bilinear)}


def make_score_function(kind: str, dim: int, norm: int = 2) -> ScoreFunction:
    try:
        cls = SCORE_FUNCTIONS[kind.lower()]
    except KeyError:
        raise ValueError(f"unknown score model {kind!r}; choose from {sorted(SCORE_FUNCTIONS)}") from None
    return cls(dim, norm)
