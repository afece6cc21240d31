"""Domain types, initializers, loss and layer gradients for factor chains.

A factor chain stores ``L`` square matrices ``W_1 ... W_L`` and represents
their product ``W_L @ ... @ W_1``. Index 0 of :attr:`FactorChain.factors` is
the innermost factor ``W_1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence, Union

import numpy as np

from .errors import DimensionMismatchError, EmptyObservationError

__all__ = [
    "AllOnes",
    "AlphaM",
    "BlockSpec",
    "Explicit",
    "FactorChain",
    "Gaussian",
    "Identity",
    "InitScheme",
    "M_INFINITY",
    "ObservationSet",
    "build_init",
    "build_observation_block",
    "layer_gradients",
    "loss",
    "prefix_suffix_products",
    "product",
    "residual_matrix",
]

#: Tag for the identity end of the alpha/m family.
M_INFINITY = math.inf


def _frozen(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


# ---------------------------------------------------------------------------
# Observations
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ObservationSet:
    """Observed index pairs of a ``dim x dim`` matrix with their targets.

    Entries are stored in row-major order, so the position of an entry in
    :attr:`rows` is its canonical observation index.
    """

    dim: int
    rows: np.ndarray
    cols: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        if int(self.dim) < 1:
            raise ValueError(f"dim must be positive, got {self.dim}")
        rows = np.asarray(self.rows, dtype=np.int64).ravel()
        cols = np.asarray(self.cols, dtype=np.int64).ravel()
        targets = np.asarray(self.targets, dtype=np.float64).ravel()
        if not (rows.shape == cols.shape == targets.shape):
            raise DimensionMismatchError("rows, cols and targets must have equal length")
        d = int(self.dim)
        if rows.size and (rows.min() < 0 or rows.max() >= d or cols.min() < 0 or cols.max() >= d):
            raise ValueError(f"observation index outside [0, {d})")
        flat = rows * d + cols
        order = np.argsort(flat, kind="stable")
        flat = flat[order]
        if flat.size > 1 and np.any(flat[1:] == flat[:-1]):
            raise ValueError("duplicate (row, col) pair in observation set")
        object.__setattr__(self, "dim", d)
        object.__setattr__(self, "rows", _frozen(rows[order].copy()))
        object.__setattr__(self, "cols", _frozen(cols[order].copy()))
        object.__setattr__(self, "targets", _frozen(targets[order].copy()))

    @classmethod
    def from_entries(cls, dim: int, entries: Iterable[tuple[int, int, float]]) -> "ObservationSet":
        entries = list(entries)
        if not entries:
            return cls(dim, np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0))
        rows, cols, targets = zip(*entries)
        return cls(dim, np.array(rows), np.array(cols), np.array(targets, dtype=float))

    @classmethod
    def from_matrix(cls, truth: np.ndarray, pairs: Iterable[tuple[int, int]]) -> "ObservationSet":
        """Observe ``truth`` at the given ``(row, col)`` pairs."""
        truth = np.asarray(truth, dtype=float)
        if truth.ndim != 2 or truth.shape[0] != truth.shape[1]:
            raise DimensionMismatchError(f"truth must be square, got shape {truth.shape}")
        pairs = list(pairs)
        rows = np.array([p[0] for p in pairs], dtype=np.int64)
        cols = np.array([p[1] for p in pairs], dtype=np.int64)
        d = truth.shape[0]
        if rows.size and (rows.min() < 0 or rows.max() >= d or cols.min() < 0 or cols.max() >= d):
            raise ValueError(f"observation index outside [0, {d})")
        return cls(d, rows, cols, truth[rows, cols] if rows.size else np.zeros(0))

    def __len__(self) -> int:
        return int(self.rows.size)

    def __iter__(self) -> Iterator[tuple[int, int, float]]:
        for i, j, v in zip(self.rows.tolist(), self.cols.tolist(), self.targets.tolist()):
            yield i, j, v

    def __eq__(self, other) -> bool:
        if not isinstance(other, ObservationSet):
            return NotImplemented
        return (
            self.dim == other.dim
            and np.array_equal(self.rows, other.rows)
            and np.array_equal(self.cols, other.cols)
            and np.array_equal(self.targets, other.targets)
        )

    def __hash__(self) -> int:
        return hash((self.dim, self.rows.tobytes(), self.cols.tobytes(), self.targets.tobytes()))

    @property
    def pairs(self) -> list[tuple[int, int]]:
        return list(zip(self.rows.tolist(), self.cols.tolist()))

    def mask(self) -> np.ndarray:
        """0/1 matrix with ones at observed positions."""
        m = np.zeros((self.dim, self.dim))
        m[self.rows, self.cols] = 1.0
        return m

    def target_matrix(self) -> np.ndarray:
        """Matrix holding the targets at observed positions and zero elsewhere."""
        t = np.zeros((self.dim, self.dim))
        t[self.rows, self.cols] = self.targets
        return t

    def index_of(self, row: int, col: int) -> int:
        hits = np.flatnonzero((self.rows == row) & (self.cols == col))
        if hits.size == 0:
            raise KeyError((row, col))
        return int(hits[0])

    def is_subset_of(self, other: "ObservationSet") -> bool:
        """True when every observed pair here is also observed in ``other``."""
        return self.dim == other.dim and set(self.pairs) <= set(other.pairs)

    def require_nonempty(self) -> None:
        if len(self) == 0:
            raise EmptyObservationError("observation set is empty")


@dataclass(frozen=True)
class BlockSpec:
    """``num_blocks`` observed ``block_size x block_size`` diagonal blocks, all equal to ``target``."""

    block_size: int
    num_blocks: int
    target: float = 1.0

    def __post_init__(self):
        if int(self.block_size) < 1 or int(self.num_blocks) < 1:
            raise ValueError("block_size and num_blocks must be positive integers")
        if not float(self.target) > 0:
            raise ValueError(f"target must be positive, got {self.target}")

    @property
    def dim(self) -> int:
        return int(self.block_size) * int(self.num_blocks)

    @property
    def degenerate(self) -> bool:
        """A single block is the fully observed matrix."""
        return int(self.num_blocks) == 1

    def block_of(self, index: int) -> int:
        return int(index) // int(self.block_size)


def build_observation_block(spec: BlockSpec) -> ObservationSet:
    """Union of the diagonal blocks of ``spec``, every entry targeting ``spec.target``."""
    s, n = int(spec.block_size), int(spec.num_blocks)
    rows, cols = [], []
    for b in range(n):
        idx = np.arange(b * s, (b + 1) * s)
        r, c = np.meshgrid(idx, idx, indexing="ij")
        rows.append(r.ravel())
        cols.append(c.ravel())
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    return ObservationSet(spec.dim, rows, cols, np.full(rows.size, float(spec.target)))


# ---------------------------------------------------------------------------
# Factor chains and initialization
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FactorChain:
    """Immutable stack of ``depth`` square factors, ``factors[0]`` being ``W_1``."""

    factors: np.ndarray

    def __post_init__(self):
        f = np.array(self.factors, dtype=np.float64, copy=True)
        if f.ndim != 3 or f.shape[1] != f.shape[2] or f.shape[0] < 1 or f.shape[1] < 1:
            raise DimensionMismatchError(
                f"factors must have shape (L, d, d) with L, d >= 1, got {f.shape}"
            )
        object.__setattr__(self, "factors", _frozen(f))

    @classmethod
    def from_matrices(cls, matrices: Sequence[np.ndarray]) -> "FactorChain":
        mats = [np.asarray(m, dtype=float) for m in matrices]
        if not mats:
            raise DimensionMismatchError("a chain needs at least one factor")
        shape = mats[0].shape
        for m in mats:
            if m.ndim != 2 or m.shape != shape or shape[0] != shape[1]:
                raise DimensionMismatchError("all factors must be square with the same shape")
        return cls(np.stack(mats))

    @property
    def depth(self) -> int:
        return int(self.factors.shape[0])

    @property
    def dim(self) -> int:
        return int(self.factors.shape[1])

    def __len__(self) -> int:
        return self.depth

    def __getitem__(self, layer: int) -> np.ndarray:
        return self.factors[layer]

    def __iter__(self) -> Iterator[np.ndarray]:
        return iter(self.factors)

    def __eq__(self, other) -> bool:
        if not isinstance(other, FactorChain):
            return NotImplemented
        return np.array_equal(self.factors, other.factors)

    def __hash__(self) -> int:
        return hash((self.factors.shape, self.factors.tobytes()))

    def frobenius_sq(self) -> float:
        return float(np.sum(self.factors**2))


@dataclass(frozen=True)
class AlphaM:
    """Diagonal ``alpha``, off-diagonal ``alpha / m``; ``m = M_INFINITY`` gives ``alpha * I``."""

    alpha: float
    m: float = M_INFINITY

    def __post_init__(self):
        if not float(self.alpha) > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if not float(self.m) > 1:
            raise ValueError(f"m must lie in (1, inf], got {self.m}")

    @property
    def is_identity(self) -> bool:
        return math.isinf(float(self.m))


@dataclass(frozen=True)
class Identity:
    alpha: float

    def __post_init__(self):
        if not float(self.alpha) > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")


@dataclass(frozen=True)
class AllOnes:
    """The ``m -> 1`` end of the family: every entry equals ``alpha``."""

    alpha: float

    def __post_init__(self):
        if not float(self.alpha) > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")


@dataclass(frozen=True)
class Gaussian:
    """I.i.d. centred normal entries drawn from a counter-based generator."""

    std: float
    seed: int = 0

    def __post_init__(self):
        if not float(self.std) > 0:
            raise ValueError(f"std must be positive, got {self.std}")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")


@dataclass(frozen=True, eq=False)
class Explicit:
    matrices: tuple = field(default_factory=tuple)


InitScheme = Union[AlphaM, Identity, AllOnes, Gaussian, Explicit]


def _alpha_m_matrix(alpha: float, m: float, d: int) -> np.ndarray:
    if math.isinf(m):
        return alpha * np.eye(d)
    w = np.full((d, d), alpha / m)
    np.fill_diagonal(w, alpha)
    return w


def build_init(scheme: InitScheme, depth: int, dim: int) -> FactorChain:
    """Build the depth-``depth`` chain of ``dim x dim`` factors described by ``scheme``."""
    L, d = int(depth), int(dim)
    if L < 1 or d < 1:
        raise ValueError(f"depth and dim must be positive, got depth={depth}, dim={dim}")
    if isinstance(scheme, AlphaM):
        base = _alpha_m_matrix(float(scheme.alpha), float(scheme.m), d)
    elif isinstance(scheme, Identity):
        base = float(scheme.alpha) * np.eye(d)
    elif isinstance(scheme, AllOnes):
        base = np.full((d, d), float(scheme.alpha))
    elif isinstance(scheme, Gaussian):
        # Philox is counter based; the draw fills layer, row, column in C order.
        rng = np.random.Generator(np.random.Philox(int(scheme.seed)))
        return FactorChain(float(scheme.std) * rng.standard_normal((L, d, d)))
    elif isinstance(scheme, Explicit):
        mats = [np.asarray(m, dtype=float) for m in scheme.matrices]
        if len(mats) != L:
            raise DimensionMismatchError(f"explicit init has {len(mats)} matrices, depth is {L}")
        for m in mats:
            if m.shape != (d, d):
                raise DimensionMismatchError(f"explicit factor has shape {m.shape}, expected {(d, d)}")
        return FactorChain(np.stack(mats))
    else:
        raise TypeError(f"unknown init scheme {scheme!r}")
    return FactorChain(np.broadcast_to(base, (L, d, d)))


# ---------------------------------------------------------------------------
# Products, loss, gradients
# ---------------------------------------------------------------------------


def product(chain: FactorChain) -> np.ndarray:
    """End-to-end matrix ``W_L @ ... @ W_1``."""
    out = chain.factors[0].copy()
    for w in chain.factors[1:]:
        out = w @ out
    return out


def prefix_suffix_products(chain: FactorChain) -> tuple[np.ndarray, np.ndarray]:
    """Partial products around every layer.

    Returns ``(pre, suf)`` with ``pre[l] = W_{l-1} ... W_1`` and
    ``suf[l] = W_L ... W_{l+1}`` (0-based ``l``); empty products are the identity.
    """
    L, d = chain.depth, chain.dim
    pre = np.empty((L, d, d))
    suf = np.empty((L, d, d))
    pre[0] = np.eye(d)
    for l in range(1, L):
        pre[l] = chain.factors[l - 1] @ pre[l - 1]
    suf[L - 1] = np.eye(d)
    for l in range(L - 2, -1, -1):
        suf[l] = suf[l + 1] @ chain.factors[l + 1]
    return pre, suf


def _check_dims(chain: FactorChain, obs: ObservationSet) -> None:
    if chain.dim != obs.dim:
        raise DimensionMismatchError(f"chain dim {chain.dim} != observation dim {obs.dim}")


def residual_matrix(chain: FactorChain, obs: ObservationSet) -> np.ndarray:
    """Prediction minus target on observed entries, zero elsewhere."""
    _check_dims(chain, obs)
    w = product(chain)
    r = np.zeros_like(w)
    r[obs.rows, obs.cols] = w[obs.rows, obs.cols] - obs.targets
    return r


def loss(chain: FactorChain, obs: ObservationSet) -> float:
    """Half the squared error over observed entries."""
    r = residual_matrix(chain, obs)
    return 0.5 * float(np.sum(r * r))


def layer_gradients(chain: FactorChain, obs: ObservationSet) -> np.ndarray:
    """Gradient of :func:`loss` with respect to each factor, shape ``(L, d, d)``.

    ``grad[l] = suf[l].T @ R @ pre[l].T`` where ``R`` is the observed residual.
    """
    r = residual_matrix(chain, obs)
    pre, suf = prefix_suffix_products(chain)
    return np.einsum("lki,kj,lmj->lim", suf, r, pre)
