"""Observation-pattern connectivity and coupling of per-entry gradients.

Two observed entries are coupled at a given state when the parameter-space
gradients of the two predicted entries have a nonzero inner product. For a
chain the inner product has the closed form

    <grad w_ij, grad w_pq> = sum_l (T_l)_{ip} (S_l)_{jq},

with ``T_l = suf_l suf_l^T`` and ``S_l = pre_l^T pre_l`` built from the partial
products around layer ``l`` (see :func:`deepfact.core.prefix_suffix_products`).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .core import FactorChain, ObservationSet, prefix_suffix_products
from .errors import DimensionMismatchError

__all__ = [
    "BipartiteComponent",
    "ConnectivityReport",
    "CouplingReport",
    "GRAM_RELATIVE_TOL",
    "StructuralRule",
    "Verdict",
    "connectivity",
    "detect_decoupling",
    "gradient_inner_product",
    "gram_matrix",
]

#: Gram entries at most this fraction of the largest diagonal entry count as zero.
GRAM_RELATIVE_TOL = 1e-10


class Verdict(str, enum.Enum):
    COUPLED = "coupled"
    DECOUPLED = "decoupled"
    NUMERICALLY_DECOUPLED = "numerically_decoupled_at_sampled_times"


class StructuralRule(str, enum.Enum):
    """Exact arguments that settle a verdict without tolerances."""

    SINGLE_OBSERVATION = "single_observation"
    DEPTH_ONE = "depth_one"
    ZERO_CHAIN = "zero_chain"
    DEPTH_TWO_COMPONENTS = "depth_two_components"
    INVARIANT_BLOCK_SUPPORT = "invariant_block_support"
    POSITIVE_FACTORS = "positive_factors"


@dataclass(frozen=True)
class BipartiteComponent:
    rows: tuple[int, ...]
    cols: tuple[int, ...]


@dataclass(frozen=True)
class ConnectivityReport:
    connected: bool
    components: tuple[BipartiteComponent, ...]
    induced_partition: tuple[tuple[int, ...], ...]


@dataclass(frozen=True, eq=False)
class CouplingReport:
    verdict: Verdict
    partition: tuple[tuple[int, ...], ...]
    gram: np.ndarray
    structural_rule: Optional[StructuralRule] = None

    @property
    def decoupled(self) -> bool:
        return self.verdict is Verdict.DECOUPLED


def _ordered_partition(labels: np.ndarray) -> tuple[tuple[int, ...], ...]:
    """Group observation indices by label, ordered by smallest member."""
    groups: dict[int, list[int]] = {}
    for idx, lab in enumerate(labels.tolist()):
        groups.setdefault(lab, []).append(idx)
    return tuple(sorted((tuple(g) for g in groups.values()), key=lambda g: g[0]))


def _components(n_vertices: int, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    graph = coo_matrix((np.ones(u.size), (u, v)), shape=(n_vertices, n_vertices))
    _, labels = connected_components(graph, directed=False)
    return labels


def connectivity(obs: ObservationSet) -> ConnectivityReport:
    """Connected components of the row/column bipartite graph of ``obs``.

    Row ``i`` is vertex ``i`` and column ``j`` is vertex ``d + j``; vertices
    without any observation are dropped.
    """
    obs.require_nonempty()
    d = obs.dim
    labels = _components(2 * d, obs.rows, d + obs.cols)
    partition = _ordered_partition(labels[obs.rows])
    components = []
    for part in partition:
        lab = labels[obs.rows[part[0]]]
        members = np.flatnonzero(labels == lab)
        rows = sorted(set(obs.rows[list(part)].tolist()))
        cols = sorted(set(obs.cols[list(part)].tolist()))
        assert set(members.tolist()) == set(rows) | {d + c for c in cols}
        components.append(BipartiteComponent(tuple(rows), tuple(cols)))
    return ConnectivityReport(
        connected=len(components) == 1,
        components=tuple(components),
        induced_partition=partition,
    )


def _gram_factors(chain: FactorChain) -> tuple[np.ndarray, np.ndarray]:
    pre, suf = prefix_suffix_products(chain)
    t = np.einsum("lik,ljk->lij", suf, suf)
    s = np.einsum("lki,lkj->lij", pre, pre)
    return t, s


def gradient_inner_product(
    chain: FactorChain, e1: tuple[int, int], e2: tuple[int, int]
) -> float:
    """Inner product of the parameter gradients of entries ``e1`` and ``e2``."""
    d = chain.dim
    (i, j), (p, q) = e1, e2
    for k in (i, j, p, q):
        if not 0 <= k < d:
            raise DimensionMismatchError(f"index {k} outside [0, {d})")
    t, s = _gram_factors(chain)
    return float(np.sum(t[:, i, p] * s[:, j, q]))


def gram_matrix(chain: FactorChain, obs: ObservationSet) -> np.ndarray:
    """``|obs| x |obs|`` matrix of gradient inner products, symmetrised exactly."""
    if chain.dim != obs.dim:
        raise DimensionMismatchError(f"chain dim {chain.dim} != observation dim {obs.dim}")
    t, s = _gram_factors(chain)
    r, c = obs.rows, obs.cols
    g = np.einsum("lab,lab->ab", t[:, r][:, :, r], s[:, c][:, :, c])
    return 0.5 * (g + g.T)


def _support_groups(chain: FactorChain, obs: ObservationSet) -> np.ndarray:
    """Coarsest grouping of [d] that every factor and observation respects."""
    d = chain.dim
    nz = np.any(chain.factors != 0.0, axis=0)
    u, v = np.nonzero(nz)
    u = np.concatenate([u, obs.rows])
    v = np.concatenate([v, obs.cols])
    return _components(d, u, v)


def _single(obs: ObservationSet) -> tuple[tuple[int, ...], ...]:
    return (tuple(range(len(obs))),)


def _singletons(obs: ObservationSet) -> tuple[tuple[int, ...], ...]:
    return tuple((k,) for k in range(len(obs)))


def detect_decoupling(
    chain: FactorChain,
    obs: ObservationSet,
    sample_states: Optional[Sequence[FactorChain]] = None,
) -> CouplingReport:
    """Decide whether gradient flow from ``chain`` keeps observed entries apart.

    Exact rules are tried first, in this order:

    * one observation, or a depth-1 chain (gram is the identity);
    * the all-zero chain for depth >= 2, a fixed point with zero gradients;
    * depth 2: cross-component inner products vanish for every state, so the
      bipartite components give the partition;
    * invariant block support: if the factors and observations all live in
      the same index blocks, the flow keeps every factor block diagonal and
      cross-block inner products stay exactly zero;
    * depth >= 3 with entrywise positive factors: every inner product is
      positive at this state, which already rules out any partition.

    Otherwise the gram matrices at ``chain`` and ``sample_states`` are
    thresholded and the verdict is based on the resulting graph.
    """
    obs.require_nonempty()
    gram = gram_matrix(chain, obs)
    L = chain.depth
    n_obs = len(obs)

    if n_obs == 1:
        return CouplingReport(Verdict.COUPLED, _single(obs), gram, StructuralRule.SINGLE_OBSERVATION)
    if L == 1:
        return CouplingReport(Verdict.DECOUPLED, _singletons(obs), gram, StructuralRule.DEPTH_ONE)
    if not np.any(chain.factors):
        return CouplingReport(Verdict.DECOUPLED, _singletons(obs), gram, StructuralRule.ZERO_CHAIN)
    if L == 2:
        parts = connectivity(obs).induced_partition
        verdict = Verdict.DECOUPLED if len(parts) >= 2 else Verdict.COUPLED
        return CouplingReport(verdict, parts, gram, StructuralRule.DEPTH_TWO_COMPONENTS)

    groups = _support_groups(chain, obs)
    parts = _ordered_partition(groups[obs.rows])
    if len(parts) >= 2:
        return CouplingReport(Verdict.DECOUPLED, parts, gram, StructuralRule.INVARIANT_BLOCK_SUPPORT)
    if np.all(chain.factors > 0.0):
        return CouplingReport(Verdict.COUPLED, _single(obs), gram, StructuralRule.POSITIVE_FACTORS)

    adjacency = np.zeros((n_obs, n_obs), dtype=bool)
    for state, g in [(chain, gram)] + [(s, None) for s in (sample_states or ())]:
        g = gram_matrix(state, obs) if g is None else g
        scale = float(np.max(np.diag(g)))
        adjacency |= np.abs(g) > GRAM_RELATIVE_TOL * scale
    u, v = np.nonzero(adjacency)
    labels = _components(n_obs, u, v)
    parts = _ordered_partition(labels)
    if len(parts) == 1:
        return CouplingReport(Verdict.COUPLED, parts, gram, None)
    return CouplingReport(Verdict.NUMERICALLY_DECOUPLED, parts, gram, None)
