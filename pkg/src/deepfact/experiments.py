"""Ground-truth generators, observation samplers and the warm/cold-start protocol."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .core import BlockSpec, FactorChain, ObservationSet, build_observation_block, product
from .errors import DimensionMismatchError
from .flow import IntegratorConfig, Trajectory, integrate_gradient_flow, run_gradient_descent
from .metrics import effective_rank, reconstruction_error, stable_rank

__all__ = [
    "BlockConstant",
    "OBSERVATION_MODES",
    "PhaseResult",
    "PlasticityProtocol",
    "RankR",
    "TrainSettings",
    "generate_ground_truth",
    "run_plasticity",
    "sample_nested_observations",
    "sample_observations",
    "train",
]

OBSERVATION_MODES = ("uniform_without_replacement", "diagonal", "block", "upper_triangular")
PLASTICITY_MODES = ("warm", "cold", "pre-only")


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(int(seed)))


@dataclass(frozen=True)
class RankR:
    """Sum of ``rank`` outer products ``u v^T`` of seeded standard normal vectors."""

    dim: int
    rank: int
    seed: int = 0


@dataclass(frozen=True)
class BlockConstant:
    """``spec.target`` on the diagonal blocks of ``spec`` and zero elsewhere."""

    spec: BlockSpec


def generate_ground_truth(kind: Union[RankR, BlockConstant]) -> np.ndarray:
    if isinstance(kind, RankR):
        d, r = int(kind.dim), int(kind.rank)
        if not 1 <= r <= d:
            raise ValueError(f"rank must lie in [1, {d}], got {r}")
        rng = _rng(kind.seed)
        u = rng.standard_normal((d, r))
        v = rng.standard_normal((d, r))
        return u @ v.T
    if isinstance(kind, BlockConstant):
        return build_observation_block(kind.spec).target_matrix()
    raise TypeError(f"unknown ground-truth kind {kind!r}")


def sample_observations(
    dim: int,
    count: Optional[int],
    seed: int,
    mode: str,
    truth: np.ndarray,
    block: Optional[BlockSpec] = None,
) -> ObservationSet:
    """Observe ``truth`` on a pattern chosen by ``mode``.

    ``count`` is only used by ``uniform_without_replacement``; the other
    modes fix their own pattern.
    """
    d = int(dim)
    truth = np.asarray(truth, dtype=float)
    if truth.shape != (d, d):
        raise DimensionMismatchError(f"truth shape {truth.shape} does not match dim {d}")
    if mode == "uniform_without_replacement":
        if count is None or not 0 < int(count) <= d * d:
            raise ValueError(f"count must lie in [1, {d * d}], got {count}")
        cells = _rng(seed).permutation(d * d)[: int(count)]
        return ObservationSet.from_matrix(truth, zip((cells // d).tolist(), (cells % d).tolist()))
    if mode == "diagonal":
        return ObservationSet.from_matrix(truth, [(i, i) for i in range(d)])
    if mode == "upper_triangular":
        return ObservationSet.from_matrix(truth, [(i, j) for i in range(d) for j in range(i, d)])
    if mode == "block":
        if block is None or block.dim != d:
            raise ValueError("block mode needs a BlockSpec with matching dimension")
        return ObservationSet.from_matrix(truth, build_observation_block(block).pairs)
    raise ValueError(f"unknown observation mode {mode!r}; expected one of {OBSERVATION_MODES}")


def sample_nested_observations(
    dim: int, counts: Sequence[int], seed: int, truth: np.ndarray
) -> list[ObservationSet]:
    """Nested uniform samples: the first ``counts[k]`` cells of one seeded permutation."""
    d = int(dim)
    counts = [int(c) for c in counts]
    if any(b < a for a, b in zip(counts, counts[1:])):
        raise ValueError("counts must be non-decreasing")
    if not counts or counts[0] < 1 or counts[-1] > d * d:
        raise ValueError(f"counts must lie in [1, {d * d}]")
    cells = _rng(seed).permutation(d * d)
    out = []
    for c in counts:
        chosen = cells[:c]
        out.append(ObservationSet.from_matrix(truth, zip((chosen // d).tolist(), (chosen % d).tolist())))
    return out


@dataclass(frozen=True)
class TrainSettings:
    """How one training phase is run.

    ``optimizer='gd'`` uses ``step`` as the learning rate and stops after
    ``max_iters`` iterations; the flow methods use ``t_max``.
    """

    optimizer: str = "gd"
    step: Optional[float] = 1e-3
    stop_loss: float = 1e-12
    t_max: float = 100.0
    max_iters: int = 1_000_000
    record_every: int = 1000

    def __post_init__(self):
        if self.optimizer not in ("gd", "rk4", "euler"):
            raise ValueError(f"optimizer must be gd, rk4 or euler, got {self.optimizer!r}")
        if self.optimizer == "gd" and not (self.step and self.step > 0):
            raise ValueError("gradient descent needs a positive step")


def train(chain: FactorChain, obs: ObservationSet, settings: TrainSettings,
          *, block_spec: Optional[BlockSpec] = None) -> Trajectory:
    if settings.optimizer == "gd":
        return run_gradient_descent(
            chain, obs, float(settings.step), max_iters=int(settings.max_iters),
            stop_loss=settings.stop_loss, record_every=int(settings.record_every),
            block_spec=block_spec,
        )
    cfg = IntegratorConfig(
        method=settings.optimizer, step=settings.step, t_max=settings.t_max,
        stop_loss=settings.stop_loss, record_every=int(settings.record_every),
    )
    return integrate_gradient_flow(chain, obs, cfg, block_spec=block_spec)


@dataclass(frozen=True, eq=False)
class PlasticityProtocol:
    """Pre-train on ``pre_obs``, then compare warm and cold training on ``post_obs``."""

    pre_obs: ObservationSet
    post_obs: ObservationSet
    modes: tuple = PLASTICITY_MODES
    pre_settings: TrainSettings = TrainSettings()
    post_settings: TrainSettings = TrainSettings()

    def __post_init__(self):
        if not self.pre_obs.is_subset_of(self.post_obs):
            raise ValueError("pre-training observations must be a subset of the post-training ones")
        if len(self.post_obs) <= len(self.pre_obs):
            raise ValueError("post-training must add at least one observation")
        bad = set(self.modes) - set(PLASTICITY_MODES)
        if bad:
            raise ValueError(f"unknown modes {sorted(bad)}")


@dataclass(frozen=True, eq=False)
class PhaseResult:
    mode: str
    trajectory: Trajectory
    initial_loss: float
    final_loss: float
    converged: bool
    effective_rank: float
    stable_rank: float
    reconstruction_error: float

    @property
    def final_product(self) -> np.ndarray:
        return product(self.trajectory.final_chain)


def _summarise(mode: str, traj: Trajectory, truth: np.ndarray) -> PhaseResult:
    w = product(traj.final_chain)
    return PhaseResult(
        mode=mode,
        trajectory=traj,
        initial_loss=float(traj.losses[0]),
        final_loss=traj.final_loss,
        converged=traj.converged,
        effective_rank=effective_rank(w),
        stable_rank=stable_rank(w),
        reconstruction_error=reconstruction_error(w, truth),
    )


def run_plasticity(protocol: PlasticityProtocol, init: FactorChain, truth: np.ndarray) -> dict[str, PhaseResult]:
    """Run the requested phases from the same initial chain.

    ``pre-only`` trains on the pre-training set; ``warm`` continues from that
    endpoint on the post-training set; ``cold`` trains on the post-training
    set from ``init`` directly.
    """
    out: dict[str, PhaseResult] = {}
    needs_pre = "warm" in protocol.modes or "pre-only" in protocol.modes
    if needs_pre:
        pre = train(init, protocol.pre_obs, protocol.pre_settings)
        if "pre-only" in protocol.modes:
            out["pre-only"] = _summarise("pre-only", pre, truth)
        if "warm" in protocol.modes:
            warm = train(pre.final_chain, protocol.post_obs, protocol.post_settings)
            out["warm"] = _summarise("warm", warm, truth)
    if "cold" in protocol.modes:
        cold = train(init, protocol.post_obs, protocol.post_settings)
        out["cold"] = _summarise("cold", cold, truth)
    return out
