"""Gradient flow, gradient descent and the reduced eigenvalue ODE.

The full flow integrates ``dW_l/dt = -dLoss/dW_l`` on the whole chain. In the
block-diagonal setting with alpha/m initialization every factor stays in the
three-parameter family ``M(a, b, c)`` (diagonal ``a``, within-block ``b``,
off-block ``c``), whose eigenvalues ``lambda1`` (multiplicity 1), ``lambda2``
(``n - 1``) and ``lambda3`` (``n(s - 1)``) obey a closed three-dimensional ODE:

    lambda1' = -gamma * lambda1**(L-1)
    lambda2' = -gamma * lambda2**(L-1)
    lambda3' = -lambda3**(2L-1)

with ``gamma = (lambda1**L + (n-1) * lambda2**L) / n - s * w*``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _kernels as K
from .core import AlphaM, BlockSpec, FactorChain, Identity, ObservationSet, product
from .errors import DimensionMismatchError, StepCollapseError
from .metrics import spectrum_metrics

__all__ = [
    "EigenState",
    "EigenTrajectory",
    "IntegratorConfig",
    "Trajectory",
    "balance_drift",
    "block_loss",
    "check_balancedness",
    "conserved_quantity",
    "conserved_quantity_drift",
    "default_step",
    "eigen_state_of",
    "eigen_product_spectrum",
    "family_matrix",
    "family_residual",
    "initial_eigen_state",
    "integrate_gradient_flow",
    "integrate_reduced_eigen",
    "reduced_rhs",
    "run_gradient_descent",
]

_STATUS = {
    K.CONVERGED: "converged",
    K.TIME_LIMIT: "time_limit",
    K.STEP_COLLAPSE: "step_collapse",
    K.DIVERGED: "diverged",
    K.ITER_LIMIT: "iteration_limit",
}


@dataclass(frozen=True)
class IntegratorConfig:
    """Settings for :func:`integrate_gradient_flow` and :func:`integrate_reduced_eigen`.

    ``step=None`` selects :func:`default_step`. ``record_every`` counts
    accepted steps between recorded samples.
    """

    method: str = "rk4"
    step: Optional[float] = None
    adaptive: bool = True
    t_max: float = 100.0
    stop_loss: float = 1e-12
    record_every: int = 100
    min_step: float = 1e-15

    def __post_init__(self):
        if self.method not in ("rk4", "euler"):
            raise ValueError(f"method must be 'rk4' or 'euler', got {self.method!r}")
        if self.step is not None and not self.step > 0:
            raise ValueError(f"step must be positive, got {self.step}")
        if not self.t_max > 0:
            raise ValueError(f"t_max must be positive, got {self.t_max}")
        if not self.stop_loss >= 0:
            raise ValueError(f"stop_loss must be non-negative, got {self.stop_loss}")
        if int(self.record_every) < 1:
            raise ValueError("record_every must be a positive integer")


@dataclass(frozen=True, eq=False)
class Trajectory:
    times: np.ndarray
    losses: np.ndarray
    singular_values: np.ndarray
    stable_ranks: np.ndarray
    effective_ranks: np.ndarray
    invariant_drifts: dict
    products: np.ndarray
    final_chain: FactorChain
    status: str
    steps: int
    rejected_steps: int = 0
    states: Optional[np.ndarray] = None

    @property
    def converged(self) -> bool:
        return self.status == "converged"

    @property
    def final_loss(self) -> float:
        return float(self.losses[-1])

    def __len__(self) -> int:
        return int(self.times.size)


# ---------------------------------------------------------------------------
# Invariant monitors and the M(a, b, c) family
# ---------------------------------------------------------------------------


def check_balancedness(A: np.ndarray, B: np.ndarray) -> float:
    """``||A^T A - B B^T||_F`` for the depth-2 product ``A @ B``."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if A.shape[1] != B.shape[0]:
        raise DimensionMismatchError(f"A {A.shape} and B {B.shape} cannot be multiplied")
    return float(np.linalg.norm(A.T @ A - B @ B.T))


def _imbalances(factors: np.ndarray) -> np.ndarray:
    # W_{l+1}^T W_{l+1} - W_l W_l^T for consecutive layers; conserved by the flow.
    upper = np.einsum("lki,lkj->lij", factors[1:], factors[1:])
    lower = np.einsum("lik,ljk->lij", factors[:-1], factors[:-1])
    return upper - lower


def balance_drift(chain: FactorChain, reference: FactorChain) -> float:
    """Total Frobenius change of the layer imbalances relative to ``reference``."""
    if chain.depth < 2:
        return 0.0
    diff = _imbalances(chain.factors) - _imbalances(reference.factors)
    return float(np.sum(np.sqrt(np.sum(diff**2, axis=(1, 2)))))


def family_matrix(a: float, b: float, c: float, spec: BlockSpec) -> np.ndarray:
    """Matrix with diagonal ``a``, within-block ``b`` and off-block ``c`` entries."""
    d, s = spec.dim, spec.block_size
    blocks = np.arange(d) // s
    same = blocks[:, None] == blocks[None, :]
    w = np.where(same, b, c).astype(float)
    np.fill_diagonal(w, a)
    return w


def _family_coefficients(W: np.ndarray, spec: BlockSpec) -> tuple[float, float, float]:
    d, s = spec.dim, spec.block_size
    if W.shape != (d, d):
        raise DimensionMismatchError(f"matrix shape {W.shape} does not match block dim {d}")
    blocks = np.arange(d) // s
    same = blocks[:, None] == blocks[None, :]
    eye = np.eye(d, dtype=bool)
    a = float(np.mean(W[eye]))
    within = same & ~eye
    b = float(np.mean(W[within])) if within.any() else 0.0
    c = float(np.mean(W[~same])) if (~same).any() else 0.0
    return a, b, c


def family_residual(W: np.ndarray, spec: BlockSpec) -> float:
    """Frobenius distance from ``W`` to its projection onto the family."""
    a, b, c = _family_coefficients(np.asarray(W, dtype=float), spec)
    return float(np.linalg.norm(W - family_matrix(a, b, c, spec)))


@dataclass(frozen=True)
class EigenState:
    lambda1: float
    lambda2: float
    lambda3: float

    def as_array(self) -> np.ndarray:
        return np.array([self.lambda1, self.lambda2, self.lambda3])

    def to_matrix(self, spec: BlockSpec) -> np.ndarray:
        """Family member with these eigenvalues."""
        s, n = spec.block_size, spec.num_blocks
        mean_block = (self.lambda1 + (n - 1) * self.lambda2) / n
        b = (mean_block - self.lambda3) / s
        a = self.lambda3 + b
        c = (self.lambda1 - self.lambda2) / (s * n)
        return family_matrix(a, b, c, spec)


def eigen_state_of(W: np.ndarray, spec: BlockSpec) -> EigenState:
    """Eigenvalue classes of the family projection of ``W``."""
    a, b, c = _family_coefficients(np.asarray(W, dtype=float), spec)
    s, n = spec.block_size, spec.num_blocks
    return EigenState(a + (s - 1) * b + s * (n - 1) * c, a + (s - 1) * b - s * c, a - b)


def eigen_product_spectrum(state: EigenState, spec: BlockSpec, depth: int) -> np.ndarray:
    """Singular values of ``W**depth`` for the family member with eigenvalues ``state``.

    Family members are symmetric, so these are the sorted ``|lambda_k|**depth``
    with multiplicities ``1, n - 1`` and ``n (s - 1)``.
    """
    n, s, L = spec.num_blocks, spec.block_size, int(depth)
    vals = np.concatenate(
        [
            np.full(1, abs(state.lambda1) ** L),
            np.full(n - 1, abs(state.lambda2) ** L),
            np.full(n * (s - 1), abs(state.lambda3) ** L),
        ]
    )
    return np.sort(vals)[::-1]


def initial_eigen_state(scheme, spec: BlockSpec) -> EigenState:
    """Eigenvalues of an alpha/m (or scaled identity) factor."""
    if isinstance(scheme, Identity):
        scheme = AlphaM(scheme.alpha)
    if not isinstance(scheme, AlphaM):
        raise TypeError("initial eigenvalues are defined for AlphaM or Identity schemes only")
    alpha, m, d = float(scheme.alpha), float(scheme.m), spec.dim
    if math.isinf(m):
        return EigenState(alpha, alpha, alpha)
    return EigenState(alpha * (m + d - 1) / m, alpha * (m - 1) / m, alpha * (m - 1) / m)


def conserved_quantity(state, depth: int) -> float:
    """``lambda1 / lambda2`` for depth 2, ``lambda1**(2-L) - lambda2**(2-L)`` beyond."""
    l1, l2 = (state.lambda1, state.lambda2) if isinstance(state, EigenState) else state[:2]
    L = int(depth)
    with np.errstate(divide="ignore", invalid="ignore"):
        if L == 2:
            return float(l1 / l2) if l2 != 0 else math.nan
        return float(np.power(float(l1), 2 - L) - np.power(float(l2), 2 - L))


def conserved_quantity_drift(trajectory, depth: int, spec: Optional[BlockSpec] = None) -> np.ndarray:
    """Absolute drift of the conserved quantity from its first sample.

    Accepts an :class:`EigenTrajectory`, an ``(n, 3)`` array of eigenvalues,
    or a :class:`Trajectory` recorded with ``keep_states=True`` together with
    the block ``spec`` used to read eigenvalues off ``W_1``.
    """
    if isinstance(trajectory, EigenTrajectory):
        states = trajectory.states
    elif isinstance(trajectory, Trajectory):
        if trajectory.states is None or spec is None:
            raise ValueError("chain trajectories need keep_states=True and a block spec")
        states = np.array([eigen_state_of(s[0], spec).as_array() for s in trajectory.states])
    else:
        states = np.asarray(trajectory, dtype=float)
    q = np.array([conserved_quantity(row, depth) for row in states])
    return np.abs(q - q[0])


def default_step(chain: FactorChain) -> float:
    """``1e-3 / (1 + ||W_{L:1}||_F ** (2 - 2/L))``."""
    L = chain.depth
    norm = float(np.linalg.norm(product(chain)))
    return 1e-3 / (1.0 + norm ** (2.0 - 2.0 / L))


# ---------------------------------------------------------------------------
# Full-chain integrators
# ---------------------------------------------------------------------------


class _Recorder:
    def __init__(self, chain: FactorChain, block_spec: Optional[BlockSpec], keep_states: bool):
        self.reference = chain
        self.block_spec = block_spec
        self.keep_states = keep_states
        self.depth = chain.depth
        self.rows: list = []
        self.q0 = self._conserved(chain.factors)

    def _conserved(self, factors) -> float:
        if self.block_spec is None or self.depth < 2:
            return math.nan
        return conserved_quantity(eigen_state_of(factors[0], self.block_spec), self.depth)

    def record(self, t: float, loss: float, factors: np.ndarray) -> None:
        if self.rows and t <= self.rows[-1][0]:
            return
        chain = FactorChain(factors)
        w = product(chain)
        sm = spectrum_metrics(w)
        self.rows.append(
            (
                float(t),
                float(loss),
                sm.singulars,
                sm.stable_rank,
                sm.effective_rank,
                balance_drift(chain, self.reference),
                abs(self._conserved(factors) - self.q0),
                w,
                factors.copy() if self.keep_states else None,
            )
        )

    def finish(self, factors: np.ndarray, status: str, steps: int, rejected: int) -> Trajectory:
        cols = list(zip(*self.rows))
        drifts = {
            "balance": np.array(cols[5]),
            "conserved": np.array(cols[6]),
        }
        return Trajectory(
            times=np.array(cols[0]),
            losses=np.array(cols[1]),
            singular_values=np.array(cols[2]),
            stable_ranks=np.array(cols[3]),
            effective_ranks=np.array(cols[4]),
            invariant_drifts=drifts,
            products=np.array(cols[7]),
            final_chain=FactorChain(factors),
            status=status,
            steps=steps,
            rejected_steps=rejected,
            states=np.array(cols[8]) if self.keep_states else None,
        )


def _obs_arrays(chain: FactorChain, obs: ObservationSet):
    if chain.dim != obs.dim:
        raise DimensionMismatchError(f"chain dim {chain.dim} != observation dim {obs.dim}")
    obs.require_nonempty()
    return (
        np.ascontiguousarray(obs.rows, dtype=np.int64),
        np.ascontiguousarray(obs.cols, dtype=np.int64),
        np.ascontiguousarray(obs.targets, dtype=np.float64),
    )


def integrate_gradient_flow(
    chain: FactorChain,
    obs: ObservationSet,
    cfg: IntegratorConfig = IntegratorConfig(),
    *,
    block_spec: Optional[BlockSpec] = None,
    keep_states: bool = False,
) -> Trajectory:
    """Integrate the gradient flow of the observed squared loss.

    Stops at ``cfg.t_max`` or once the loss is at most ``cfg.stop_loss``. A
    run that hits ``t_max`` first is returned with ``status='time_limit'``.
    Raises :class:`StepCollapseError` if adaptive halving pushes the step
    below ``cfg.min_step``.

    ``block_spec`` enables the ``conserved`` drift column (eigenvalue
    classes of ``W_1``); ``keep_states`` stores every recorded chain.
    """
    rows, cols, targets = _obs_arrays(chain, obs)
    F = np.array(chain.factors, dtype=np.float64, order="C")
    h = float(cfg.step) if cfg.step is not None else default_step(chain)
    rec = _Recorder(chain, block_spec, keep_states)
    pre, suf, prod, tmp = K._workspace(F)
    loss0 = K.chain_loss(F, rows, cols, targets, pre, suf, prod)
    rec.record(0.0, loss0, F)

    t, steps, rejected = 0.0, 0, 0
    status = K.CONVERGED if loss0 <= cfg.stop_loss else K.RUNNING
    loss = loss0
    while status == K.RUNNING:
        t, h, loss, acc, rej, status = K.flow_segment(
            F, rows, cols, targets, h, t, float(cfg.t_max), float(cfg.stop_loss),
            int(cfg.record_every), cfg.method == "rk4", bool(cfg.adaptive),
            float(cfg.min_step), 1e-10, 1e-28,
        )
        steps += acc
        rejected += rej
        rec.record(t, loss, F)
        if status == K.RUNNING and t >= cfg.t_max:
            status = K.TIME_LIMIT
    traj = rec.finish(F, _STATUS[status], steps, rejected)
    if status == K.STEP_COLLAPSE:
        raise StepCollapseError(
            f"step fell below {cfg.min_step:g} at t={t:.6g} (loss {loss:.3e})", traj
        )
    return traj


def run_gradient_descent(
    chain: FactorChain,
    obs: ObservationSet,
    step_size: float,
    *,
    max_iters: int,
    stop_loss: float = 1e-12,
    record_every: int = 1000,
    block_spec: Optional[BlockSpec] = None,
    keep_states: bool = False,
) -> Trajectory:
    """Plain gradient descent ``W_l <- W_l - eta * dLoss/dW_l``.

    Recorded times are virtual: ``iterations * step_size``.
    """
    if not step_size > 0:
        raise ValueError(f"step_size must be positive, got {step_size}")
    if int(max_iters) < 0 or int(record_every) < 1:
        raise ValueError("max_iters must be >= 0 and record_every >= 1")
    rows, cols, targets = _obs_arrays(chain, obs)
    F = np.array(chain.factors, dtype=np.float64, order="C")
    rec = _Recorder(chain, block_spec, keep_states)
    pre, suf, prod, tmp = K._workspace(F)
    loss = K.chain_loss(F, rows, cols, targets, pre, suf, prod)
    rec.record(0.0, loss, F)
    done = 0
    status = K.CONVERGED if loss <= stop_loss else K.RUNNING
    while status == K.RUNNING:
        if done >= max_iters:
            status = K.ITER_LIMIT
            break
        budget = min(int(record_every), int(max_iters) - done)
        loss, it, status = K.gd_segment(F, rows, cols, targets, float(step_size), budget, float(stop_loss))
        done += it
        rec.record(done * step_size, loss, F)
    return rec.finish(F, _STATUS[status], done, 0)


# ---------------------------------------------------------------------------
# Reduced eigenvalue ODE
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class EigenTrajectory:
    times: np.ndarray
    states: np.ndarray
    losses: np.ndarray
    status: str
    steps: int = 0

    @property
    def converged(self) -> bool:
        return self.status == "converged"

    @property
    def final(self) -> EigenState:
        return EigenState(*self.states[-1].tolist())

    def __len__(self) -> int:
        return int(self.times.size)


def reduced_rhs(lam: np.ndarray, spec: BlockSpec, depth: int) -> np.ndarray:
    """Right-hand side of the eigenvalue ODE."""
    L, n, s, w = int(depth), spec.num_blocks, spec.block_size, float(spec.target)
    l1, l2, l3 = lam
    gamma = (l1**L + (n - 1) * l2**L) / n - s * w
    return np.array([-gamma * l1 ** (L - 1), -gamma * l2 ** (L - 1), -(l3 ** (2 * L - 1))])


def block_loss(lam, spec: BlockSpec, depth: int) -> float:
    """Observed loss of the chain whose factors all have eigenvalues ``lam``.

    The residual has eigenvalue ``gamma`` on the ``n`` block-constant
    directions and ``lambda3**L`` on the remaining ``n(s-1)`` in-block ones.
    """
    L, n, s, w = int(depth), spec.num_blocks, spec.block_size, float(spec.target)
    l1, l2, l3 = lam
    gamma = (l1**L + (n - 1) * l2**L) / n - s * w
    return 0.5 * (n * gamma**2 + n * (s - 1) * l3 ** (2 * L))


#: Per-step relative error target of the adaptive reduced integrator.
REDUCED_RTOL = 1e-10


def _rk4_step(f, x, h):
    k1 = f(x)
    k2 = f(x + 0.5 * h * k1)
    k3 = f(x + 0.5 * h * k2)
    k4 = f(x + h * k3)
    return x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def integrate_reduced_eigen(
    spec: BlockSpec,
    depth: int,
    init: EigenState,
    cfg: IntegratorConfig = IntegratorConfig(),
) -> EigenTrajectory:
    """Integrate the three-dimensional eigenvalue ODE.

    With ``cfg.adaptive=False`` the steps are exactly those of
    :func:`integrate_gradient_flow` under the same config, so the two can be
    compared sample by sample. Adaptive RK4 uses step doubling with relative
    error target :data:`REDUCED_RTOL` and lets the step grow; this reaches
    the very long escape times of tiny initializations. Adaptive Euler only
    halves on a loss increase, like the full flow.
    """
    L = int(depth)
    if L < 2:
        raise ValueError("the reduced ODE needs depth >= 2")
    lam = init.as_array()
    if np.any(lam < 0):
        raise ValueError("initial eigenvalues must be non-negative")
    if cfg.step is not None:
        h = float(cfg.step)
    else:
        l1, l2, l3 = lam
        n, s = spec.num_blocks, spec.block_size
        pnorm = math.sqrt(l1 ** (2 * L) + (n - 1) * l2 ** (2 * L) + n * (s - 1) * l3 ** (2 * L))
        h = 1e-3 / (1.0 + pnorm ** (2.0 - 2.0 / L))
    rk4 = cfg.method == "rk4"
    doubling = rk4 and cfg.adaptive

    def f(x):
        return reduced_rhs(x, spec, L)

    t = 0.0
    loss = block_loss(lam, spec, L)
    times, states, losses = [0.0], [lam.copy()], [loss]
    steps = since = 0
    status = "converged" if loss <= cfg.stop_loss else "running"
    while status == "running":
        if t >= cfg.t_max:
            status = "time_limit"
            break
        clipped = t + h > cfg.t_max
        hh = cfg.t_max - t if clipped else h
        grow = 1.0
        if doubling:
            full = _rk4_step(f, lam, hh)
            new = _rk4_step(f, _rk4_step(f, lam, 0.5 * hh), 0.5 * hh)
            scale = REDUCED_RTOL * np.maximum(np.abs(new), 1e-300)
            err = float(np.max(np.abs(new - full) / 15.0 / scale))
            factor = 0.9 * err ** -0.2 if err > 0 else 2.0
            if not np.isfinite(err) or err > 1.0:
                h = hh * max(0.2, min(factor, 0.5)) if np.isfinite(err) else 0.5 * hh
                if h < cfg.min_step:
                    status = "step_collapse"
                continue
            grow = min(2.0, max(1.0, factor))
        elif rk4:
            new = _rk4_step(f, lam, hh)
        else:
            new = lam + hh * f(lam)
        new_loss = block_loss(new, spec, L)
        if cfg.adaptive and not (new_loss <= loss * (1 + 1e-10) + 1e-28):
            h = 0.5 * hh
            if h < cfg.min_step:
                status = "step_collapse"
            continue
        lam, loss = new, new_loss
        t = cfg.t_max if clipped else t + hh
        if not clipped:
            h = hh * grow
        steps += 1
        since += 1
        if loss <= cfg.stop_loss:
            status = "converged"
        if since >= cfg.record_every or status != "running":
            times.append(t)
            states.append(lam.copy())
            losses.append(loss)
            since = 0
    if times[-1] < t:
        times.append(t)
        states.append(lam.copy())
        losses.append(loss)
    traj = EigenTrajectory(np.array(times), np.array(states), np.array(losses), status, steps)
    if status == "step_collapse":
        raise StepCollapseError(f"reduced ODE step fell below {cfg.min_step:g}", traj)
    return traj
