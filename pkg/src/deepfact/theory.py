"""Closed-form and implicit predictions for limits of the training dynamics.

Limit spectrum, block-diagonal observations
-------------------------------------------
With ``n`` observed ``s x s`` diagonal blocks of value ``w*`` (``d = s n``) and
alpha/m initialization, the limiting product has one singular value
``sigma1``, ``n - 1`` copies of ``sigma_i`` and ``d - n`` zeros, with
``sigma1 + (n - 1) sigma_i = w* d``.

* depth 2, finite ``m``: closed form, independent of ``alpha``;
* depth ``L >= 3``, finite ``m``: ``f1(sigma1) = C = f2(sigma_i)`` where, with
  ``a = (2 - L) / L``,
  ``f1(x) = x**a - ((w* d - x) / (n - 1))**a`` and
  ``f2(x) = (w* d - (n - 1) x)**a - x**a``,
  ``C = (alpha/m)**(2-L) * ((m+d-1)**(2-L) - (m-1)**(2-L)) < 0``;
* ``m = inf``: every block is fitted on its own, ``sigma1 = sigma_i = s w*``.

``C`` is carried as ``(sign, log|C|)``. Both implicit equations are solved by
bisection in ``u = log(sigma)``. Every comparison against ``C`` is done
through ``logaddexp`` so that ``|C|`` far beyond the float range is fine.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from .core import AlphaM, BlockSpec, Identity, ObservationSet
from .errors import (
    BracketError,
    DegenerateBlockError,
    DimensionMismatchError,
    PretrainUndefinedError,
)

__all__ = [
    "Branch",
    "ImplicitParams",
    "JacobianReport",
    "LimitSpectrum",
    "LopBounds",
    "SignedLog",
    "closed_form_L2",
    "constant_C",
    "dxd_example_bound",
    "dxd_example_truth",
    "jacobian",
    "lop_2x2_bounds",
    "misalignment_bound",
    "misalignment_ratios",
    "predict_limit",
    "pretrain_closed_form",
    "solve_implicit",
    "srank_lower_bound_dxd",
]

MAX_BISECTION_ITERS = 200
GRID_POINTS = 100


class Branch(str, enum.Enum):
    CLOSED_FORM_L2 = "closed_form_l2"
    IMPLICIT = "implicit"
    DECOUPLED_INFINITY = "decoupled_infinity"


@dataclass(frozen=True)
class LimitSpectrum:
    sigma1: float
    sigma_secondary: float
    sigma_zero_count: int
    branch: Branch
    num_blocks: int

    @property
    def dim(self) -> int:
        return self.num_blocks + self.sigma_zero_count

    def singular_values(self) -> np.ndarray:
        """Full descending spectrum of length ``d``."""
        return np.concatenate(
            [
                [self.sigma1],
                np.full(self.num_blocks - 1, self.sigma_secondary),
                np.zeros(self.sigma_zero_count),
            ]
        )

    @property
    def stable_rank(self) -> float:
        return 1.0 + (self.num_blocks - 1) * (self.sigma_secondary / self.sigma1) ** 2


@dataclass(frozen=True)
class ImplicitParams:
    alpha: float
    m: float
    depth: int
    num_blocks: int
    block_size: int = 1
    target: float = 1.0

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if not (1 < self.m < math.inf):
            raise ValueError("m must be finite and greater than 1")
        if int(self.depth) < 3:
            raise ValueError("the implicit equations apply to depth >= 3")
        if int(self.num_blocks) < 2:
            raise ValueError("num_blocks must be at least 2")
        if int(self.block_size) < 1:
            raise ValueError("block_size must be positive")
        if not self.target > 0:
            raise ValueError("target must be positive")

    @property
    def dim(self) -> int:
        return int(self.block_size) * int(self.num_blocks)


class SignedLog(NamedTuple):
    sign: float
    log_abs: float

    @property
    def value(self) -> float:
        if self.sign == 0:
            return 0.0
        with np.errstate(over="ignore"):
            return float(self.sign * np.exp(self.log_abs))


# ---------------------------------------------------------------------------
# Limit spectra
# ---------------------------------------------------------------------------


def _decoupled_infinity(n: int, s: int, w: float) -> LimitSpectrum:
    return LimitSpectrum(s * w, s * w, n * s - n, Branch.DECOUPLED_INFINITY, n)


def closed_form_L2(m: float, dim: int, num_blocks: int, block_size: int, target: float) -> LimitSpectrum:
    """Depth-2 limit: ``sigma1 : sigma_i = (m+d-1)**2 : (m-1)**2`` scaled to sum ``w* d``."""
    d, n, s, w = int(dim), int(num_blocks), int(block_size), float(target)
    if d != n * s:
        raise DimensionMismatchError(f"dim {d} != num_blocks * block_size = {n * s}")
    if n < 2:
        raise DegenerateBlockError("closed form needs at least two blocks")
    if not m > 1:
        raise ValueError("m must exceed 1")
    if math.isinf(m):
        return _decoupled_infinity(n, s, w)
    big = (m + d - 1) ** 2
    small = (m - 1) ** 2
    denom = big + (n - 1) * small
    return LimitSpectrum(w * d * big / denom, w * d * small / denom, d - n, Branch.CLOSED_FORM_L2, n)


def constant_C(alpha: float, m: float, depth: int, dim: int) -> SignedLog:
    """``(alpha/m)**(2-L) * ((m+d-1)**(2-L) - (m-1)**(2-L))`` as ``(sign, log|C|)``."""
    L, d = int(depth), int(dim)
    if L < 3:
        raise ValueError("C is defined for depth >= 3")
    if not (1 < m < math.inf) or not alpha > 0 or d < 1:
        raise ValueError("need alpha > 0, finite m > 1 and d >= 1")
    if d == 1:
        return SignedLog(0.0, -math.inf)
    # (m-1)**(2-L) - (m+d-1)**(2-L) = (m-1)**(2-L) * (1 - r**(L-2)), r = (m-1)/(m+d-1)
    log_r = math.log(m - 1) - math.log(m + d - 1)
    log_gap = (2 - L) * math.log(m - 1) + math.log(-math.expm1((L - 2) * log_r))
    return SignedLog(-1.0, (2 - L) * (math.log(alpha) - math.log(m)) + log_gap)


def _sign_minus_C(log_pos: float, log_neg: float, c: SignedLog) -> float:
    """Sign of ``exp(log_pos) - exp(log_neg) - C`` without leaving log space."""
    if c.sign < 0:
        left, right = np.logaddexp(log_pos, c.log_abs), log_neg
    elif c.sign > 0:
        left, right = log_pos, np.logaddexp(log_neg, c.log_abs)
    else:
        left, right = log_pos, log_neg
    if left > right:
        return 1.0
    if left < right:
        return -1.0
    return 0.0


def _safe_log(x: float) -> float:
    return math.log(x) if x > 0 else -math.inf


def _bisect(sign_fn: Callable[[float], float], lo: float, hi: float, increasing: bool, tol: float) -> float:
    """Root of a monotone sign function on ``[lo, hi]`` in ``u`` space."""
    want_lo = -1.0 if increasing else 1.0
    if sign_fn(lo) not in (want_lo, 0.0):
        raise BracketError(f"bracket lower end {lo} has the wrong sign")
    grid = np.linspace(lo, hi, GRID_POINTS + 2)[1:-1]
    signs = np.array([sign_fn(u) for u in grid])
    ordered = signs if increasing else -signs
    if np.any(np.diff(ordered) < 0):
        raise BracketError("sign pattern on the bracket is not monotone")
    for _ in range(MAX_BISECTION_ITERS):
        if hi - lo <= tol:
            break
        mid = 0.5 * (lo + hi)
        sm = sign_fn(mid)
        if sm == 0:
            return mid
        if (sm < 0) == increasing:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _lower_bracket(sign_fn: Callable[[float], float], start: float, want: float) -> float:
    step = 1.0
    u = start - step
    for _ in range(64):
        if sign_fn(u) == want:
            return u
        step *= 2.0
        u = start - step
    raise BracketError("could not bracket the root from below")


def solve_implicit(params: ImplicitParams, tol: float = 1e-12) -> LimitSpectrum:
    """Solve ``f1(sigma1) = C`` and ``f2(sigma_i) = C`` by log-space bisection.

    ``tol`` bounds the final bracket width in ``log(sigma)``, which is a
    relative tolerance on ``sigma``.
    """
    L, n, s, w = int(params.depth), int(params.num_blocks), int(params.block_size), float(params.target)
    d = params.dim
    total = w * d
    a = (2.0 - L) / L
    c = constant_C(params.alpha, params.m, L, d)

    def sign_f2(u: float) -> float:
        # f2(x) - C with x = e^u; f2 = (total - (n-1)x)^a - x^a
        x = math.exp(u)
        return _sign_minus_C(a * _safe_log(total - (n - 1) * x), a * u, c)

    def sign_f1(u: float) -> float:
        # f1(x) - C with x = e^u; f1 = x^a - ((total - x)/(n-1))^a
        x = math.exp(u)
        return _sign_minus_C(a * u, a * (_safe_log(total - x) - math.log(n - 1)), c)

    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        hi2 = math.log(total / (n - 1))
        lo2 = _lower_bracket(sign_f2, hi2, -1.0)
        u2 = _bisect(sign_f2, lo2, hi2, increasing=True, tol=tol)
        hi1 = math.log(total)
        lo1 = _lower_bracket(sign_f1, hi1, 1.0)
        u1 = _bisect(sign_f1, lo1, hi1, increasing=False, tol=tol)
    sigma_i = math.exp(u2)
    sigma1 = math.exp(u1)
    if abs(sigma1 + (n - 1) * sigma_i - total) > 1e-8 * total:
        raise BracketError(
            f"solved spectrum violates the trace constraint: {sigma1} + {n - 1}*{sigma_i} != {total}"
        )
    return LimitSpectrum(sigma1, sigma_i, d - n, Branch.IMPLICIT, n)


def predict_limit(spec: BlockSpec, scheme, depth: int) -> LimitSpectrum:
    """Limit spectrum of the product under flow from ``scheme`` on the block pattern."""
    if isinstance(scheme, Identity):
        scheme = AlphaM(scheme.alpha)
    if not isinstance(scheme, AlphaM):
        raise TypeError("predictions are available for AlphaM (or Identity) initializations only")
    n, s, w = int(spec.num_blocks), int(spec.block_size), float(spec.target)
    if spec.degenerate:
        raise DegenerateBlockError(
            "a single block is the fully observed matrix; there is nothing to complete"
        )
    L = int(depth)
    if L < 2:
        raise ValueError("predictions need depth >= 2")
    if scheme.is_identity:
        return _decoupled_infinity(n, s, w)
    if L == 2:
        return closed_form_L2(float(scheme.m), spec.dim, n, s, w)
    return solve_implicit(ImplicitParams(float(scheme.alpha), float(scheme.m), L, n, s, w))


# ---------------------------------------------------------------------------
# Depth-2 pre-training on a permutation pattern
# ---------------------------------------------------------------------------


def pretrain_closed_form(A0: np.ndarray, B0: np.ndarray, obs: ObservationSet) -> tuple[np.ndarray, np.ndarray]:
    """Endpoint of depth-2 flow ``W = A @ B`` when ``obs`` hits each row and column once.

    Each pair (row ``i`` of ``A``, column ``j`` of ``B``) evolves alone as
    ``a' = -r b, b' = -r a`` with scalar residual ``r``. With ``R`` the time
    integral of ``r``, the endpoint is
    ``a = a0 cosh R - b0 sinh R`` and ``b = b0 cosh R - a0 sinh R``, where
    ``R = 0.5 log((P + Q/2) / (w + sqrt(w**2 - P**2 + (Q/2)**2)))``,
    ``P = a0 . b0`` and ``Q = |a0|**2 + |b0|**2``.
    """
    A0 = np.asarray(A0, dtype=float)
    B0 = np.asarray(B0, dtype=float)
    d = obs.dim
    if A0.shape != (d, d) or B0.shape != (d, d):
        raise DimensionMismatchError(f"A0 {A0.shape} and B0 {B0.shape} must be {d}x{d}")
    if len(obs) != d or len(set(obs.rows.tolist())) != d or len(set(obs.cols.tolist())) != d:
        raise ValueError("observations must hit every row and every column exactly once")
    A = A0.copy()
    B = B0.copy()
    for i, j, w in obs:
        a0, b0 = A0[i, :], B0[:, j]
        P = float(a0 @ b0)
        Q = float(a0 @ a0 + b0 @ b0)
        disc = w * w - P * P + 0.25 * Q * Q
        if disc < 0:
            raise PretrainUndefinedError(f"negative discriminant at ({i}, {j})")
        num = P + 0.5 * Q
        den = w + math.sqrt(disc)
        if not num > 0 or not den > 0:
            raise PretrainUndefinedError(
                f"target {w} at ({i}, {j}) is unreachable from this initialization"
            )
        r = 0.5 * math.log(num / den)
        ch, sh = math.cosh(r), math.sinh(r)
        A[i, :] = a0 * ch - b0 * sh
        B[:, j] = b0 * ch - a0 * sh
    return A, B


# ---------------------------------------------------------------------------
# 2x2 misalignment with one observed column
# ---------------------------------------------------------------------------


def misalignment_ratios(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """``||a_i,perp||^2 / ||a_i||^2`` for each row ``a_i`` of ``A``.

    The perpendicular part is taken against the unit vector along the first
    column of ``B``.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if A.shape[1] != B.shape[0]:
        raise DimensionMismatchError(f"A {A.shape} and B {B.shape} cannot be multiplied")
    b1 = B[:, 0]
    nb = float(np.linalg.norm(b1))
    if nb == 0.0:
        raise ValueError("first column of B is zero")
    u = b1 / nb
    perp = A - np.outer(A @ u, u)
    na = np.sum(A * A, axis=1)
    if np.any(na == 0.0):
        raise ValueError("a row of A is zero")
    return np.sum(perp * perp, axis=1) / na


def misalignment_bound(A0: np.ndarray, B0: np.ndarray, w11: float, w21: float) -> np.ndarray:
    """Upper bounds on :func:`misalignment_ratios` at convergence, one per row.

    Applies to depth-2 flow observing only the first column (targets
    ``w11, w21``, both nonzero) from ``A0, B0``.
    """
    A0 = np.asarray(A0, dtype=float)
    B0 = np.asarray(B0, dtype=float)
    if A0.shape[0] != 2:
        raise DimensionMismatchError("the bound is stated for two observed rows")
    if w11 == 0.0 or w21 == 0.0:
        raise ValueError("targets must be nonzero")
    a_sq = float(np.sum(A0 * A0))
    b_sq = float(B0[:, 0] @ B0[:, 0])
    core_term = a_sq * (math.sqrt(b_sq**2 + 4.0 * w11**2 + 4.0 * w21**2) + b_sq)
    return np.array([core_term / (2.0 * w11**2), core_term / (2.0 * w21**2)])


# ---------------------------------------------------------------------------
# Warm-start bounds
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LopBounds:
    decay_rate: float
    loss_envelope_coefficient: float
    srank_lower: float

    def envelope(self, t, t_start: float = 0.0):
        """Loss bound ``coefficient * exp(-decay_rate * (t - t_start))``."""
        return self.loss_envelope_coefficient * np.exp(-self.decay_rate * (np.asarray(t) - t_start))


def lop_2x2_bounds(w_star: float, w12_star: float) -> LopBounds:
    """Bounds for the 2x2 warm start from ``A = B = sqrt(w*) I`` after revealing ``w12*``."""
    if not w_star > 0 or not w12_star > 0:
        raise ValueError("w_star and w12_star must be positive")
    return LopBounds(
        decay_rate=2.0 * w_star,
        loss_envelope_coefficient=0.5 * w12_star**2,
        srank_lower=1.0 + math.exp(-8.0 * w12_star / w_star),
    )


@dataclass(frozen=True, eq=False)
class JacobianReport:
    matrix: np.ndarray
    sigma_min: float
    sigma_max: float
    lazy_threshold: float
    loss: float
    condition_holds: bool


def jacobian(A: np.ndarray, B: np.ndarray, obs: ObservationSet) -> JacobianReport:
    """Jacobian of the observed predictions of ``A @ B`` with respect to ``Theta = [A; B^T]``.

    Row ``n`` is ``vec([X_n B^T; X_n^T A])`` with ``X_n = e_i e_j^T``, using
    column-major ``vec``. The lazy-training condition compares the observed
    loss against ``sigma_min**6 / (1152 d sigma_max**2)``.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    d = obs.dim
    if A.shape != (d, d) or B.shape != (d, d):
        raise DimensionMismatchError(f"A {A.shape} and B {B.shape} must be {d}x{d}")
    N = len(obs)
    J = np.zeros((N, 2 * d * d))
    for n, (i, j, _) in enumerate(obs):
        block = np.zeros((2 * d, d))
        block[i, :] = B[:, j]
        block[d + j, :] = A[i, :]
        J[n] = block.ravel(order="F")
    sv = np.linalg.svd(J, compute_uv=False) if N else np.zeros(0)
    smax = float(sv[0]) if sv.size else 0.0
    smin = float(sv[-1]) if sv.size and N <= 2 * d * d else 0.0
    threshold = smin**6 / (1152.0 * d * smax**2) if smax > 0 else 0.0
    pred = A @ B
    res = pred[obs.rows, obs.cols] - obs.targets
    loss = 0.5 * float(res @ res)
    return JacobianReport(J, smin, smax, threshold, loss, loss <= threshold)


def srank_lower_bound_dxd(A_at_T1: np.ndarray, sigma_min: float, dim: int) -> float:
    """``((||A||_F - r) / (||A||_2 + r))**2`` with ``r = sigma_min / (4 sqrt(2d))``.

    A non-positive numerator makes the bound vacuous; 0 is returned then.
    """
    if not sigma_min >= 0:
        raise ValueError("sigma_min must be non-negative")
    A = np.asarray(A_at_T1, dtype=float)
    r = sigma_min / (4.0 * math.sqrt(2.0 * int(dim)))
    fro = float(np.linalg.norm(A))
    spec = float(np.linalg.norm(A, 2))
    if spec == 0.0 and r == 0.0:
        raise ValueError("bound undefined for the zero matrix")
    num = max(fro - r, 0.0)
    return (num / (spec + r)) ** 2


def dxd_example_truth(dim: int, w_star: float, c: float) -> np.ndarray:
    """Rank-1 matrix with entries ``c**(j - i) * w*``."""
    idx = np.arange(int(dim))
    return w_star * np.power(float(c), (idx[None, :] - idx[:, None]).astype(float))


def dxd_example_bound(dim: int) -> float:
    """``((4d - 1) / (4 sqrt(d) + 1))**2``."""
    d = int(dim)
    return ((4.0 * d - 1.0) / (4.0 * math.sqrt(d) + 1.0)) ** 2
