"""Clipping-threshold selection.

The optimized strategy estimates, from a fitted clean/noise mixture, how much
larger the expected clipped gradient of noisy samples is than that of clean
samples, and picks the smallest threshold keeping that ratio at ``1 + eps``.
Fixed, linear-decay and EMA schedules are provided as baselines.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from ogclab import kernels
from ogclab.gmm import GmmFit, truncated_pdf
from ogclab.losscore import TAU_CAP, BaseLoss, grad_norm_from_ce

DEFAULT_BINS = 1024
SEARCH_ITERS = 60
RATIO_TOL = 1e-3
_SCAN_POINTS = 64
_DENSE_POINTS = 4096


@dataclass(frozen=True)
class QuadratureGrid:
    bins: int
    lo: float
    hi: float

    def __post_init__(self):
        if self.bins < 64:
            raise ValueError("quadrature needs at least 64 bins")
        if not self.lo < self.hi:
            raise ValueError("quadrature grid needs lo < hi")
        if self.lo < 0:
            raise ValueError("cross-entropy grid cannot start below 0")

    @classmethod
    def for_fit(cls, fit: GmmFit, bins: int = DEFAULT_BINS) -> "QuadratureGrid":
        return cls(bins, fit.support_lo, fit.support_hi)

    def midpoints(self):
        step = (self.hi - self.lo) / self.bins
        return self.lo + (np.arange(self.bins) + 0.5) * step


@dataclass(frozen=True)
class RatioEstimate:
    tau: float
    ratio: float


class _RatioProblem:
    """Grid-sampled gradient norms and component weights, reused across many tau."""

    def __init__(self, fit: GmmFit, base: BaseLoss, grid: QuadratureGrid | None):
        self.degenerate = fit.degenerate or fit.clean == fit.noise
        if fit.degenerate:
            return
        grid = grid or QuadratureGrid.for_fit(fit)
        if grid.lo > fit.support_lo + 1e-12 or grid.hi < fit.support_hi - 1e-12:
            raise ValueError("quadrature grid must cover the fit support")
        h = grid.midpoints()
        self.g = np.ascontiguousarray(grad_norm_from_ce(base, h))
        self.w_clean = np.ascontiguousarray(truncated_pdf(fit.clean, fit.support_lo, fit.support_hi, h))
        self.w_noise = np.ascontiguousarray(truncated_pdf(fit.noise, fit.support_lo, fit.support_hi, h))
        if not self.w_clean.sum() > 0:
            raise ZeroDivisionError("clean density vanished on the quadrature grid")

    def __call__(self, tau: float) -> float:
        if self.degenerate:
            return 1.0
        return kernels.clipped_ratio(self.g, self.w_clean, self.w_noise, float(tau))

    def many(self, taus) -> np.ndarray:
        taus = np.ascontiguousarray(taus, dtype=np.float64)
        if self.degenerate:
            return np.ones_like(taus)
        return kernels.clipped_ratios(self.g, self.w_clean, self.w_noise, taus)


def estimate_ratio(fit: GmmFit, base: BaseLoss, tau: float, grid: QuadratureGrid | None = None) -> RatioEstimate:
    """Midpoint-rule estimate of E_noise[min(g, tau)] / E_clean[min(g, tau)]."""
    if not tau >= 1:
        raise ValueError(f"tau must be >= 1, got {tau}")
    return RatioEstimate(float(tau), _RatioProblem(fit, base, grid)(tau))


def tau_upper(fit: GmmFit, base: BaseLoss) -> float:
    """Largest useful threshold: the biggest gradient norm on the fitted H range."""
    h = np.linspace(fit.support_lo, fit.support_hi, 257)
    g = float(np.max(grad_norm_from_ce(base, h)))
    return min(max(g, 1.0), TAU_CAP)


@dataclass(frozen=True)
class ThresholdSolution:
    tau: float
    ratio: float
    attainable: bool
    diagnostic: str = ""


def solve_threshold(
    fit: GmmFit, base: BaseLoss, epsilon: float, grid: QuadratureGrid | None = None
) -> ThresholdSolution:
    """Smallest tau in [1, tau_max] whose estimated ratio reaches ``1 + epsilon``."""
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    ratio_at = _RatioProblem(fit, base, grid)
    target = 1.0 + epsilon
    tmax = tau_upper(fit, base)
    if ratio_at.degenerate:
        return ThresholdSolution(tmax, 1.0, False, "identical components")

    taus = np.exp(np.linspace(0.0, math.log(tmax), _SCAN_POINTS)) if tmax > 1 else np.array([1.0])
    ratios = ratio_at.many(taus)
    note = ""
    if np.any(np.diff(ratios) < -1e-12 * ratios[:-1]):
        # rescan densely and take the first crossing, which also minimizes |r - target| on the grid
        note = "non-monotone ratio"
        taus = np.exp(np.linspace(0.0, math.log(tmax), _DENSE_POINTS))
        ratios = ratio_at.many(taus)
    hits = np.nonzero(ratios >= target)[0]
    if hits.size == 0:
        return ThresholdSolution(tmax, float(ratio_at(tmax)), False, _join(note, "target ratio unattainable"))
    k = int(hits[0])
    if k == 0:
        return ThresholdSolution(float(taus[0]), float(ratios[0]), True, note)
    tau, r = _bisect(ratio_at, target, math.log(taus[k - 1]), math.log(taus[k]), float(ratios[k]))
    return ThresholdSolution(tau, r, True, note)


def _join(a: str, b: str) -> str:
    return f"{a}; {b}" if a else b


def _bisect(ratio_at, target, lo, hi, r_hi):
    """Log-space bisection for the smallest tau with ratio >= target inside (e^lo, e^hi]."""
    for _ in range(SEARCH_ITERS):
        mid = 0.5 * (lo + hi)
        if mid in (lo, hi):
            break
        r = ratio_at(math.exp(mid))
        if r >= target:
            hi, r_hi = mid, r
        else:
            lo = mid
    return math.exp(hi), r_hi


def true_ratio(H, flipped, base: BaseLoss, tau: float) -> float:
    """Clipped-gradient ratio computed from known flip flags (synthetic diagnostics only)."""
    H = np.asarray(H, dtype=np.float64)
    flipped = np.asarray(flipped, dtype=bool)
    if not flipped.any() or flipped.all():
        return math.nan
    c = np.minimum(grad_norm_from_ce(base, H), tau)
    return float(c[flipped].mean() / c[~flipped].mean())


# -- schedules ----------------------------------------------------------------


@dataclass(frozen=True)
class Optimized:
    epsilon0: float = 20.0

    def __post_init__(self):
        if not self.epsilon0 > 0:
            raise ValueError("epsilon0 must be positive")


@dataclass(frozen=True)
class Fixed:
    tau: float = 2.0

    def __post_init__(self):
        if not self.tau >= 1:
            raise ValueError("fixed tau must be >= 1")


@dataclass(frozen=True)
class Linear:
    beta: float = 10.0
    total_steps: int = 1

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")


@dataclass(frozen=True)
class EMA:
    alpha: float = 0.9999

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")


ThresholdStrategy = Optimized | Fixed | Linear | EMA


@dataclass(frozen=True)
class ThresholdState:
    current_tau: float
    step: int = 0
    ratio: float = math.nan
    note: str = ""


def _clamp(tau: float, tau_max: float) -> float:
    return min(max(tau, 1.0), tau_max)


def initial_state(strategy: ThresholdStrategy, tau_max: float = TAU_CAP) -> ThresholdState:
    """Threshold in force before the first update; inf means no clipping."""
    if isinstance(strategy, Fixed):
        return ThresholdState(_clamp(strategy.tau, tau_max))
    if isinstance(strategy, Linear):
        return ThresholdState(_clamp(strategy.beta, tau_max))
    if isinstance(strategy, EMA):
        return ThresholdState(tau_max)
    return ThresholdState(math.inf, note="warm-up")


def schedule_next(
    strategy: ThresholdStrategy,
    state: ThresholdState,
    t: int,
    lr: float,
    fit: GmmFit | None,
    base: BaseLoss,
    tau_max: float = TAU_CAP,
    grid_bins: int = DEFAULT_BINS,
) -> ThresholdState:
    """Next threshold state for update step ``t``; pure in its inputs."""
    if t < 0:
        raise ValueError("t must be >= 0")
    if isinstance(strategy, Fixed):
        return ThresholdState(_clamp(strategy.tau, tau_max), t)
    if isinstance(strategy, Linear):
        return ThresholdState(_clamp(strategy.beta * (1.0 - t / strategy.total_steps), tau_max), t)
    if isinstance(strategy, EMA):
        prev = state.current_tau if math.isfinite(state.current_tau) else tau_max
        inv = strategy.alpha / prev + (1.0 - strategy.alpha)
        return ThresholdState(_clamp(1.0 / inv, tau_max), t)
    if fit is None:
        return replace(state, step=t, note="carried (no fit)")
    grid = None if fit.degenerate else QuadratureGrid.for_fit(fit, grid_bins)
    sol = solve_threshold(fit, base, lr * strategy.epsilon0, grid)
    return ThresholdState(_clamp(sol.tau, tau_max), t, sol.ratio, sol.diagnostic)


def linear_closed_form(beta: float, total_steps: int, t, tau_max: float = TAU_CAP):
    return np.clip(beta * (1.0 - np.asarray(t, dtype=np.float64) / total_steps), 1.0, tau_max)


def ema_closed_form(alpha: float, n_updates, tau0: float):
    n = np.asarray(n_updates, dtype=np.float64)
    return 1.0 / (alpha**n / tau0 + (1.0 - alpha**n))
