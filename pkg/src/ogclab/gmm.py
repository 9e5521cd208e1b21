"""Two-component Gaussian mixture on scalar cross-entropy values."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from ogclab import kernels

MIN_FIT_VALUES = 8


class WarmupError(ValueError):
    """Too few values to fit a mixture."""


@dataclass(frozen=True)
class GaussianComponent:
    mean: float
    std: float
    weight: float

    @property
    def var(self) -> float:
        return self.std * self.std


@dataclass(frozen=True)
class GmmFit:
    """Clean (low-loss) and noise (high-loss) components plus truncation support."""

    clean: GaussianComponent
    noise: GaussianComponent
    support_lo: float
    support_hi: float
    loglik_trace: tuple = field(default=(), compare=False, repr=False)

    @property
    def n_iter(self) -> int:
        return len(self.loglik_trace)

    @property
    def degenerate(self) -> bool:
        return self.support_hi <= self.support_lo


@dataclass(frozen=True)
class EmConfig:
    max_iters: int = 100
    tol: float = 1e-6
    variance_floor: float = 1e-4
    init: str = "quantile"

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if not self.variance_floor > 0:
            raise ValueError("variance_floor must be positive")
        if self.init not in ("quantile", "kmeans"):
            raise ValueError(f"unknown init {self.init!r}")


def _init_params(x, cfg: EmConfig):
    lo_q, hi_q = np.quantile(x, [0.25, 0.75])
    if cfg.init == "quantile":
        v = max(float(np.var(x)), cfg.variance_floor)
        return np.array([lo_q, hi_q]), np.array([v, v]), np.array([0.5, 0.5])
    centers = np.array([lo_q, hi_q], dtype=np.float64)
    for _ in range(50):
        assign = np.abs(x - centers[0]) > np.abs(x - centers[1])
        new = np.array(
            [x[~assign].mean() if (~assign).any() else centers[0], x[assign].mean() if assign.any() else centers[1]]
        )
        if np.array_equal(new, centers):
            break
        centers = new
    groups = (x[~assign], x[assign])
    var = np.array([max(float(np.var(g)) if g.size else 0.0, cfg.variance_floor) for g in groups])
    w = np.array([g.size / x.size for g in groups])
    w = np.clip(w, 1e-3, 1.0)
    return centers, var, w / w.sum()


def fit_2gmm(values, cfg: EmConfig = EmConfig()) -> GmmFit:
    """Fit a 2-component mixture by EM; components are returned ordered by mean."""
    x = np.ascontiguousarray(values, dtype=np.float64).ravel()
    if x.size < MIN_FIT_VALUES:
        raise WarmupError(f"need at least {MIN_FIT_VALUES} values to fit, got {x.size}")
    if not np.all(np.isfinite(x)) or np.any(x < 0):
        raise ValueError("values must be finite and nonnegative")
    lo, hi = float(x.min()), float(x.max())
    floor_std = math.sqrt(cfg.variance_floor)
    if hi == lo:
        comp = GaussianComponent(lo, floor_std, 0.5)
        return GmmFit(comp, comp, lo, hi, ())
    mu0, var0, w0 = _init_params(x, cfg)
    mu, var, w, trace, _ = kernels.em_fit(x, mu0, var0, w0, cfg.max_iters, cfg.tol, cfg.variance_floor)
    a = GaussianComponent(float(mu[0]), math.sqrt(var[0]), float(w[0]))
    b = GaussianComponent(float(mu[1]), math.sqrt(var[1]), float(w[1]))
    if a.mean > b.mean:
        a, b = b, a
    return GmmFit(a, b, lo, hi, tuple(float(v) for v in trace))


def truncated_pdf(comp: GaussianComponent, lo: float, hi: float, h):
    """Density of ``comp`` renormalized to ``[lo, hi]``; zero outside."""
    if not lo < hi:
        raise ValueError("truncation bounds need lo < hi")
    h = np.asarray(h, dtype=np.float64)
    z = (h - comp.mean) / comp.std
    mass = ndtr((hi - comp.mean) / comp.std) - ndtr((lo - comp.mean) / comp.std)
    dens = np.exp(-0.5 * z * z) / (comp.std * math.sqrt(2.0 * math.pi))
    if mass <= 0:
        # all mass far outside the window: fall back to an unnormalized shape
        mass = 1.0
    out = np.where((h >= lo) & (h <= hi), dens / mass, 0.0)
    return float(out) if out.ndim == 0 else out


def responsibilities(fit: GmmFit, h):
    """Posterior (clean, noise) probabilities at ``h`` under the untruncated mixture."""
    h = np.asarray(h, dtype=np.float64)
    logs = []
    for c in (fit.clean, fit.noise):
        lw = math.log(c.weight) if c.weight > 0 else -math.inf
        logs.append(lw - math.log(c.std) - 0.5 * ((h - c.mean) / c.std) ** 2)
    a, b = logs
    m = np.maximum(a, b)
    r_clean = np.exp(a - m) / (np.exp(a - m) + np.exp(b - m))
    if r_clean.ndim == 0:
        return float(r_clean), float(1.0 - r_clean)
    return r_clean, 1.0 - r_clean


def mixture_loglik(fit: GmmFit, values) -> float:
    x = np.asarray(values, dtype=np.float64)
    dens = np.zeros_like(x)
    for c in (fit.clean, fit.noise):
        dens += c.weight * np.exp(-0.5 * ((x - c.mean) / c.std) ** 2) / (c.std * math.sqrt(2 * math.pi))
    return float(np.log(dens).sum())
