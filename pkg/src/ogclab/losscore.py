"""Probability-level losses, the clip function and their Huberized versions.

Every loss here depends on the prediction only through ``p_y``, the
probability assigned to the given label.  That lets us write each loss, its
gradient norm with respect to the probability vector, and the clipped
(Huberized) variant as scalar functions of ``p_y`` and push them through the
softmax with a single chain-rule factor.

All array functions broadcast over numpy inputs and return float64.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

#: Floor applied to probabilities before ``log`` or division.
PROB_FLOOR = 1e-12
#: Largest finite clipping threshold; beyond this clipping is inert.
TAU_CAP = 1e6

LOSS_KINDS = ("ce", "fl", "gce", "mae")
_KIND_CODES = {"ce": 0, "fl": 1, "gce": 2, "mae": 3}


@dataclass(frozen=True)
class BaseLoss:
    """A loss of the form ``l(p_y)``.

    ``gamma`` is only read for focal loss and ``q`` only for GCE.
    """

    kind: str = "ce"
    gamma: float = 0.0
    q: float = 0.7

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}; expected one of {LOSS_KINDS}")
        if self.gamma < 0:
            raise ValueError(f"focal gamma must be >= 0, got {self.gamma}")
        if not 0 < self.q <= 1:
            raise ValueError(f"GCE q must lie in (0, 1], got {self.q}")

    @classmethod
    def ce(cls) -> "BaseLoss":
        return cls("ce")

    @classmethod
    def fl(cls, gamma: float = 0.5) -> "BaseLoss":
        return cls("fl", gamma=gamma)

    @classmethod
    def gce(cls, q: float = 0.7) -> "BaseLoss":
        return cls("gce", q=q)

    @classmethod
    def mae(cls) -> "BaseLoss":
        return cls("mae")

    @property
    def code(self) -> int:
        """Integer tag used by the compiled kernels."""
        return _KIND_CODES[self.kind]

    @property
    def param(self) -> float:
        """The single shape parameter the kernels need (gamma or q)."""
        if self.kind == "fl":
            return float(self.gamma)
        if self.kind == "gce":
            return float(self.q)
        return 0.0

    def __str__(self) -> str:
        if self.kind == "fl":
            return f"FL(gamma={self.gamma:g})"
        if self.kind == "gce":
            return f"GCE(q={self.q:g})"
        return self.kind.upper()


def _check_probs(p, allow_zero=False):
    p = np.asarray(p, dtype=np.float64)
    lo_ok = p >= 0 if allow_zero else p > 0
    if not np.all(lo_ok & (p <= 1)):
        bound = "[0, 1]" if allow_zero else "(0, 1]"
        raise ValueError(f"probabilities must lie in {bound}")
    return p


def _loss_unchecked(base: BaseLoss, p):
    p = np.maximum(p, PROB_FLOOR)
    if base.kind == "ce":
        return -np.log(p)
    if base.kind == "fl":
        return -((1.0 - p) ** base.gamma) * np.log(p)
    if base.kind == "gce":
        return (1.0 - p**base.q) / base.q
    return 1.0 - p


def _dloss_unchecked(base: BaseLoss, p):
    """Signed derivative dl/dp_y (nonpositive for every supported loss)."""
    p = np.maximum(p, PROB_FLOOR)
    if base.kind == "ce":
        return -1.0 / p
    if base.kind == "fl":
        g = base.gamma
        om = 1.0 - p
        with np.errstate(divide="ignore", invalid="ignore"):
            first = g * om ** (g - 1.0) * np.log(p)
        # limit of gamma * (1-p)^(gamma-1) * log(p) at p -> 1 is 0 for gamma > 0
        first = np.where((om == 0) | (g == 0), 0.0, first)
        return first - om**g / p
    if base.kind == "gce":
        return -(p ** (base.q - 1.0))
    return -np.ones_like(p)


def loss_value(base: BaseLoss, p_y):
    """Loss value at predicted probability ``p_y`` in (0, 1].

    MAE is returned as ``1 - p_y``; the one-hot L1 distance is twice that.
    """
    p = _check_probs(p_y)
    return _loss_unchecked(base, p)


def grad_norm(base: BaseLoss, p_y):
    """L2 norm of the gradient of the loss with respect to the probability vector.

    Only the ``y`` component is nonzero, so this is ``|dl/dp_y|``.
    """
    p = _check_probs(p_y)
    return np.abs(_dloss_unchecked(base, p))


def grad_norm_from_ce(base: BaseLoss, H):
    """Gradient norm as a function of the cross-entropy value ``H = -log p_y``."""
    H = np.asarray(H, dtype=np.float64)
    if base.kind == "ce":
        return np.exp(H)
    if base.kind == "gce":
        return np.exp((1.0 - base.q) * H)
    if base.kind == "mae":
        return np.ones_like(H)
    return np.abs(_dloss_unchecked(base, np.exp(-H)))


def clip_vector(w, tau: float):
    """Rescale ``w`` onto the L2 ball of radius ``tau`` if it lies outside."""
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    w = np.asarray(w, dtype=np.float64)
    norm = float(np.linalg.norm(w))
    if norm >= tau and norm > 0:
        return tau * w / norm
    return w.copy()


def _first_stationary_point(base: BaseLoss) -> float:
    """Coarse log-spaced scan for the first p where the gradient norm stops decreasing."""
    ps = np.logspace(-12, 0, 2401)
    g = np.abs(_dloss_unchecked(base, ps))
    rises = np.nonzero(np.diff(g) >= 0)[0]
    if rises.size == 0:
        return 1.0
    return float(ps[rises[0]])


def solve_clip_point(base: BaseLoss, tau: float) -> float:
    """Probability at which the gradient norm of ``base`` equals ``tau``.

    Returns 0.0 when the loss never reaches ``tau`` (clipping is inert).
    """
    if not tau >= 1:
        raise ValueError(f"tau must be >= 1, got {tau}")
    if math.isinf(tau):
        return 0.0
    if base.kind == "ce":
        return 1.0 / tau
    if base.kind == "mae" or (base.kind == "gce" and base.q == 1.0):
        return 0.0
    if base.kind == "gce":
        return tau ** (1.0 / (base.q - 1.0))

    def excess(p):
        return float(abs(_dloss_unchecked(base, p))) - tau

    p_hi = _first_stationary_point(base)
    if excess(PROB_FLOOR) < 0:
        return 0.0
    if excess(p_hi) >= 0:
        # gradient norm exceeds tau on the whole monotone stretch
        return p_hi
    return brentq(excess, PROB_FLOOR, p_hi, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=500)


@dataclass(frozen=True)
class HuberizedLoss:
    """A base loss whose probability gradient is clipped at ``tau``.

    Below the clip point the loss continues along its tangent line, so the
    slope magnitude stays at ``tau``.  ``tau = inf`` disables clipping.
    """

    base: BaseLoss
    tau: float
    clip_point: float = field(init=False)

    def __post_init__(self):
        tau = float(self.tau)
        if math.isnan(tau):
            raise ValueError("tau is NaN")
        if not math.isinf(tau):
            tau = min(max(tau, 1.0), TAU_CAP)
        object.__setattr__(self, "tau", tau)
        object.__setattr__(self, "clip_point", solve_clip_point(self.base, tau))

    @property
    def clip_value(self) -> float:
        if self.clip_point <= 0:
            return math.nan
        return float(_loss_unchecked(self.base, self.clip_point))


def huberized_value(hub: HuberizedLoss, p_y):
    """Clipped loss value.

    ``p_y = 0`` is accepted whenever the clip point is positive, since the
    tangent branch is finite there.
    """
    p = _check_probs(p_y, allow_zero=hub.clip_point > 0)
    cp = hub.clip_point
    if cp <= 0:
        return _loss_unchecked(hub.base, p)
    tangent = hub.clip_value + hub.tau * (cp - p)
    return np.where(p >= cp, _loss_unchecked(hub.base, p), tangent)


def huberized_slope(hub: HuberizedLoss, p_y):
    """Signed derivative of the Huberized loss with respect to ``p_y``."""
    p = np.asarray(p_y, dtype=np.float64)
    d = _dloss_unchecked(hub.base, p)
    if hub.clip_point <= 0:
        return d
    return np.where(p >= hub.clip_point, d, -hub.tau)


def huberized_grad_probs(hub: HuberizedLoss, p, y):
    """Clipped gradient with respect to the probability vector(s).

    ``p`` is ``(K,)`` or ``(N, K)``; ``y`` a matching int or int array.
    """
    p = np.asarray(p, dtype=np.float64)
    single = p.ndim == 1
    P = np.atleast_2d(p)
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    rows = np.arange(P.shape[0])
    out = np.zeros_like(P)
    out[rows, y] = huberized_slope(hub, P[rows, y])
    return out[0] if single else out


def softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def huberized_grad_logits(hub: HuberizedLoss, logits, y):
    """Gradient of the Huberized loss with respect to the logits.

    Uses ``dp_y/dz = p_y (onehot(y) - p)``; for unclipped CE this is ``p - onehot(y)``.
    """
    z = np.asarray(logits, dtype=np.float64)
    single = z.ndim == 1
    Z = np.atleast_2d(z)
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    rows = np.arange(Z.shape[0])
    P = softmax(Z)
    p_y = np.maximum(P[rows, y], PROB_FLOOR)
    slope = huberized_slope(hub, p_y)
    onehot = np.zeros_like(P)
    onehot[rows, y] = 1.0
    if hub.base.kind == "ce" and hub.clip_point <= 0:
        G = P - onehot
    else:
        G = (-slope * p_y)[:, None] * (P - onehot)
    return G[0] if single else G


def huberized_batch(hub: HuberizedLoss, logits, y):
    """Per-sample values, logit gradients, clipped mask and CE values for a batch.

    The CE value comes from a stable log-softmax, and unclipped CE samples
    reuse it as their loss so a clip-free run matches plain CE bit for bit.
    """
    Z = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    y = np.asarray(y, dtype=np.int64)
    rows = np.arange(Z.shape[0])
    logp = log_softmax(Z)
    H = -logp[rows, y]
    P = np.exp(logp)
    p_y = np.maximum(P[rows, y], PROB_FLOOR)
    cp = hub.clip_point
    clipped = p_y < cp if cp > 0 else np.zeros(len(y), dtype=bool)
    onehot = np.zeros_like(P)
    onehot[rows, y] = 1.0
    if hub.base.kind == "ce":
        if cp > 0:
            values = np.where(clipped, 1.0 - hub.tau * p_y + math.log(hub.tau), H)
            scale = np.where(clipped, hub.tau * p_y, 1.0)
        else:
            values, scale = H, np.ones_like(H)
        G = scale[:, None] * (P - onehot)
    else:
        values = np.asarray(huberized_value(hub, p_y))
        slope = huberized_slope(hub, p_y)
        G = (-slope * p_y)[:, None] * (P - onehot)
    return values, G, clipped, H


def ce_from_probs(p, y):
    """Cross entropy ``-log p(y|x)`` of a probability vector (or batch)."""
    p = np.asarray(p, dtype=np.float64)
    P = np.atleast_2d(p)
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    H = -np.log(np.maximum(P[np.arange(P.shape[0]), y], PROB_FLOOR))
    return float(H[0]) if p.ndim == 1 else H


def phi_H_to_loss(base: BaseLoss, H):
    """Map a cross-entropy value to the loss value of ``base``."""
    H = np.asarray(H, dtype=np.float64)
    if np.any(H < 0):
        raise ValueError("cross-entropy values must be >= 0")
    if base.kind == "ce":
        return H.copy() if H.ndim else float(H)
    return _loss_unchecked(base, np.exp(-H))
