"""Label corruption: symmetric, asymmetric and feature-dependent noise."""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit

# CIFAR-10 class indices: airplane 0, automobile 1, bird 2, cat 3, deer 4, dog 5, horse 7, truck 9
CIFAR10_ASYM_MAP = ((9, 1), (2, 0), (4, 7), (3, 5), (5, 3))


@dataclass(frozen=True)
class Symmetric:
    eta: float


@dataclass(frozen=True)
class Asymmetric:
    class_map: tuple
    eta: float


@dataclass(frozen=True)
class InstanceDependent:
    rate: float
    projections: int = 1
    seed: int = 0


NoiseSpec = Symmetric | Asymmetric | InstanceDependent


@dataclass
class CorruptedDataset:
    features: np.ndarray
    given_labels: np.ndarray
    true_labels: np.ndarray
    flip_mask: np.ndarray
    flip_prob: np.ndarray | None = None

    def __len__(self):
        return len(self.given_labels)

    @property
    def flip_rate(self) -> float:
        return float(self.flip_mask.mean())


def build_symmetric(K: int, eta: float) -> np.ndarray:
    """Transition matrix keeping a label with prob ``1 - eta``, else uniform over the others."""
    if K < 2:
        raise ValueError("need at least two classes")
    if not 0 <= eta < 1:
        raise ValueError(f"eta must lie in [0, 1), got {eta}")
    if eta >= 1 - 1 / K:
        warnings.warn(f"eta={eta} >= 1 - 1/K; the symmetric-noise risk bound no longer applies", stacklevel=2)
    T = np.full((K, K), eta / (K - 1))
    np.fill_diagonal(T, 1.0 - eta)
    return T


def circular_map(classes) -> tuple:
    """Map each class in ``classes`` onto the next one, wrapping around."""
    classes = list(classes)
    return tuple((c, classes[(i + 1) % len(classes)]) for i, c in enumerate(classes))


def build_asymmetric(class_map, eta: float, K: int) -> np.ndarray:
    if not 0 <= eta < 1:
        raise ValueError(f"eta must lie in [0, 1), got {eta}")
    T = np.eye(K)
    seen = set()
    for src, dst in class_map:
        if src == dst:
            raise ValueError(f"class {src} mapped onto itself")
        if src in seen:
            raise ValueError(f"class {src} mapped twice")
        if not (0 <= src < K and 0 <= dst < K):
            raise ValueError(f"map entry ({src}, {dst}) outside [0, {K})")
        seen.add(src)
        T[src, src] = 1.0 - eta
        T[src, dst] = eta
    return T


def _sample_rows(T, labels, rng):
    cdf = np.cumsum(T, axis=1)
    cdf[:, -1] = 1.0
    u = rng.random(len(labels))
    return (u[:, None] >= cdf[labels]).sum(axis=1)


def _instance_flip_probs(X, rate, projections, rng):
    Xs = (X - X.mean(axis=0)) / np.where(X.std(axis=0) > 0, X.std(axis=0), 1.0)
    W = rng.standard_normal((X.shape[1], projections))
    score = (Xs @ W).mean(axis=1) * np.sqrt(projections)
    base = expit(score)
    if rate <= 0:
        return np.zeros(len(X))

    def gap(c):
        return np.minimum(c * base, 1.0).mean() - rate

    c = brentq(gap, 0.0, 1.0 / base.min() + 1.0, xtol=1e-14)
    return np.minimum(c * base, 1.0)


def corrupt(features, true_labels, spec: NoiseSpec, seed: int = 0, K: int | None = None) -> CorruptedDataset:
    """Draw given labels for every sample; deterministic in ``seed``."""
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(true_labels, dtype=np.int64)
    if len(y) == 0:
        raise ValueError("cannot corrupt an empty dataset")
    K = int(K if K is not None else y.max() + 1)
    if y.min() < 0 or y.max() >= K:
        raise ValueError("labels outside [0, K)")
    rng = np.random.default_rng(seed)
    if isinstance(spec, (Symmetric, Asymmetric)):
        T = build_symmetric(K, spec.eta) if isinstance(spec, Symmetric) else build_asymmetric(spec.class_map, spec.eta, K)
        given = _sample_rows(T, y, rng)
        return CorruptedDataset(X, given, y, given != y, 1.0 - T[y, y])
    if not 0 <= spec.rate < 1:
        raise ValueError("instance-dependent rate must lie in [0, 1)")
    proj_rng = np.random.default_rng([seed, spec.seed])
    probs = _instance_flip_probs(X, spec.rate, max(1, spec.projections), proj_rng)
    flip = rng.random(len(y)) < probs
    # flipped class: the best-scoring wrong class under a second projection
    V = proj_rng.standard_normal((X.shape[1], K))
    scores = X @ V
    scores[np.arange(len(y)), y] = -np.inf
    alt = scores.argmax(axis=1)
    given = np.where(flip, alt, y)
    return CorruptedDataset(X, given, y, given != y, probs)


def write_label_csv(ds: CorruptedDataset, path) -> None:
    """Write ``index,true_label,given_label,flipped`` rows."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "true_label", "given_label", "flipped"])
        for i, (t, g, f) in enumerate(zip(ds.true_labels, ds.given_labels, ds.flip_mask)):
            w.writerow([i, int(t), int(g), int(bool(f))])


def read_label_csv(path):
    """Inverse of :func:`write_label_csv`; returns (true, given, flipped) arrays."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    true = np.array([int(r["true_label"]) for r in rows], dtype=np.int64)
    given = np.array([int(r["given_label"]) for r in rows], dtype=np.int64)
    flipped = np.array([r["flipped"] == "1" for r in rows])
    return true, given, flipped
