"""The training loop with optimized clipping, plus evaluation and exports."""
from __future__ import annotations

import csv
import io
import logging
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from ogclab.config import ExperimentConfig
from ogclab.data import load_dataset
from ogclab.gmm import EmConfig, GmmFit, WarmupError, fit_2gmm
from ogclab.losscore import BaseLoss, HuberizedLoss, grad_norm_from_ce, huberized_batch, log_softmax
from ogclab.model import MlpModel, OptimizerState, backward, forward, sgd_step
from ogclab.noisegen import CorruptedDataset, corrupt
from ogclab.threshold import (
    Optimized,
    ThresholdState,
    estimate_ratio,
    initial_state,
    schedule_next,
    true_ratio,
)

log = logging.getLogger(__name__)

METRICS_HEADER = ("step", "epoch", "train_acc", "test_acc", "tau", "ratio",
                  "mu_c", "sigma_c", "mu_n", "sigma_n", "clip_frac")
DIST_HEADER = ("index", "H", "grad_norm", "flipped")
DIAG_HEADER = ("step", "tau", "ratio", "proxy_ratio_probe", "true_ratio_probe")


class LossQueue:
    """FIFO buffer of the most recent ``capacity`` cross-entropy values."""

    def __init__(self, capacity: int = 4096):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._values = deque(maxlen=capacity)
        self._flags = deque(maxlen=capacity)

    def __len__(self):
        return len(self._values)

    def extend(self, values, flags=None):
        values = np.asarray(values, dtype=np.float64).ravel()
        self._values.extend(values.tolist())
        if flags is None:
            flags = np.zeros(values.size, dtype=bool)
        self._flags.extend(np.asarray(flags, dtype=bool).ravel().tolist())

    def values(self) -> np.ndarray:
        return np.fromiter(self._values, dtype=np.float64, count=len(self._values))

    def flags(self) -> np.ndarray:
        return np.fromiter(self._flags, dtype=bool, count=len(self._flags))


@dataclass
class MetricsRecord:
    step: int
    epoch: int
    train_acc: float
    test_acc: float
    tau: float
    ratio: float
    mu_c: float
    sigma_c: float
    mu_n: float
    sigma_n: float
    clip_frac: float
    weight_c: float = math.nan
    weight_n: float = math.nan

    def row(self):
        return [getattr(self, k) for k in METRICS_HEADER]


@dataclass
class TrainResult:
    model: MlpModel
    metrics: list
    tau_trace: list = field(default_factory=list)
    update_steps: list = field(default_factory=list)
    diagnostics: list = field(default_factory=list)
    train_data: CorruptedDataset | None = None
    test_data: tuple | None = None

    def last_mean_test_acc(self, last: int = 10) -> float:
        return float(np.mean([m.test_acc for m in self.metrics[-last:]]))


def prepare_data(cfg: ExperimentConfig):
    """Corrupted training set and clean test set for ``cfg``."""
    if cfg.dataset == "idx":
        X, y = load_dataset("idx", images=cfg.idx_train_images, labels=cfg.idx_train_labels)
        Xt, yt = load_dataset("idx", images=cfg.idx_test_images, labels=cfg.idx_test_labels)
    else:
        kw = dict(n_classes=cfg.n_classes, overlap=cfg.overlap, n_features=cfg.n_features)
        X, y = load_dataset(cfg.dataset, n=cfg.n_train, seed=cfg.data_seed, **kw)
        Xt, yt = load_dataset(cfg.dataset, n=cfg.n_test, seed=cfg.data_seed + 10_000, **kw)
    train = corrupt(X, y, cfg.noise_spec(), seed=cfg.noise_seed, K=cfg.n_classes)
    return train, (Xt, yt)


def evaluate(model: MlpModel, features, labels) -> float:
    """Fraction of samples whose argmax logit (lowest index on ties) equals the label."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    pred = np.argmax(forward(model, np.atleast_2d(features)), axis=1)
    return float(np.mean(pred == labels))


def per_sample_ce(model: MlpModel, features, labels) -> np.ndarray:
    logp = log_softmax(forward(model, np.atleast_2d(features)))
    return -logp[np.arange(len(labels)), np.asarray(labels)]


def export_distribution(model: MlpModel, ds: CorruptedDataset, path, base: BaseLoss = BaseLoss.ce()) -> None:
    """Dump ``index,H,grad_norm,flipped`` per training sample for offline KDE plots."""
    H = per_sample_ce(model, ds.features, ds.given_labels)
    g = grad_norm_from_ce(base, H)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DIST_HEADER)
        for i in range(len(H)):
            w.writerow([i, _fmt(H[i]), _fmt(g[i]), int(bool(ds.flip_mask[i]))])


def _fmt(v) -> str:
    v = float(v)
    if math.isnan(v):
        return "nan"
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return f"{v:.12g}"


def metrics_csv(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for r in records:
        w.writerow([r.step, r.epoch] + [_fmt(v) for v in r.row()[2:]])
    return buf.getvalue()


def write_metrics(records, path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(metrics_csv(records))


def write_diagnostics(diags, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DIAG_HEADER)
        for d in diags:
            w.writerow([d["step"]] + [_fmt(d[k]) for k in DIAG_HEADER[1:]])


def train(cfg: ExperimentConfig, on_epoch_end=None, data=None, on_step_end=None) -> TrainResult:
    """Minibatch training with the clipping threshold refreshed every ``time_frame`` steps.

    Each step computes the cross entropy of the batch under the current
    model, pushes it into the queue, refits the mixture and re-solves the
    threshold when ``t % time_frame == 0`` (otherwise the previous threshold
    is kept), then takes a clipped SGD step on the Huberized loss.
    ``on_epoch_end(epoch, model, train_data)`` is called after every epoch and
    ``on_step_end(t, model)`` after every parameter update.
    """
    train_ds, (Xt, yt) = data if data is not None else prepare_data(cfg)
    X, y, flips = train_ds.features, train_ds.given_labels, train_ds.flip_mask
    n = len(y)
    base = cfg.base_loss()
    strategy = cfg.threshold_strategy()
    sched = cfg.lr_schedule()
    em_cfg = EmConfig()

    model = MlpModel([X.shape[1], *cfg.hidden, cfg.n_classes], seed=cfg.seed)
    opt = OptimizerState(lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay, param_clip=cfg.param_clip)
    rng = np.random.default_rng([cfg.seed, 1])
    queue = LossQueue(cfg.queue_size)
    state = initial_state(strategy) if strategy is not None else ThresholdState(math.inf)
    fit: GmmFit | None = None
    hub_cache: dict[float, HuberizedLoss] = {}

    result = TrainResult(model, [], train_data=train_ds, test_data=(Xt, yt))
    t = 0
    for epoch in range(cfg.epochs):
        opt.lr = sched.lr_at(epoch)
        perm = rng.permutation(n)
        clipped_count = 0
        for start in range(0, n, cfg.batch_size):
            t += 1
            idx = perm[start : start + cfg.batch_size]
            xb, yb = X[idx], y[idx]
            logits = forward(model, xb)
            H = -log_softmax(logits)[np.arange(len(yb)), yb]
            queue.extend(H, flips[idx])

            if t % cfg.time_frame == 0:
                fit = _try_fit(queue, cfg.warmup, em_cfg)
                if strategy is not None and (fit is not None or not isinstance(strategy, Optimized)):
                    state = schedule_next(strategy, state, t, opt.lr, fit, base, grid_bins=cfg.grid_bins)
                    result.update_steps.append(t)
                if fit is not None:
                    result.diagnostics.append(_diagnose(t, state, fit, queue, base, cfg.probe_tau))
            result.tau_trace.append(state.current_tau)

            hub = hub_cache.get(state.current_tau)
            if hub is None:
                hub = hub_cache[state.current_tau] = HuberizedLoss(base, state.current_tau)
            values, G, clipped, _ = huberized_batch(hub, logits, yb)
            if not np.all(np.isfinite(values)):
                raise FloatingPointError(f"non-finite loss at step {t}")
            clipped_count += int(clipped.sum())
            grads = backward(model, xb, G / len(yb))
            sgd_step(model, opt, grads)
            if on_step_end is not None:
                on_step_end(t, model)

        ratio = state.ratio
        if fit is not None and math.isnan(ratio) and math.isfinite(state.current_tau):
            ratio = estimate_ratio(fit, base, state.current_tau).ratio
        result.metrics.append(
            MetricsRecord(
                step=t,
                epoch=epoch + 1,
                train_acc=evaluate(model, X, y),
                test_acc=evaluate(model, Xt, yt),
                tau=state.current_tau,
                ratio=ratio,
                mu_c=fit.clean.mean if fit else math.nan,
                sigma_c=fit.clean.std if fit else math.nan,
                mu_n=fit.noise.mean if fit else math.nan,
                sigma_n=fit.noise.std if fit else math.nan,
                clip_frac=clipped_count / n,
                weight_c=fit.clean.weight if fit else math.nan,
                weight_n=fit.noise.weight if fit else math.nan,
            )
        )
        if on_epoch_end is not None:
            on_epoch_end(epoch + 1, model, train_ds)
    return result


def _try_fit(queue: LossQueue, warmup: int, em_cfg: EmConfig) -> GmmFit | None:
    if len(queue) < warmup:
        return None
    try:
        return fit_2gmm(queue.values(), em_cfg)
    except WarmupError:
        return None


def _diagnose(t, state, fit, queue, base, probe_tau):
    proxy = estimate_ratio(fit, base, probe_tau).ratio
    return {
        "step": t,
        "tau": state.current_tau,
        "ratio": state.ratio,
        "proxy_ratio_probe": proxy,
        "true_ratio_probe": true_ratio(queue.values(), queue.flags(), base, probe_tau),
    }
