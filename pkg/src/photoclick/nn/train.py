"""Mini-batch training with Adam and early stopping."""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import numpy as np

from ..abc import SummarySpec
from ..errors import CompatibilityError, NumericsError, TrainingDivergedError
from .losses import loss_ce, loss_mse, loss_mse_lambda, loss_nll
from .model import HISTOGRAM_FRONTEND, NeuralModel

log = logging.getLogger(__name__)

LOSS_KINDS = ("mse", "nll", "nll_standard", "ce", "mse_lambda")
HEAD_FOR_LOSS = {"mse": "point", "mse_lambda": "point", "nll": "gaussian", "nll_standard": "gaussian", "ce": "categorical"}


@dataclass
class TrainConfig:
    epochs: int = 500
    batch_size: int = 64
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    seed: int = 0
    val_fraction: float = 0.1
    patience: int = 20
    lam: float = 0.8
    n_buckets: int = 40
    loss: str = "mse"

    def __post_init__(self):
        if not 0 < self.val_fraction < 0.5:
            raise ValueError("val_fraction must lie in (0, 0.5)")
        if not 0 <= self.lam <= 1:
            raise ValueError("lam must lie in [0, 1]")
        if self.loss not in LOSS_KINDS:
            raise ValueError(f"unknown loss {self.loss!r}")


@dataclass
class TrainHistory:
    train: list = field(default_factory=list)
    val: list = field(default_factory=list)
    best_epoch: int = -1

    def to_csv(self, path):
        with open(path, "w") as f:
            f.write("epoch,train_loss,val_loss\n")
            for i, (a, b) in enumerate(zip(self.train, self.val)):
                f.write(f"{i},{a:.10g},{b:.10g}\n")


class Adam:
    def __init__(self, n: int, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, w: np.ndarray, g: np.ndarray):
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * g
        self.v = self.b2 * self.v + (1 - self.b2) * g * g
        mh = self.m / (1 - self.b1**self.t)
        vh = self.v / (1 - self.b2**self.t)
        w -= self.lr * mh / (np.sqrt(vh) + self.eps)


def nearest_bin(values: np.ndarray, bins: np.ndarray) -> np.ndarray:
    mid = 0.5 * (bins[1:] + bins[:-1])
    return np.searchsorted(mid, values)


def batch_loss(model: NeuralModel, out: np.ndarray, target: np.ndarray, cfg: TrainConfig):
    """Loss and output gradient for one batch; ``target`` is normalised theta or bin index."""
    d = len(model.meta["param_names"])
    if cfg.loss == "mse":
        return loss_mse(out, target)
    if cfg.loss == "mse_lambda":
        return loss_mse_lambda(out, target, cfg.lam)
    if cfg.loss in ("nll", "nll_standard"):
        return loss_nll(out, target, d, standard=cfg.loss == "nll_standard")
    return loss_ce(out, target)


def make_model_meta(library, head: str, frontend: str, bins=None, loss: str = "mse") -> dict:
    names = library.param_names
    prior = library.metadata.get("prior") or {n: [library.thetas[:, i].min(), library.thetas[:, i].max()] for i, n in enumerate(names)}
    lo = np.array([prior[n][0] for n in names], dtype=float)
    hi = np.array([prior[n][1] for n in names], dtype=float)
    meta = {
        "param_names": names,
        "n_clicks": library.n_clicks,
        "wait_scale": float(library.waits.mean()),
        "theta_center": ((lo + hi) / 2).tolist(),
        "theta_scale": ((hi - lo) / 2).tolist(),
        "loss": loss,
        "library": library.fingerprint(),
    }
    hist = [s for s in library.specs if s.kind == "histogram"]
    if frontend == HISTOGRAM_FRONTEND:
        if not hist:
            raise CompatibilityError("library has no histogram spec for the histogram frontend")
        meta["hist_spec"] = hist[0].to_dict()
    if head == "categorical":
        if bins is None:
            bins = np.linspace(lo[0], hi[0], 101)
        meta["bins"] = np.asarray(bins, dtype=float).tolist()
    return meta


def _targets(model: NeuralModel, thetas: np.ndarray, loss: str) -> np.ndarray:
    if loss == "ce":
        return nearest_bin(thetas[:, 0], np.asarray(model.meta["bins"]))
    return model.normalise_theta(thetas)


def _batches(rng, n: int, size: int, buckets: np.ndarray | None):
    if buckets is None:
        order = rng.permutation(n)
        return [order[i:i + size] for i in range(0, n, size)]
    # same-truth batches: shuffle within each bucket, then shuffle the batch list
    out = []
    for b in np.unique(buckets):
        idx = rng.permutation(np.nonzero(buckets == b)[0])
        out += [idx[i:i + size] for i in range(0, len(idx), size) if len(idx[i:i + size]) >= 2]
    return [out[i] for i in rng.permutation(len(out))]


def evaluate_loss(model: NeuralModel, x: np.ndarray, target: np.ndarray, cfg: TrainConfig, buckets=None) -> float:
    if cfg.loss == "mse_lambda" and buckets is not None:
        vals, weights = [], []
        for b in np.unique(buckets):
            sel = buckets == b
            if sel.sum() >= 2:
                vals.append(batch_loss(model, model.forward(x[sel]), target[sel], cfg)[0])
                weights.append(sel.sum())
        return float(np.average(vals, weights=weights))
    losses = []
    for i in range(0, len(x), 4096):
        out = model.forward(x[i:i + 4096])
        losses.append(batch_loss(model, out, target[i:i + 4096], cfg)[0] * len(out))
    return float(np.sum(losses) / len(x))


def train(library, model: NeuralModel, cfg: TrainConfig, progress=None) -> tuple[NeuralModel, TrainHistory]:
    """Fit ``model`` to the library; returns the best-validation weights and the curves."""
    rng = np.random.default_rng(cfg.seed)
    n = len(library)
    order = rng.permutation(n)
    n_val = max(1, int(round(cfg.val_fraction * n)))
    val_idx, tr_idx = order[:n_val], order[n_val:]
    x_all = model.features(library.waits)
    t_all = _targets(model, library.thetas, cfg.loss)
    buckets = None
    if cfg.loss == "mse_lambda":
        lo, hi = library.thetas[:, 0].min(), library.thetas[:, 0].max()
        buckets = np.minimum(((library.thetas[:, 0] - lo) / (hi - lo + 1e-300) * cfg.n_buckets).astype(int), cfg.n_buckets - 1)
    x_tr, t_tr, x_val, t_val = x_all[tr_idx], t_all[tr_idx], x_all[val_idx], t_all[val_idx]
    b_tr = None if buckets is None else buckets[tr_idx]
    b_val = None if buckets is None else buckets[val_idx]
    opt = Adam(model.n_params, cfg.learning_rate, cfg.beta1, cfg.beta2)
    hist = TrainHistory()
    best = (np.inf, model.weights.copy())
    stale = 0
    for epoch in range(cfg.epochs):
        total, count = 0.0, 0
        for idx in _batches(rng, len(x_tr), cfg.batch_size, b_tr):
            model.zero_grad()
            out = model.forward(x_tr[idx])
            try:
                val, g = batch_loss(model, out, t_tr[idx], cfg)
            except NumericsError:
                val = np.nan
            if not np.isfinite(val) or not np.all(np.isfinite(model.grad)):
                model.weights[:] = best[1]
                raise TrainingDivergedError(f"loss became non-finite at epoch {epoch}", checkpoint=copy.deepcopy(model))
            model.backward(g)
            opt.step(model.weights, model.grad)
            total += val * len(idx)
            count += len(idx)
        v = evaluate_loss(model, x_val, t_val, cfg, b_val)
        hist.train.append(total / max(count, 1))
        hist.val.append(v)
        if progress:
            progress(epoch, hist.train[-1], v)
        if v < best[0]:
            best = (v, model.weights.copy())
            hist.best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    model.weights[:] = best[1]
    model.meta["train_config"] = cfg.__dict__.copy()
    model.meta["best_val_loss"] = float(best[0])
    return model, hist


def build_and_train(library, frontend: str, cfg: TrainConfig, bins=None, **arch):
    """Convenience: metadata, architecture and training in one call."""
    head = HEAD_FOR_LOSS[cfg.loss]
    meta = make_model_meta(library, head, frontend, bins, cfg.loss)
    model = NeuralModel.build(frontend, head, meta, seed=cfg.seed, **arch)
    return train(library, model, cfg)
