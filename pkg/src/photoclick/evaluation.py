"""Metrics for comparing estimators: RMSE curves, fidelity, PCA, timing."""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import ShapeError
from .posterior import PosteriorGrid, bhattacharyya
from .rng import STREAM_DARK, make_rng
from .trajectories import DarkCountConfig, PhotoclickRecord, inject_dark_counts

__all__ = [
    "RmseCurve", "bhattacharyya", "rmse_curve", "one_to_one_density", "plateau_buckets",
    "pca_top_components", "bootstrap_rmse_difference", "timing_benchmark", "report_delta",
    "dark_count_records", "dark_count_counts",
]

BUCKET_WIDTH = 0.25
PLATEAU_SLOPE = 0.1


def report_delta(delta):
    """Detunings are stored negative and reported as magnitudes."""
    return np.abs(delta)


@dataclass
class RmseCurve:
    centers: np.ndarray
    rmse: np.ndarray
    stderr: np.ndarray
    counts: np.ndarray
    predicted: np.ndarray | None = None
    notes: list = field(default_factory=list)

    def at(self, center: float, tol: float = 1e-9) -> int:
        k = int(np.argmin(np.abs(self.centers - center)))
        if abs(self.centers[k] - center) > tol:
            raise KeyError(center)
        return k

    def overall(self) -> float:
        return float(np.sqrt(np.sum(self.counts * self.rmse**2) / np.sum(self.counts)))

    def to_csv(self, path, label: str = "rmse"):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["center", label, "stderr", "count", "predicted"])
            pred = self.predicted if self.predicted is not None else np.full(len(self.rmse), np.nan)
            for row in zip(self.centers, self.rmse, self.stderr, self.counts, pred):
                w.writerow([f"{v:.10g}" for v in row])


def _bucket_index(truths: np.ndarray, buckets) -> tuple[np.ndarray, np.ndarray]:
    if buckets is None:
        centers = np.unique(truths)
        return centers, np.searchsorted(centers, truths)
    edges = np.asarray(buckets, dtype=float)
    idx = np.clip(np.searchsorted(edges, truths, side="right") - 1, 0, len(edges) - 2)
    return 0.5 * (edges[1:] + edges[:-1]), idx


def rmse_curve(estimates, truths, buckets=None, predicted_sigma=None) -> RmseCurve:
    """RMSE per bucket of true value.

    ``buckets`` is a sequence of edges; without it every distinct truth is
    its own bucket.  The standard error uses the delta method on the mean
    squared error.  ``predicted_sigma`` (per record) is averaged per bucket
    as the method's own uncertainty claim.
    """
    est = np.asarray(estimates, dtype=float).ravel()
    tru = np.asarray(truths, dtype=float).ravel()
    if est.shape != tru.shape:
        raise ShapeError("estimates and truths differ in length")
    centers, idx = _bucket_index(tru, buckets)
    sq = (est - tru) ** 2
    rmse, se, cnt, pred = [], [], [], []
    keep = []
    notes = []
    for b, c in enumerate(centers):
        sel = idx == b
        n = int(sel.sum())
        if n == 0:
            notes.append(f"bucket {c:.4g} empty")
            continue
        keep.append(c)
        m = sq[sel].mean()
        r = np.sqrt(m)
        rmse.append(r)
        sd = sq[sel].std(ddof=1) if n > 1 else np.nan
        se.append(sd / np.sqrt(n) / (2 * r) if r > 0 else 0.0)
        cnt.append(n)
        if predicted_sigma is not None:
            pred.append(float(np.mean(np.asarray(predicted_sigma)[sel])))
    return RmseCurve(np.array(keep), np.array(rmse), np.array(se), np.array(cnt),
                     np.array(pred) if predicted_sigma is not None else None, notes)


def one_to_one_density(estimates, truths, edges_true, edges_est=None):
    """Joint histogram of (truth, estimate), normalised per truth column."""
    edges_est = edges_true if edges_est is None else edges_est
    h, _, _ = np.histogram2d(np.ravel(truths), np.ravel(estimates), bins=[edges_true, edges_est])
    col = h.sum(axis=1, keepdims=True)
    return np.divide(h, col, out=np.zeros_like(h), where=col > 0)


def plateau_buckets(estimates, truths, edges, threshold: float = PLATEAU_SLOPE) -> np.ndarray:
    """Bucket centers where the mean estimate barely follows the truth.

    The slope of the bucket-mean estimate against the bucket center is
    estimated by central differences; buckets with slope below
    ``threshold`` are flagged.
    """
    est = np.ravel(estimates)
    tru = np.ravel(truths)
    centers, idx = _bucket_index(tru, edges)
    means = np.array([est[idx == b].mean() if np.any(idx == b) else np.nan for b in range(len(centers))])
    ok = np.isfinite(means)
    slope = np.gradient(means[ok], centers[ok])
    return centers[ok][slope < threshold]


def bootstrap_rmse_difference(err_a, err_b, n_boot: int = 2000, seed: int = 0, level: float = 0.95):
    """Paired bootstrap interval for ``RMSE(a) - RMSE(b)`` over the same records."""
    a = np.asarray(err_a, dtype=float) ** 2
    b = np.asarray(err_b, dtype=float) ** 2
    rng = make_rng(seed)
    idx = rng.integers(0, len(a), size=(n_boot, len(a)))
    diff = np.sqrt(a[idx].mean(axis=1)) - np.sqrt(b[idx].mean(axis=1))
    lo, hi = np.quantile(diff, [(1 - level) / 2, (1 + level) / 2])
    return float(np.sqrt(a.mean()) - np.sqrt(b.mean())), (float(lo), float(hi))


@dataclass
class PCAResult:
    components: np.ndarray
    explained_variance: np.ndarray
    projections: np.ndarray
    mean: np.ndarray
    notes: list = field(default_factory=list)


def pca_top_components(x: np.ndarray, k: int = 2) -> PCAResult:
    """Leading eigenvectors of the sample covariance of the rows of ``x``."""
    x = np.asarray(x, dtype=float)
    mu = x.mean(axis=0)
    xc = x - mu
    cov = xc.T @ xc / max(len(x) - 1, 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1]
    vals, vecs = vals[order], vecs[:, order]
    notes = []
    rank = int(np.sum(vals > 1e-12 * max(vals[0], 1e-300)))
    if rank < k:
        notes.append(f"covariance has rank {rank} < {k}")
    # fix the sign so that each component has a positive coordinate sum
    signs = np.where(vecs.sum(axis=0) < 0, -1.0, 1.0)
    vecs = vecs * signs
    return PCAResult(vecs[:, :k], vals[:k], xc @ vecs[:, :k], mu, notes)


def timing_benchmark(methods: Mapping[str, Callable[[PhotoclickRecord], object]], records: Sequence, warmup: int = 3) -> dict:
    """Median wall time per record for each method (seconds)."""
    out = {}
    for name, fn in methods.items():
        for r in records[:warmup]:
            fn(r)
        times = []
        for r in records:
            t0 = time.perf_counter()
            fn(r)
            times.append(time.perf_counter() - t0)
        out[name] = float(np.median(times))
    return out


def dark_count_records(records: Sequence[PhotoclickRecord], rate: float, seed: int, keep_clicks: int | None = None):
    """Inject dark counts with per-record keyed streams, optionally truncating.

    Truncating to the first ``keep_clicks`` clicks is exact for records that
    already end at a real click: the merged stream has at least as many
    clicks before that time.
    """
    out = []
    for i, r in enumerate(records):
        noisy = inject_dark_counts(r, DarkCountConfig(rate), make_rng((seed, i), stream=STREAM_DARK))
        if keep_clicks is not None:
            noisy = noisy.truncated(keep_clicks)
        out.append(noisy)
    return out


def dark_count_counts(records: Sequence[PhotoclickRecord], rate: float, seed: int) -> np.ndarray:
    """Number of injected dark clicks per record over each record's full duration."""
    noisy = dark_count_records(records, rate, seed)
    return np.array([n.meta.get("n_dark", 0) for n in noisy])


def posterior_fidelity(a: Sequence[PosteriorGrid], b: Sequence[PosteriorGrid]) -> np.ndarray:
    return np.array([bhattacharyya(p, q) for p, q in zip(a, b)])
