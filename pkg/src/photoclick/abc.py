"""Rejection ABC against a stored trajectory library."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import CompatibilityError, EmptyAcceptanceError, ShapeError
from .posterior import PosteriorGrid
from .trajectories import PhotoclickRecord

log = logging.getLogger(__name__)

TOTAL_TIME = "total_time"
MEAN_WAITING_TIME = "mean_waiting_time"
HISTOGRAM = "histogram"
SUMMARY_KINDS = (TOTAL_TIME, MEAN_WAITING_TIME, HISTOGRAM)

DEFAULT_BINS = 40
DEFAULT_ACCEPT = 0.005


@dataclass(frozen=True)
class SummarySpec:
    """One summary statistic.  Histograms add an overflow bin past the last edge."""

    kind: str
    bin_edges: tuple | None = None

    def __post_init__(self):
        if self.kind not in SUMMARY_KINDS:
            raise ValueError(f"unknown summary kind {self.kind!r}")
        if self.kind == HISTOGRAM:
            if self.bin_edges is None or len(self.bin_edges) < 2:
                raise ValueError("a histogram needs at least two edges")
            edges = tuple(float(e) for e in self.bin_edges)
            if np.any(np.diff(edges) <= 0):
                raise ValueError("histogram edges must be strictly increasing")
            object.__setattr__(self, "bin_edges", edges)

    @property
    def size(self) -> int:
        return len(self.bin_edges) if self.kind == HISTOGRAM else 1

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.bin_edges is not None:
            d["bin_edges"] = list(self.bin_edges)
        return d

    @classmethod
    def from_dict(cls, d) -> "SummarySpec":
        return cls(d["kind"], tuple(d["bin_edges"]) if d.get("bin_edges") is not None else None)


def histogram_spec(tau99: float, n_bins: int = DEFAULT_BINS) -> SummarySpec:
    return SummarySpec(HISTOGRAM, tuple(np.linspace(0.0, tau99, n_bins + 1)))


def log_histogram_spec(lo: float, hi: float, n_bins: int = DEFAULT_BINS) -> SummarySpec:
    """First bin [0, lo), then geometric bins up to ``hi``, then overflow."""
    return SummarySpec(HISTOGRAM, (0.0, *(float(e) for e in np.geomspace(lo, hi, n_bins))))


def default_specs(waits: np.ndarray, n_bins: int = DEFAULT_BINS, spacing: str = "linear") -> list:
    """Total time plus a waiting-time histogram.

    ``"linear"`` bins span [0, tau_99]; ``"log"`` bins are geometric between
    the 1st and 99th percentiles, for libraries whose waiting times span
    several decades.
    """
    if spacing == "linear":
        return [SummarySpec(TOTAL_TIME), histogram_spec(float(np.quantile(waits, 0.99)), n_bins)]
    if spacing == "log":
        lo, hi = np.quantile(waits, [0.01, 0.99])
        return [SummarySpec(TOTAL_TIME), log_histogram_spec(float(lo), float(hi), n_bins)]
    raise ValueError(f"unknown bin spacing {spacing!r}")


def summary_matrix(waits: np.ndarray, spec: SummarySpec) -> np.ndarray:
    """Summaries of equal-length records stacked as rows of ``waits``.

    Sums run over sorted values so that they do not depend on click order.
    """
    waits = np.atleast_2d(np.asarray(waits, dtype=float))
    if spec.kind in (TOTAL_TIME, MEAN_WAITING_TIME):
        total = np.sort(waits, axis=1).sum(axis=1)
        if spec.kind == MEAN_WAITING_TIME:
            total = total / waits.shape[1]
        return total[:, None]
    edges = np.asarray(spec.bin_edges)
    idx = np.searchsorted(edges, waits, side="right") - 1  # value in [e_i, e_i+1) -> i
    idx = np.clip(idx, 0, len(edges) - 1)  # last index is the overflow bin
    rows = np.repeat(np.arange(waits.shape[0]), waits.shape[1])
    counts = np.zeros((waits.shape[0], len(edges)))
    np.add.at(counts, (rows, idx.ravel()), 1.0)
    return counts


def compute_summaries(record: PhotoclickRecord | np.ndarray, specs: Sequence[SummarySpec]) -> list:
    """Summary vectors of one record, one array per spec."""
    w = record.waiting_times if isinstance(record, PhotoclickRecord) else np.asarray(record)
    if len(w) == 0:
        raise ShapeError("summaries need a non-empty record")
    return [summary_matrix(w[None, :], s)[0] for s in specs]


def summary_distances(obs: Sequence[np.ndarray], lib: Sequence[np.ndarray]) -> np.ndarray:
    """Distance per library entry and statistic, shape ``(n_entries, n_stats)``.

    Absolute difference for scalars and Euclidean distance for histograms.
    """
    cols = []
    for o, L in zip(obs, lib):
        diff = L - o[None, :]
        cols.append(np.abs(diff[:, 0]) if L.shape[1] == 1 else np.sqrt(np.sum(diff * diff, axis=1)))
    return np.stack(cols, axis=1)


@dataclass
class ABCConfig:
    statistics: list
    thresholds: list | None = None
    target_accept: float | None = DEFAULT_ACCEPT
    target_count: int | None = None

    def __post_init__(self):
        if not self.statistics:
            raise ValueError("ABC needs at least one summary statistic")
        if self.thresholds is not None:
            if len(self.thresholds) != len(self.statistics):
                raise ValueError("one threshold per statistic is required")
            if any(e < 0 for e in self.thresholds):
                raise ValueError("thresholds must be non-negative")

    def to_dict(self) -> dict:
        return {
            "statistics": [s.to_dict() for s in self.statistics],
            "thresholds": None if self.thresholds is None else [float(e) for e in self.thresholds],
            "target_accept": self.target_accept,
            "target_count": self.target_count,
        }


@dataclass
class ABCResult:
    accepted: np.ndarray
    indices: np.ndarray
    thresholds: np.ndarray
    posterior: PosteriorGrid | None = None
    diagnostics: dict = field(default_factory=dict)


def calibrate_thresholds(distances: np.ndarray, target_accept: float) -> np.ndarray:
    """Per-statistic ``target_accept`` quantiles of the observed-to-library distances."""
    if not 0 < target_accept <= 1:
        raise ValueError("target_accept must lie in (0, 1]")
    eps = np.quantile(distances, target_accept, axis=0, method="higher")
    for i in range(distances.shape[1]):
        if np.ptp(distances[:, i]) == 0:
            warnings.warn(f"all distances equal for statistic {i}; threshold set to that value", RuntimeWarning)
    return eps


def calibrate_joint(distances: np.ndarray, target_count: int) -> np.ndarray:
    """Smallest common quantile level with at least ``target_count`` joint acceptances.

    Every statistic still gets its own quantile threshold; only the shared
    level is tuned.  Working with ranks makes the search exact.
    """
    n = len(distances)
    target_count = min(max(int(target_count), 1), n)
    # ranks turn quantile levels into exact order statistics
    order = np.argsort(np.argsort(distances, axis=0, kind="stable"), axis=0, kind="stable")
    worst = order.max(axis=1)  # entry accepted at level k iff all its ranks < k
    k = int(np.sort(worst)[target_count - 1]) + 1
    sorted_d = np.sort(distances, axis=0)
    return sorted_d[k - 1]


def accept(distances: np.ndarray, thresholds) -> np.ndarray:
    return np.all(distances <= np.asarray(thresholds)[None, :], axis=1)


def histogram_on_grid(thetas: np.ndarray, grid: PosteriorGrid, weights=None) -> PosteriorGrid:
    """Accepted parameter samples binned to the nearest grid value per axis."""
    thetas = np.atleast_2d(thetas)
    idx = []
    for k, (_, vals) in enumerate(grid.axes):
        mid = 0.5 * (vals[1:] + vals[:-1])
        idx.append(np.searchsorted(mid, thetas[:, k]))
    counts = np.zeros(grid.shape)
    np.add.at(counts, tuple(idx), 1.0 if weights is None else weights)
    return grid.with_weights(counts)


def abc_posterior(
    observed: PhotoclickRecord,
    library,
    cfg: ABCConfig,
    grid: PosteriorGrid | None = None,
    exclude: int | None = None,
) -> ABCResult:
    """Rejection ABC: keep library entries whose every statistic is within its threshold.

    Thresholds come from ``cfg.thresholds`` when given, otherwise from a
    joint count target or from per-statistic quantiles.  ``exclude`` drops
    one library index (leave-one-out use of a library record).
    """
    if len(observed) != library.n_clicks:
        raise CompatibilityError(f"record has {len(observed)} clicks, library expects {library.n_clicks}")
    obs = compute_summaries(observed, cfg.statistics)
    dist = summary_distances(obs, library.summaries(cfg.statistics))
    if exclude is not None:
        dist[exclude] = np.inf
    if cfg.thresholds is not None:
        eps = np.asarray(cfg.thresholds, dtype=float)
    elif cfg.target_count is not None:
        eps = calibrate_joint(dist, cfg.target_count)
    else:
        eps = calibrate_thresholds(dist, cfg.target_accept)
    mask = accept(dist, eps)
    idx = np.nonzero(mask)[0]
    if idx.size == 0:
        raise EmptyAcceptanceError("no library entry accepted; recalibrate the thresholds (calibrate_thresholds)")
    thetas = library.thetas[idx]
    post = histogram_on_grid(thetas, grid) if grid is not None else None
    diag = {
        "n_accepted": int(idx.size),
        "accept_fraction": float(idx.size / len(dist)),
        "per_statistic_fraction": [float(np.mean(dist[:, i] <= eps[i])) for i in range(dist.shape[1])],
    }
    return ABCResult(thetas, idx, eps, post, diag)


def abc_estimates(records, library, cfg: ABCConfig, grid: PosteriorGrid, estimator: str = "mean"):
    """Posterior point estimates and standard deviations for many records."""
    est, sd, posts = [], [], []
    for rec in records:
        res = abc_posterior(rec, library, cfg, grid)
        p = res.posterior
        est.append((p.mean() if estimator == "mean" else p.mode()).as_array())
        sd.append(p.std())
        posts.append(p)
    return np.array(est), np.array(sd), posts


def abc_rmse_curve(library, test_records, test_thetas, cfg: ABCConfig, grid: PosteriorGrid, buckets=None, estimator="mean"):
    """ABC RMSE and mean predicted posterior sigma per true-parameter bucket."""
    from .evaluation import rmse_curve

    if library.shares_entries(test_records):
        raise CompatibilityError("test records overlap the ABC library (optimistic bias)")
    est, sd, _ = abc_estimates(test_records, library, cfg, grid, estimator)
    return rmse_curve(est[:, 0], np.asarray(test_thetas)[:, 0], buckets, predicted_sigma=sd[:, 0])
