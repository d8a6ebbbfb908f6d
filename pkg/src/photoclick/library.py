"""Trajectory libraries: generation and the PCLB binary format.

File layout (little endian)::

    b"PCLB" | uint32 version | uint64 n | n bytes of UTF-8 JSON metadata
    then per entry: float64[d] theta | uint32 k | float64[k] waits | uint8[k] labels

Labels are indices into ``metadata["labels"]``.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import struct
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .abc import SummarySpec, default_specs, summary_matrix
from .errors import CompatibilityError, InvalidRecordError, SimulationTimeout, UsageError
from .quantum import ModelSpec, model_from_config, with_theta
from .rng import STREAM_DARK, STREAM_PRIOR, make_rng
from .trajectories import DARK_LABEL, DarkCountConfig, NoJumpPropagator, PhotoclickRecord, inject_dark_counts, sample_trajectory, truncation_check

log = logging.getLogger(__name__)

MAGIC = b"PCLB"
VERSION = 1
MAX_PRIOR_REDRAWS = 100


def thread_count(default: int = 1) -> int:
    try:
        return max(1, int(os.environ.get("PHOTOCLICK_THREADS", default)))
    except ValueError:
        raise UsageError("PHOTOCLICK_THREADS must be an integer") from None


class TrajectoryLibrary:
    """Parameter draws with equal-length click records.

    Parameters
    ----------
    thetas : array, shape (n_entries, n_params)
    waits : array, shape (n_entries, n_clicks)
    labels : uint8 array of the same shape, indices into ``metadata["labels"]``
    metadata : dict
        Generation settings: model config, prior, seed, bin spec, dark counts.
    """

    def __init__(self, thetas, waits, labels=None, metadata=None):
        self.thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
        self.waits = np.atleast_2d(np.asarray(waits, dtype=float))
        if self.thetas.shape[0] != self.waits.shape[0]:
            raise InvalidRecordError("one theta per record is required")
        if np.any(~(self.waits > 0)):
            raise InvalidRecordError("library waiting times must be positive")
        self.labels = np.zeros(self.waits.shape, np.uint8) if labels is None else np.asarray(labels, np.uint8)
        self.metadata = dict(metadata or {})
        self.metadata.setdefault("labels", [""])
        self.metadata["n_entries"] = len(self)
        self.metadata["n_clicks"] = self.n_clicks
        self._cache = {}

    def __len__(self):
        return self.waits.shape[0]

    @property
    def n_clicks(self) -> int:
        return self.waits.shape[1]

    @property
    def param_names(self) -> list:
        return list(self.metadata.get("param_names", [f"theta{i}" for i in range(self.thetas.shape[1])]))

    @property
    def specs(self) -> list:
        return [SummarySpec.from_dict(d) for d in self.metadata["summaries"]]

    def record(self, i: int) -> PhotoclickRecord:
        names = self.metadata["labels"]
        return PhotoclickRecord(self.waits[i], tuple(names[j] for j in self.labels[i]))

    def records(self) -> list:
        return [self.record(i) for i in range(len(self))]

    def summaries(self, specs: Sequence[SummarySpec] | None = None) -> list:
        """Cached summary matrices, one per spec."""
        out = []
        for s in specs or self.specs:
            key = json.dumps(s.to_dict())
            if key not in self._cache:
                self._cache[key] = summary_matrix(self.waits, s)
            out.append(self._cache[key])
        return out

    def subset(self, idx) -> "TrajectoryLibrary":
        idx = np.asarray(idx)
        meta = {k: v for k, v in self.metadata.items() if k != "n_entries"}
        return TrajectoryLibrary(self.thetas[idx], self.waits[idx], self.labels[idx], meta)

    def split(self, n_first: int) -> tuple:
        return self.subset(np.arange(n_first)), self.subset(np.arange(n_first, len(self)))

    def model(self) -> ModelSpec:
        return model_from_config(self.metadata["model"])

    def fingerprint(self) -> str:
        h = hashlib.sha256(np.ascontiguousarray(self.thetas).tobytes())
        h.update(np.ascontiguousarray(self.waits).tobytes())
        return h.hexdigest()[:16]

    def shares_entries(self, records: Sequence[PhotoclickRecord]) -> bool:
        """True if any record's waiting times appear verbatim in the library."""
        if not records or records[0].waiting_times.shape[0] != self.n_clicks:
            return False
        first = {float(w): i for i, w in enumerate(self.waits[:, 0])}
        for r in records:
            i = first.get(float(r.waiting_times[0]))
            if i is not None and np.array_equal(self.waits[i], r.waiting_times):
                return True
        return False

    def check_compatible(self, other: Mapping | "TrajectoryLibrary", keys=("n_clicks", "summaries")) -> None:
        meta = other.metadata if isinstance(other, TrajectoryLibrary) else other
        for k in keys:
            if k in meta and k in self.metadata and meta[k] != self.metadata[k]:
                raise CompatibilityError(f"metadata {k!r} differs: {meta[k]!r} vs {self.metadata[k]!r}")

    # --- file format

    def save(self, path: str | Path, overwrite: bool = False) -> Path:
        path = Path(path)
        if path.exists() and not overwrite:
            raise UsageError(f"{path} exists; pass overwrite to replace it")
        meta = json.dumps(self.metadata, sort_keys=True).encode()
        d, k = self.thetas.shape[1], self.n_clicks
        rec = np.zeros(len(self), dtype=_entry_dtype(d, k))
        rec["theta"] = self.thetas
        rec["k"] = k
        rec["waits"] = self.waits
        rec["labels"] = self.labels
        with open(path, "wb") as f:
            f.write(MAGIC + struct.pack("<IQ", VERSION, len(meta)) + meta)
            f.write(rec.tobytes())
        return path

    @classmethod
    def load(cls, path: str | Path) -> "TrajectoryLibrary":
        buf = Path(path).read_bytes()
        if buf[:4] != MAGIC:
            raise CompatibilityError(f"{path} is not a trajectory library")
        version, n = struct.unpack_from("<IQ", buf, 4)
        if version != VERSION:
            raise CompatibilityError(f"unsupported library version {version}")
        off = 16 + n
        meta = json.loads(buf[16:off].decode())
        d = len(meta["param_names"])
        k = meta["n_clicks"]
        dt = _entry_dtype(d, k)
        body = len(buf) - off
        if body % dt.itemsize:
            raise CompatibilityError("library body is truncated or has ragged entries")
        rec = np.frombuffer(buf, dtype=dt, offset=off)
        if np.any(rec["k"] != k):
            raise CompatibilityError("library entries have inconsistent click counts")
        return cls(rec["theta"].reshape(len(rec), d), rec["waits"].reshape(len(rec), k), rec["labels"].reshape(len(rec), k), meta)


def _entry_dtype(d: int, k: int) -> np.dtype:
    return np.dtype([("theta", "<f8", (d,)), ("k", "<u4"), ("waits", "<f8", (k,)), ("labels", "u1", (k,))])


# --- generation


def draw_theta(prior: Mapping[str, Sequence[float]], seed: int, index: int, attempt: int = 0) -> dict:
    """Uniform prior draw keyed by (seed, index); ``attempt`` re-keys redraws."""
    rng = make_rng((seed, index + attempt * (1 << 40)), stream=STREAM_PRIOR)
    return {k: float(rng.uniform(lo, hi)) for k, (lo, hi) in prior.items()}


def _simulate_entry(args):
    base_cfg, prior, fixed, n_clicks, seed, index, dark_rate, grid_theta = args
    base = model_from_config(base_cfg)
    for attempt in range(MAX_PRIOR_REDRAWS):
        theta = dict(grid_theta) if grid_theta is not None else draw_theta(prior, seed, index, attempt)
        model = with_theta(base, {**fixed, **theta})
        key = (seed, index + attempt * (1 << 40))
        try:
            rec = sample_trajectory(model, n_clicks, key, propagator=NoJumpPropagator(model))
        except SimulationTimeout:
            if grid_theta is not None:
                raise
            continue
        if dark_rate > 0:
            rec = inject_dark_counts(rec, DarkCountConfig(dark_rate), make_rng(key, stream=STREAM_DARK))
            rec = rec.truncated(n_clicks)
        return theta, rec, attempt
    raise SimulationTimeout(f"entry {index}: {MAX_PRIOR_REDRAWS} prior draws never produced {n_clicks} clicks")


def generate_library(
    base: ModelSpec,
    prior: Mapping[str, Sequence[float]],
    n_entries: int,
    n_clicks: int,
    seed: int = 0,
    *,
    dark_rate: float = 0.0,
    fixed: Mapping[str, float] | None = None,
    theta_grid: np.ndarray | None = None,
    specs: Sequence[SummarySpec] | None = None,
    n_bins: int = 40,
    hist_spacing: str = "linear",
    workers: int | None = None,
    probe_truncation: bool = True,
    start_index: int = 0,
    progress: Callable[[int, int], None] | None = None,
) -> TrajectoryLibrary:
    """Simulate ``n_entries`` records with parameters drawn from a uniform prior.

    Entry ``i`` uses random streams keyed by ``(seed, start_index + i)``, so the
    output does not depend on ``workers``.  Draws whose trajectory times out
    (dark parameter regions) are redrawn; the count is stored in metadata.
    With ``theta_grid`` (rows of parameter values) entries cycle through the
    grid instead of drawing from the prior.  Without ``specs`` the stored
    summaries are total time plus an ``n_bins`` histogram with ``hist_spacing``
    bins (see `default_specs`).
    """
    names = list(prior)
    fixed = dict(fixed or {})
    cfg = base.to_config()
    grid_rows = None
    if theta_grid is not None:
        theta_grid = np.atleast_2d(theta_grid)
        grid_rows = [dict(zip(names, row)) for row in theta_grid]
    jobs = [
        (cfg, dict(prior), fixed, n_clicks, seed, start_index + i, dark_rate,
         None if grid_rows is None else grid_rows[i % len(grid_rows)])
        for i in range(n_entries)
    ]
    workers = workers or thread_count()
    results = []
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            for i, r in enumerate(ex.map(_simulate_entry, jobs, chunksize=64)):
                results.append(r)
                if progress:
                    progress(i + 1, n_entries)
    else:
        for i, job in enumerate(jobs):
            results.append(_simulate_entry(job))
            if progress:
                progress(i + 1, n_entries)
    label_names = sorted({lab for _, rec, _ in results for lab in rec.channel_labels})
    lookup = {lab: j for j, lab in enumerate(label_names)}
    thetas = np.array([[th[n] for n in names] for th, _, _ in results])
    waits = np.stack([rec.waiting_times for _, rec, _ in results])
    labels = np.array([[lookup[lab] for lab in rec.channel_labels] for _, rec, _ in results], dtype=np.uint8)
    if specs is None:
        specs = default_specs(waits, n_bins, spacing=hist_spacing)
    meta = {
        "model": cfg,
        "family": base.family,
        "param_names": names,
        "prior": {k: list(map(float, v)) for k, v in prior.items()},
        "prior_kind": "grid" if theta_grid is not None else "uniform",
        "fixed": fixed,
        "n_clicks": n_clicks,
        "seed": seed,
        "start_index": start_index,
        "dark_count_rate": dark_rate,
        "labels": label_names,
        "summaries": [s.to_dict() for s in specs],
        "prior_redraws": int(sum(a for _, _, a in results)),
        "dark_label": DARK_LABEL,
    }
    if probe_truncation and base.family == "optomech":
        report = truncation_check(base, n_clicks, n_probe=3, seed=seed)
        meta["truncation"] = report.as_dict()
    return TrajectoryLibrary(thetas, waits, labels, meta)


def records_with_labels_hidden(lib: TrajectoryLibrary, detected_label: str) -> TrajectoryLibrary:
    """Copy whose labels all read ``detected_label`` (estimators must not see dark tags)."""
    meta = {k: v for k, v in lib.metadata.items() if k != "n_entries"}
    meta["labels"] = [detected_label]
    return TrajectoryLibrary(lib.thetas, lib.waits, np.zeros_like(lib.labels), meta)
