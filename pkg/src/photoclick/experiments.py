"""Desk-scale experiment definitions shared by the CLI and the acceptance suite.

Expensive intermediate results (libraries, exact log-likelihood tables,
trained networks) are cached under :func:`cache_dir`, keyed by their inputs.
"""
from __future__ import annotations

import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .abc import default_specs
from .library import TrajectoryLibrary, generate_library
from .posterior import delta_grid, loglik_matrix, model_family
from .quantum import DELTA_RANGE, build_optomech_model, build_tls_model, optomech_params, resonance_detunings
from .trajectories import sample_trajectory

log = logging.getLogger(__name__)

TEST_SEED = 7919
CHUNK = 2000


def cache_dir() -> Path:
    path = Path(os.environ.get("PHOTOCLICK_CACHE", Path.home() / ".cache" / "photoclick"))
    path.mkdir(parents=True, exist_ok=True)
    return path


@dataclass
class OptomechSetup:
    """Settings for the optomechanical comparisons."""

    n_clicks: int = 30
    dims: tuple = (6, 12)
    library_size: int = 20_000
    library_seed: int = 11
    n_test: int = 200
    grid_points: int = 101
    params: dict = field(default_factory=dict)

    def base_model(self):
        return build_optomech_model(optomech_params(**self.params), *self.dims)

    def resonances(self) -> list:
        return resonance_detunings(optomech_params(**self.params), 3)

    def test_truths(self) -> dict:
        """Named true detunings: the three resonances and the midpoints around them."""
        d1, d2, d3 = self.resonances()
        return {
            "mid01": d1 / 2,
            "res1": d1,
            "mid12": (d1 + d2) / 2,
            "res2": d2,
            "mid23": (d2 + d3) / 2,
            "res3": d3,
        }

    def grid(self):
        return delta_grid(-10.0, 0.0, self.grid_points)


def optomech_test_records(setup: OptomechSetup, names=None) -> dict:
    """``name -> list of records`` at each true detuning; keyed by ``TEST_SEED``.

    The full set is cached as one library file whose thetas hold the truths.
    """
    truths = setup.test_truths()
    d = "x".join(map(str, setup.dims))
    path = cache_dir() / "libraries" / f"optomech_test_{d}_l{setup.n_clicks}_n{setup.n_test}.pclb"
    if path.exists():
        lib = TrajectoryLibrary.load(path)
    else:
        base = setup.base_model()
        recs, thetas = [], []
        for b, delta in enumerate(truths.values()):
            model = build_optomech_model({**base.params, "delta": delta}, *setup.dims)
            recs += [sample_trajectory(model, setup.n_clicks, (TEST_SEED, b * 100_000 + k)) for k in range(setup.n_test)]
            thetas += [[delta]] * setup.n_test
        meta = {"param_names": ["delta"], "labels": ["cavity"], "buckets": list(truths), "model": base.to_config()}
        lib = TrajectoryLibrary(thetas, np.stack([r.waiting_times for r in recs]), metadata=meta)
        path.parent.mkdir(parents=True, exist_ok=True)
        lib.save(path, overwrite=True)
    out = {}
    for b, name in enumerate(truths):
        if names is None or name in names:
            out[name] = [lib.record(i) for i in range(b * setup.n_test, (b + 1) * setup.n_test)]
    return out


def optomech_prior_test_library(setup: OptomechSetup, n_entries: int = 2000, seed: int = 12) -> TrajectoryLibrary:
    """Held-out records with detunings drawn from the prior (independent seed)."""
    d = "x".join(map(str, setup.dims))
    tag = f"optomech_{d}_l{setup.n_clicks}_n{n_entries}_s{seed}"
    return cached_library(tag, setup.base_model(), {"delta": list(DELTA_RANGE)}, n_entries, setup.n_clicks, seed)


def exact_optomech_logliks(setup: OptomechSetup, records: dict, progress=None) -> dict:
    """Exact log-likelihood tables ``(grid cells, records)`` per test bucket, cached per grid cell."""
    names = list(records)
    flat = [r for n in names for r in records[n]]
    ll = loglik_matrix(model_family(setup.base_model()), flat, setup.grid(), "eig", cache_dir() / "exact", progress)
    out, k = {}, 0
    for n in names:
        out[n] = ll[:, k:k + len(records[n])]
        k += len(records[n])
    return out


def cached_library(tag: str, base, prior: dict, n_entries: int, n_clicks: int, seed: int, progress=None,
                   hist_spacing: str = "linear", **kw) -> TrajectoryLibrary:
    """Generate a library in chunks of ``CHUNK`` entries, each cached on disk.

    Chunks continue the same ``(seed, index)`` streams, so the joined library
    equals a single-shot generation except for the histogram range, which is
    recomputed from all entries.
    """
    root = cache_dir() / "libraries"
    final = root / (f"{tag}.pclb" if hist_spacing == "linear" else f"{tag}_{hist_spacing}.pclb")
    if final.exists():
        return TrajectoryLibrary.load(final)
    parts = []
    for start in range(0, n_entries, CHUNK):
        path = root / tag / f"{start:07d}.pclb"
        if path.exists():
            part = TrajectoryLibrary.load(path)
        else:
            size = min(CHUNK, n_entries - start)
            part = generate_library(base, prior, size, n_clicks, seed, start_index=start, probe_truncation=False, **kw)
            path.parent.mkdir(parents=True, exist_ok=True)
            part.save(path, overwrite=True)
        parts.append(part)
        if progress:
            progress(start + len(part), n_entries)
    labels = sorted({lab for p in parts for lab in p.metadata["labels"]})
    lab_arrays = [np.vectorize(lambda j, p=p: labels.index(p.metadata["labels"][j]), otypes=[np.uint8])(p.labels) for p in parts]
    waits = np.concatenate([p.waits for p in parts])
    meta = {k: v for k, v in parts[0].metadata.items() if k not in ("n_entries", "start_index")}
    meta["labels"] = labels
    meta["prior_redraws"] = int(sum(p.metadata["prior_redraws"] for p in parts))
    meta["summaries"] = [sp.to_dict() for sp in default_specs(waits, spacing=hist_spacing)]
    lib = TrajectoryLibrary(np.concatenate([p.thetas for p in parts]), waits, np.concatenate(lab_arrays), meta)
    lib.save(final, overwrite=True)
    return lib


def optomech_library(setup: OptomechSetup, progress=None) -> TrajectoryLibrary:
    d = "x".join(map(str, setup.dims))
    tag = f"optomech_{d}_l{setup.n_clicks}_n{setup.library_size}_s{setup.library_seed}"
    return cached_library(tag, setup.base_model(), {"delta": list(DELTA_RANGE)}, setup.library_size,
                          setup.n_clicks, setup.library_seed, progress)


def tls_library(n_entries: int, params=("delta", "omega"), n_clicks: int = 50, seed: int = 21, omega: float = 1.0,
                hist_spacing: str = "linear", progress=None):
    """TLS library with a uniform [0, 2] prior on ``params``; a missing omega is held at ``omega``."""
    prior = {p: [0.0, 2.0] for p in params}
    fixed = {} if "omega" in params else {"omega": omega}
    tag = f"tls_{'-'.join(params)}_l{n_clicks}_n{n_entries}_s{seed}"
    return cached_library(tag, build_tls_model(1.0, omega), prior, n_entries, n_clicks, seed, progress,
                          hist_spacing=hist_spacing, fixed=fixed)


def cached_model(name: str, library: TrajectoryLibrary, frontend: str, cfg, bins=None, **arch):
    """Train once per (library, settings) and keep the weights and curves on disk."""
    import hashlib
    import json

    from .nn import NeuralModel, build_and_train

    key = json.dumps({"lib": library.fingerprint(), "summaries": library.metadata.get("summaries"), "frontend": frontend, "cfg": cfg.__dict__,
                      "bins": None if bins is None else list(map(float, bins)), "arch": arch}, sort_keys=True, default=str)
    digest = hashlib.sha256(key.encode()).hexdigest()[:12]
    path = cache_dir() / "models" / f"{name}_{digest}.pcnm"
    if path.exists():
        return NeuralModel.load(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    model, hist = build_and_train(library, frontend, cfg, bins, **arch)
    model.meta["train_seconds"] = time.perf_counter() - t0
    model.save(path)
    hist.to_csv(path.with_name(f"history_{name}.csv"))
    return model
