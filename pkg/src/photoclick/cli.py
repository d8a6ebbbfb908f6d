"""Command line entry point: ``photoclick <command> ...``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .abc import ABCConfig, abc_posterior, default_specs
from .config import ExperimentConfig
from .errors import CompatibilityError, PhotoclickError, UsageError
from .evaluation import (
    bhattacharyya,
    dark_count_records,
    pca_top_components,
    report_delta,
    rmse_curve,
    timing_benchmark,
)
from .library import TrajectoryLibrary, generate_library
from .posterior import PosteriorGrid, model_family, posterior_on_grid
from .trajectories import PhotoclickRecord

log = logging.getLogger("photoclick")


# --- helpers


def load_records(path) -> tuple[list, np.ndarray | None]:
    """Records from a library file or a JSON list of waiting-time lists.

    Returns the records and, for libraries, their true parameters.
    """
    path = Path(path)
    if not path.exists():
        raise UsageError(f"{path} not found")
    with open(path, "rb") as f:
        head = f.read(4)
    if head == b"PCLB":
        lib = TrajectoryLibrary.load(path)
        return lib.records(), lib.thetas
    data = json.loads(path.read_text())
    if isinstance(data, dict):
        data = data.get("records", [data])
    recs = [PhotoclickRecord(d["waiting_times"] if isinstance(d, dict) else d) for d in data]
    return recs, None


def grid_for(cfg: ExperimentConfig) -> PosteriorGrid:
    n = cfg["grid"]["points"]
    return PosteriorGrid.uniform([(k, np.linspace(lo, hi, n)) for k, (lo, hi) in cfg["prior"].items()])


def write_manifest(out: Path, cfg: ExperimentConfig, command: str, extra: dict | None = None):
    manifest = {"command": command, "config_hash": cfg.digest(), "seed": cfg["seed"], "version": __version__,
                "config": cfg, **(extra or {})}
    p = out.with_suffix(out.suffix + ".manifest.json") if out.suffix else out / "manifest.json"
    p.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str))
    return p


def _write_table(path: Path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for r in rows:
            w.writerow([f"{v:.10g}" if isinstance(v, (float, np.floating)) else v for v in r])


def _check_out(path: Path, overwrite: bool):
    if path.exists() and not overwrite:
        raise UsageError(f"{path} exists; pass --overwrite")


# --- commands


def cmd_simulate(args, cfg):
    out = Path(args.out)
    _check_out(out, args.overwrite)
    base = cfg.base_model()
    lib = generate_library(
        base, cfg["prior"], cfg["library_size"], cfg["n_clicks"], cfg["seed"],
        dark_rate=cfg["dark_count_rate"], fixed=cfg.fixed_params(), workers=args.threads,
        start_index=args.start_index, n_bins=cfg["abc"]["n_bins"], hist_spacing=cfg["abc"]["hist_spacing"],
    )
    lib.metadata["config_hash"] = cfg.digest()
    trunc = lib.metadata.get("truncation")
    if trunc is not None:
        print(json.dumps({"truncation": trunc}))
        if not trunc["passed"] and not args.force:
            raise PhotoclickError("Fock truncation check failed; rerun with --force to keep the library")
    lib.save(out, overwrite=args.overwrite)
    write_manifest(out, cfg, "simulate", {"library": lib.fingerprint(), "entries": len(lib)})
    print(f"wrote {len(lib)} records to {out}")


def _abc_cfg(cfg, lib) -> ABCConfig:
    a = cfg["abc"]
    return ABCConfig(lib.specs, a.get("thresholds"), a.get("target_accept"), a.get("target_count"))


def cmd_abc(args, cfg):
    lib = TrajectoryLibrary.load(args.library)
    recs, _ = load_records(args.records)
    grid = grid_for(cfg)
    abc_cfg = _abc_cfg(cfg, lib)
    out = Path(args.out)
    results = []
    for i, r in enumerate(recs):
        res = abc_posterior(r, lib, abc_cfg, grid)
        post = res.posterior
        results.append({"index": i, "mean": post.mean().as_dict(), "mode": post.mode().as_dict(),
                        "std": post.std().tolist(), "n_accepted": res.diagnostics["n_accepted"],
                        "posterior": post.to_dict()})
        if args.dump_accepted:
            np.savetxt(out.with_name(f"{out.stem}_accepted_{i}.csv"), res.accepted, delimiter=",",
                       header=",".join(lib.param_names), comments="")
    out.write_text(json.dumps(results, indent=1))
    write_manifest(out, cfg, "abc", {"library": lib.fingerprint()})


def cmd_train(args, cfg):
    from .nn import TrainConfig, build_and_train

    lib = TrajectoryLibrary.load(args.library)
    t = dict(cfg["train"])
    frontend = t.pop("frontend")
    tc = TrainConfig(**t)
    model, hist = build_and_train(lib, frontend, tc)
    out = Path(args.out)
    _check_out(out, args.overwrite)
    model.save(out)
    hist.to_csv(out.with_name(f"history_{out.stem}.csv"))
    write_manifest(out, cfg, "train", {"library": lib.fingerprint(), "best_epoch": hist.best_epoch})
    print(f"trained {model.n_params} weights; best epoch {hist.best_epoch}")


def cmd_infer(args, cfg):
    from .nn.model import NeuralModel, predict_gaussian, predict_point, predict_posterior

    model = NeuralModel.load(args.model)
    recs, _ = load_records(args.records)
    for r in recs:
        if len(r) != model.meta["n_clicks"]:
            raise UsageError(f"record has {len(r)} clicks but the model expects {model.meta['n_clicks']}")
    names = model.meta["param_names"]
    est = predict_point(model, recs, args.estimator)
    header = list(names)
    cols = [est]
    if model.head == "gaussian":
        _, cov = predict_gaussian(model, recs)
        header += [f"sigma_{n}" for n in names]
        cols.append(np.sqrt(np.diagonal(cov, axis1=1, axis2=2)))
    elif model.head == "categorical":
        posts = predict_posterior(model, recs)
        header += [f"sigma_{names[0]}"]
        cols.append(np.array([p.std() for p in posts]))
    _write_table(Path(args.out), header, np.concatenate(cols, axis=1))


def cmd_exact(args, cfg):
    recs, _ = load_records(args.records)
    grid = grid_for(cfg)
    base = cfg.base_model()
    posts = posterior_on_grid(model_family(base), recs, grid, method=args.method)
    out = Path(args.out)
    out.write_text(json.dumps([{"mean": p.mean().as_dict(), "mode": p.mode().as_dict(), **p.to_dict()} for p in posts]))
    write_manifest(out, cfg, "exact-posterior")


def _estimates(method: str, args, cfg, recs, lib=None):
    """Point estimates and predicted sigma for the first parameter."""
    if method == "abc":
        grid = grid_for(cfg)
        abc_cfg = _abc_cfg(cfg, lib)
        est, sd = [], []
        for r in recs:
            p = abc_posterior(r, lib, abc_cfg, grid).posterior
            est.append(p.mean().as_array()[0])
            sd.append(p.std()[0])
        return np.array(est), np.array(sd)
    from .nn.model import NeuralModel, predict_gaussian, predict_point, predict_posterior

    model = NeuralModel.load(method)
    est = predict_point(model, recs, args.estimator)[:, 0]
    if model.head == "gaussian":
        return est, np.sqrt(predict_gaussian(model, recs)[1][:, 0, 0])
    if model.head == "categorical":
        return est, np.array([p.std()[0] for p in predict_posterior(model, recs)])
    return est, None


def cmd_evaluate(args, cfg):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    test_recs, test_thetas = load_records(args.test)
    if test_thetas is None:
        raise UsageError("evaluation needs a test library with true parameters")
    lib = TrajectoryLibrary.load(args.library) if args.library else None
    if lib is not None and lib.shares_entries(test_recs[:50]):
        raise CompatibilityError("test records overlap the library")
    methods = args.methods or ["abc"]
    suite = args.suite
    summary = {}
    truths = test_thetas[:, 0]
    edges = np.arange(0.0, 10.0 + 1e-9, 0.25) if cfg["model"]["family"] == "optomech" else None
    if suite in ("rmse", "darkcounts"):
        rates = [0.0] if suite == "rmse" else [0.0] + list(args.dark_rates)
        for rate in rates:
            recs = test_recs if rate == 0 else dark_count_records(test_recs, rate, cfg["seed"] + 1, len(test_recs[0]))
            for m in methods:
                est, sd = _estimates(m, args, cfg, recs, lib)
                curve = rmse_curve(report_delta(est) if edges is not None else est,
                                   report_delta(truths) if edges is not None else truths, edges, sd)
                tag = Path(m).stem + ("" if rate == 0 else f"_dcr{rate:g}")
                curve.to_csv(out / f"rmse_{tag}.csv")
                _write_table(out / f"estimates_{tag}.csv", ["truth", "estimate"], zip(truths, est))
                summary[tag] = curve.overall()
    elif suite == "posterior-fidelity":
        grid = grid_for(cfg)
        base = cfg.base_model()
        n = min(args.max_records, len(test_recs))
        exact = posterior_on_grid(model_family(base), test_recs[:n], grid)
        rows = []
        for i in range(n):
            p = abc_posterior(test_recs[i], lib, _abc_cfg(cfg, lib), grid).posterior
            rows.append((i, truths[i], bhattacharyya(p, exact[i])))
        _write_table(out / "fidelity_abc.csv", ["index", "truth", "bhattacharyya"], rows)
        summary["mean_fidelity"] = float(np.mean([r[2] for r in rows]))
    elif suite == "timing":
        recs = test_recs[: args.max_records]
        fns = {}
        for m in methods:
            fns[Path(m).stem] = (lambda r, m=m: _estimates(m, args, cfg, [r], lib))
        summary = timing_benchmark(fns, recs)
    elif suite == "pca":
        res = pca_top_components(lib.waits, 2)
        corr = float(np.corrcoef(res.projections[:, 0], lib.waits.sum(axis=1))[0, 1])
        summary = {"explained_variance": res.explained_variance.tolist(), "corr_pc1_total_time": corr}
    else:
        raise UsageError(f"unknown suite {suite!r}")
    (out / f"summary_{suite}.json").write_text(json.dumps(summary, indent=2))
    write_manifest(out, cfg, f"evaluate:{suite}", {"summary": summary})
    print(json.dumps(summary, indent=2))


def cmd_report(args, cfg):
    from .plotting import render_report
    from .quantum import optomech_params, resonance_detunings

    res = resonance_detunings(optomech_params(**cfg["model"].get("params", {})), 3) if cfg["model"]["family"] == "optomech" else ()
    made = render_report(args.results, args.out, res)
    for p in made:
        print(p)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="photoclick", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("--config", help="YAML experiment config")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key, e.g. --set train.loss=nll")
    p.add_argument("--threads", type=int, default=None, help="worker processes (default PHOTOCLICK_THREADS or 1)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate a trajectory library")
    s.add_argument("--out", required=True)
    s.add_argument("--overwrite", action="store_true")
    s.add_argument("--force", action="store_true", help="keep the library even if the truncation check fails")
    s.add_argument("--start-index", type=int, default=0, help="first trajectory index (disjoint test sets)")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("abc", help="ABC posteriors for observed records")
    s.add_argument("--library", required=True)
    s.add_argument("--records", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--dump-accepted", action="store_true")
    s.set_defaults(func=cmd_abc)

    s = sub.add_parser("train", help="train a network on a library")
    s.add_argument("--library", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--overwrite", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("infer", help="network predictions for records")
    s.add_argument("--model", required=True)
    s.add_argument("--records", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--estimator", choices=["mean", "mode"], default="mean")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("exact-posterior", help="exact grid posteriors for records")
    s.add_argument("--records", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--method", choices=["auto", "eig", "expm"], default="auto")
    s.set_defaults(func=cmd_exact)

    s = sub.add_parser("evaluate", help="run an evaluation suite and write CSV tables")
    s.add_argument("--suite", choices=["rmse", "posterior-fidelity", "darkcounts", "timing", "pca"], default="rmse")
    s.add_argument("--test", required=True, help="test library with true parameters")
    s.add_argument("--library", help="reference library (ABC, PCA)")
    s.add_argument("--methods", nargs="*", help="'abc' and/or model files")
    s.add_argument("--dark-rates", nargs="*", type=float, default=[1e-2])
    s.add_argument("--estimator", choices=["mean", "mode"], default="mean")
    s.add_argument("--max-records", type=int, default=50)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("report", help="render figures from evaluation CSVs")
    s.add_argument("--results", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.threads:
        os.environ["PHOTOCLICK_THREADS"] = str(args.threads)
    try:
        cfg = ExperimentConfig.load(args.config, args.overrides)
        t0 = time.time()
        args.func(args, cfg)
        log.info("%s finished in %.1f s", args.command, time.time() - t0)
    except PhotoclickError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
