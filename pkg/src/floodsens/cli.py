"""``floodsens`` command line: gen-fixture, gen-dems, run, convergence, analyze, validate.

Exit codes: 0 success, 1 invalid input (config, arguments, files),
2 runtime failure (including a campaign with failed runs).
Structured logs go to stderr as JSON lines; progress goes to stdout.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .campaign import convergence_trace, draw_plan, execute, stabilization_N
from .config import ConfigError, PipelineConfig, validate_config
from .ensemble import DemDatabaseManifest, FeatureStack, build_database
from .fixture import demo_fixture, read_probes
from .gsa import (FACTORS, align_outputs, align_raster, probe_estimates, probe_series, si_convergence,
                  sobol_maps, ua_stats)
from .raster import Raster, RasterFormatError, write_raster

log = logging.getLogger("floodsens")
PROVENANCE_NAME = "floodsens_run.yaml"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


class JsonFormatter(logging.Formatter):
    def format(self, record):
        out = {"level": record.levelname.lower(), "logger": record.name, "msg": record.getMessage()}
        if record.exc_info:
            out["exc"] = self.formatException(record.exc_info)
        return json.dumps(out)


def setup_logging(verbose: bool = False) -> None:
    root = logging.getLogger()
    for h in list(root.handlers):
        if getattr(h, "_floodsens", False):
            root.removeHandler(h)
    h = logging.StreamHandler(sys.stderr)
    h.setFormatter(JsonFormatter())
    h._floodsens = True
    root.addHandler(h)
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    logging.getLogger("numba").setLevel(logging.WARNING)
    logging.getLogger("matplotlib").setLevel(logging.WARNING)


def write_provenance(out_dir, config: dict | None, command: str, extra: dict | None = None) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {"tool": "floodsens", "version": __version__, "command": command, "config": config}
    if extra:
        doc.update(extra)
    path = out_dir / PROVENANCE_NAME
    with open(path, "w") as fh:
        yaml.safe_dump(doc, fh, sort_keys=False)
    return path


def store_config(store) -> dict | None:
    """Resolved config recorded when the campaign in ``store`` was launched."""
    path = Path(store) / PROVENANCE_NAME
    if not path.exists():
        return None
    with open(path) as fh:
        doc = yaml.safe_load(fh) or {}
    return doc.get("config")


# ---------------------------------------------------------------------------
# stages

def gen_dems(cfg: PipelineConfig, out_dir=None, resume: bool = True, workers: int | None = None):
    out_dir = Path(out_dir) if out_dir is not None else cfg.dems_dir
    stack = FeatureStack.load(cfg.dtm, cfg.layers)
    manifest = build_database(stack, cfg.noise, cfg.r_factors, out_dir, s_levels=cfg.s_levels,
                              workers=workers or cfg.workers, resume=resume)
    write_provenance(out_dir, cfg.resolved(), "gen-dems")
    return manifest


def run_campaign(cfg: PipelineConfig, manifest_path, store, workers: int | None = None, progress=None):
    manifest = DemDatabaseManifest.load(manifest_path)
    if len(manifest) == 0:
        raise ValueError(f"no DEMs listed in {manifest_path}")
    plan = draw_plan(manifest, cfg.plan)
    store = Path(store)
    store.mkdir(parents=True, exist_ok=True)
    with open(store / "plan.json", "w") as fh:
        json.dump({"plan": vars(cfg.plan), "specs": [sp.as_tuple() for sp in plan]}, fh)
    write_provenance(store, cfg.resolved(), "run", {"manifest": str(Path(manifest_path).resolve())})
    return execute(plan, manifest, cfg.solver, cfg.boundaries, cfg.load_hydrograph(), store,
                   workers=workers or cfg.workers, initial=cfg.initial, progress=progress)


def convergence_report(store, probes_path, out_dir, seed: int = 0, window: int | None = None,
                       tol: float = 0.01, plots: bool = True) -> dict:
    probes = read_probes(probes_path)
    trace = convergence_trace(store, probes, order_seed=seed)
    n = int(trace.n[-1])
    window = window or max(2, int(round(0.1 * n)))
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "convergence.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["probe", "N", "mean", "var"])
        for pid, k, m, v in trace.rows():
            w.writerow([pid, k, repr(m), repr(v)])
    stab = {}
    with open(out_dir / "stabilization.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["probe", "N_star", "final_mean", "window", "tol"])
        for p, pid in enumerate(trace.probe_ids):
            ns = stabilization_N(trace.mean[p], window, tol)
            stab[pid] = ns
            w.writerow([pid, "" if ns is None else ns, repr(float(trace.mean[p, -1])), window, tol])
    if plots:
        from .plotting import save_convergence
        for p, pid in enumerate(trace.probe_ids):
            save_convergence(trace.n, trace.mean[p], trace.var[p], out_dir / f"convergence_{pid}.svg",
                             title=f"probe {pid}")
    write_provenance(out_dir, store_config(store), "convergence",
                     {"store": str(Path(store).resolve()), "seed": seed, "window": window, "tol": tol})
    return {"n": n, "window": window, "stabilization": stab, "trace": trace}


def footprint_mask(building_layer: Raster, header) -> np.ndarray:
    """Analysis cells more than half covered by building footprint."""
    cover = Raster(building_layer.header, building_layer.mask.astype(np.float64))
    frac = align_raster(cover, header, "average")
    return np.nan_to_num(frac) > 0.5


def analyze(store, probes_path, out_dir, cellsize: float = 5.0, method: str = "average",
            boot: int = 1000, boot_n=None, seed: int = 0, min_samples: int = 100,
            exclude_dry: bool = True, footprint_layer: Raster | None = None, wet_depth: float = 1e-3,
            bin_width: float = 0.05, bias_correct: bool = False, plots: bool = True,
            config: dict | None = None) -> dict:
    """Step D: UA rasters, Si maps, probe indices with bootstrap CIs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    probes = read_probes(probes_path)
    aligned = align_outputs(store, cellsize, method)
    kw = dict(bias_correct=bias_correct)
    ua = ua_stats(aligned, probes, bin_width=bin_width, wet_depth=wet_depth)
    fp = footprint_mask(footprint_layer, aligned.header) if footprint_layer is not None else None
    maps = sobol_maps(aligned, exclude_dry=exclude_dry, footprint=fp, min_samples=min_samples,
                      wet_depth=wet_depth, **kw)

    write_raster(ua.mean, out_dir / "mean.asc")
    write_raster(ua.variance, out_dir / "var.asc")
    for f in FACTORS:
        write_raster(maps.si[f], out_dir / f"si_{f}.asc")
    write_raster(maps.argmax, out_dir / "si_argmax.asc")

    ests = probe_estimates(aligned, probes, n_boot=boot, n_sub=boot_n, seed=seed, **kw)
    with open(out_dir / "probes_si.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        head = ["id", "label", "x", "y", "n_used", "mean", "var_y"]
        for f in FACTORS:
            head += [f"si_{f}", f"ci_lo_{f}", f"ci_hi_{f}", f"unreliable_{f}"]
        w.writerow(head + ["dip", "dip_threshold", "bimodal"])
        for (p, est), dist in zip(ests, ua.probes):
            y = dist.values[np.isfinite(dist.values)]
            row = [p.id, p.label, repr(p.x), repr(p.y), est.n_used, _num(y.mean() if y.size else np.nan),
                   _num(est.var_y)]
            for k in range(3):
                row += [_num(est.si[k]), _num(est.ci_low[k]), _num(est.ci_high[k]), int(est.ci_unreliable[k])]
            w.writerow(row + [_num(dist.dip), _num(dist.dip_threshold), int(dist.bimodal)])
    for dist in ua.probes:
        with open(out_dir / f"probe_{dist.id}_hist.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin_lo", "bin_hi", "count"])
            for lo, hi, c in zip(dist.edges[:-1], dist.edges[1:], dist.counts):
                w.writerow([repr(float(lo)), repr(float(hi)), int(c)])
    with open(out_dir / "si_hist.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["factor", "bin_lo", "bin_hi", "count"])
        for f, (edges, counts) in maps.histograms.items():
            for lo, hi, c in zip(edges[:-1], edges[1:], counts):
                w.writerow([f, repr(float(lo)), repr(float(hi)), int(c)])

    summary = {
        "n_samples": aligned.n,
        "analysis_cellsize": cellsize,
        "alignment": method,
        "area_fraction": maps.area_fraction,
        "bimodal_probes": [d.id for d in ua.probes if d.bimodal],
        "mean_si": {f: float(maps.si[f].values[maps.si[f].mask].mean()) if maps.si[f].mask.any() else None
                    for f in FACTORS},
    }
    with open(out_dir / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)

    if plots:
        from . import plotting as P
        P.save_map(ua.mean, out_dir / "mean.png", "Mean of maximum depth", label="m")
        P.save_map(ua.variance, out_dir / "var.png", "Variance of maximum depth", cmap="magma", label="m$^2$")
        for f in FACTORS:
            P.save_map(maps.si[f], out_dir / f"si_{f}.png", f"Si({f})", vmin=0, vmax=1, clamp=(0.0, 1.0))
        P.save_argmax_map(maps.argmax, out_dir / "si_argmax.png")
        P.save_si_histograms(maps.histograms, out_dir / "si_hist.png")
        levels = aligned.factors
        for dist in ua.probes:
            P.save_histogram(dist.edges, dist.counts, out_dir / f"probe_{dist.id}_hist.png",
                             "maximum depth (m)", f"probe {dist.id}" + (" (bimodal)" if dist.bimodal else ""))
        for p in probes:
            y = probe_series(aligned, p)
            ok = np.isfinite(y)
            if ok.sum() >= 2:
                n, si = si_convergence(levels[ok], y[ok], seed=seed, bias_correct=bias_correct)
                P.save_si_convergence(n, si, out_dir / f"si_convergence_{p.id}.svg", f"probe {p.id}")
    write_provenance(out_dir, config if config is not None else store_config(store), "analyze",
                     {"store": str(Path(store).resolve()), "cellsize": cellsize, "method": method,
                      "boot": boot, "boot_n": boot_n, "seed": seed})
    return {"summary": summary, "maps": maps, "ua": ua, "aligned": aligned, "probes": ests}


def _num(x):
    x = float(x)
    return repr(x) if np.isfinite(x) else ""


# ---------------------------------------------------------------------------
# argument handling

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="floodsens", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"floodsens {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-fixture", help="write the synthetic urban-valley study site")
    g.add_argument("--out", required=True)
    g.add_argument("--size", choices=("small", "medium"), default="small")
    g.add_argument("--seed", type=int, default=2015)

    g = sub.add_parser("gen-dems", help="build the (S, E, R) DEM database")
    g.add_argument("--config", required=True)
    g.add_argument("--out")
    g.add_argument("--resume", action="store_true", help="keep DEMs already listed in the manifest")
    g.add_argument("--workers", type=int)

    g = sub.add_parser("run", help="run the simulation campaign")
    g.add_argument("--manifest", required=True)
    g.add_argument("--plan", required=True, help="pipeline config holding plan, solver and boundaries")
    g.add_argument("--store", required=True)
    g.add_argument("--workers", type=int)

    g = sub.add_parser("convergence", help="running mean/variance at probes")
    g.add_argument("--store", required=True)
    g.add_argument("--probes", required=True)
    g.add_argument("--out")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--window", type=int)
    g.add_argument("--tol", type=float, default=0.01)
    g.add_argument("--no-plots", action="store_true")

    g = sub.add_parser("analyze", help="UA and Sobol-index maps")
    g.add_argument("--store", required=True)
    g.add_argument("--probes", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--config", help="pipeline config supplying analysis defaults and the building layer")
    g.add_argument("--cellsize", type=float)
    g.add_argument("--method", choices=("average", "nearest"))
    g.add_argument("--boot", type=int)
    g.add_argument("--boot-n", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--min-samples", type=int)
    g.add_argument("--exclude-buildings", action="store_true")
    g.add_argument("--no-plots", action="store_true")

    g = sub.add_parser("validate", help="check a pipeline config")
    g.add_argument("--config", required=True)
    return p


def _progress(i, n, rec):
    print(f"[{i}/{n}] {rec.spec.key} {rec.status} {rec.wall_seconds:.1f}s", flush=True)


def _dispatch(args) -> int:
    cmd = args.command
    if cmd == "gen-fixture":
        fx = demo_fixture(args.size, args.seed)
        paths = fx.write(args.out)
        write_provenance(args.out, None, "gen-fixture", {"size": args.size, "seed": args.seed})
        print(f"fixture written to {args.out} ({fx.header.nrows}x{fx.header.ncols} cells)")
        print(f"config: {paths['config']}")
        return 0
    if cmd == "validate":
        cfg = validate_config(args.config)
        print(f"{args.config}: OK ({len(cfg.s_levels)} S x {cfg.noise.n_draws} E x {len(cfg.r_factors)} R "
              f"= {cfg.design_size} DEMs, budget {cfg.plan.budget})")
        return 0
    if cmd == "gen-dems":
        cfg = validate_config(args.config)
        m = gen_dems(cfg, args.out, resume=args.resume, workers=args.workers)
        print(f"{len(m)} DEMs listed in {m.root / 'manifest.jsonl'}")
        return 0
    if cmd == "run":
        cfg = validate_config(args.plan)
        summary = run_campaign(cfg, args.manifest, args.store, args.workers, progress=_progress)
        print(json.dumps(summary))
        return 2 if summary["failed"] else 0
    if cmd == "convergence":
        out = Path(args.out) if args.out else Path(args.store) / "convergence"
        rep = convergence_report(args.store, args.probes, out, args.seed, args.window, args.tol,
                                 plots=not args.no_plots)
        for pid, ns in rep["stabilization"].items():
            print(f"probe {pid}: N* = {ns if ns is not None else 'not stabilized'}")
        return 0
    if cmd == "analyze":
        opts, footprint, config = {}, None, None
        if args.config:
            cfg = validate_config(args.config)
            a = cfg.analysis
            opts = dict(cellsize=a.cellsize, method=a.method, boot=a.boot, boot_n=a.boot_n, seed=a.seed,
                        min_samples=a.min_samples, exclude_dry=a.exclude_dry, wet_depth=a.wet_depth,
                        bin_width=a.bin_width, bias_correct=a.bias_correct)
            config = cfg.resolved()
            if a.exclude_buildings or args.exclude_buildings:
                footprint = _building_layer(cfg)
        elif args.exclude_buildings:
            raise UsageError("--exclude-buildings needs --config to locate the building layer")
        for key in ("cellsize", "method", "boot", "boot_n", "seed", "min_samples"):
            v = getattr(args, key)
            if v is not None:
                opts[key] = v
        res = analyze(args.store, args.probes, args.out, footprint_layer=footprint,
                      plots=not args.no_plots, config=config, **opts)
        print(json.dumps(res["summary"], sort_keys=True))
        return 0
    raise UsageError(f"unknown command {cmd}")  # pragma: no cover


def _building_layer(cfg):
    from .raster import read_raster
    if "buildings" not in cfg.layers:
        raise UsageError("config has no buildings layer")
    return read_raster(cfg.layers["buildings"])


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"floodsens: error: {exc}", file=sys.stderr)
        return 1
    setup_logging(args.verbose)
    try:
        return _dispatch(args)
    except ConfigError as exc:
        for d in exc.diagnostics:
            log.error(d)
            print(f"invalid: {d}")
        return 1
    except (UsageError, FileNotFoundError, RasterFormatError) as exc:
        log.error(str(exc))
        return 1
    except Exception as exc:  # noqa: BLE001
        log.exception("runtime failure: %s", exc)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
