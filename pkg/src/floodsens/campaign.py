"""Monte-Carlo campaign: sample DEM specs, run the solver, persist Y(x).

Store layout::

    store/records.jsonl                one RunRecord per line, append-only
    store/results/<s>_<e>_<r>.asc      maximum-depth raster of each run

The record log has a single writer (the process calling :func:`execute`) and
every line is flushed and fsync'ed before the next run is dispatched, so a
reader sees a consistent prefix and a killed campaign resumes where it
stopped.
"""

from __future__ import annotations

import json
import logging
import os
import time
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ensemble import DemDatabaseManifest, DemSpec, sha256_file
from .fixture import read_probes
from .raster import read_raster, sample_at, write_raster
from .swe import BoundarySpec, Hydrograph, SolverConfig, run_simulation

log = logging.getLogger(__name__)

RECORDS_NAME = "records.jsonl"
RESULTS_DIR = "results"
STRATEGIES = ("stratified", "uniform")


@dataclass(frozen=True)
class SamplingPlan:
    """How to pick ``budget`` DEMs from the database.

    ``stratified`` first draws ``min_e_per_sr`` error draws for every
    (S, R) pair, then fills the rest of the budget uniformly;
    ``uniform`` samples the whole database without replacement.
    """

    budget: int
    strategy: str = "stratified"
    min_e_per_sr: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.budget < 0 or self.min_e_per_sr < 0:
            raise ValueError("budget and min_e_per_sr must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "SamplingPlan":
        return cls(int(d["budget"]), d.get("strategy", "stratified"),
                   int(d.get("min_e_per_sr", 50)), int(d.get("seed", 0)))


def draw_plan(manifest, plan: SamplingPlan) -> list:
    """Ordered list of DemSpec to simulate; a pure function of (manifest, plan)."""
    specs = manifest.specs() if isinstance(manifest, DemDatabaseManifest) else sorted(manifest)
    if plan.budget > len(specs):
        raise ValueError(f"budget {plan.budget} exceeds the database size {len(specs)}")
    rng = np.random.default_rng(plan.seed)
    if plan.strategy == "uniform":
        idx = rng.permutation(len(specs))[: plan.budget]
        return [specs[i] for i in idx]

    cells = defaultdict(list)
    for sp in specs:
        cells[(sp.s, sp.r)].append(sp)
    floor = plan.min_e_per_sr * len(cells)
    if floor > plan.budget:
        raise ValueError(f"infeasible floor: {plan.min_e_per_sr} draws x {len(cells)} (S, R) pairs "
                         f"= {floor} > budget {plan.budget}")
    chosen = []
    for key in sorted(cells):
        group = cells[key]
        if len(group) < plan.min_e_per_sr:
            raise ValueError(f"infeasible floor: (S, R) = {key} has only {len(group)} error draws")
        pick = rng.choice(len(group), plan.min_e_per_sr, replace=False)
        chosen.extend(group[i] for i in sorted(pick))
    taken = set(chosen)
    rest = [sp for sp in specs if sp not in taken]
    extra = rng.choice(len(rest), plan.budget - len(chosen), replace=False)
    chosen.extend(rest[i] for i in extra)
    order = rng.permutation(len(chosen))
    return [chosen[i] for i in order]


# ---------------------------------------------------------------------------
# records

@dataclass(frozen=True)
class RunRecord:
    spec: DemSpec
    result_path: str  # relative to the store
    status: str  # "done" | "failed"
    wall_seconds: float
    digest: str = ""
    error: str = ""
    summary: dict = field(default_factory=dict, compare=False)

    def to_json(self) -> str:
        return json.dumps({"s": self.spec.s, "e": self.spec.e, "r": self.spec.r,
                           "result_path": self.result_path, "status": self.status,
                           "wall_seconds": self.wall_seconds, "digest": self.digest,
                           "error": self.error, "summary": self.summary}, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        return cls(DemSpec(int(d["s"]), int(d["e"]), int(d["r"])), d["result_path"], d["status"],
                   float(d["wall_seconds"]), d.get("digest", ""), d.get("error", ""),
                   d.get("summary", {}))


def result_name(spec: DemSpec) -> str:
    return f"{RESULTS_DIR}/{spec.s}_{spec.e}_{spec.r}.asc"


def load_records(store, verify: bool = False) -> list:
    """Latest record per spec, sorted by spec.

    A trailing partial line (a writer killed mid-append) is ignored.  With
    ``verify`` a done record whose result file is missing or whose digest
    differs is dropped.
    """
    store = Path(store)
    path = store / RECORDS_NAME
    latest = {}
    if path.exists():
        with open(path) as fh:
            for line in fh:
                if not line.endswith("\n"):
                    break
                try:
                    rec = RunRecord.from_dict(json.loads(line))
                except (json.JSONDecodeError, KeyError, ValueError):
                    log.warning("skipping malformed record line in %s", path)
                    continue
                # a done record is never superseded by a later failure of the same spec
                if rec.spec in latest and latest[rec.spec].status == "done" and rec.status != "done":
                    continue
                latest[rec.spec] = rec
    out = []
    for spec in sorted(latest):
        rec = latest[spec]
        if verify and rec.status == "done":
            p = store / rec.result_path
            if not p.exists() or sha256_file(p) != rec.digest:
                log.warning("result for %s missing or corrupt; it will be re-run", spec.key)
                continue
        out.append(rec)
    return out


def done_records(store, verify: bool = False) -> list:
    return [r for r in load_records(store, verify) if r.status == "done"]


def _drop_torn_tail(path: Path) -> None:
    """Cut a partial last line left by a killed writer, so appends start on a fresh line."""
    if not path.exists():
        return
    with open(path, "rb+") as fh:
        data = fh.read()
        if data and not data.endswith(b"\n"):
            log.warning("discarding a partial record at the end of %s", path)
            fh.truncate(data.rfind(b"\n") + 1)


def _append(fh, rec: RunRecord) -> None:
    fh.write(rec.to_json() + "\n")
    fh.flush()
    os.fsync(fh.fileno())


def _run_one(spec: DemSpec, dem_path: str, store: str, solver: dict, bc: dict, hydro,
             initial: str) -> RunRecord:
    t0 = time.perf_counter()
    rel = result_name(spec)
    try:
        dem = read_raster(dem_path)
        hydrograph = Hydrograph(*hydro) if hydro is not None else None
        res = run_simulation(dem, SolverConfig.from_dict(solver), BoundarySpec.from_dict(bc),
                             hydrograph, initial=initial)
        out = Path(store) / rel
        write_raster(res.max_depth, out)
        summary = {k: (float(v) if isinstance(v, (int, float, np.floating)) and not isinstance(v, bool)
                       else v) for k, v in res.summary.items()}
        return RunRecord(spec, rel, "done", time.perf_counter() - t0, sha256_file(out), "", summary)
    except Exception as exc:  # noqa: BLE001 - a failed run must not abort the campaign
        return RunRecord(spec, rel, "failed", time.perf_counter() - t0, "", f"{type(exc).__name__}: {exc}")


def execute(plan, manifest: DemDatabaseManifest, solver_config: SolverConfig, bc: BoundarySpec,
            hydrograph: Hydrograph | None, store, workers: int = 1, initial: str = "steady",
            progress=None) -> dict:
    """Simulate every spec of ``plan`` not already done in ``store``.

    Failed runs are logged with status ``failed`` and retried on the next
    call.  ``progress(i, n, record)`` is called after each run.
    """
    store = Path(store)
    (store / RESULTS_DIR).mkdir(parents=True, exist_ok=True)
    plan = list(plan)
    if len(set(plan)) != len(plan):
        raise ValueError("plan contains duplicate specs")
    missing = [sp for sp in plan if sp not in manifest]
    if missing:
        raise ValueError(f"{len(missing)} planned specs are not in the DEM database, e.g. {missing[0].key}")
    done = {r.spec for r in done_records(store, verify=True)}
    todo = [sp for sp in plan if sp not in done]
    log.info("campaign: %d planned, %d already done, %d to run", len(plan), len(plan) - len(todo), len(todo))

    solver = {k: getattr(solver_config, k) for k in solver_config.__dataclass_fields__}
    bcd = bc.to_dict()
    hydro = (hydrograph.times, hydrograph.discharges) if hydrograph is not None else None
    args = [(sp, str(manifest.path_of(sp)), str(store), solver, bcd, hydro, initial) for sp in todo]

    counts = {"done": 0, "failed": 0}
    run_seconds = 0.0
    t0 = time.perf_counter()
    _drop_torn_tail(store / RECORDS_NAME)
    with open(store / RECORDS_NAME, "a") as fh:
        def finish(i, rec):
            nonlocal run_seconds
            _append(fh, rec)
            counts[rec.status] += 1
            run_seconds += rec.wall_seconds
            if rec.status == "failed":
                log.warning("run %s failed: %s", rec.spec.key, rec.error)
            if progress is not None:
                progress(i, len(todo), rec)

        if workers <= 1 or len(todo) <= 1:
            for i, a in enumerate(args, 1):
                finish(i, _run_one(*a))
        else:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                futures = [pool.submit(_run_one, *a) for a in args]
                for i, fut in enumerate(as_completed(futures), 1):
                    finish(i, fut.result())
    return {
        "planned": len(plan),
        "skipped": len(plan) - len(todo),
        "ran": len(todo),
        "done": counts["done"] + len(plan) - len(todo),
        "failed": counts["failed"],
        "run_seconds": run_seconds,
        "elapsed_seconds": time.perf_counter() - t0,
    }


# ---------------------------------------------------------------------------
# convergence monitoring

@dataclass
class ConvergenceTrace:
    """Running mean and variance of Y at each probe as samples accumulate."""

    probe_ids: list
    n: np.ndarray  # (N,)
    mean: np.ndarray  # (n_probes, N)
    var: np.ndarray  # (n_probes, N), unbiased; 0 at N = 1
    values: np.ndarray  # (n_probes, N) the samples in trace order
    order: list  # specs in trace order

    def rows(self):
        for p, pid in enumerate(self.probe_ids):
            for k, n in enumerate(self.n):
                yield pid, int(n), float(self.mean[p, k]), float(self.var[p, k])


def running_stats(values) -> tuple[np.ndarray, np.ndarray]:
    """Welford streaming mean and unbiased variance of a 1-D series."""
    values = np.asarray(values, dtype=np.float64)
    mean = np.empty(values.size)
    var = np.empty(values.size)
    m, m2 = 0.0, 0.0
    for k, y in enumerate(values, 1):
        d = y - m
        m += d / k
        m2 += d * (y - m)
        mean[k - 1] = m
        var[k - 1] = m2 / (k - 1) if k > 1 else 0.0
    return mean, var


def probe_values(store, records, probes) -> np.ndarray:
    """(n_probes, n_records) maximum depths sampled at the probe cells."""
    store = Path(store)
    out = np.empty((len(probes), len(records)))
    for j, rec in enumerate(records):
        r = read_raster(store / rec.result_path)
        for p, pr in enumerate(probes):
            try:
                v = sample_at(r, pr.x, pr.y)
            except ValueError:
                raise ValueError(f"probe {pr.id} at ({pr.x}, {pr.y}) lies outside result "
                                 f"{rec.result_path}") from None
            out[p, j] = np.nan if v == r.header.nodata else v
    return out


def convergence_trace(store, probes, order_seed: int = 0) -> ConvergenceTrace:
    """Running statistics over a seeded random permutation of the done records."""
    if isinstance(probes, (str, Path)):
        probes = read_probes(probes)
    records = done_records(store)
    if len(records) < 2:
        raise ValueError(f"need at least 2 done records, found {len(records)}")
    perm = np.random.default_rng(order_seed).permutation(len(records))
    records = [records[i] for i in perm]
    vals = probe_values(store, records, probes)
    means, varis = zip(*(running_stats(v) for v in vals))
    return ConvergenceTrace([p.id for p in probes], np.arange(1, len(records) + 1),
                            np.array(means), np.array(varis), vals, [r.spec for r in records])


def stabilization_N(trace, window: int, tol: float = 0.01, atol: float = 1e-3):
    """First N from which the running mean stays within the final band.

    The band is ``final +- tol*|final|``, or ``final +- atol`` (metres) when
    the final mean is zero.  N* is the smallest N >= window such that every
    running mean from N - window + 1 to the end of the trace lies in the
    band; None when the in-band tail is shorter than ``window``.
    """
    m = np.asarray(trace, dtype=np.float64)
    if window < 1:
        raise ValueError("window must be >= 1")
    if m.size < window:
        raise ValueError(f"trace length {m.size} is shorter than the window {window}")
    final = m[-1]
    band = tol * abs(final) if final != 0 else atol
    outside = np.nonzero(np.abs(m - final) > band)[0]
    start = outside[-1] + 1 if outside.size else 0  # 0-based index where the in-band tail begins
    tail = m.size - start
    if tail < window:
        return None
    return int(start + window)
