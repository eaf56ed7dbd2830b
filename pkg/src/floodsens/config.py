"""Pipeline configuration: one YAML file drives every stage.

Relative paths are resolved against the directory holding the config file.
:func:`validate_config` collects every problem it finds, each prefixed with
the dotted path of the offending field, instead of stopping at the first.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .campaign import SamplingPlan
from .ensemble import LAYER_ORDER, NoiseSpec
from .fixture import read_probes
from .raster import RasterFormatError, read_raster
from .swe import BoundarySpec, Hydrograph, SolverConfig

INITIAL_KINDS = ("dry", "steady")


class ConfigError(ValueError):
    def __init__(self, diagnostics):
        self.diagnostics = list(diagnostics)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.diagnostics))


@dataclass(frozen=True)
class AnalysisOptions:
    cellsize: float = 5.0
    method: str = "average"
    boot: int = 1000
    boot_n: int | None = None
    min_samples: int = 100
    exclude_buildings: bool = False
    exclude_dry: bool = True
    wet_depth: float = 1e-3
    bin_width: float = 0.05
    bias_correct: bool = False
    seed: int = 0


@dataclass
class PipelineConfig:
    path: Path
    dtm: Path
    layers: dict  # name -> Path
    s_levels: list
    r_factors: list
    noise: NoiseSpec
    solver: SolverConfig
    initial: str
    boundaries: BoundarySpec
    hydrograph: Path | None
    plan: SamplingPlan
    probes: Path
    analysis: AnalysisOptions
    dems_dir: Path
    store_dir: Path
    analysis_dir: Path
    workers: int = 1
    raw: dict = field(default_factory=dict, repr=False)

    @property
    def base_dir(self) -> Path:
        return self.path.parent

    @property
    def design_size(self) -> int:
        return len(self.s_levels) * self.noise.n_draws * len(self.r_factors)

    def load_hydrograph(self):
        return Hydrograph.read_csv(self.hydrograph) if self.hydrograph is not None else None

    def resolved(self) -> dict:
        """The config with every path made absolute, for provenance copies."""
        out = dict(self.raw)
        out["stack"] = {"dtm": str(self.dtm), "layers": {k: str(v) for k, v in self.layers.items()}}
        out["hydrograph"] = str(self.hydrograph) if self.hydrograph is not None else None
        out["probes"] = str(self.probes)
        out["paths"] = {"dems": str(self.dems_dir), "store": str(self.store_dir),
                        "analysis": str(self.analysis_dir)}
        return out


def load_yaml(path) -> dict:
    with open(path) as fh:
        try:
            data = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError([f"<file>: not valid YAML ({exc})"]) from None
    if not isinstance(data, dict):
        raise ConfigError(["<file>: top level must be a mapping"])
    return data


def validate_config(path) -> PipelineConfig:
    """Parse and check a pipeline config.  Raises ConfigError listing all violations.

    An unreadable file raises OSError.
    """
    path = Path(path).resolve()
    raw = load_yaml(path)
    base = path.parent
    diags = []

    def err(where, msg):
        diags.append(f"{where}: {msg}")

    def resolve(p):
        p = Path(p)
        return p if p.is_absolute() else (base / p).resolve()

    # --- stack
    stack = raw.get("stack") or {}
    dtm = layers = None
    if not isinstance(stack, dict) or "dtm" not in stack:
        err("stack.dtm", "missing")
    else:
        dtm = resolve(stack["dtm"])
        if not dtm.exists():
            err("stack.dtm", f"file not found: {dtm}")
        layers = {}
        for name, p in (stack.get("layers") or {}).items():
            if name not in LAYER_ORDER:
                err(f"stack.layers.{name}", f"unknown layer; expected one of {list(LAYER_ORDER)}")
            layers[name] = resolve(p)
            if not layers[name].exists():
                err(f"stack.layers.{name}", f"file not found: {layers[name]}")
    n_layers = len(layers or {})

    s_levels = _int_list(raw.get("s_levels", list(range(1, n_layers + 2))), "s_levels", err)
    for s in s_levels:
        if not 1 <= s <= n_layers + 1:
            err("s_levels", f"level {s} outside 1..{n_layers + 1} for {n_layers} layers")
    r_factors = _int_list(raw.get("r_factors", [1]), "r_factors", err)
    if any(r < 1 for r in r_factors):
        err("r_factors", "factors must be >= 1")

    noise = _build(NoiseSpec, raw.get("noise", {}), "noise", err)
    solver = _build(SolverConfig, raw.get("solver", {}), "solver", err)

    initial = raw.get("initial", "steady")
    if initial not in INITIAL_KINDS:
        err("initial", f"must be one of {list(INITIAL_KINDS)}, got {initial!r}")

    boundaries = None
    try:
        boundaries = BoundarySpec.from_dict(raw.get("boundaries") or {})
    except (ValueError, TypeError, AttributeError) as exc:
        err("boundaries", str(exc))

    hydro_path = None
    if raw.get("hydrograph") is not None:
        hydro_path = resolve(raw["hydrograph"])
        if not hydro_path.exists():
            err("hydrograph", f"file not found: {hydro_path}")
        else:
            try:
                Hydrograph.read_csv(hydro_path)
            except (ValueError, OSError) as exc:
                err("hydrograph", str(exc))

    plan = None
    try:
        plan = SamplingPlan.from_dict(raw.get("plan") or {})
    except (KeyError, ValueError, TypeError) as exc:
        err("plan", f"invalid sampling plan ({exc})")
    if plan is not None and noise is not None:
        design = len(s_levels) * noise.n_draws * len(r_factors)
        if plan.budget > design:
            err("plan.budget", f"budget exceeds design size ({plan.budget} > {design})")
        if plan.strategy == "stratified":
            floor = plan.min_e_per_sr * len(s_levels) * len(r_factors)
            if floor > plan.budget:
                err("plan.min_e_per_sr", f"stratified floor {floor} exceeds the budget {plan.budget}")
            if plan.min_e_per_sr > noise.n_draws:
                err("plan.min_e_per_sr", f"floor {plan.min_e_per_sr} exceeds n_draws {noise.n_draws}")

    probes = None
    if raw.get("probes") is None:
        err("probes", "missing")
    else:
        probes = resolve(raw["probes"])
        if not probes.exists():
            err("probes", f"file not found: {probes}")
        else:
            try:
                plist = read_probes(probes)
                if dtm is not None and dtm.exists():
                    h = read_raster(dtm).header
                    for p in plist:
                        if not (h.xll <= p.x <= h.xmax and h.yll <= p.y <= h.ytop):
                            err("probes", f"probe {p.id} at ({p.x}, {p.y}) outside the terrain extent")
            except (ValueError, RasterFormatError) as exc:
                err("probes", str(exc))

    analysis = _build(AnalysisOptions, raw.get("analysis", {}), "analysis", err)
    if analysis is not None:
        if not analysis.cellsize > 0:
            err("analysis.cellsize", "must be > 0")
        if analysis.method not in ("average", "nearest"):
            err("analysis.method", f"must be 'average' or 'nearest', got {analysis.method!r}")
        if analysis.boot < 0:
            err("analysis.boot", "must be >= 0")
        if analysis.boot_n is not None and plan is not None and analysis.boot_n > plan.budget:
            err("analysis.boot_n", f"resample size {analysis.boot_n} exceeds the budget {plan.budget}")

    paths = raw.get("paths") or {}
    workers = raw.get("workers", 1)
    if not isinstance(workers, int) or workers < 1:
        err("workers", f"must be a positive integer, got {workers!r}")

    if diags:
        raise ConfigError(diags)
    return PipelineConfig(
        path=path, dtm=dtm, layers=layers, s_levels=sorted(s_levels), r_factors=sorted(r_factors),
        noise=noise, solver=solver, initial=initial, boundaries=boundaries, hydrograph=hydro_path,
        plan=plan, probes=probes, analysis=analysis,
        dems_dir=resolve(paths.get("dems", "dems")), store_dir=resolve(paths.get("store", "store")),
        analysis_dir=resolve(paths.get("analysis", "analysis")), workers=workers, raw=raw,
    )


def _int_list(value, where, err) -> list:
    if not isinstance(value, (list, tuple)) or not value:
        err(where, "must be a non-empty list of integers")
        return []
    out = []
    for v in value:
        if isinstance(v, bool) or not isinstance(v, int):
            err(where, f"{v!r} is not an integer")
        else:
            out.append(v)
    if len(set(out)) != len(out):
        err(where, "duplicate entries")
    return out


def _build(cls, section, where, err):
    if not isinstance(section, dict):
        err(where, "must be a mapping")
        return None
    unknown = sorted(set(section) - set(cls.__dataclass_fields__))
    for k in unknown:
        err(f"{where}.{k}", "unknown field")
    try:
        return cls(**{k: v for k, v in section.items() if k in cls.__dataclass_fields__})
    except (TypeError, ValueError) as exc:
        err(where, str(exc))
        return None
