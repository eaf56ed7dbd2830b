"""Factorial DEM database: feature detail level x measurement error x resolution.

Every ensemble member is identified by a :class:`DemSpec` ``(s, e, r)``:
``s`` the number of feature layers stacked on the bare terrain plus one,
``e`` the index of the Gaussian error draw, ``r`` the coarsening factor.
Noise is added on the finest grid, then the noisy surface is block-averaged
to each coarser resolution.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .raster import Raster, RasterHeader, read_raster, resample_average, write_raster

log = logging.getLogger(__name__)

LAYER_ORDER = ("buildings", "walls", "thin_structures")
MANIFEST_NAME = "manifest.jsonl"
# elevations are stored rounded to the micrometre so files stay compact and round-trip exactly
DECIMALS = 6


@dataclass(frozen=True, order=True)
class DemSpec:
    s: int
    e: int
    r: int

    @property
    def key(self) -> str:
        return f"{self.s}_{self.e}_{self.r}"

    def as_tuple(self):
        return (self.s, self.e, self.r)


@dataclass(frozen=True)
class NoiseSpec:
    sigma: float = 0.2
    n_draws: int = 100
    master_seed: int = 0

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")
        if self.n_draws < 2:
            raise ValueError(f"n_draws must be >= 2, got {self.n_draws}")


@dataclass
class FeatureStack:
    """Bare terrain plus ordered feature layers of elevation increments.

    Layer cells are nodata where the feature is absent.
    """

    dtm: Raster
    layers: list  # of (name, Raster)

    def __post_init__(self):
        for name, layer in self.layers:
            if layer.header != self.dtm.header:
                raise ValueError(f"layer {name!r} header does not match the terrain header")
            inc = layer.values[layer.mask]
            if not np.all(np.isfinite(inc)) or np.any(inc < 0):
                raise ValueError(f"layer {name!r} has negative or non-finite increments")

    @property
    def max_level(self) -> int:
        return len(self.layers) + 1

    @classmethod
    def load(cls, dtm_path, layer_paths: dict) -> "FeatureStack":
        dtm = read_raster(dtm_path)
        names = [n for n in LAYER_ORDER if n in layer_paths] + \
                [n for n in layer_paths if n not in LAYER_ORDER]
        return cls(dtm, [(n, read_raster(layer_paths[n])) for n in names])


def compose_surface(stack: FeatureStack, s_level: int) -> Raster:
    """Terrain raised by the first ``s_level - 1`` layers.

    Where several layers cover a cell the largest increment wins.
    """
    if not 1 <= s_level <= stack.max_level:
        raise ValueError(f"s_level must be in 1..{stack.max_level}, got {s_level}")
    raise_by = np.zeros(stack.dtm.values.shape)
    for _, layer in stack.layers[: s_level - 1]:
        inc = np.where(layer.mask, layer.values, 0.0)
        np.maximum(raise_by, inc, out=raise_by)
    out = stack.dtm.values + raise_by
    out[~stack.dtm.mask] = stack.dtm.header.nodata
    return Raster(stack.dtm.header, out)


def _philox(spec: NoiseSpec, e_draw: int) -> np.random.Philox:
    return np.random.Philox(key=[spec.master_seed & 0xFFFFFFFFFFFFFFFF, int(e_draw)])


def _gaussian(words: np.ndarray, sigma: float) -> np.ndarray:
    # Box-Muller on two 53-bit uniforms per cell; u1 in (0, 1] so log is finite
    u1 = ((words[:, 0] >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0 ** -53
    u2 = (words[:, 1] >> np.uint64(11)).astype(np.float64) * 2.0 ** -53
    return sigma * np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


def generate_noise(spec: NoiseSpec, header: RasterHeader, e_draw: int) -> Raster:
    """i.i.d. N(0, sigma) per cell, a pure function of (master_seed, e_draw, cell).

    Cell ``k`` (row-major) uses counter block ``k`` of a Philox generator keyed
    on ``(master_seed, e_draw)``, so any single cell can be regenerated alone
    with :func:`noise_cell`.
    """
    if not 0 <= e_draw < spec.n_draws:
        raise ValueError(f"e_draw must be in [0, {spec.n_draws}), got {e_draw}")
    n = header.ncols * header.nrows
    words = _philox(spec, e_draw).random_raw(4 * n).reshape(n, 4)
    return Raster(header, _gaussian(words, spec.sigma))


def noise_cell(spec: NoiseSpec, header: RasterHeader, e_draw: int, row: int, col: int) -> float:
    bg = _philox(spec, e_draw)
    bg.advance(row * header.ncols + col)
    return float(_gaussian(bg.random_raw(4).reshape(1, 4), spec.sigma)[0])


# ---------------------------------------------------------------------------
# database

def dem_filename(spec: DemSpec) -> str:
    return f"dem_s{spec.s}_e{spec.e:03d}_r{spec.r}.asc"


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass(frozen=True)
class ManifestEntry:
    spec: DemSpec
    path: str  # relative to the manifest directory
    sha256: str
    cellsize: float

    def to_json(self) -> str:
        return json.dumps({"s": self.spec.s, "e": self.spec.e, "r": self.spec.r, "path": self.path,
                           "sha256": self.sha256, "cellsize": self.cellsize}, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ManifestEntry":
        return cls(DemSpec(int(d["s"]), int(d["e"]), int(d["r"])), d["path"], d["sha256"],
                   float(d["cellsize"]))


class DemDatabaseManifest:
    """Index of a DEM database, one JSON line per DEM."""

    def __init__(self, root, entries=()):
        self.root = Path(root)
        self._entries = {}
        for e in entries:
            self._entries[e.spec] = e

    @property
    def entries(self) -> list:
        return [self._entries[k] for k in sorted(self._entries)]

    def specs(self) -> list:
        return sorted(self._entries)

    def __len__(self):
        return len(self._entries)

    def __contains__(self, spec):
        return spec in self._entries

    def __getitem__(self, spec) -> ManifestEntry:
        return self._entries[spec]

    def path_of(self, spec: DemSpec) -> Path:
        return self.root / self._entries[spec].path

    def levels(self):
        specs = self.specs()
        return (sorted({s.s for s in specs}), sorted({s.e for s in specs}), sorted({s.r for s in specs}))

    @classmethod
    def load(cls, path) -> "DemDatabaseManifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        entries = []
        if path.exists():
            with open(path) as fh:
                for line in fh:
                    line = line.strip()
                    if not line:
                        continue
                    try:
                        entries.append(ManifestEntry.from_dict(json.loads(line)))
                    except (json.JSONDecodeError, KeyError):
                        log.warning("skipping malformed manifest line in %s", path)
        return cls(path.parent, entries)

    def write(self, path=None) -> Path:
        """Rewrite the manifest in canonical (s, e, r) order."""
        path = Path(path) if path is not None else self.root / MANIFEST_NAME
        tmp = path.with_suffix(".tmp")
        with open(tmp, "w") as fh:
            for e in self.entries:
                fh.write(e.to_json() + "\n")
        os.replace(tmp, path)
        return path

    def verify(self, spec: DemSpec) -> bool:
        p = self.path_of(spec)
        return p.exists() and sha256_file(p) == self._entries[spec].sha256


def _build_one(stack: FeatureStack, noise: NoiseSpec, s: int, e: int, r_factors, out_dir: Path):
    surface = compose_surface(stack, s)
    eps = generate_noise(noise, surface.header, e)
    fine = np.round(surface.values + eps.values, DECIMALS)
    fine[~surface.mask] = surface.header.nodata
    fine = Raster(surface.header, fine)
    out = []
    for r in sorted(r_factors):
        dem = resample_average(fine, r)
        if r > 1:
            vals = np.where(dem.mask, np.round(dem.values, DECIMALS), dem.header.nodata)
            dem = Raster(dem.header, vals)
        spec = DemSpec(s, e, r)
        name = dem_filename(spec)
        write_raster(dem, out_dir / name)
        out.append(ManifestEntry(spec, name, sha256_file(out_dir / name), dem.header.cellsize))
    return out


def build_database(stack: FeatureStack, noise: NoiseSpec, r_factors, out_dir, s_levels=None,
                   workers: int = 1, resume: bool = True) -> DemDatabaseManifest:
    """Write every (s, e, r) DEM plus ``manifest.jsonl`` into ``out_dir``.

    With ``resume`` the existing manifest is read first and any (s, e) whose
    DEMs are all present with matching digests is skipped.  Entries are
    appended as each (s, e) finishes and the manifest is rewritten in sorted
    order at the end, so the final file does not depend on ``workers``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    s_levels = sorted(s_levels) if s_levels is not None else list(range(1, stack.max_level + 1))
    r_factors = sorted(set(int(r) for r in r_factors))
    if any(r < 1 for r in r_factors):
        raise ValueError("resolution factors must be >= 1")
    for s in s_levels:
        if not 1 <= s <= stack.max_level:
            raise ValueError(f"s level {s} outside 1..{stack.max_level}")
    manifest_path = out_dir / MANIFEST_NAME
    manifest = DemDatabaseManifest.load(manifest_path) if resume else DemDatabaseManifest(out_dir)
    if not resume and manifest_path.exists():
        manifest_path.unlink()

    todo = []
    for s in s_levels:
        for e in range(noise.n_draws):
            specs = [DemSpec(s, e, r) for r in r_factors]
            if all(sp in manifest and manifest.verify(sp) for sp in specs):
                continue
            todo.append((s, e))
    log.info("building %d surfaces x %d resolutions (%d already present)",
             len(todo), len(r_factors), len(s_levels) * noise.n_draws - len(todo))

    def record(entries, fh):
        for ent in entries:
            manifest._entries[ent.spec] = ent
            fh.write(ent.to_json() + "\n")
        fh.flush()

    with open(manifest_path, "a") as fh:
        if workers <= 1:
            for s, e in todo:
                record(_build_one(stack, noise, s, e, r_factors, out_dir), fh)
        else:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                futures = [pool.submit(_build_one, stack, noise, s, e, r_factors, out_dir)
                           for s, e in todo]
                for fut in futures:
                    record(fut.result(), fh)
    manifest.write(manifest_path)
    return manifest
