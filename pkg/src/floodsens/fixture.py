"""Procedural urban-valley terrain used as a stand-in study site.

A straight trapezoidal river runs west to east through the middle of the
domain.  The southern floodplain is a dense block grid (buildings, garden
and flood walls, sidewalks and curbs); the northern floodplain is open with a
few large buildings.  Discharge enters through the channel section of the
west edge and leaves through a zero-gradient east edge.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .ensemble import FeatureStack, LAYER_ORDER
from .raster import Raster, RasterHeader, write_raster
from .swe import BoundarySpec, EdgeCondition, Hydrograph

SIZES = {"small": 200, "medium": 400}

BED_SLOPE = 0.0005
CHANNEL_HALF_BOTTOM = 10.0
BANK_WIDTH = 4.0
CHANNEL_DEPTH = 2.5
BASE_Q = 40.0
PEAK_Q = 300.0


@dataclass(frozen=True)
class Probe:
    id: str
    x: float
    y: float
    label: str = ""


@dataclass
class Fixture:
    stack: FeatureStack
    hydrograph: Hydrograph
    boundaries: BoundarySpec
    probes: list
    channel_mask: np.ndarray = field(repr=False)
    seed: int = 0

    @property
    def header(self) -> RasterHeader:
        return self.stack.dtm.header

    def write(self, out_dir) -> dict:
        """Write rasters, hydrograph, probes and a ready-to-run pipeline config."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = {"dtm": out_dir / "dtm.asc"}
        write_raster(self.stack.dtm, paths["dtm"])
        for name, layer in self.stack.layers:
            paths[name] = out_dir / f"{name}.asc"
            write_raster(layer, paths[name])
        self.hydrograph.write_csv(out_dir / "hydrograph.csv")
        write_probes(self.probes, out_dir / "probes.csv")
        config = demo_config(self)
        with open(out_dir / "config.yaml", "w") as fh:
            yaml.safe_dump(config, fh, sort_keys=False)
        paths["hydrograph"] = out_dir / "hydrograph.csv"
        paths["probes"] = out_dir / "probes.csv"
        paths["config"] = out_dir / "config.yaml"
        return paths


def write_probes(probes, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "x", "y", "label"])
        for p in probes:
            w.writerow([p.id, repr(float(p.x)), repr(float(p.y)), p.label])


def read_probes(path) -> list:
    probes = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.DictReader(fh), 2):
            try:
                probes.append(Probe(row["id"].strip(), float(row["x"]), float(row["y"]),
                                    (row.get("label") or "").strip()))
            except (KeyError, ValueError, AttributeError):
                raise ValueError(f"{path}:{lineno}: expected columns id,x,y,label") from None
    ids = [p.id for p in probes]
    if len(set(ids)) != len(ids):
        raise ValueError(f"{path}: probe ids must be unique")
    return probes


def _rect(mask, x, y, x0, x1, y0, y1):
    mask |= (x >= x0) & (x < x1) & (y >= y0) & (y < y1)


def demo_fixture(size: str = "small", seed: int = 2015) -> Fixture:
    if size not in SIZES:
        raise ValueError(f"size must be one of {sorted(SIZES)}, got {size!r}")
    n = SIZES[size]
    k = n / 200.0  # layout scale
    rng = np.random.default_rng(seed)
    header = RasterHeader(n, n, 1000.0, 2000.0, 1.0, -9999.0)
    # local coordinates of cell centres, rows north-first
    xs = np.arange(n) + 0.5
    ys = n - (np.arange(n) + 0.5)
    x, y = np.meshgrid(xs, ys)

    yc = n / 2.0
    d = np.abs(y - yc)
    top = CHANNEL_HALF_BOTTOM + BANK_WIDTH
    drop = np.where(d <= CHANNEL_HALF_BOTTOM, CHANNEL_DEPTH,
                    np.where(d <= top, CHANNEL_DEPTH * (top - d) / BANK_WIDTH, 0.0))
    lateral = 0.004 * np.maximum(d - top, 0.0)
    phase = rng.uniform(0, 2 * np.pi, 4)
    undulation = 0.06 * (np.sin(2 * np.pi * x / (57 * k) + phase[0]) * np.sin(2 * np.pi * y / (43 * k) + phase[1])
                         + np.sin(2 * np.pi * (x + y) / (91 * k) + phase[2]))
    undulation = np.where(d > top + 2, undulation, 0.0)
    dtm = 10.0 - BED_SLOPE * x + lateral + undulation - drop
    channel = d <= top

    buildings = np.full((n, n), np.nan)
    walls = np.full((n, n), np.nan)
    thin = np.full((n, n), np.nan)

    # south: dense block grid
    block_w, street = 18 * k, 8 * k
    south_rows = [(10 * k, 26 * k), (34 * k, 50 * k), (58 * k, 74 * k)]
    x0 = 16 * k
    while x0 + block_w <= n - 8 * k:
        for (b0, b1) in south_rows:
            fp = np.zeros((n, n), bool)
            shrink = rng.uniform(0, 2 * k, 4)
            _rect(fp, x, y, x0 + shrink[0], x0 + block_w - shrink[1], b0 + shrink[2], b1 - shrink[3])
            buildings[fp] = round(float(rng.uniform(6.0, 12.0)), 2)
            # sidewalks around the block
            side = np.zeros((n, n), bool)
            _rect(side, x, y, x0 - 2 * k, x0 + block_w + 2 * k, b0 - 2 * k, b1 + 2 * k)
            thin[side & ~fp] = 0.15
        x0 += block_w + street
    # curbs along the riverside road, with gaps
    curb = np.zeros((n, n), bool)
    for cx in np.arange(10 * k, n - 10 * k, 30 * k):
        _rect(curb, x, y, cx, cx + 22 * k, 80 * k, 81 * k)
    thin[curb] = 0.2

    # north: open ground with a few large buildings and a stadium wall
    for (bx0, bx1, by0, by1) in [(30, 55, 140, 160), (70, 90, 165, 185), (140, 170, 150, 172)]:
        fp = np.zeros((n, n), bool)
        _rect(fp, x, y, bx0 * k, bx1 * k, by0 * k, by1 * k)
        buildings[fp] = round(float(rng.uniform(8.0, 14.0)), 2)
    stadium = np.zeros((n, n), bool)
    _rect(stadium, x, y, 100 * k, 130 * k, 125 * k, 126 * k)
    _rect(stadium, x, y, 100 * k, 101 * k, 125 * k, 145 * k)
    thin[stadium] = 0.3

    # walls: flood wall segments on the south bank and garden walls between blocks
    wall = np.zeros((n, n), bool)
    for wx0, wx1 in [(25, 75), (105, 160)]:
        _rect(wall, x, y, wx0 * k, wx1 * k, 84 * k, 85 * k)
    for gx in np.arange(16 * k + block_w + 3 * k, n - 10 * k, 2 * (block_w + street)):
        _rect(wall, x, y, gx, gx + 1, 30 * k, 54 * k)
    _rect(wall, x, y, 60 * k, 100 * k, 118 * k, 119 * k)
    walls[wall] = 1.2

    def layer(a):
        return Raster(header, np.where(np.isnan(a), header.nodata, a))

    stack = FeatureStack(Raster(header, dtm), [("buildings", layer(buildings)),
                                               ("walls", layer(walls)),
                                               ("thin_structures", layer(thin))])
    assert [nm for nm, _ in stack.layers] == list(LAYER_ORDER)

    span = (header.yll + yc - top, header.yll + yc + top)
    bc = BoundarySpec(west=EdgeCondition("inflow", BASE_Q, span), east=EdgeCondition("neumann"),
                      south=EdgeCondition("wall"), north=EdgeCondition("wall"))
    hydro = Hydrograph((0.0, 60.0, 150.0, 240.0), (BASE_Q, PEAK_Q, PEAK_Q, BASE_Q))

    def P(i, px, py, label):
        return Probe(str(i), header.xll + px * k, header.yll + py * k, label)

    probes = [
        P(1, 50, 100, "channel"), P(2, 100, 100, "channel"), P(3, 150, 100, "channel"),
        P(4, 40, 90, "south bank"), P(5, 130, 90, "south bank"),
        P(6, 38, 78, "riverside road"), P(7, 90, 78, "riverside road"), P(8, 165, 78, "riverside road"),
        P(9, 38, 54, "street"), P(10, 64, 54, "street"), P(11, 116, 54, "street"),
        P(12, 64, 30, "street"), P(13, 142, 30, "street"), P(14, 90, 42, "street"),
        P(15, 40, 112, "north bank"), P(16, 120, 112, "north bank"),
        P(17, 20, 125, "open field"), P(18, 115, 135, "stadium"), P(19, 180, 120, "open field"),
        P(20, 60, 120, "garden wall"),
    ]
    return Fixture(stack, hydro, bc, probes, channel, seed)


def demo_config(fx: Fixture) -> dict:
    """Pipeline config for the fixture, with paths relative to the fixture directory."""
    return {
        "stack": {"dtm": "dtm.asc", "layers": {name: f"{name}.asc" for name, _ in fx.stack.layers}},
        "s_levels": [1, 2, 3, 4],
        "r_factors": [1, 2, 3, 4, 5],
        "noise": {"sigma": 0.2, "n_draws": 10, "master_seed": fx.seed},
        "solver": {"manning_n": 0.015, "cfl": 0.45, "h_dry": 1e-6, "reconstruction": "first_order",
                   "t_end": 240.0, "output_interval": 60.0, "steady_tol": 1e-4,
                   "steady_window": 60.0, "steady_max_time": 1200.0},
        "initial": "steady",
        "boundaries": fx.boundaries.to_dict(),
        "hydrograph": "hydrograph.csv",
        "plan": {"strategy": "stratified", "min_e_per_sr": 10, "budget": 200, "seed": fx.seed},
        "probes": "probes.csv",
        "analysis": {"cellsize": 5.0, "method": "average", "boot": 1000, "boot_n": None,
                     "min_samples": 100, "exclude_buildings": False, "exclude_dry": True},
        "paths": {"dems": "dems", "store": "store", "analysis": "analysis"},
        "workers": 1,
    }
