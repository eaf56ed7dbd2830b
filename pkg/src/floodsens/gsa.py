"""Uncertainty analysis and first-order Sobol indices over a finished campaign.

The inputs S, R and E are discrete (4, 5 and n_draws levels), so the main
effect of factor X is estimated by grouping: samples are split by the level
of X, and

    Si(X) = sum_l (n_l / n) * (mean_l - mean)^2  /  (1/n) * sum_i (y_i - mean)^2

Both variances use the 1/n divisor, which makes the estimator identical to
the direct "conditional expectation per sample" double loop.  Levels seen
only once carry no within-level information and are pooled out; a factor
loses more than ``max_pooled`` of its samples that way, or keeps fewer than
two levels, is reported insufficient (NaN).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ._dip import dip_statistic, dip_threshold
from .campaign import done_records
from .raster import Raster, RasterHeader, cell_index, read_raster, resample_average

log = logging.getLogger(__name__)

FACTORS = ("S", "R", "E")
ARGMAX_CODES = {"S": 1, "R": 2, "E": 3}
NODATA = -9999.0


def spec_factors(specs) -> np.ndarray:
    """(n, 3) integer levels ordered as FACTORS."""
    return np.array([(sp.s, sp.r, sp.e) for sp in specs], dtype=np.int64).reshape(-1, 3)


# ---------------------------------------------------------------------------
# alignment

@dataclass
class AlignedOutputs:
    header: RasterHeader
    values: np.ndarray  # (n, nrows, ncols), NaN where the source had nodata
    specs: list
    method: str
    digests: list = field(default_factory=list)

    @property
    def factors(self) -> np.ndarray:
        return spec_factors(self.specs)

    @property
    def n(self) -> int:
        return len(self.specs)

    def subset(self, idx) -> "AlignedOutputs":
        idx = np.asarray(idx)
        return replace(self, values=self.values[idx], specs=[self.specs[i] for i in idx],
                       digests=[self.digests[i] for i in idx] if self.digests else [])


def _overlap(n_t, cs_t, n_s, cs_s) -> np.ndarray:
    """(n_t, n_s) fraction of each target interval covered by each source interval."""
    t0 = np.arange(n_t)[:, None] * cs_t
    s0 = np.arange(n_s)[None, :] * cs_s
    ov = np.clip(np.minimum(t0 + cs_t, s0 + cs_s) - np.maximum(t0, s0), 0.0, None)
    return ov / cs_t


def _nearest_index(n_t, cs_t, n_s, cs_s) -> np.ndarray:
    # source cell holding the target centre; a centre on an edge goes to the lower index
    centre = (np.arange(n_t) + 0.5) * cs_t
    return np.clip(np.ceil(centre / cs_s).astype(np.int64) - 1, 0, n_s - 1)


def align_raster(r: Raster, header: RasterHeader, method: str = "average") -> np.ndarray:
    """Map ``r`` onto ``header`` (same north-west corner); NaN marks nodata."""
    h = r.header
    if method not in ("average", "nearest"):
        raise ValueError(f"unknown alignment method {method!r}")
    if not (np.isclose(h.xll, header.xll) and np.isclose(h.ytop, header.ytop)):
        raise ValueError(f"extent mismatch: raster corner ({h.xll}, {h.ytop}) vs analysis grid "
                         f"({header.xll}, {header.ytop})")
    if header.xmax > h.xmax + 1e-9 or header.yll < h.yll - 1e-9:
        raise ValueError("extent mismatch: analysis grid extends beyond a result raster")
    ratio = header.cellsize / h.cellsize
    nr, nc = header.nrows, header.ncols
    if np.isclose(ratio, round(ratio)) and round(ratio) >= 1:
        coarse = resample_average(r, int(round(ratio)), method)
        return coarse.filled(np.nan)[:nr, :nc]
    vals = r.values
    mask = r.mask
    if method == "nearest":
        iy = _nearest_index(nr, header.cellsize, h.nrows, h.cellsize)
        ix = _nearest_index(nc, header.cellsize, h.ncols, h.cellsize)
        out = vals[np.ix_(iy, ix)].astype(np.float64)
        out[~mask[np.ix_(iy, ix)]] = np.nan
        return out
    wy = _overlap(nr, header.cellsize, h.nrows, h.cellsize)
    wx = _overlap(nc, header.cellsize, h.ncols, h.cellsize)
    out = wy @ np.where(mask, vals, 0.0) @ wx.T
    bad = (wy @ (~mask).astype(np.float64) @ wx.T) > 0
    out[bad] = np.nan
    return out


def analysis_header(headers, cellsize: float) -> RasterHeader:
    """Common grid anchored at the shared north-west corner over the smallest extent."""
    headers = list(headers)
    h0 = headers[0]
    for h in headers[1:]:
        if not (np.isclose(h.xll, h0.xll) and np.isclose(h.ytop, h0.ytop)):
            raise ValueError(f"extent mismatch: result corners ({h0.xll}, {h0.ytop}) and ({h.xll}, {h.ytop})")
    width = min(h.ncols * h.cellsize for h in headers)
    height = min(h.nrows * h.cellsize for h in headers)
    nc = int(np.floor(width / cellsize + 1e-9))
    nr = int(np.floor(height / cellsize + 1e-9))
    if nc < 1 or nr < 1:
        raise ValueError(f"analysis cellsize {cellsize} larger than the result extent")
    return RasterHeader(nc, nr, h0.xll, h0.ytop - nr * cellsize, float(cellsize), NODATA)


def align_outputs(store, analysis_cellsize: float = 5.0, method: str = "average",
                  records=None) -> AlignedOutputs:
    """Load every done result and map it onto a common analysis grid."""
    store = Path(store)
    records = done_records(store) if records is None else records
    if not records:
        raise ValueError(f"no done records in {store}")
    rasters = [read_raster(store / rec.result_path) for rec in records]
    header = analysis_header([r.header for r in rasters], analysis_cellsize)
    values = np.stack([align_raster(r, header, method) for r in rasters])
    return AlignedOutputs(header, values, [rec.spec for rec in records], method,
                          [rec.digest for rec in records])


def probe_series(aligned: AlignedOutputs, probe) -> np.ndarray:
    row, col = cell_index(aligned.header, probe.x, probe.y)
    return aligned.values[:, row, col]


# ---------------------------------------------------------------------------
# uncertainty analysis

@dataclass
class ProbeDistribution:
    id: str
    values: np.ndarray
    edges: np.ndarray
    counts: np.ndarray
    dip: float
    dip_threshold: float
    bimodal: bool


@dataclass
class UaSummary:
    mean: Raster
    variance: Raster
    probes: list = field(default_factory=list)  # of ProbeDistribution


def histogram(values, bin_width: float = 0.05):
    v = np.asarray(values, dtype=np.float64)
    v = v[np.isfinite(v)]
    top = max(float(v.max()) if v.size else 0.0, 0.0)
    nb = int(np.floor(top / bin_width)) + 1
    edges = np.arange(nb + 1) * bin_width
    counts = np.histogram(v, bins=edges)[0]
    return edges, counts


def bimodality(values, level: float = 0.95, n_sim: int = 1000, seed: int = 0):
    """(dip, threshold, flag): flag when the dip exceeds the uniform-null quantile."""
    v = np.asarray(values, dtype=np.float64)
    v = v[np.isfinite(v)]
    if v.size < 4:
        return 0.0, np.nan, False
    d = dip_statistic(v)
    thr = dip_threshold(v.size, level, n_sim, seed)
    return d, thr, bool(d > thr)


def wet_mask(aligned: AlignedOutputs, wet_depth: float = 1e-3) -> np.ndarray:
    with np.errstate(invalid="ignore"):
        return np.nanmax(np.where(np.isnan(aligned.values), -np.inf, aligned.values), axis=0) > wet_depth


def ua_stats(aligned: AlignedOutputs, probes=(), bin_width: float = 0.05, wet_depth: float = 1e-3,
             dip_level: float = 0.95) -> UaSummary:
    """Per-cell mean and unbiased variance of Y plus per-probe distributions.

    Cells never wetter than ``wet_depth`` in any sample, or with fewer than
    two valid samples, are nodata.
    """
    v = aligned.values
    if aligned.n < 2:
        raise ValueError("ua_stats needs at least 2 samples")
    valid = np.isfinite(v)
    cnt = valid.sum(axis=0)
    ok = (cnt >= 2) & wet_mask(aligned, wet_depth)
    vz = np.where(valid, v, 0.0)
    mean = vz.sum(axis=0) / np.maximum(cnt, 1)
    dev = np.where(valid, v - mean, 0.0)
    var = (dev * dev).sum(axis=0) / np.maximum(cnt - 1, 1)
    h = aligned.header
    mean_r = Raster(h, np.where(ok, mean, h.nodata))
    var_r = Raster(h, np.where(ok, var, h.nodata))
    dists = []
    for p in probes:
        y = probe_series(aligned, p)
        edges, counts = histogram(y, bin_width)
        d, thr, flag = bimodality(y, dip_level)
        dists.append(ProbeDistribution(p.id, y, edges, counts, d, thr, flag))
    return UaSummary(mean_r, var_r, dists)


# ---------------------------------------------------------------------------
# Sobol first-order indices

@dataclass
class SobolEstimate:
    si: np.ndarray  # (3,) raw, NaN where insufficient
    ci_low: np.ndarray = field(default_factory=lambda: np.full(3, np.nan))
    ci_high: np.ndarray = field(default_factory=lambda: np.full(3, np.nan))
    n_used: int = 0
    var_y: float = np.nan
    pooled: np.ndarray = field(default_factory=lambda: np.zeros(3, dtype=np.int64))
    ci_unreliable: np.ndarray = field(default_factory=lambda: np.zeros(3, dtype=bool))
    dropped: np.ndarray = field(default_factory=lambda: np.zeros(3, dtype=np.int64))

    @property
    def undefined(self) -> bool:
        return not np.isfinite(self.var_y) or self.var_y == 0

    def __getitem__(self, name):
        return self.si[FACTORS.index(name)]


def _levels(column):
    _, inv, counts = np.unique(column, return_inverse=True, return_counts=True)
    return inv.ravel(), counts


def factor_index(y, levels, min_per_level: int = 2, max_pooled: float = 0.05,
                 bias_correct: bool = False):
    """First-order index of one factor for a 1-D sample.  Returns (si, n_pooled).

    NaN when Var(Y) is zero or the factor is insufficient.
    """
    y = np.asarray(y, dtype=np.float64)
    inv, counts = _levels(levels)
    keep_level = counts >= min_per_level
    keep = keep_level[inv]
    n_pooled = int((~keep).sum())
    if n_pooled > max_pooled * y.size or keep_level.sum() < 2:
        return np.nan, n_pooled
    yk = y[keep]
    if yk.max() == yk.min():
        return np.nan, n_pooled
    # relabel kept levels 0..L-1
    remap = np.cumsum(keep_level) - 1
    g = remap[inv[keep]]
    nk = counts[keep_level].astype(np.float64)
    n = yk.size
    mu = yk.sum() / n
    d = yk - mu
    total = (d * d).sum() / n
    gmean = np.bincount(g, weights=d, minlength=nk.size) / nk
    between = (nk * gmean * gmean).sum() / n
    if bias_correct:
        # subtract the expected contribution of within-level noise to the group means
        within = np.bincount(g, weights=d * d, minlength=nk.size) / nk - gmean * gmean
        between -= (within * nk / np.maximum(nk - 1, 1)).sum() / n
    return between / total, n_pooled


def sobol_first_order(samples, y=None, min_per_level: int = 2, max_pooled: float = 0.05,
                      bias_correct: bool = False) -> SobolEstimate:
    """Grouping estimator of Si(S), Si(R), Si(E).

    ``samples`` is either a list of (DemSpec, y) pairs or an (n, 3) level
    array with ``y`` given separately.
    """
    levels, y = _unpack(samples, y)
    # canonical order makes the floating-point sums independent of input order
    order = np.lexsort((y, levels[:, 2], levels[:, 1], levels[:, 0]))
    levels, y = levels[order], y[order]
    si = np.full(3, np.nan)
    pooled = np.zeros(3, dtype=np.int64)
    if y.size < 2 or y.max() == y.min():
        return SobolEstimate(si, n_used=y.size, var_y=0.0 if y.size else np.nan, pooled=pooled)
    for k in range(3):
        si[k], pooled[k] = factor_index(y, levels[:, k], min_per_level, max_pooled, bias_correct)
    mu = y.mean()
    return SobolEstimate(si, n_used=y.size, var_y=float(((y - mu) ** 2).mean()), pooled=pooled)


def _unpack(samples, y):
    if y is None:
        samples = list(samples)
        levels = spec_factors([s for s, _ in samples])
        y = np.array([v for _, v in samples], dtype=np.float64)
    else:
        levels = np.asarray(samples, dtype=np.int64).reshape(-1, 3)
        y = np.asarray(y, dtype=np.float64)
    if levels.shape[0] != y.size:
        raise ValueError("factor levels and outputs differ in length")
    return levels, y


def sobol_matrix(levels, Y, min_per_level: int = 2, max_pooled: float = 0.05,
                 bias_correct: bool = False) -> np.ndarray:
    """Si for many outputs sharing one design.  ``Y`` is (n, m); returns (3, m).

    Columns with zero variance come back NaN.  Columns must be free of NaN.
    """
    levels = np.asarray(levels, dtype=np.int64).reshape(-1, 3)
    Y = np.asarray(Y, dtype=np.float64)
    order = np.lexsort((levels[:, 2], levels[:, 1], levels[:, 0]))
    levels, Y = levels[order], Y[order]
    n, m = Y.shape
    out = np.full((3, m), np.nan)
    const = Y.max(axis=0) == Y.min(axis=0)
    for k in range(3):
        inv, counts = _levels(levels[:, k])
        keep_level = counts >= min_per_level
        keep = keep_level[inv]
        if (~keep).sum() > max_pooled * n or keep_level.sum() < 2:
            continue
        Yk = Y[keep]
        remap = np.cumsum(keep_level) - 1
        g = remap[inv[keep]]
        nk = counts[keep_level].astype(np.float64)
        nn = Yk.shape[0]
        D = Yk - Yk.sum(axis=0) / nn
        total = (D * D).sum(axis=0) / nn
        onehot = np.zeros((nk.size, nn))
        onehot[g, np.arange(nn)] = 1.0
        gmean = (onehot @ D) / nk[:, None]
        between = (nk[:, None] * gmean * gmean).sum(axis=0) / nn
        if bias_correct:
            within = (onehot @ (D * D)) / nk[:, None] - gmean * gmean
            between -= (within * (nk / np.maximum(nk - 1, 1))[:, None]).sum(axis=0) / nn
        kconst = Yk.max(axis=0) == Yk.min(axis=0)
        with np.errstate(invalid="ignore", divide="ignore"):
            out[k] = np.where(kconst, np.nan, between / np.where(kconst, 1.0, total))
    out[:, const] = np.nan
    return out


def bootstrap_ci(samples, y=None, n_boot: int = 1000, n_sub: int | None = None, level: float = 0.95,
                 seed: int = 0, min_per_level: int = 2, max_pooled: float = 0.05,
                 bias_correct: bool = False, interval: str = "basic") -> SobolEstimate:
    """Point estimate plus bootstrap CI for each factor.

    Each replicate draws ``n_sub`` samples with replacement.  A replicate in
    which a factor is insufficient is dropped for that factor and counted;
    with more than half dropped the factor's CI is flagged unreliable.

    ``interval="basic"`` reflects the replicate quantiles about the point
    estimate, [2 Si - q_hi, 2 Si - q_lo], which removes the upward bias of the
    grouped estimator for factors with many levels (E with ~10 samples per
    level).  ``"percentile"`` returns [q_lo, q_hi] as is.
    """
    if interval not in ("basic", "percentile"):
        raise ValueError(f"unknown interval {interval!r}")
    levels, y = _unpack(samples, y)
    n = y.size
    n_sub = n if n_sub is None else int(n_sub)
    if not 1 <= n_sub <= n:
        raise ValueError(f"n_sub must be in 1..{n}, got {n_sub}")
    est = sobol_first_order(levels, y, min_per_level, max_pooled, bias_correct)
    if est.undefined:
        return est
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, n, size=(n_boot, n_sub))
    reps = _bootstrap_replicates(levels, y, idx, min_per_level, max_pooled, bias_correct)
    alpha = (1.0 - level) / 2.0
    for k in range(3):
        r = reps[:, k]
        ok = np.isfinite(r)
        est.dropped[k] = int((~ok).sum())
        est.ci_unreliable[k] = est.dropped[k] > 0.5 * n_boot
        if ok.any():
            lo, hi = np.quantile(r[ok], [alpha, 1.0 - alpha])
            if interval == "basic":
                lo, hi = 2.0 * est.si[k] - hi, 2.0 * est.si[k] - lo
            est.ci_low[k], est.ci_high[k] = lo, hi
    return est


def _bootstrap_replicates(levels, y, idx, min_per_level, max_pooled, bias_correct) -> np.ndarray:
    """(n_boot, 3) replicate estimates, vectorised over replicates with bincount."""
    n_boot, n_sub = idx.shape
    out = np.full((n_boot, 3), np.nan)
    Y = y[idx]
    Y = Y - Y.mean(axis=1, keepdims=True)  # centring improves the summation accuracy
    rows = np.repeat(np.arange(n_boot), n_sub)
    degenerate = Y.max(axis=1) == Y.min(axis=1)
    for k in range(3):
        inv, counts = _levels(levels[:, k])
        L = counts.size
        G = inv[idx]  # (n_boot, n_sub) level codes
        flat = (rows * L + G.ravel())
        cnt = np.bincount(flat, minlength=n_boot * L).reshape(n_boot, L)
        keep_level = cnt >= min_per_level
        keep = np.take_along_axis(keep_level, G, axis=1)
        nk = np.where(keep_level, cnt, 0).astype(np.float64)
        nn = keep.sum(axis=1).astype(np.float64)
        pooled = n_sub - nn
        sums = np.bincount(flat, weights=np.where(keep, Y, 0.0).ravel(),
                           minlength=n_boot * L).reshape(n_boot, L)
        sq = np.bincount(flat, weights=np.where(keep, Y * Y, 0.0).ravel(),
                         minlength=n_boot * L).reshape(n_boot, L)
        with np.errstate(invalid="ignore", divide="ignore"):
            mu = sums.sum(axis=1) / nn
            total = sq.sum(axis=1) / nn - mu * mu
            gmean = np.where(nk > 0, sums / np.where(nk > 0, nk, 1.0), 0.0)
            between = (nk * gmean * gmean).sum(axis=1) / nn - mu * mu
            if bias_correct:
                within = np.where(nk > 0, sq / np.where(nk > 0, nk, 1.0), 0.0) - gmean * gmean
                between -= (within * nk / np.maximum(nk - 1, 1)).sum(axis=1) / nn
            si = between / total
        bad = (pooled > max_pooled * n_sub) | (keep_level.sum(axis=1) < 2) | degenerate | ~(total > 0)
        out[:, k] = np.where(bad, np.nan, si)
    return out


def si_convergence(samples, y=None, seed: int = 0, n_grid=None, min_n: int = 10, **kw):
    """Si recomputed on growing prefixes of a seeded random permutation.

    Returns (N, si) with ``si`` of shape (len(N), 3); NaN marks an
    insufficient factor at that prefix size.
    """
    levels, y = _unpack(samples, y)
    perm = np.random.default_rng(seed).permutation(y.size)
    levels, y = levels[perm], y[perm]
    if n_grid is None:
        step = max(1, y.size // 50)
        n_grid = np.unique(np.r_[np.arange(min_n, y.size + 1, step), y.size])
    n_grid = np.asarray(n_grid, dtype=np.int64)
    si = np.array([sobol_first_order(levels[:n], y[:n], **kw).si for n in n_grid]).reshape(-1, 3)
    return n_grid, si


# ---------------------------------------------------------------------------
# maps

@dataclass
class SobolMaps:
    si: dict  # factor name -> Raster (raw values, nodata where undefined)
    argmax: Raster  # 1 = S, 2 = R, 3 = E
    area_fraction: dict  # factor name -> fraction of defined cells won
    histograms: dict  # factor name -> (edges, counts) of raw Si over defined cells
    n_used: int


def argmax_codes(si: np.ndarray) -> np.ndarray:
    """(3, ...) raw indices -> winning factor code, 0 where all are NaN."""
    filled = np.where(np.isfinite(si), si, -np.inf)
    code = np.argmax(filled, axis=0) + 1
    return np.where(np.isfinite(si).any(axis=0), code, 0)


def sobol_maps(aligned: AlignedOutputs, exclude_dry: bool = True, footprint=None,
               min_samples: int = 100, wet_depth: float = 1e-3, bin_width: float = 0.05,
               min_per_level: int = 2, max_pooled: float = 0.05, bias_correct: bool = False) -> SobolMaps:
    """Per-cell Si rasters and the map of the highest-ranked factor.

    ``footprint`` is an optional boolean array (or Raster of nonzero cells)
    on the analysis grid; those cells are excluded, e.g. building interiors.
    """
    if aligned.n < min_samples:
        raise ValueError(f"only {aligned.n} aligned samples, at least {min_samples} required")
    h = aligned.header
    ny, nx = h.shape
    V = aligned.values.reshape(aligned.n, -1)
    use = np.ones(ny * nx, dtype=bool)
    if exclude_dry:
        use &= wet_mask(aligned, wet_depth).ravel()
    if footprint is not None:
        fp = footprint.values != 0 if isinstance(footprint, Raster) else np.asarray(footprint, bool)
        use &= ~fp.ravel()
    complete = np.isfinite(V).all(axis=0)
    si = np.full((3, ny * nx), np.nan)
    levels = aligned.factors
    cols = np.nonzero(use & complete)[0]
    if cols.size:
        si[:, cols] = sobol_matrix(levels, V[:, cols], min_per_level, max_pooled, bias_correct)
    for c in np.nonzero(use & ~complete)[0]:
        ok = np.isfinite(V[:, c])
        if ok.sum() >= 2:
            si[:, c] = sobol_first_order(levels[ok], V[ok, c], min_per_level, max_pooled, bias_correct).si
    codes = argmax_codes(si)
    si_r = {f: Raster(h, np.where(np.isfinite(si[k]), si[k], h.nodata).reshape(ny, nx))
            for k, f in enumerate(FACTORS)}
    argmax = Raster(h, np.where(codes > 0, codes, h.nodata).reshape(ny, nx))
    n_def = int((codes > 0).sum())
    frac = {f: (float((codes == ARGMAX_CODES[f]).sum()) / n_def if n_def else 0.0) for f in FACTORS}
    edges = np.arange(int(round(1.0 / bin_width)) + 1) * bin_width
    hists = {}
    for k, f in enumerate(FACTORS):
        v = si[k][np.isfinite(si[k])]
        hists[f] = (edges, np.histogram(np.clip(v, 0.0, 1.0), bins=edges)[0])
    return SobolMaps(si_r, argmax, frac, hists, aligned.n)


def probe_estimates(aligned: AlignedOutputs, probes, n_boot: int = 1000, n_sub=None, seed: int = 0,
                    **kw) -> list:
    out = []
    levels = aligned.factors
    for p in probes:
        y = probe_series(aligned, p)
        ok = np.isfinite(y)
        out.append((p, bootstrap_ci(levels[ok], y[ok], n_boot=n_boot,
                                    n_sub=None if n_sub is None else min(n_sub, int(ok.sum())),
                                    seed=seed, **kw)))
    return out
