import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from floodsens.raster import (Raster, RasterFormatError, RasterHeader, cell_index, from_array, read_raster,
                              resample_average, sample_at, trim, write_raster)


def test_read_2x2(tmp_path):
    p = tmp_path / "g.asc"
    p.write_text("ncols 2\nnrows 2\nxllcorner 0\nyllcorner 0\ncellsize 1\nNODATA_value -9999\n1 2\n3 4\n")
    r = read_raster(p)
    assert (r.header.ncols, r.header.nrows) == (2, 2)
    assert r.values.ravel().tolist() == [1, 2, 3, 4]


def test_value_count_mismatch_reports_line(tmp_path):
    p = tmp_path / "g.asc"
    p.write_text("ncols 2\nnrows 2\nxllcorner 0\nyllcorner 0\ncellsize 1\nNODATA_value -9999\n1 2\n3\n")
    with pytest.raises(RasterFormatError, match=r"line 8: value count mismatch"):
        read_raster(p)


def test_non_numeric_token_line(tmp_path):
    p = tmp_path / "g.asc"
    p.write_text("ncols 2\nnrows 2\nxllcorner 0\nyllcorner 0\ncellsize 1\nNODATA_value -9999\n1 2\n3 x\n")
    with pytest.raises(RasterFormatError, match=r"line 8: non-numeric"):
        read_raster(p)


def test_malformed_header_line(tmp_path):
    p = tmp_path / "g.asc"
    p.write_text("ncols 2\nrows 2\nxllcorner 0\nyllcorner 0\ncellsize 1\nNODATA_value -9999\n1 2\n3 4\n")
    with pytest.raises(RasterFormatError, match=r"line 2: malformed header"):
        read_raster(p)


def test_zeros_written_with_six_decimals(tmp_path):
    p = tmp_path / "z.asc"
    write_raster(from_array(np.zeros((2, 3))), p)
    body = p.read_text().splitlines()[6:]
    assert body == ["0.000000 0.000000 0.000000"] * 2


def test_nodata_written_as_sentinel(tmp_path):
    p = tmp_path / "n.asc"
    write_raster(from_array([[1.5, -9999.0]]), p)
    assert p.read_text().splitlines()[6] == "1.500000 -9999"


def test_round_trip_awkward_values(tmp_path):
    vals = np.array([[0.1, 1 / 3, 1e-300], [123456789.123456789, -2.5e-7, math.pi]])
    r = from_array(vals, cellsize=0.7, xll=1.0 / 3, yll=-2.25)
    write_raster(r, tmp_path / "a.asc")
    back = read_raster(tmp_path / "a.asc")
    assert back == r
    assert back.header == r.header


finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)


@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=2, max_side=6), elements=finite),
       st.floats(0.01, 100), finite, finite)
def test_round_trip_property(tmp_path_factory, vals, cs, xll, yll):
    r = from_array(vals, cellsize=cs, xll=xll, yll=yll)
    p = tmp_path_factory.mktemp("rt") / "r.asc"
    write_raster(r, p)
    assert read_raster(p) == r


def test_resample_identity_and_mean():
    r = from_array([[1.0, 2.0], [3.0, 4.0]])
    assert resample_average(r, 1) is r
    out = resample_average(r, 2)
    assert out.values.tolist() == [[2.5]]
    assert out.header.cellsize == 2.0


def test_resample_ramp_against_block_sums():
    vals = np.arange(16, dtype=float).reshape(4, 4) * 0.5 + 1.0
    out = resample_average(from_array(vals), 2)
    expect = np.empty((2, 2))
    for bi in range(2):
        for bj in range(2):
            s = 0.0
            for i in range(2):
                for j in range(2):
                    s += vals[2 * bi + i, 2 * bj + j]
            expect[bi, bj] = s / 4
    np.testing.assert_array_equal(out.values, expect)


def test_resample_trims_south_and_east():
    r = from_array(np.arange(35, dtype=float).reshape(5, 7), xll=10, yll=20)
    out = resample_average(r, 2)
    assert out.header.shape == (2, 3)
    # north-west corner preserved
    assert out.header.xll == 10 and out.header.ytop == r.header.ytop
    assert out.values[0, 0] == np.mean([0, 1, 7, 8])


def test_resample_nodata_propagates():
    r = from_array([[1.0, -9999.0], [3.0, 4.0]])
    assert resample_average(r, 2).values[0, 0] == -9999.0


def test_resample_nearest_takes_block_centre():
    vals = np.arange(25, dtype=float).reshape(5, 5)
    assert resample_average(from_array(vals), 5, "nearest").values[0, 0] == 12.0


def test_resample_rejects_bad_factor():
    with pytest.raises(ValueError):
        resample_average(from_array([[1.0]]), 0)


@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 12), st.integers(1, 12)), elements=st.floats(-100, 100)),
       st.integers(1, 4))
def test_resample_mean_preservation(vals, f):
    r = from_array(vals)
    if f > min(vals.shape):
        return
    out = resample_average(r, f)
    fine = trim(r, out.header.nrows * f, out.header.ncols * f)
    assert out.values.mean() == pytest.approx(fine.values.mean(), rel=1e-12, abs=1e-12)


def test_sample_at_single_cell():
    r = from_array([[7.0]], cellsize=2.0, xll=10, yll=10)
    assert sample_at(r, 11.3, 10.2) == 7.0


def test_sample_at_edge_tie_goes_to_lower_index():
    r = from_array(np.arange(4.0).reshape(2, 2))
    # x = 1 sits between columns 0 and 1, y = 1 between rows 0 and 1
    assert cell_index(r.header, 1.0, 1.0) == (0, 0)
    assert sample_at(r, 1.0, 1.5) == 0.0


def test_sample_at_ramp_index_arithmetic():
    n, cs, x0, y0 = 10, 2.5, 100.0, 200.0
    vals = np.add.outer(np.arange(n) * 100.0, np.arange(n))
    r = from_array(vals, cellsize=cs, xll=x0, yll=y0)
    for x, y in [(100.1, 224.9), (112.6, 210.3), (124.9, 200.1), (101.0, 201.0)]:
        col = int((x - x0) // cs)
        row = int((y0 + n * cs - y) // cs)
        assert sample_at(r, x, y) == 100.0 * row + col


def test_sample_at_out_of_bounds():
    with pytest.raises(ValueError, match="outside"):
        sample_at(from_array([[1.0]]), 2.0, 0.5)


def test_header_validation():
    with pytest.raises(ValueError):
        RasterHeader(0, 1, 0, 0, 1)
    with pytest.raises(ValueError):
        RasterHeader(1, 1, 0, 0, 0)
    with pytest.raises(ValueError):
        Raster(RasterHeader(2, 2, 0, 0, 1), [1, 2, 3])


def test_raster_is_immutable():
    r = from_array([[1.0]])
    with pytest.raises(ValueError):
        r.values[0, 0] = 2.0
