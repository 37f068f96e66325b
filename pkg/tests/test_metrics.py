import math

import numpy as np
import pandas as pd
import pytest

from errors import DimsMismatch, DivisionByZero, EmptyEvaluationSet, ZeroRange
from metrics import (REPORT_COLUMNS, banded_report, format_db, format_report, gzip_ratio,
                     lower_median, psnr, relative_error, report_frame, write_report_csv)
from mrc_io import VoxelGrid


def line_grid(values):
    return VoxelGrid.from_array(np.asarray(values, dtype=np.float32).reshape(1, 1, -1))


ORIGINAL = [0.03125, 0.0625, 0.078125, 0.125, 0.25, 0.5]
RECONSTRUCTED = [0.0625, 0.0625, 0.0625, 0.1875, 0.3125, 0.5]


def test_banded_report_by_hand():
    report = banded_report(line_grid(ORIGINAL), line_grid(RECONSTRUCTED))
    expected = {'Low': (50.0, 0.0, 0.5), 'Medium': (35.0, 20.0, 0.5), 'High': (12.5, 0.0, 0.5)}
    for name, (mean, median, within) in expected.items():
        band = report.band(name)
        assert band.count == 2
        assert band.mean_pct == pytest.approx(mean)
        assert band.median_pct == pytest.approx(median)
        assert band.within_fraction == within
    assert report.n_points == 6
    assert [b.label for b in report.bands] == ['Low (<0.07)', 'Medium (0.07-0.15)', 'High (>=0.15)']


def test_band_edges_are_half_open():
    report = banded_report(line_grid([0.07, 0.15]), line_grid([0.07, 0.15]))
    assert report.band('Low').count == 0
    assert report.band('Medium').count == 1
    assert report.band('High').count == 1
    assert math.isnan(report.band('Low').mean_pct)


def test_custom_band_edges_relabel():
    report = banded_report(line_grid(ORIGINAL), line_grid(RECONSTRUCTED), band_edges=(0.2, 0.05))
    assert report.band_edges == (0.05, 0.2)
    assert [b.label for b in report.bands] == ['Low (<0.05)', 'Medium (0.05-0.2)', 'High (>=0.2)']
    assert [b.count for b in report.bands] == [1, 3, 2]
    four = banded_report(line_grid(ORIGINAL), line_grid(RECONSTRUCTED), band_edges=(0.05, 0.1, 0.2))
    assert [b.name for b in four.bands] == ['Band 1', 'Band 2', 'Band 3', 'Band 4']


def test_threshold_excludes_low_voxels():
    report = banded_report(line_grid(ORIGINAL), line_grid(RECONSTRUCTED), threshold=0.1)
    assert report.n_points == 3
    assert report.band('Low').count == 0


def test_relative_error_examples():
    assert relative_error(0.5, 0.25) == 50.0
    assert relative_error(-2.0, -1.0) == 50.0
    assert relative_error(1.0, 1.0) == 0.0
    np.testing.assert_allclose(relative_error([1.0, 4.0], [1.5, 3.0]), [50.0, 25.0])
    with pytest.raises(DivisionByZero):
        relative_error(0.0, 0.1)
    with pytest.raises(ZeroDivisionError):
        relative_error([1.0, 0.0], [1.0, 0.0])


def test_scale_invariance():
    y = np.array([0.2, 0.4, 0.8])
    y_hat = np.array([0.25, 0.3, 0.8])
    np.testing.assert_allclose(relative_error(2 * y, 2 * y_hat), relative_error(y, y_hat))
    a, b = line_grid([0.0, *y]), line_grid([0.0, *y_hat])
    a2, b2 = line_grid([0.0, *(2 * y)]), line_grid([0.0, *(2 * y_hat)])
    assert psnr(a2, b2) == pytest.approx(psnr(a, b))


def test_lower_median():
    assert lower_median([3.0, 1.0, 2.0]) == 2.0
    assert lower_median([4.0, 1.0, 3.0, 2.0]) == 2.0


def test_psnr_twenty_db():
    original = line_grid([0.0, 1.0, 0.5, 0.25])
    recon = line_grid([0.0, 1.1, 0.6, 0.35])
    assert psnr(original, recon) == pytest.approx(20.0, abs=1e-4)


def test_psnr_range_uses_whole_grid():
    mask = np.array([False, True, True, True])
    a = line_grid([0.0, 1.0, 0.5, 0.25])
    b = line_grid([0.5, 1.0, 0.5, 0.5])
    diff = np.array([0.0, 0.125, 0.125, 0.125], dtype=np.float32)
    gap = psnr(a, line_grid(a.data + diff), mask) - psnr(b, line_grid(b.data + diff), mask)
    assert gap == pytest.approx(20 * math.log10(2), abs=1e-9)


def test_psnr_edge_cases():
    grid = line_grid([0.0, 1.0, 0.5])
    assert psnr(grid, grid) == math.inf
    assert format_db(math.inf) == '∞'
    assert format_db(31.234) == '31.23'
    with pytest.raises(ZeroRange):
        psnr(line_grid([0.5, 0.5]), line_grid([0.5, 0.4]))
    with pytest.raises(EmptyEvaluationSet):
        psnr(line_grid([-1.0, -0.5]), line_grid([-1.0, -0.5]))


def test_mismatched_or_empty_inputs():
    with pytest.raises(DimsMismatch):
        banded_report(line_grid([1.0, 2.0]), line_grid([1.0, 2.0, 3.0]))
    with pytest.raises(EmptyEvaluationSet):
        banded_report(line_grid([-1.0, 0.0]), line_grid([-1.0, 0.0]))


def test_report_frame_and_csv(tmp_path):
    report = banded_report(line_grid(ORIGINAL), line_grid(RECONSTRUCTED))
    frame = report_frame({'a.mrc': report}, ratios={'a.mrc': 12.5})
    assert list(frame.columns) == REPORT_COLUMNS
    assert list(frame['band']) == ['Low (<0.07)', 'Medium (0.07-0.15)', 'High (>=0.15)',
                                   'MSE', 'PSNR', 'ratio']
    assert frame.loc[frame['band'] == 'ratio', 'value'].item() == 12.5
    assert frame.loc[0, 'within20_pct'] == 50.0

    path = tmp_path / 'report.csv'
    write_report_csv(path, frame)
    back = pd.read_csv(path)
    assert list(back.columns) == REPORT_COLUMNS
    assert len(back) == 6


def test_format_report_text():
    report = banded_report(line_grid(ORIGINAL), line_grid(RECONSTRUCTED))
    text = format_report(report, name='a.mrc')
    assert text.splitlines()[0] == 'File: a.mrc'
    assert 'Medium (0.07-0.15)' in text
    assert 'Within 20% (%)' in text
    assert '35.00' in text
    assert 'PSNR' in text


def test_gzip_ratio_baseline():
    data = bytes(4096)
    assert gzip_ratio(data) > 50
    assert gzip_ratio(data) == gzip_ratio(data)
