#!/usr/bin/env python
"""
Reconstruction quality: banded relative error, MSE, PSNR and report output

Bands are assigned on the original densities (map units) with half-open
intervals [edge_k, edge_k+1); the last band is unbounded above. Medians use
the lower-middle element for even counts.
"""

import gzip
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from config import METRICS_CONFIG, atomic_write_bytes
from errors import DimsMismatch, DivisionByZero, EmptyEvaluationSet, ZeroRange

logger = logging.getLogger(__name__)

REPORT_COLUMNS = ['file', 'band', 'mean_pct', 'median_pct', 'within20_pct', 'count', 'value']


@dataclass
class BandStats:
    name: str
    lower: float
    upper: float
    count: int
    mean_pct: float
    median_pct: float
    within_fraction: float

    @property
    def label(self):
        if math.isinf(self.lower):
            return f"{self.name} (<{self.upper:g})"
        if math.isinf(self.upper):
            return f"{self.name} (>={self.lower:g})"
        return f"{self.name} ({self.lower:g}-{self.upper:g})"


@dataclass
class ErrorReport:
    bands: list
    mse: float
    psnr: float
    n_points: int
    threshold: float
    band_edges: tuple
    within_pct: float = field(default_factory=lambda: METRICS_CONFIG['within_pct'])

    def band(self, name):
        for b in self.bands:
            if b.name == name:
                return b
        raise KeyError(name)


def relative_error(y, y_hat):
    """100 * |y - y_hat| / |y| in percent; scalars or arrays."""
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if np.any(y == 0):
        raise DivisionByZero("relative error undefined where the true density is 0")
    out = 100.0 * np.abs(y - y_hat) / np.abs(y)
    return float(out) if out.ndim == 0 else out


def band_names(n_bands):
    if n_bands == len(METRICS_CONFIG['band_names']):
        return list(METRICS_CONFIG['band_names'])
    return [f"Band {k + 1}" for k in range(n_bands)]


def lower_median(values):
    values = np.sort(np.asarray(values))
    return float(values[(values.size - 1) // 2])


def _check_dims(original, reconstructed):
    if original.dims != reconstructed.dims:
        raise DimsMismatch(f"original {original.dims} vs reconstructed {reconstructed.dims}")


def banded_report(original, reconstructed, threshold=0.0, band_edges=None, within_pct=None):
    """Per-band relative-error statistics over voxels with original density > threshold."""
    _check_dims(original, reconstructed)
    edges = tuple(sorted(float(e) for e in (band_edges or METRICS_CONFIG['band_edges'])))
    within_pct = METRICS_CONFIG['within_pct'] if within_pct is None else float(within_pct)

    mask = original.data > threshold
    y = original.data[mask].astype(np.float64)
    y_hat = reconstructed.data[mask].astype(np.float64)
    if y.size == 0:
        raise EmptyEvaluationSet(f"no voxel above threshold {threshold:g}")

    errors = relative_error(y, y_hat)
    band_index = np.searchsorted(np.asarray(edges), y, side='right')
    bounds = (-math.inf,) + edges + (math.inf,)
    bands = []
    for k, name in enumerate(band_names(len(edges) + 1)):
        e = errors[band_index == k]
        if e.size:
            stats = BandStats(name, bounds[k], bounds[k + 1], int(e.size), float(e.mean()),
                              lower_median(e), float(np.count_nonzero(e <= within_pct)) / e.size)
        else:
            stats = BandStats(name, bounds[k], bounds[k + 1], 0, math.nan, math.nan, math.nan)
        bands.append(stats)

    mse = float(np.mean((y - y_hat) ** 2))
    report = ErrorReport(bands=bands, mse=mse, psnr=psnr(original, reconstructed, mask),
                         n_points=int(y.size), threshold=float(threshold), band_edges=edges,
                         within_pct=within_pct)
    logger.debug(f"Banded report over {y.size} points: MSE {mse:.4g}, PSNR {report.psnr:.2f} dB")
    return report


def psnr(original, reconstructed, mask=None):
    """
    10 log10(R^2 / MSE) in dB. R is the range of the original over the whole
    grid; MSE is taken over mask (default: original > 0). Returns inf for a
    perfect reconstruction.
    """
    _check_dims(original, reconstructed)
    full = original.data.astype(np.float64)
    value_range = float(full.max() - full.min())
    if value_range == 0:
        raise ZeroRange("original map is constant; PSNR undefined")
    mask = original.data > 0 if mask is None else np.asarray(mask, dtype=bool)
    if not mask.any():
        raise EmptyEvaluationSet("PSNR evaluation set is empty")
    diff = full[mask] - reconstructed.data[mask].astype(np.float64)
    mse = float(np.mean(diff * diff))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(value_range ** 2 / mse)


def gzip_ratio(original_bytes, level=9):
    """Ratio plain GZIP achieves on the raw file, as a baseline."""
    packed = gzip.compress(bytes(original_bytes), compresslevel=level, mtime=0)
    return len(original_bytes) / len(packed)


def format_db(value):
    return '∞' if math.isinf(value) else f"{value:.2f}"


def report_frame(reports, ratios=None):
    """
    Long-format table: one row per (file, band) plus global rows (MSE, PSNR,
    and ratio when given). reports maps file name -> ErrorReport.
    """
    ratios = ratios or {}
    rows = []
    for name, report in reports.items():
        for b in report.bands:
            rows.append({'file': name, 'band': b.label, 'mean_pct': b.mean_pct,
                         'median_pct': b.median_pct, 'within20_pct': 100.0 * b.within_fraction,
                         'count': b.count, 'value': math.nan})
        rows.append({'file': name, 'band': 'MSE', 'count': report.n_points, 'value': report.mse})
        rows.append({'file': name, 'band': 'PSNR', 'count': report.n_points, 'value': report.psnr})
        if name in ratios:
            rows.append({'file': name, 'band': 'ratio', 'count': report.n_points, 'value': ratios[name]})
    return pd.DataFrame(rows, columns=REPORT_COLUMNS)


def format_report(report, name=''):
    """Aligned plain-text table in the layout of the classic per-region error table."""
    table = pd.DataFrame([{
        'Density Region': b.label,
        'Mean Error (%)': f"{b.mean_pct:.2f}",
        'Median Error (%)': f"{b.median_pct:.2f}",
        f"Within {report.within_pct:g}% (%)": f"{100.0 * b.within_fraction:.2f}",
        'Points': b.count,
    } for b in report.bands])
    lines = []
    if name:
        lines.append(f"File: {name}")
    lines.append(f"Points with density > {report.threshold:g}: {report.n_points}")
    lines.append(table.to_string(index=False))
    lines.append(f"MSE: {report.mse:.6g}    PSNR: {format_db(report.psnr)} dB")
    return '\n'.join(lines)


def write_report_csv(path, frame):
    return atomic_write_bytes(path, frame.to_csv(index=False).encode('utf-8'))
