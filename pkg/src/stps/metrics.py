"""Forecast accuracy: MAE, RMSE, MAPE per horizon interval, plus reports."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAPE_FLOOR = 1.0  # |truth| below this (vehicles/interval) is excluded from MAPE
HOUR_SLICES = (12, 24, 48, 96)


def metric_at(kind, truth, pred):
    """One metric over a vector of locations; MAPE is None if every entry is masked."""
    truth = np.asarray(truth, dtype=np.float64).ravel()
    pred = np.asarray(pred, dtype=np.float64).ravel()
    if truth.shape != pred.shape:
        raise ValueError(f"truth {truth.shape} and prediction {pred.shape} differ")
    diff = truth - pred
    if kind == "mae":
        return float(np.mean(np.abs(diff)))
    if kind == "rmse":
        return float(np.sqrt(np.mean(diff * diff)))
    if kind == "mape":
        keep = np.abs(truth) >= MAPE_FLOOR
        if not keep.any():
            return None
        return float(100.0 * np.mean(np.abs(diff[keep] / truth[keep])))
    raise ValueError(f"unknown metric {kind!r}")


@dataclass
class MetricsReport:
    mae: np.ndarray           # (l',)
    rmse: np.ndarray
    mape: np.ndarray          # nan where undefined
    masked: np.ndarray        # entries excluded from MAPE per interval
    forecast_mae: np.ndarray  # per forecast series (window x location) over the horizon

    @property
    def horizon(self):
        return len(self.mae)

    @property
    def avg_mae(self):
        return float(np.mean(self.mae))

    @property
    def avg_rmse(self):
        return float(np.mean(self.rmse))

    @property
    def avg_mape(self):
        defined = self.mape[~np.isnan(self.mape)]
        return float(np.mean(defined)) if defined.size else None

    @property
    def masked_count(self):
        return int(self.masked.sum())

    def slices(self):
        """Rows at the 1, 2, 4 and 8 hour marks that fit in the horizon."""
        return {j: (float(self.mae[j - 1]), float(self.rmse[j - 1]), _opt(self.mape[j - 1]))
                for j in HOUR_SLICES if j <= self.horizon}

    def write_csv(self, path):
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["horizon_interval", "mae", "rmse", "mape", "masked_count"])
            for j in range(self.horizon):
                w.writerow([j + 1, _fmt(self.mae[j]), _fmt(self.rmse[j]), _fmt(self.mape[j]),
                            int(self.masked[j])])
            w.writerow(["avg", _fmt(self.avg_mae), _fmt(self.avg_rmse), _fmt(self.avg_mape),
                        self.masked_count])

    def write_slices_csv(self, path):
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["horizon_interval", "hours", "mae", "rmse", "mape"])
            for j, (mae, rmse, mape) in self.slices().items():
                w.writerow([j, j // 12, _fmt(mae), _fmt(rmse), _fmt(mape)])


def _opt(x):
    return None if x is None or math.isnan(x) else float(x)


def _fmt(x):
    x = _opt(x)
    return "" if x is None else f"{x:.6f}"


def build_report(truth, pred) -> MetricsReport:
    """Per-interval metrics for ``(m', l')`` or stacked ``(W, m', l')`` forecasts."""
    truth = np.asarray(truth, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if truth.shape != pred.shape:
        raise ValueError(f"truth {truth.shape} and prediction {pred.shape} differ")
    if truth.ndim == 2:
        truth, pred = truth[None], pred[None]
    if truth.ndim != 3:
        raise ValueError(f"expected (m', l') or (W, m', l') arrays, got {truth.shape}")
    horizon = truth.shape[-1]
    cols_t = truth.transpose(2, 0, 1).reshape(horizon, -1)
    cols_p = pred.transpose(2, 0, 1).reshape(horizon, -1)
    mae = np.array([metric_at("mae", t, p) for t, p in zip(cols_t, cols_p)])
    rmse = np.array([metric_at("rmse", t, p) for t, p in zip(cols_t, cols_p)])
    mape = np.array([np.nan if (v := metric_at("mape", t, p)) is None else v
                     for t, p in zip(cols_t, cols_p)])
    masked = (np.abs(cols_t) < MAPE_FLOOR).sum(axis=1)
    forecast_mae = np.abs(truth - pred).mean(axis=-1).reshape(-1)
    return MetricsReport(mae, rmse, mape, masked, forecast_mae)


def binned_improvement(report_a: MetricsReport, report_b: MetricsReport, bins=20):
    """Percent MAE improvement of ``b`` over ``a`` in bins of ``a``'s worst forecasts.

    Forecasts are ordered by descending MAE under ``a`` and cut into ``bins``
    equal groups; each group's mean MAE is compared between the two reports.
    """
    a, b = report_a.forecast_mae, report_b.forecast_mae
    if a.shape != b.shape:
        raise ValueError(f"reports cover different forecast sets: {a.shape} vs {b.shape}")
    if a.size < bins:
        raise ValueError(f"{a.size} forecasts cannot fill {bins} bins")
    order = np.argsort(-a, kind="stable")
    out = []
    for group in np.array_split(order, bins):
        ma, mb = a[group].mean(), b[group].mean()
        out.append(0.0 if ma == 0 else 100.0 * (ma - mb) / ma)
    return np.array(out)


def rmse_svg(report: MetricsReport, path, title="RMSE by horizon"):
    """A bare line chart of RMSE against horizon interval."""
    w, h, pad = 640, 360, 48
    y = report.rmse
    xs = pad + (w - 2 * pad) * np.arange(len(y)) / max(len(y) - 1, 1)
    top = float(y.max()) or 1.0
    ys = h - pad - (h - 2 * pad) * y / top
    points = " ".join(f"{a:.1f},{b:.1f}" for a, b in zip(xs, ys))
    ticks = "".join(
        f'<text x="{xs[j - 1]:.1f}" y="{h - pad + 18}" font-size="11" text-anchor="middle">{j // 12}h</text>'
        for j in HOUR_SLICES if j <= len(y))
    Path(path).write_text(
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}">\n'
        f'<rect width="{w}" height="{h}" fill="white"/>\n'
        f'<text x="{w / 2}" y="24" font-size="14" text-anchor="middle">{title}</text>\n'
        f'<line x1="{pad}" y1="{h - pad}" x2="{w - pad}" y2="{h - pad}" stroke="black"/>\n'
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{h - pad}" stroke="black"/>\n'
        f'<text x="{pad - 6}" y="{pad + 4}" font-size="11" text-anchor="end">{top:.1f}</text>\n'
        f'<polyline fill="none" stroke="steelblue" stroke-width="2" points="{points}"/>\n'
        f'{ticks}\n</svg>\n')
