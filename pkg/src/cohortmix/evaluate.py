"""Held-out forecast assessment.

Cells are indexed by period ``t = c + x`` (cohort plus the youngest age of
the cell). Fitting uses ``t <= T0`` and the evaluation window is
``T0 + 1 .. T0 + H``. Point forecasts are scored by RMSE against observed
rates, interval forecasts by empirical coverage, and two naive period
baselines (freeze-rate, freeze-slope) give reference errors.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .data import FertilityDataset

SLOPE_YEARS = 5


@dataclass
class HoldoutSplit:
    t0: int
    horizon: int
    fit: FertilityDataset
    evaluation: FertilityDataset


def cell_periods(data: FertilityDataset) -> np.ndarray:
    """Period index ``c + min_age`` of every (cohort, cell)."""
    return data.cohorts[:, None] + data.grid.min_ages[None, :]


def split(data: FertilityDataset, t0: int, horizon: int) -> HoldoutSplit:
    """Partition observed cells by period into a fit set and an evaluation window.

    Fit cells have ``c + min_age <= t0`` and evaluation cells
    ``t0 < c + min_age <= t0 + horizon``; later cells are dropped.
    """
    if horizon < 1:
        raise ValueError("holdout horizon must be at least one year")
    t = cell_periods(data)
    seen = data.cell_observed
    fit_mask = seen & (t <= t0)
    eval_mask = seen & (t > t0) & (t <= t0 + horizon)
    if not eval_mask.any():
        raise ValueError(f"no observed cells in the evaluation window {t0 + 1}-{t0 + horizon}")
    if not fit_mask.any():
        raise ValueError(f"no observed cells at or before {t0}")
    return HoldoutSplit(t0, horizon, data.select_cells(fit_mask), data.select_cells(eval_mask))


@dataclass
class EvalCells:
    """Observed evaluation cells in a fixed order."""

    cohorts: np.ndarray
    cells: np.ndarray
    labels: list[str]
    births: np.ndarray
    exposure_rows: np.ndarray

    @property
    def keys(self) -> list[tuple[int, str]]:
        return list(zip(self.cohorts.tolist(), self.labels))

    @property
    def mean_exposure(self) -> np.ndarray:
        n = (self.exposure_rows > 0).sum(axis=1)
        return self.exposure_rows.sum(axis=1) / n

    @property
    def rates(self) -> np.ndarray:
        return self.births / self.mean_exposure

    def __len__(self) -> int:
        return len(self.births)


def eval_cells(data: FertilityDataset) -> EvalCells:
    ci, ki, births, rows = data.observations()
    labels = [data.grid.labels[k] for k in ki]
    return EvalCells(data.cohorts[ci], ki, labels, births, rows)


def expected_cell_rates(f_ages, cells: EvalCells, cohort_index: Mapping[int, int]) -> np.ndarray:
    """Expected observed rate of each evaluation cell under per-age rates.

    ``f_ages`` is ``(..., cohorts, ages)``. An evaluation cell's rate is its
    births over the mean exposure of its observed ages, so its expectation
    is ``sum_a R_a f_a / mean(R)``; for a single age this is just ``f``.
    """
    idx = np.array([cohort_index[int(c)] for c in cells.cohorts])
    f = np.asarray(f_ages)[..., idx, :]
    return np.sum(f * cells.exposure_rows, axis=-1) / cells.mean_exposure


def predictive_cell_draws(f_ages, log_dispersion, cells: EvalCells, cohort_index: Mapping[int, int], seed: int = 0) -> np.ndarray:
    """Simulated observed rates ``(S, n_cells)`` at the evaluation cells.

    Births are drawn per observed single age from ``NegBin(R f, exp(phi))``
    with the held-out exposures, summed within cells and divided by the
    mean exposure, mirroring how the observed rates are formed.
    """
    f_ages = np.asarray(f_ages)
    idx = np.array([cohort_index[int(c)] for c in cells.cohorts])
    present = cells.exposure_rows > 0
    exposure = cells.exposure_rows[present]
    out = np.empty((f_ages.shape[0], len(cells)))
    for s in range(f_ages.shape[0]):
        rng = np.random.default_rng([int(seed), 3, s])
        phi = np.broadcast_to(np.exp(log_dispersion[s]), present.shape)[present]
        mean = exposure * f_ages[s][idx][present]
        births = np.zeros(present.shape)
        births[present] = rng.negative_binomial(phi, phi / (phi + mean))
        out[s] = births.sum(axis=1) / cells.mean_exposure
    return out


def _as_aligned(forecast, observed) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(forecast, Mapping) or isinstance(observed, Mapping):
        if not (isinstance(forecast, Mapping) and isinstance(observed, Mapping)):
            raise TypeError("pass two mappings or two arrays")
        if set(forecast) != set(observed):
            raise ValueError("forecast and observed cover different cells")
        keys = sorted(observed)
        return np.array([forecast[k] for k in keys], float), np.array([observed[k] for k in keys], float)
    f, o = np.asarray(forecast, float), np.asarray(observed, float)
    if f.shape != o.shape:
        raise ValueError("forecast and observed cover different cells")
    return f, o


def rmse(forecast, observed) -> float:
    """Root mean squared error over matched cells, each weighted equally.

    Arguments are either two mappings keyed by cell or two equal-shape arrays.
    """
    f, o = _as_aligned(forecast, observed)
    if f.size == 0:
        raise ValueError("no cells to score")
    return float(math.sqrt(np.mean((f - o) ** 2)))


def coverage(lower, upper, observed) -> float:
    """Share of observations inside their closed interval ``[lower, upper]``."""
    lower, upper, observed = (np.asarray(a, dtype=float) for a in (lower, upper, observed))
    if np.any(lower > upper):
        raise ValueError("lower bound above upper bound")
    return float(np.mean((observed >= lower) & (observed <= upper)))


def central_interval(draws, level: float) -> tuple[np.ndarray, np.ndarray]:
    """Type-7 central interval over the leading axis."""
    a = (1.0 - level) / 2.0
    lo, hi = np.quantile(np.asarray(draws, dtype=float), [a, 1.0 - a], axis=0, method="linear")
    return lo, hi


# ---------------------------------------------------------------------------
# naive baselines


def _last_observed(fit: FertilityDataset, k: int, before: int | None = None) -> int:
    rows = np.flatnonzero(fit.cell_observed[:, k])
    if before is not None:
        rows = rows[fit.cohorts[rows] <= before]
    if len(rows) == 0:
        raise ValueError(f"cell {fit.grid.labels[k]} never observed in the fit set")
    return int(rows[-1])


def freeze_rate(fit: FertilityDataset, targets: list[tuple[int, str]]) -> dict[tuple[int, str], float]:
    """Hold each cell's most recent observed rate constant over the forecast window."""
    rates = fit.cell_rates
    out = {}
    for cohort, label in targets:
        k = fit.grid.cell_index(label)
        out[(cohort, label)] = float(rates[_last_observed(fit, k), k])
    return out


def freeze_slope(fit: FertilityDataset, targets: list[tuple[int, str]], years: int = SLOPE_YEARS) -> dict[tuple[int, str], float]:
    """Extend each cell's mean annual change over the last ``years`` periods.

    The slope is applied for at most ``years`` periods after the last
    observation and held flat afterwards; forecasts are floored at zero.
    """
    rates = fit.cell_rates
    index = {int(c): i for i, c in enumerate(fit.cohorts)}
    out = {}
    for cohort, label in targets:
        k = fit.grid.cell_index(label)
        last = _last_observed(fit, k)
        base_cohort = int(fit.cohorts[last])
        start = index.get(base_cohort - years)
        if start is None or not fit.cell_observed[start, k]:
            raise ValueError(f"cell {label} lacks {years + 1} periods of history")
        slope = (rates[last, k] - rates[start, k]) / years
        steps = min(cohort - base_cohort, years)
        out[(cohort, label)] = float(max(rates[last, k] + slope * steps, 0.0))
    return out


# ---------------------------------------------------------------------------
# scoring a posterior forecast


@dataclass
class ForecastScore:
    model: str
    rmse: float
    coverage: dict[str, float]
    n_cells: int

    def as_row(self) -> dict[str, float | str | int]:
        row: dict[str, float | str | int] = {"model": self.model, "rmse": self.rmse}
        row.update(self.coverage)
        row["n_cells"] = self.n_cells
        return row


def score_draws(model: str, rate_draws, predictive_draws, observed, levels=(0.5, 0.9)) -> ForecastScore:
    """RMSE of the posterior-mean forecast and interval coverage.

    ``rate_draws`` and ``predictive_draws`` are ``(S, n_cells)`` draws of the
    expected rate and of the simulated observed rate at each evaluation cell.
    """
    observed = np.asarray(observed, dtype=float)
    cov = {}
    for level in levels:
        tag = f"{round(100 * level)}"
        cov[f"coverage_rate_{tag}"] = coverage(*central_interval(rate_draws, level), observed)
        if predictive_draws is not None:
            cov[f"coverage_pred_{tag}"] = coverage(*central_interval(predictive_draws, level), observed)
    return ForecastScore(model, rmse(np.mean(rate_draws, axis=0), observed), cov, len(observed))


def baseline_score(model: str, forecast: Mapping, cells: EvalCells) -> ForecastScore:
    observed = dict(zip(cells.keys, cells.rates))
    return ForecastScore(model, rmse(forecast, observed), {}, len(cells))


REPORT_METRICS = ("rmse", "coverage_rate_50", "coverage_rate_90", "coverage_pred_50", "coverage_pred_90", "n_cells")


def write_report(scores: Mapping[str, list[ForecastScore]], path: str | Path) -> None:
    """One row per model, one column per metric and dataset (``metric[dataset]``)."""
    datasets = list(scores)
    models: list[str] = []
    for rows in scores.values():
        models += [s.model for s in rows if s.model not in models]
    header = ["model"] + [f"{m}[{d}]" for d in datasets for m in REPORT_METRICS]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for model in models:
            row = [model]
            for d in datasets:
                found = {s.model: s.as_row() for s in scores[d]}.get(model, {})
                row += [_cell(found.get(m)) for m in REPORT_METRICS]
            w.writerow(row)


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def read_report(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
