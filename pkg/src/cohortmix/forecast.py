"""Posterior and predictive fertility rates, with forecasts for new cohorts.

Unobserved cells of partially observed cohorts come straight from those
cohorts' sampled parameters. Cohorts beyond the last fitted one are
simulated by stepping each latent random walk forward with the draw's own
innovation sds.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import AgeGrid, FertilityDataset
from .densities import Family
from .model import (
    MU_DIFF_FLOOR,
    MU_SUM_FLOOR,
    CohortParams,
    ModelConfig,
    ParamLayout,
    age_basis,
    constrain_series,
    log_age_shape,
    unpack_xp,
)

PROBS = (0.025, 0.05, 0.25, 0.5, 0.75, 0.95, 0.975)
MAX_PATH_REDRAWS = 1000

# stream tags for per-draw generators
_EXTEND, _PREDICT = 1, 2


def draw_rng(seed: int, stream: int, draw: int) -> np.random.Generator:
    """Generator keyed by (seed, stream, draw index) so results ignore evaluation order."""
    return np.random.default_rng([int(seed), stream, int(draw)])


def extend_series(series, sd, horizon: int, rng: np.random.Generator) -> np.ndarray:
    """Append ``horizon`` random-walk steps to each row of an unconstrained ``(6, C)`` block."""
    series = np.asarray(series, dtype=float)
    if horizon < 0:
        raise ValueError("horizon must be non-negative")
    if horizon == 0:
        return series.copy()
    sd = np.asarray(sd, dtype=float).reshape(-1, 1)
    steps = rng.standard_normal((series.shape[0], horizon)) * sd
    return np.concatenate([series, series[:, -1:] + np.cumsum(steps, axis=1)], axis=1)


def _valid_location(series, family1: Family) -> bool:
    # component-1 location (mu_sum - mu_diff) / 2 is not bounded by the transforms
    mu1 = (MU_SUM_FLOOR + np.exp(series[2]) - MU_DIFF_FLOOR - np.exp(series[3])) / 2.0
    return bool(np.all(mu1 >= 0) if family1 is Family.GAMMA else np.all(mu1 > 0))


def extend_walks(z, config: ModelConfig, horizon: int, rng: np.random.Generator) -> CohortParams:
    """Cohort parameters for the fitted cohorts plus ``horizon`` simulated ones.

    Paths whose first component would get a non-positive location are
    redrawn; such parameters have no density.
    """
    z = np.asarray(z, dtype=float)
    layout = ParamLayout.for_vector(z, config.spline_size)
    s, _, log_sd, _ = unpack_xp(z, layout, config.parameterization, np)
    sd = np.exp(log_sd)
    for _ in range(MAX_PATH_REDRAWS):
        ext = extend_series(s, sd, horizon, rng)
        if _valid_location(ext[:, layout.n_cohorts :], config.family1):
            return CohortParams(*constrain_series(ext, np))
    raise RuntimeError("could not simulate a valid forward path")


@dataclass
class PosteriorRates:
    """Per-draw rates for observed and simulated cohorts.

    ``f_ages`` is ``(S, cohorts, ages)``, ``f_cells`` sums it into grid cells
    and ``theta`` is the completed family size ``(S, cohorts)``.
    """

    cohorts: np.ndarray
    n_fitted: int
    grid: AgeGrid
    f_ages: np.ndarray
    theta: np.ndarray
    log_dispersion: np.ndarray

    @property
    def f_cells(self) -> np.ndarray:
        return self.grid.to_cells(self.f_ages)

    @property
    def n_draws(self) -> int:
        return self.f_ages.shape[0]


def posterior_rates(samples, data: FertilityDataset, config: ModelConfig, horizon: int = 0, seed: int = 0) -> PosteriorRates:
    """Map each unconstrained draw ``samples[s]`` to rates over all cohorts."""
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    grid = data.grid
    layout = ParamLayout(data.n_cohorts, config.spline_size)
    if samples.shape[1] != layout.dim:
        raise ValueError("draws do not match the dataset/config parameter layout")
    basis = age_basis(config)
    n_total = data.n_cohorts + horizon
    f = np.empty((len(samples), n_total, grid.n_ages))
    theta = np.empty((len(samples), n_total))
    log_disp = samples[:, layout.beta] @ basis.T
    for i, z in enumerate(samples):
        params = extend_walks(z, config, horizon, draw_rng(seed, _EXTEND, i))
        xi = np.exp(log_age_shape(params, grid, config.family1, config.family2))
        theta[i] = params.theta
        f[i] = theta[i][:, None] * xi
    cohorts = np.concatenate([data.cohorts, data.cohorts[-1] + 1 + np.arange(horizon)])
    return PosteriorRates(cohorts, data.n_cohorts, grid, f, theta, log_disp)


def predictive_rate_draws(f, exposure, dispersion, rng: np.random.Generator) -> np.ndarray:
    """Simulated rates ``B / R`` with ``B ~ NegBin(mean R f, dispersion)``.

    All arguments broadcast; ``dispersion`` is on the natural scale.
    """
    f, exposure, dispersion = np.broadcast_arrays(
        np.asarray(f, dtype=float), np.asarray(exposure, dtype=float), np.asarray(dispersion, dtype=float)
    )
    if np.any(exposure <= 0):
        raise ValueError("exposure must be positive")
    mean = exposure * f
    births = rng.negative_binomial(dispersion, dispersion / (dispersion + mean))
    return births / exposure


def default_exposure(data: FertilityDataset) -> np.ndarray:
    """Per-age exposure of the most recent cohort that observed each age."""
    out = np.empty(data.grid.n_ages)
    for a in range(data.grid.n_ages):
        seen = np.flatnonzero(data.age_observed[:, a])
        if len(seen) == 0:
            raise ValueError(f"age {data.grid.ages[a]} never observed; supply an exposure schedule")
        out[a] = data.exposure[seen[-1], a]
    return out


def predictive_cell_rates(post: PosteriorRates, exposure, seed: int = 0) -> np.ndarray:
    """Predictive cell rates ``(S, cohorts, cells)``.

    Births are simulated per single age and summed within cells, then
    divided by the mean exposure of the cell's ages, matching how observed
    cell rates are formed. ``exposure`` is ``(ages,)`` or ``(cohorts, ages)``.
    """
    exposure = np.broadcast_to(np.asarray(exposure, dtype=float), post.f_ages.shape[1:])
    grid = post.grid
    out = np.empty((post.n_draws, len(post.cohorts), grid.n_cells))
    mean_exposure = grid.to_cells(exposure) / grid.cell_sizes
    for i in range(post.n_draws):
        rng = draw_rng(seed, _PREDICT, i)
        rate = predictive_rate_draws(post.f_ages[i], exposure, np.exp(post.log_dispersion[i]), rng)
        out[i] = grid.to_cells(rate * exposure) / mean_exposure
    return out


# ---------------------------------------------------------------------------
# summaries


def summarize(values, probs=PROBS) -> dict[str, np.ndarray]:
    """Mean and type-7 quantiles over the leading (draw) axis."""
    values = np.asarray(values, dtype=float)
    if values.shape[0] < 100:
        raise ValueError("summaries need at least 100 draws")
    out = {"mean": values.mean(axis=0)}
    q = np.quantile(values, probs, axis=0, method="linear")
    for p, row in zip(probs, q):
        out[quantile_label(p)] = row
    return out


def quantile_label(p: float) -> str:
    return f"q{100 * p:g}"


@dataclass
class ForecastSummary:
    cohorts: np.ndarray
    cells: list[str]
    rates: dict[str, np.ndarray]
    cfs: dict[str, np.ndarray]
    predictive: dict[str, np.ndarray] | None = None
    metadata: dict = field(default_factory=dict)

    def rows(self):
        for i, c in enumerate(self.cohorts):
            for k, cell in enumerate(self.cells):
                for stat, arr in self.rates.items():
                    yield int(c), cell, stat, float(arr[i, k])
                if self.predictive is not None:
                    for stat, arr in self.predictive.items():
                        if stat != "mean":
                            yield int(c), cell, f"pred_{stat}", float(arr[i, k])
            for stat, arr in self.cfs.items():
                yield int(c), "CFS", stat, float(arr[i])

    def write(self, path: str | Path) -> None:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["cohort", "cell", "statistic", "value"])
            for c, cell, stat, value in self.rows():
                w.writerow([c, cell, stat, repr(value)])
        meta_path = path.with_name(path.name + ".meta.json")
        meta_path.write_text(json.dumps(self.metadata, indent=2, sort_keys=True) + "\n")


def forecast_summary(post: PosteriorRates, predictive=None, probs=PROBS, metadata=None) -> ForecastSummary:
    return ForecastSummary(
        post.cohorts,
        post.grid.labels,
        summarize(post.f_cells, probs),
        summarize(post.theta, probs),
        None if predictive is None else summarize(predictive, probs),
        dict(metadata or {}),
    )


def read_summary(path: str | Path) -> dict[tuple[int, str, str], float]:
    with open(path, newline="") as fh:
        return {(int(r["cohort"]), r["cell"], r["statistic"]): float(r["value"]) for r in csv.DictReader(fh)}
