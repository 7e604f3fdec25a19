"""Age grid and the cohort-by-age fertility dataset."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

MIN_AGE = 12
MAX_AGE = 55


@dataclass(frozen=True)
class AgeCell:
    label: str
    ages: tuple[int, ...]

    @property
    def min_age(self) -> int:
        return self.ages[0]

    @property
    def is_aggregate(self) -> bool:
        return len(self.ages) > 1


class AgeGrid:
    """Ordered partition of the single ages ``min_age..max_age`` into cells."""

    def __init__(self, cells: Sequence[AgeCell]):
        cells = list(cells)
        ages = [a for cell in cells for a in cell.ages]
        if not cells or ages != list(range(ages[0], ages[-1] + 1)):
            raise ValueError("cells must cover a contiguous, ordered run of ages")
        self.cells = cells
        self.ages = np.arange(ages[0], ages[-1] + 1)
        self.cell_of_age = np.array([i for i, cell in enumerate(cells) for _ in cell.ages])
        self.membership = np.zeros((len(cells), len(self.ages)))
        self.membership[self.cell_of_age, np.arange(len(self.ages))] = 1.0

    @classmethod
    def default(cls, min_age: int = MIN_AGE, max_age: int = MAX_AGE, low_top: int = 14, high_bottom: int = 49) -> AgeGrid:
        cells = [AgeCell(f"{min_age}-{low_top}", tuple(range(min_age, low_top + 1)))]
        cells += [AgeCell(str(a), (a,)) for a in range(low_top + 1, high_bottom)]
        cells.append(AgeCell(f"{high_bottom}+", tuple(range(high_bottom, max_age + 1))))
        return cls(cells)

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    @property
    def n_ages(self) -> int:
        return len(self.ages)

    @property
    def labels(self) -> list[str]:
        return [c.label for c in self.cells]

    @property
    def min_ages(self) -> np.ndarray:
        return np.array([c.min_age for c in self.cells])

    @property
    def cell_sizes(self) -> np.ndarray:
        return self.membership.sum(axis=1)

    def age_index(self, age: int) -> int:
        return int(age - self.ages[0])

    def cell_index(self, label: str) -> int:
        for i, cell in enumerate(self.cells):
            if cell.label == label:
                return i
        raise KeyError(label)

    def to_cells(self, per_age: np.ndarray) -> np.ndarray:
        """Sum a ``(..., n_ages)`` array into ``(..., n_cells)``."""
        return per_age @ self.membership.T

    def __eq__(self, other) -> bool:
        return isinstance(other, AgeGrid) and self.cells == other.cells

    def __repr__(self) -> str:
        return f"AgeGrid({self.labels[0]} .. {self.labels[-1]}, {self.n_cells} cells)"


@dataclass
class FertilityDataset:
    """Births and exposure by cohort and single age, viewed through an age grid.

    Missing single-age observations are ``NaN``. Cohorts are always held in
    ascending order. A grid cell counts as observed when any of its ages is.
    """

    cohorts: np.ndarray
    births: np.ndarray
    exposure: np.ndarray
    grid: AgeGrid = field(default_factory=AgeGrid.default)
    age_labels: dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        cohorts = np.asarray(self.cohorts, dtype=int)
        births = np.array(self.births, dtype=float, copy=True)
        exposure = np.array(self.exposure, dtype=float, copy=True)
        shape = (len(cohorts), self.grid.n_ages)
        if births.shape != shape or exposure.shape != shape:
            raise ValueError(f"births/exposure must have shape {shape}")
        if len(np.unique(cohorts)) != len(cohorts):
            raise ValueError("duplicate cohorts")
        order = np.argsort(cohorts, kind="stable")
        self.cohorts, births, exposure = cohorts[order], births[order], exposure[order]

        seen = ~np.isnan(births)
        if np.any(births[seen] < 0):
            raise ValueError("births must be non-negative")
        frac = seen & (np.abs(births - np.round(births)) > 0)
        if np.any(frac):
            log.info("rounding %d non-integer birth counts", int(frac.sum()))
            births[frac] = np.round(births[frac])
        bad = seen & ~(exposure > 0)
        if np.any(bad):
            c, a = np.argwhere(bad)[0]
            raise ValueError(
                f"exposure missing or non-positive where births observed (cohort {self.cohorts[c]}, age {self.grid.ages[a]})"
            )
        exposure[~seen] = np.nan
        self.births, self.exposure = births, exposure

    # -- derived views -------------------------------------------------

    @property
    def n_cohorts(self) -> int:
        return len(self.cohorts)

    @property
    def age_observed(self) -> np.ndarray:
        return ~np.isnan(self.births)

    @property
    def cell_observed(self) -> np.ndarray:
        return self.grid.to_cells(self.age_observed.astype(float)) > 0

    @property
    def cell_births(self) -> np.ndarray:
        out = self.grid.to_cells(np.nan_to_num(self.births))
        out[~self.cell_observed] = np.nan
        return out

    @property
    def cell_exposure(self) -> np.ndarray:
        out = self.grid.to_cells(np.nan_to_num(self.exposure))
        out[~self.cell_observed] = np.nan
        return out

    @property
    def cell_mean_exposure(self) -> np.ndarray:
        """Exposure per observed constituent age; the denominator of cell rates."""
        n = self.grid.to_cells(self.age_observed.astype(float))
        with np.errstate(invalid="ignore", divide="ignore"):
            return self.cell_exposure / n

    @property
    def cell_rates(self) -> np.ndarray:
        """Observed rates; an aggregate cell's rate estimates the sum of its single-age rates."""
        with np.errstate(invalid="ignore", divide="ignore"):
            return self.cell_births / self.cell_mean_exposure

    @property
    def complete(self) -> np.ndarray:
        top = self.grid.membership[-1] > 0
        return self.age_observed[:, top].all(axis=1)

    @property
    def jump_off(self) -> int:
        idx = self.cohorts[:, None] + self.grid.min_ages[None, :]
        return int(idx[self.cell_observed].max())

    def observations(self):
        """Observed cells as flat arrays.

        Returns ``(cohort_idx, cell_idx, births, exposure_rows)`` where
        ``exposure_rows[o]`` holds per-age exposure of the ages contributing
        to observation ``o`` and zero elsewhere.
        """
        ci, ki = np.nonzero(self.cell_observed)
        births = self.cell_births[ci, ki]
        member = self.grid.membership[ki] > 0
        rows = np.where(member & self.age_observed[ci], np.nan_to_num(self.exposure[ci]), 0.0)
        return ci, ki, births, rows

    @property
    def n_observations(self) -> int:
        return int(self.cell_observed.sum())

    def label_of_age(self, age: int) -> str:
        return self.age_labels.get(int(age), str(int(age)))

    # -- subsetting ----------------------------------------------------

    def select_cells(self, cell_mask: np.ndarray, drop_empty: bool = True) -> FertilityDataset:
        """Keep only the cells flagged in a ``(n_cohorts, n_cells)`` mask."""
        return self.select_ages(cell_mask[:, self.grid.cell_of_age], drop_empty)

    def select_ages(self, age_mask: np.ndarray, drop_empty: bool = True) -> FertilityDataset:
        """Keep only the single ages flagged in a ``(n_cohorts, n_ages)`` mask.

        With ``drop_empty`` leading and trailing cohorts left without any
        observation are removed; interior ones stay so cohorts remain
        consecutive.
        """
        births = np.where(age_mask, self.births, np.nan)
        exposure = np.where(age_mask, self.exposure, np.nan)
        keep = slice(None)
        if drop_empty:
            rows = np.flatnonzero((~np.isnan(births)).any(axis=1))
            keep = slice(rows[0], rows[-1] + 1) if len(rows) else slice(0, 0)
        return FertilityDataset(self.cohorts[keep], births[keep], exposure[keep], self.grid, dict(self.age_labels))

    def __eq__(self, other) -> bool:
        if not isinstance(other, FertilityDataset):
            return NotImplemented
        return (
            self.grid == other.grid
            and np.array_equal(self.cohorts, other.cohorts)
            and np.array_equal(self.births, other.births, equal_nan=True)
            and np.array_equal(self.exposure, other.exposure, equal_nan=True)
        )
