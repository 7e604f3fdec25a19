"""Reading and writing fertility data, synthetic datasets and run manifests.

Two input formats are understood:

* the HFD-style whitespace table (read only): optional free-text metadata
  lines, a header naming a cohort column, an ``Age`` column and a value
  column, then one row per (cohort, age). Ages may carry an open-interval
  suffix (``12-``, ``55+``) and ``.`` marks a missing value;
* the canonical CSV ``cohort,age_label,births,exposure`` with one row per
  observed single age, which is also the only format written.
"""

from __future__ import annotations

import csv
import hashlib
import io as _io
import json
import logging
import re
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, TextIO

import numpy as np

from . import __version__
from .data import AgeGrid, FertilityDataset
from .densities import Family
from .model import CohortParams, log_age_shape

log = logging.getLogger(__name__)

CANONICAL_HEADER = ("cohort", "age_label", "births", "exposure")
MISSING = "."
_AGE_RE = re.compile(r"^(\d+)([-+]?)$")
_COHORT_NAMES = {"cohort", "year"}


class DataFormatError(ValueError):
    """Malformed input file; the message names the offending line."""


@dataclass
class RawTable:
    """Values keyed by (cohort, age label) as read from a text table.

    ``lines`` records the source line of each entry; missing values are
    absent from ``values`` but still claim their key in ``lines``.
    """

    value_name: str
    values: dict[tuple[int, str], float] = field(default_factory=dict)
    lines: dict[tuple[int, str], int] = field(default_factory=dict)

    @property
    def labels(self) -> list[str]:
        seen: dict[str, None] = {}
        for _, label in self.lines:
            seen.setdefault(label, None)
        return sorted(seen, key=lambda lab: (parse_age_label(lab)[0], lab))

    @property
    def cohorts(self) -> list[int]:
        return sorted({c for c, _ in self.lines})


def parse_age_label(label: str) -> tuple[int, str]:
    """``"55+"`` -> ``(55, "+")``; ``"12-"`` -> ``(12, "-")``; ``"30"`` -> ``(30, "")``."""
    m = _AGE_RE.match(label.strip())
    if not m:
        raise ValueError(f"bad age label {label!r}")
    return int(m.group(1)), m.group(2)


def _parse_value(token: str, lineno: int) -> float | None:
    if token == MISSING:
        return None
    try:
        value = float(token)
    except ValueError:
        raise DataFormatError(f"line {lineno}: cannot read value {token!r}") from None
    if not np.isfinite(value):
        raise DataFormatError(f"line {lineno}: non-finite value {token!r}")
    if value < 0:
        raise DataFormatError(f"line {lineno}: negative value {token}")
    return value


def _header_columns(tokens: list[str]) -> tuple[int, int, int] | None:
    lower = [t.lower() for t in tokens]
    if "age" not in lower:
        return None
    cohort = next((i for i, t in enumerate(lower) if t in _COHORT_NAMES), None)
    if cohort is None:
        return None
    age = lower.index("age")
    # prefer an explicit cohort column when both Year and Cohort appear
    if "cohort" in lower:
        cohort = lower.index("cohort")
    value = len(tokens) - 1
    if value in (cohort, age):
        return None
    return cohort, age, value


def parse_table(stream: TextIO | Iterable[str], value_column: str | None = None) -> RawTable:
    """Parse an HFD-style whitespace-delimited cohort table.

    Lines before the header (the first line naming a cohort column and an
    ``Age`` column) are skipped as metadata. The value column is
    ``value_column`` if given, else the last one.
    """
    header = None
    table = None
    for lineno, raw in enumerate(stream, start=1):
        tokens = raw.split()
        if not tokens:
            continue
        if header is None:
            cols = _header_columns(tokens)
            if cols is None:
                log.debug("skipping metadata line %d: %s", lineno, raw.rstrip())
                continue
            cohort_col, age_col, value_col = cols
            if value_column is not None:
                try:
                    value_col = [t.lower() for t in tokens].index(value_column.lower())
                except ValueError:
                    raise DataFormatError(f"line {lineno}: no column named {value_column!r}") from None
            header = tokens
            table = RawTable(tokens[value_col])
            continue
        if len(tokens) != len(header):
            raise DataFormatError(f"line {lineno}: expected {len(header)} fields, found {len(tokens)}")
        try:
            cohort = int(tokens[cohort_col])
            parse_age_label(tokens[age_col])
        except ValueError as exc:
            raise DataFormatError(f"line {lineno}: {exc}") from None
        key = (cohort, tokens[age_col])
        if key in table.lines:
            raise DataFormatError(f"duplicate entry for cohort {cohort}, age {key[1]} on lines {table.lines[key]} and {lineno}")
        table.lines[key] = lineno
        value = _parse_value(tokens[value_col], lineno)
        if value is not None:
            table.values[key] = value
    if table is None:
        raise DataFormatError("no header row naming a cohort and an Age column")
    return table


def read_table(path: str | Path, value_column: str | None = None) -> RawTable:
    with open(path, encoding="utf-8") as fh:
        return parse_table(fh, value_column)


def _age_in_grid(label: str, grid: AgeGrid) -> int:
    age, _ = parse_age_label(label)
    return int(np.clip(age, grid.ages[0], grid.ages[-1]))


def build_dataset(births: RawTable, exposure: RawTable, grid: AgeGrid | None = None) -> FertilityDataset:
    """Combine birth and exposure tables into a dataset on ``grid``.

    Ages outside the grid fold into its first or last single age. Cohorts
    run consecutively from the first to the last one with any observed
    births. Exposure zero alongside zero births marks the cell missing.
    """
    grid = grid or AgeGrid.default()
    cohorts = sorted({c for c, _ in births.values})
    if not cohorts:
        raise ValueError("no observed births")
    cohorts = list(range(cohorts[0], cohorts[-1] + 1))
    index = {c: i for i, c in enumerate(cohorts)}
    shape = (len(cohorts), grid.n_ages)
    b = np.zeros(shape)
    r = np.zeros(shape)
    seen = np.zeros(shape, bool)
    labels: dict[int, str] = {}
    for (cohort, label), value in births.values.items():
        if (cohort, label) not in exposure.values:
            raise ValueError(f"exposure missing where births observed (cohort {cohort}, age {label})")
        a = grid.age_index(_age_in_grid(label, grid))
        i = index[cohort]
        b[i, a] += value
        r[i, a] += exposure.values[(cohort, label)]
        seen[i, a] = True
        if parse_age_label(label)[1]:
            labels[int(grid.ages[a])] = label
    zero = seen & (r == 0)
    if np.any(zero & (b > 0)):
        i, a = np.argwhere(zero & (b > 0))[0]
        raise ValueError(f"zero exposure with births (cohort {cohorts[i]}, age {grid.ages[a]})")
    if zero.any():
        log.warning("treating %d zero-exposure cells as missing", int(zero.sum()))
        seen &= ~zero
    b[~seen] = np.nan
    r[~seen] = np.nan
    return FertilityDataset(np.array(cohorts), b, r, grid, labels)


# ---------------------------------------------------------------------------
# canonical CSV


def dataset_to_csv(data: FertilityDataset) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CANONICAL_HEADER)
    for i, c in enumerate(data.cohorts):
        for a, age in enumerate(data.grid.ages):
            if data.age_observed[i, a]:
                w.writerow([int(c), data.label_of_age(age), _num(data.births[i, a]), _num(data.exposure[i, a])])
    return buf.getvalue()


def _num(v: float) -> str:
    v = float(v)
    return str(int(v)) if v.is_integer() else repr(v)


def write_canonical(data: FertilityDataset, path: str | Path) -> None:
    Path(path).write_text(dataset_to_csv(data), encoding="utf-8")


def parse_canonical(stream: TextIO | Iterable[str]) -> tuple[RawTable, RawTable]:
    reader = csv.reader(stream)
    try:
        header = next(reader)
    except StopIteration:
        raise DataFormatError("empty file") from None
    if tuple(h.strip() for h in header) != CANONICAL_HEADER:
        raise DataFormatError(f"line 1: expected header {','.join(CANONICAL_HEADER)}")
    births, exposure = RawTable("births"), RawTable("exposure")
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != 4:
            raise DataFormatError(f"line {lineno}: expected 4 fields, found {len(row)}")
        try:
            cohort = int(row[0])
            parse_age_label(row[1])
        except ValueError as exc:
            raise DataFormatError(f"line {lineno}: {exc}") from None
        key = (cohort, row[1].strip())
        if key in births.lines:
            raise DataFormatError(f"duplicate entry for cohort {cohort}, age {key[1]} on lines {births.lines[key]} and {lineno}")
        for table, token in ((births, row[2]), (exposure, row[3])):
            table.lines[key] = lineno
            value = _parse_value(token.strip(), lineno)
            if value is not None:
                table.values[key] = value
    return births, exposure


def read_canonical(path: str | Path, grid: AgeGrid | None = None) -> FertilityDataset:
    with open(path, encoding="utf-8", newline="") as fh:
        births, exposure = parse_canonical(fh)
    return build_dataset(births, exposure, grid)


def load_dataset(births_path=None, exposure_path=None, data_path=None, grid: AgeGrid | None = None) -> FertilityDataset:
    """Load from a canonical CSV, or from separate HFD-style birth and exposure tables."""
    if data_path is not None:
        return read_canonical(data_path, grid)
    if births_path is None or exposure_path is None:
        raise ValueError("need --data, or both --births and --exposure")
    return build_dataset(read_table(births_path), read_table(exposure_path), grid)


def fingerprint(data: FertilityDataset) -> str:
    return hashlib.sha256(dataset_to_csv(data).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# synthetic data


def simulate_dataset(
    params: CohortParams,
    cohorts,
    exposure,
    log_dispersion,
    seed: int,
    family1: Family = Family.GAMMA,
    family2: Family = Family.WEIBULL,
    grid: AgeGrid | None = None,
    jumpoff: int | None = None,
) -> FertilityDataset:
    """Draw births ``NegBin(R f, exp(phi))`` for every cohort and single age.

    ``exposure`` broadcasts to ``(cohorts, ages)`` and ``log_dispersion`` to
    ``(ages,)``. With ``jumpoff`` only ages with ``c + age <= jumpoff`` are
    kept, which makes the recent cohorts ragged.
    """
    grid = grid or AgeGrid.default()
    cohorts = np.asarray(cohorts, dtype=int)
    params.check()
    f = np.asarray(params.theta, dtype=float)[:, None] * np.exp(log_age_shape(params, grid, family1, family2))
    shape = f.shape
    exposure = np.broadcast_to(np.asarray(exposure, dtype=float), shape).copy()
    phi = np.broadcast_to(np.exp(np.asarray(log_dispersion, dtype=float)), shape)
    rng = np.random.default_rng(seed)
    births = rng.negative_binomial(phi, phi / (phi + exposure * f)).astype(float)
    if jumpoff is not None:
        late = cohorts[:, None] + grid.ages[None, :] > jumpoff
        births[late] = np.nan
        exposure[late] = np.nan
    return FertilityDataset(cohorts, births, exposure, grid)


# ---------------------------------------------------------------------------
# manifests


@dataclass
class RunManifest:
    config_hash: str
    seed: int
    dataset_fingerprint: str
    sampler: dict = field(default_factory=dict)
    version: str = __version__
    created: str = ""
    command: str = ""

    def __post_init__(self):
        if not self.created:
            self.created = datetime.now(timezone.utc).isoformat(timespec="seconds")

    @property
    def hash(self) -> str:
        """Content hash; excludes timestamps so reruns share it."""
        key = {"config": self.config_hash, "seed": self.seed, "data": self.dataset_fingerprint, "sampler": self.sampler}
        return hashlib.sha256(json.dumps(key, sort_keys=True).encode()).hexdigest()[:16]

    def write(self, path: str | Path) -> None:
        body = asdict(self)
        body["manifest_hash"] = self.hash
        Path(path).write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")

    @classmethod
    def read(cls, path: str | Path) -> RunManifest:
        body = json.loads(Path(path).read_text())
        stored = body.pop("manifest_hash", None)
        manifest = cls(**body)
        if stored is not None and stored != manifest.hash:
            raise ValueError(f"manifest {path} has been altered (hash mismatch)")
        return manifest


def write_sidecar(path: str | Path, manifest_hash: str, **extra) -> None:
    """JSON metadata next to an artifact tying it to its run manifest."""
    meta = {"manifest_hash": manifest_hash, **extra}
    Path(str(path) + ".meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def read_sidecar(path: str | Path) -> dict:
    return json.loads(Path(str(path) + ".meta.json").read_text())
