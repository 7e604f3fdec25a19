from __future__ import annotations

import io
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_dataset
from cohortmix.data import AgeGrid
from cohortmix.io import (
    DataFormatError,
    RawTable,
    RunManifest,
    build_dataset,
    dataset_to_csv,
    fingerprint,
    load_dataset,
    parse_age_label,
    parse_canonical,
    parse_table,
    read_canonical,
    read_sidecar,
    read_table,
    simulate_dataset,
    write_canonical,
    write_sidecar,
)
from cohortmix.model import CohortParams, log_age_shape

DATA = Path(__file__).parent / "data"


def table(text: str) -> RawTable:
    return parse_table(io.StringIO(text))


class TestParseTable:
    def test_fixture_labels(self):
        births = read_table(DATA / "hfd_births.txt")
        assert len(births.labels) == 44
        assert births.labels[0] == "12-" and births.labels[-1] == "55+"
        assert births.value_name == "Total"
        assert births.cohorts == [1960, 1961, 1962]

    def test_missing_marker(self):
        births = read_table(DATA / "hfd_births.txt")
        assert (1962, "55+") in births.lines
        assert (1962, "55+") not in births.values

    def test_metadata_skipped(self):
        t = table("some title\nmore notes: 1 2 3\n\nCohort Age Total\n1970 20 5\n")
        assert t.values == {(1970, "20"): 5.0}
        assert t.lines[(1970, "20")] == 5

    def test_named_value_column(self):
        t = parse_table(io.StringIO("Cohort Age Total Other\n1970 20 5 7\n"), value_column="total")
        assert t.values[(1970, "20")] == 5.0

    def test_duplicate_names_both_lines(self):
        with pytest.raises(DataFormatError, match="lines 2 and 4"):
            table("Cohort Age Total\n1970 20 5\n1970 21 5\n1970 20 6\n")

    def test_negative_value(self):
        with pytest.raises(DataFormatError, match="line 2"):
            table("Cohort Age Total\n1970 20 -1\n")

    def test_malformed_row(self):
        with pytest.raises(DataFormatError, match="line 3"):
            table("Cohort Age Total\n1970 20 1\n1970 21\n")
        with pytest.raises(DataFormatError, match="line 2"):
            table("Cohort Age Total\n1970 2x 1\n")

    def test_no_header(self):
        with pytest.raises(DataFormatError):
            table("1970 20 1\n")

    def test_age_labels(self):
        assert parse_age_label("55+") == (55, "+")
        assert parse_age_label("12-") == (12, "-")
        assert parse_age_label(" 30 ") == (30, "")
        with pytest.raises(ValueError):
            parse_age_label("12-14")


class TestBuildDataset:
    def test_bottom_cell_sum(self):
        births = table("Cohort Age B\n1980 12 1\n1980 13 2\n1980 14 3\n1980 15 4\n")
        expo = table("Cohort Age R\n1980 12 10\n1980 13 10\n1980 14 10\n1980 15 10\n")
        data = build_dataset(births, expo)
        assert data.cell_births[0, 0] == 6
        assert data.cell_births[0, 1] == 4

    def test_fixture_cells_match_independent_sums(self):
        births = read_table(DATA / "hfd_births.txt")
        expo = read_table(DATA / "hfd_exposure.txt")
        data = build_dataset(births, expo)
        grid = data.grid
        for i, c in enumerate(data.cohorts):
            for k, cell in enumerate(grid.cells):
                lo, hi = cell.ages[0], cell.ages[-1]
                keys = [key for key in births.values if key[0] == c and lo <= _fold(key[1]) <= hi]
                if keys:
                    assert data.cell_births[i, k] == pytest.approx(sum(births.values[key] for key in keys), rel=1e-15)
                    assert data.cell_exposure[i, k] == pytest.approx(sum(expo.values[key] for key in keys), rel=1e-15)

    def test_completeness(self):
        data = build_dataset(read_table(DATA / "hfd_births.txt"), read_table(DATA / "hfd_exposure.txt"))
        assert data.complete.tolist() == [True, True, False]

    def test_ragged_cohort_incomplete(self):
        rows = "".join(f"1990 {a} 1\n" for a in range(12, 31))
        data = build_dataset(table("Cohort Age B\n" + rows), table("Cohort Age R\n" + rows.replace(" 1\n", " 9\n")))
        assert not data.complete[0]

    def test_exposure_missing(self):
        with pytest.raises(ValueError, match="exposure missing"):
            build_dataset(table("Cohort Age B\n1980 20 3\n"), table("Cohort Age R\n1980 21 3\n"))

    def test_gap_cohorts_filled(self):
        births = table("Cohort Age B\n1980 20 3\n1983 20 4\n")
        expo = table("Cohort Age R\n1980 20 9\n1983 20 9\n")
        data = build_dataset(births, expo)
        assert data.cohorts.tolist() == [1980, 1981, 1982, 1983]
        assert not data.cell_observed[1:3].any()

    def test_zero_exposure_zero_births_missing(self):
        data = build_dataset(table("Cohort Age B\n1980 20 0\n1980 21 2\n"), table("Cohort Age R\n1980 20 0\n1980 21 9\n"))
        assert not data.age_observed[0, data.grid.age_index(20)]

    def test_zero_exposure_with_births(self):
        with pytest.raises(ValueError):
            build_dataset(table("Cohort Age B\n1980 20 1\n"), table("Cohort Age R\n1980 20 0\n"))


def _fold(label: str) -> int:
    return int(np.clip(parse_age_label(label)[0], 12, 55))


class TestCanonical:
    def test_round_trip_bytes(self, tmp_path):
        data, _ = make_dataset(n_cohorts=4, jumpoff=2000)
        text = dataset_to_csv(data)
        path = tmp_path / "d.csv"
        write_canonical(data, path)
        again = read_canonical(path)
        assert dataset_to_csv(again) == text
        assert again == data

    def test_fixture_round_trip(self):
        data = load_dataset(DATA / "hfd_births.txt", DATA / "hfd_exposure.txt")
        text = dataset_to_csv(data)
        assert "12-" in text.splitlines()[1] and ",55+," in text
        births, expo = parse_canonical(io.StringIO(text))
        assert dataset_to_csv(build_dataset(births, expo)) == text

    def test_header_required(self):
        with pytest.raises(DataFormatError, match="line 1"):
            parse_canonical(io.StringIO("cohort,age,births,exposure\n"))

    def test_quoted_fields(self):
        births, _ = parse_canonical(io.StringIO('cohort,age_label,births,exposure\n1970,"55+",3,10\n'))
        assert births.values == {(1970, "55+"): 3.0}

    def test_fingerprint_tracks_content(self):
        a, _ = make_dataset(n_cohorts=3)
        b, _ = make_dataset(n_cohorts=3, seed=2)
        assert fingerprint(a) == fingerprint(make_dataset(n_cohorts=3)[0])
        assert fingerprint(a) != fingerprint(b)

    def test_load_needs_inputs(self):
        with pytest.raises(ValueError):
            load_dataset(births_path=DATA / "hfd_births.txt")

    @settings(max_examples=25)
    @given(st.integers(0, 10_000), st.integers(1990, 2030))
    def test_round_trip_property(self, seed, jumpoff):
        data, _ = make_dataset(n_cohorts=3, first=1960, seed=seed, jumpoff=jumpoff)
        births, expo = parse_canonical(io.StringIO(dataset_to_csv(data)))
        assert dataset_to_csv(build_dataset(births, expo)) == dataset_to_csv(data)


class TestSimulate:
    @pytest.fixture
    def truth(self):
        n = 4
        return CohortParams(np.linspace(1.8, 2.1, n), np.full(n, 0.3), np.full(n, 55.0), np.full(n, 10.0), np.full(n, 4.0), np.full(n, 5.0))

    def test_law_of_large_numbers(self, truth):
        data = simulate_dataset(truth, np.arange(1960, 1964), 1e9, math.log(1e8), seed=1)
        f = truth.theta[:, None] * np.exp(log_age_shape(truth, data.grid, "gamma", "weibull"))
        assert np.max(np.abs(data.births / data.exposure - f)) < 1e-3

    def test_deterministic(self, truth):
        a = simulate_dataset(truth, np.arange(1960, 1964), 1e5, 4.0, seed=3)
        b = simulate_dataset(truth, np.arange(1960, 1964), 1e5, 4.0, seed=3)
        assert a == b
        assert a != simulate_dataset(truth, np.arange(1960, 1964), 1e5, 4.0, seed=4)

    def test_cfs_moments(self, truth):
        r, log_phi = 1e5, 4.0
        data = simulate_dataset(truth, np.arange(1960, 1964), r, log_phi, seed=5)
        f = truth.theta[:, None] * np.exp(log_age_shape(truth, data.grid, "gamma", "weibull"))
        m = r * f
        sd = np.sqrt(np.sum(m + m * m / math.exp(log_phi), axis=1)) / r
        cfs = np.sum(data.births / data.exposure, axis=1)
        assert np.all(np.abs(cfs - truth.theta) <= 3 * sd)

    def test_jumpoff(self, truth):
        data = simulate_dataset(truth, np.arange(1960, 1964), 1e5, 4.0, seed=1, jumpoff=2000)
        assert data.jump_off == 2000
        assert not data.complete.any()

    def test_invalid_params(self, truth):
        bad = CohortParams(-truth.theta, truth.psi, truth.mu_sum, truth.mu_diff, truth.tau1, truth.tau2)
        with pytest.raises(ValueError):
            simulate_dataset(bad, np.arange(1960, 1964), 1e5, 4.0, seed=1)


class TestManifest:
    def test_round_trip(self, tmp_path):
        m = RunManifest("cfg", 7, "data", {"chains": 4})
        m.write(tmp_path / "manifest.json")
        back = RunManifest.read(tmp_path / "manifest.json")
        assert back.hash == m.hash and back.created == m.created

    def test_hash_ignores_time(self):
        a = RunManifest("cfg", 7, "data", created="2020-01-01T00:00:00+00:00")
        b = RunManifest("cfg", 7, "data", created="2021-01-01T00:00:00+00:00")
        assert a.hash == b.hash
        assert a.hash != RunManifest("cfg", 8, "data").hash

    def test_tamper_detected(self, tmp_path):
        path = tmp_path / "manifest.json"
        RunManifest("cfg", 7, "data").write(path)
        path.write_text(path.read_text().replace('"seed": 7', '"seed": 8'))
        with pytest.raises(ValueError, match="altered"):
            RunManifest.read(path)

    def test_sidecar(self, tmp_path):
        write_sidecar(tmp_path / "x.csv", "abc", kind="draws")
        assert read_sidecar(tmp_path / "x.csv") == {"manifest_hash": "abc", "kind": "draws"}


def test_default_grid_labels():
    grid = AgeGrid.default()
    assert grid.labels[0] == "12-14" and grid.labels[-1] == "49+"
    assert grid.n_cells == 36
