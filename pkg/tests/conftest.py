from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from cohortmix.data import AgeGrid, FertilityDataset
from cohortmix.model import CohortParams, FertilityModel, ModelConfig, log_age_shape, unconstrain_params

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def make_dataset(n_cohorts=5, first=1960, exposure=5e5, log_disp=4.0, seed=1, family1="gamma", family2="weibull", jumpoff=None):
    """Negative-binomial births from a smooth truth on the default grid."""
    grid = AgeGrid.default()
    params = CohortParams(
        np.linspace(1.8, 2.1, n_cohorts),
        np.full(n_cohorts, 0.3),
        np.full(n_cohorts, 55.0),
        np.full(n_cohorts, 10.0),
        np.full(n_cohorts, 4.0),
        np.full(n_cohorts, 5.0),
    )
    f = params.theta[:, None] * np.exp(log_age_shape(params, grid, family1, family2))
    rng = np.random.default_rng(seed)
    exposure = np.full(f.shape, float(exposure))
    phi = np.exp(log_disp)
    births = rng.negative_binomial(phi, phi / (phi + exposure * f)).astype(float)
    cohorts = first + np.arange(n_cohorts)
    if jumpoff is not None:
        late = cohorts[:, None] + grid.ages[None, :] > jumpoff
        births[late] = np.nan
        exposure[late] = np.nan
    return FertilityDataset(cohorts, births, exposure, grid), params


def truth_point(model: FertilityModel, params: CohortParams) -> np.ndarray:
    """Unconstrained vector at the generating values with moderate sds."""
    z = model.prior_center()
    s = unconstrain_params(params)
    if model.config.parameterization == "noncentered":
        sd = np.exp(z[model.layout.log_sd])[:, None]
        s = np.concatenate([s[:, :1], np.diff(s, axis=1) / sd], axis=1)
    z[model.layout.series] = s.ravel()
    return z


@pytest.fixture(scope="session")
def small_data():
    return make_dataset()[0]


@pytest.fixture(scope="session")
def config():
    return ModelConfig()


# ---------------------------------------------------------------------------
# acceptance reporting: one line per criterion in the terminal summary

ACCEPTANCE: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion listed in the terminal summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        number, title = mark.args
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
        detail = dict(item.user_properties).get("detail", "")
        if report.skipped and not detail:
            detail = str(report.longrepr[2]) if isinstance(report.longrepr, tuple) else ""
        ACCEPTANCE[number] = (title, status, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, status, detail = ACCEPTANCE[number]
        line = f"criterion {number}: {status}  {title}"
        terminalreporter.write_line(f"{line}  [{detail}]" if detail else line)
