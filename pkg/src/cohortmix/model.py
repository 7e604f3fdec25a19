"""Joint log-posterior of the cohort mixture model.

Rates are ``f[c, x] = theta[c] * xi[c, x]`` where ``xi`` is a two-component
mixture of parametric densities evaluated at age midpoints and renormalized
over the grid. Births are negative binomial with an age-varying log
dispersion given by a cubic B-spline. The six per-cohort shape/level series
follow independent Gaussian random walks on their unconstrained scales.

The gradient comes from JAX reverse-mode autodiff of the same expression.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import jax
import numpy as np
import scipy.special as sc
from scipy.interpolate import BSpline

jax.config.update("jax_enable_x64", True)

import jax.numpy as jnp  # noqa: E402
import jax.scipy.special as jsp  # noqa: E402

from .data import AgeGrid, FertilityDataset  # noqa: E402
from .densities import ComponentSpec, Family, _gammaln, logpdf_xp  # noqa: E402

SERIES = ("theta", "psi", "mu_sum", "mu_diff", "tau1", "tau2")
MU_SUM_FLOOR = 35.0
MU_DIFF_FLOOR = 2.0
LOG_2PI = math.log(2.0 * math.pi)


# ---------------------------------------------------------------------------
# configuration


@dataclass
class ModelConfig:
    family1: Family = Family.GAMMA
    family2: Family = Family.WEIBULL
    spline_size: int = 8
    parameterization: str = "centered"
    prior_theta_mean: float = math.log(2.0)
    prior_theta_sd: float = 0.5
    prior_psi_mean: float = 0.0
    prior_psi_sd: float = 1.0
    prior_mu_sum_mean: float = math.log(20.0)
    prior_mu_sum_sd: float = 0.5
    prior_mu_diff_mean: float = math.log(8.0)
    prior_mu_diff_sd: float = 0.5
    prior_tau1_mean: float = math.log(5.0)
    prior_tau1_sd: float = 0.5
    prior_tau2_mean: float = math.log(5.0)
    prior_tau2_sd: float = 0.5
    prior_beta_mean: float = 4.0
    prior_beta_sd: float = 2.0
    innovation_sd_scale: float = 0.5
    dispersion_sd_scale: float = 1.0
    age_min: int = 12
    age_max: int = 55
    low_open_top: int = 14
    high_open_bottom: int = 49

    def __post_init__(self):
        self.family1 = Family.parse(self.family1)
        self.family2 = Family.parse(self.family2)
        if self.parameterization not in ("centered", "noncentered"):
            raise ValueError(f"parameterization must be 'centered' or 'noncentered', got {self.parameterization!r}")
        if self.spline_size < 4:
            raise ValueError("spline_size must be at least 4 for a cubic basis")
        for f in fields(self):
            if f.name.endswith(("_sd", "_scale")) and not getattr(self, f.name) > 0:
                raise ValueError(f"{f.name} must be positive")

    @property
    def first_means(self) -> np.ndarray:
        return np.array([getattr(self, f"prior_{s}_mean") for s in SERIES])

    @property
    def first_sds(self) -> np.ndarray:
        return np.array([getattr(self, f"prior_{s}_sd") for s in SERIES])

    @property
    def families(self) -> tuple[Family, Family]:
        return self.family1, self.family2

    def grid(self) -> AgeGrid:
        return AgeGrid.default(self.age_min, self.age_max, self.low_open_top, self.high_open_bottom)

    @property
    def spline_domain(self) -> tuple[float, float]:
        return float(self.age_min), float(self.age_max + 1)

    # flat key = value text -------------------------------------------

    def to_text(self) -> str:
        lines = []
        for key, value in asdict(self).items():
            if isinstance(value, Family):
                value = value.value
            lines.append(f'{key} = "{value}"' if isinstance(value, str) else f"{key} = {value!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> ModelConfig:
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"config line {lineno}: expected 'key = value', got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ValueError(f"config line {lineno}: unknown key {key!r}")
            value = value.strip("'\"")
            kind = types[key]
            if kind in ("int", int):
                kwargs[key] = int(value)
            elif kind in ("float", float):
                kwargs[key] = float(value)
            else:
                kwargs[key] = value
        return cls(**kwargs)

    @classmethod
    def load(cls, path: str | Path) -> ModelConfig:
        return cls.from_text(Path(path).read_text(encoding="utf-8"))

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# parameter containers and transforms


@dataclass
class CohortParams:
    """Per-cohort mixture parameters; fields may be scalars or equal-length arrays."""

    theta: np.ndarray
    psi: np.ndarray
    mu_sum: np.ndarray
    mu_diff: np.ndarray
    tau1: np.ndarray
    tau2: np.ndarray

    @property
    def mu1(self):
        return (np.asarray(self.mu_sum) - np.asarray(self.mu_diff)) / 2.0

    @property
    def mu2(self):
        return (np.asarray(self.mu_sum) + np.asarray(self.mu_diff)) / 2.0

    def check(self) -> None:
        ok = (
            np.all(np.asarray(self.theta) > 0)
            and np.all((np.asarray(self.psi) >= 0) & (np.asarray(self.psi) <= 1))
            and np.all(np.asarray(self.mu_sum) > MU_SUM_FLOOR)
            and np.all(np.asarray(self.mu_diff) >= MU_DIFF_FLOOR)
            and np.all(np.asarray(self.tau1) > 0)
            and np.all(np.asarray(self.tau2) > 0)
        )
        if not ok:
            raise ValueError("cohort parameters violate their bounds")

    def as_array(self) -> np.ndarray:
        return np.stack([np.asarray(getattr(self, s), dtype=float) for s in SERIES])

    @classmethod
    def from_array(cls, arr) -> CohortParams:
        return cls(*[np.asarray(a) for a in arr])

    def cohort(self, i: int) -> CohortParams:
        return CohortParams(*[np.asarray(getattr(self, s))[i] for s in SERIES])

    def components(self, family1: Family, family2: Family) -> tuple[ComponentSpec, ComponentSpec]:
        return (
            ComponentSpec(family1, float(self.mu1), float(self.tau1)),
            ComponentSpec(family2, float(self.mu2), float(self.tau2)),
        )


def _logaddexp(a, b, xp=np):
    # jnp.logaddexp carries infinity handling that is slow under autodiff
    if xp is np:
        return np.logaddexp(a, b)
    hi = xp.maximum(a, b)
    return hi + xp.log1p(xp.exp(-xp.abs(a - b)))


def _log_sigmoid(z, xp=np):
    return -_logaddexp(0.0, -z, xp)


def constrain_series(s, xp=np):
    """Map the ``(6, ...)`` unconstrained series to (theta, psi, mu_sum, mu_diff, tau1, tau2)."""
    return (
        xp.exp(s[0]),
        xp.exp(_log_sigmoid(s[1], xp)),
        MU_SUM_FLOOR + xp.exp(s[2]),
        MU_DIFF_FLOOR + xp.exp(s[3]),
        xp.exp(s[4]),
        xp.exp(s[5]),
    )


def series_log_jacobian(s, xp=np):
    """Sum of log-derivatives of the constraining transforms."""
    return (
        xp.sum(s[0])
        + xp.sum(_log_sigmoid(s[1], xp) + _log_sigmoid(-s[1], xp))
        + xp.sum(s[2])
        + xp.sum(s[3])
        + xp.sum(s[4])
        + xp.sum(s[5])
    )


def unconstrain_params(params: CohortParams) -> np.ndarray:
    psi = np.asarray(params.psi, dtype=float)
    return np.stack(
        [
            np.log(params.theta),
            np.log(psi) - np.log1p(-psi),
            np.log(np.asarray(params.mu_sum) - MU_SUM_FLOOR),
            np.log(np.asarray(params.mu_diff) - MU_DIFF_FLOOR),
            np.log(params.tau1),
            np.log(params.tau2),
        ]
    )


@dataclass(frozen=True)
class ParamLayout:
    """Positions inside the flat unconstrained vector.

    ``[6 series x n_cohorts | spline coefficients | 6 log innovation sds | log sigma_phi]``
    """

    n_cohorts: int
    spline_size: int

    @property
    def dim(self) -> int:
        return 6 * self.n_cohorts + self.spline_size + 7

    @property
    def series(self) -> slice:
        return slice(0, 6 * self.n_cohorts)

    @property
    def beta(self) -> slice:
        start = 6 * self.n_cohorts
        return slice(start, start + self.spline_size)

    @property
    def log_sd(self) -> slice:
        start = 6 * self.n_cohorts + self.spline_size
        return slice(start, start + 6)

    @property
    def log_sigma_phi(self) -> int:
        return self.dim - 1

    def series_index(self, name: str, cohort_pos: int) -> int:
        return SERIES.index(name) * self.n_cohorts + cohort_pos

    @classmethod
    def for_vector(cls, z, spline_size: int) -> ParamLayout:
        n = len(z) - spline_size - 7
        if n < 6 or n % 6:
            raise ValueError(f"vector of length {len(z)} does not fit spline size {spline_size}")
        return cls(n // 6, spline_size)

    def names(self, cohorts, parameterization: str = "centered") -> list[str]:
        prefix = {
            "theta": "log_theta",
            "psi": "logit_psi",
            "mu_sum": "log_mu_sum_excess",
            "mu_diff": "log_mu_diff_excess",
            "tau1": "log_tau1",
            "tau2": "log_tau2",
        }
        out = []
        for s in SERIES:
            for i, c in enumerate(cohorts):
                tag = prefix[s]
                if parameterization == "noncentered" and i > 0:
                    tag += "_innov"
                out.append(f"{tag}[{c}]")
        out += [f"beta[{i + 1}]" for i in range(self.spline_size)]
        out += [f"log_sigma_{s}" for s in SERIES]
        out.append("log_sigma_phi")
        return out


def unpack_xp(z, layout: ParamLayout, parameterization: str, xp=np):
    """Split ``z`` into (series (6, C), beta, log innovation sds, log sigma_phi)."""
    log_sd = z[layout.log_sd]
    block = xp.reshape(z[layout.series], (6, layout.n_cohorts))
    if parameterization == "noncentered":
        sd = xp.exp(log_sd)[:, None]
        steps = block[:, 1:] * sd
        block = xp.concatenate([block[:, :1], block[:, :1] + xp.cumsum(steps, axis=1)], axis=1)
    return block, z[layout.beta], log_sd, z[layout.log_sigma_phi]


@dataclass
class DispersionSpline:
    beta: np.ndarray
    basis: np.ndarray
    sigma_phi: float = 1.0

    def log_dispersion(self) -> np.ndarray:
        return self.basis @ self.beta


@dataclass
class Constrained:
    params: CohortParams
    spline: DispersionSpline
    innovation_sd: np.ndarray
    log_jacobian: float


def bspline_knots(size: int, lo: float, hi: float, degree: int = 3) -> np.ndarray:
    interior = np.linspace(lo, hi, size - degree + 1)[1:-1]
    return np.concatenate([[lo] * (degree + 1), interior, [hi] * (degree + 1)])


def bspline_basis(x, size: int, lo: float, hi: float, degree: int = 3) -> np.ndarray:
    """Clamped, equally spaced B-spline design matrix ``(len(x), size)``."""
    x = np.asarray(x, dtype=float)
    if np.any((x < lo) | (x >= hi)):
        raise ValueError(f"basis points must lie in [{lo}, {hi})")
    t = bspline_knots(size, lo, hi, degree)
    return BSpline.design_matrix(x, t, degree).toarray()


def greville_abscissae(size: int, lo: float, hi: float, degree: int = 3) -> np.ndarray:
    t = bspline_knots(size, lo, hi, degree)
    return np.array([t[i + 1 : i + degree + 1].mean() for i in range(size)])


def age_basis(config: ModelConfig) -> np.ndarray:
    grid = config.grid()
    lo, hi = config.spline_domain
    return bspline_basis(grid.ages + 0.5, config.spline_size, lo, hi)


def constrain(z, config: ModelConfig) -> Constrained:
    z = np.asarray(z, dtype=float)
    layout = ParamLayout.for_vector(z, config.spline_size)
    s, beta, log_sd, log_sigma_phi = unpack_xp(z, layout, config.parameterization, np)
    params = CohortParams(*constrain_series(s, np))
    log_jac = series_log_jacobian(s, np) + np.sum(log_sd) + log_sigma_phi
    if config.parameterization == "noncentered":
        # innovations are scaled by their sd before the cumulative sum
        log_jac += (layout.n_cohorts - 1) * np.sum(log_sd)
    spline = DispersionSpline(beta.copy(), age_basis(config), float(np.exp(log_sigma_phi)))
    return Constrained(params, spline, np.exp(log_sd), float(log_jac))


def unconstrain(constrained: Constrained, config: ModelConfig) -> np.ndarray:
    s = unconstrain_params(constrained.params)
    log_sd = np.log(constrained.innovation_sd)
    if config.parameterization == "noncentered":
        s = np.concatenate([s[:, :1], np.diff(s, axis=1) / np.exp(log_sd)[:, None]], axis=1)
    return np.concatenate([s.ravel(), constrained.spline.beta, log_sd, [math.log(constrained.spline.sigma_phi)]])


# ---------------------------------------------------------------------------
# shape, rates, dispersion


def log_age_shape_xp(log_psi, log1m_psi, mu1, mu2, tau1, tau2, ages_mid, family1, family2, xp=np):
    """Normalized log mixture mass per single age; parameters broadcast over a trailing age axis."""
    lg1 = logpdf_xp(family1, ages_mid, mu1[..., None], tau1[..., None], xp)
    lg2 = logpdf_xp(family2, ages_mid, mu2[..., None], tau2[..., None], xp)
    raw = _logaddexp(log_psi[..., None] + lg1, log1m_psi[..., None] + lg2, xp)
    norm = (jsp if xp is jnp else sc).logsumexp(raw, axis=-1, keepdims=True)
    return raw - norm


def log_age_shape(params: CohortParams, grid: AgeGrid, family1: Family, family2: Family) -> np.ndarray:
    psi = np.asarray(params.psi, dtype=float)
    with np.errstate(divide="ignore"):
        log_psi, log1m_psi = np.log(psi), np.log1p(-psi)
    return log_age_shape_xp(
        log_psi,
        log1m_psi,
        np.asarray(params.mu1, dtype=float),
        np.asarray(params.mu2, dtype=float),
        np.asarray(params.tau1, dtype=float),
        np.asarray(params.tau2, dtype=float),
        grid.ages + 0.5,
        Family.parse(family1),
        Family.parse(family2),
        np,
    )


def pasfr(params: CohortParams, grid: AgeGrid, family1: Family, family2: Family) -> np.ndarray:
    """Proportionate age-specific fertility over grid cells (sums to one)."""
    xi = grid.to_cells(np.exp(log_age_shape(params, grid, family1, family2)))
    return xi / xi.sum(axis=-1, keepdims=True)


def rates(theta, xi) -> np.ndarray:
    """Age-specific rates ``theta * xi``; a leading cohort axis on ``theta`` broadcasts over cells."""
    return np.asarray(theta, dtype=float)[..., None] * np.asarray(xi, dtype=float)


def aggregate_nb(cells) -> tuple[float, float]:
    """Moment-matched (mean, dispersion) for a sum of independent negative binomials."""
    cells = [(float(m), float(phi)) for m, phi in cells]
    if not cells:
        raise ValueError("no cells to aggregate")
    if any(m <= 0 or phi <= 0 for m, phi in cells):
        raise ValueError("means and dispersions must be positive")
    if len(cells) == 1:
        return cells[0]
    total = sum(m for m, _ in cells)
    excess = sum(m * m / phi for m, phi in cells)
    return total, total * total / excess


def aggregate_log_dispersion_xp(log_m, log_disp, mask, xp=np):
    """Log of the moment-matched dispersion, over the trailing axis, in log space."""
    lse = (jsp if xp is jnp else sc).logsumexp
    log_total = lse(log_m, axis=-1, b=mask)
    return 2.0 * log_total - lse(2.0 * log_m - log_disp, axis=-1, b=mask), log_total


def dispersion_at_cells(spline: DispersionSpline, grid: AgeGrid, means=None) -> np.ndarray:
    """Log dispersion per grid cell.

    Single-age cells read the spline at the age midpoint. Aggregate cells get
    the moment-matched value from their single-age ``means`` (equal means
    when omitted).
    """
    phi_age = spline.log_dispersion()
    means = np.ones(grid.n_ages) if means is None else np.asarray(means, dtype=float)
    out = np.empty(means.shape[:-1] + (grid.n_cells,))
    for k, cell in enumerate(grid.cells):
        idx = [grid.age_index(a) for a in cell.ages]
        if not cell.is_aggregate:
            out[..., k] = phi_age[idx[0]]
            continue
        lphi, _ = aggregate_log_dispersion_xp(np.log(means[..., idx]), phi_age[idx], np.ones(len(idx)), np)
        out[..., k] = lphi
    return out


# ---------------------------------------------------------------------------
# densities of the likelihood and priors


def nb_logpmf_xp(y, log_m, log_phi, xp=np):
    gammaln = _gammaln(xp)
    phi = xp.exp(log_phi)
    d = _logaddexp(log_m - log_phi, 0.0, xp)  # log(1 + m / phi)
    return gammaln(y + phi) - gammaln(phi) - gammaln(y + 1.0) - phi * d + y * (log_m - log_phi - d)


def nb_log_pmf(y, m, phi):
    """Negative binomial log-probability with mean ``m`` and dispersion ``phi``.

    Variance is ``m + m**2 / phi``.
    """
    y, m, phi = (np.asarray(v, dtype=float) for v in (y, m, phi))
    if np.any(y < 0) or np.any(y != np.round(y)):
        raise ValueError("y must be a non-negative integer")
    if np.any(~(m > 0)) or np.any(~(phi > 0)):
        raise ValueError("mean and dispersion must be positive")
    out = nb_logpmf_xp(y, np.log(m), np.log(phi), np)
    return out[()] if out.ndim == 0 else out


def normal_logpdf_xp(x, mean, sd, xp=np):
    return -0.5 * LOG_2PI - xp.log(sd) - 0.5 * ((x - mean) / sd) ** 2


def half_normal_logpdf_xp(x, scale, xp=np):
    return math.log(2.0) + normal_logpdf_xp(x, 0.0, scale, xp)


def rw_logpdf_xp(series, sd, first_mean, first_sd, xp=np):
    """Random-walk log density along the last axis; leading axes are summed."""
    lp = xp.sum(normal_logpdf_xp(series[..., 0], first_mean, first_sd, xp))
    steps = series[..., 1:] - series[..., :-1]
    return lp + xp.sum(normal_logpdf_xp(steps, 0.0, xp.asarray(sd)[..., None], xp))


def rw_log_prior(series, sd: float, first_mean: float, first_sd: float) -> float:
    series = np.asarray(series, dtype=float)
    if not sd > 0:
        raise ValueError("innovation sd must be positive")
    return float(rw_logpdf_xp(series, sd, first_mean, first_sd, np))


# ---------------------------------------------------------------------------
# the model


def _cell_runs(grid: AgeGrid) -> list[tuple[str, slice]]:
    """Group the grid into runs of consecutive single-age cells and lone aggregate cells."""
    runs = []
    for cell in grid.cells:
        a = grid.age_index(cell.min_age)
        if cell.is_aggregate:
            runs.append(("aggregate", slice(a, a + len(cell.ages))))
        elif runs and runs[-1][0] == "single" and runs[-1][1].stop == a:
            runs[-1] = ("single", slice(runs[-1][1].start, a + 1))
        else:
            runs.append(("single", slice(a, a + 1)))
    return runs


class FertilityModel:
    """Log posterior, gradient and pointwise log-likelihood for one dataset.

    ``weights`` scale each observed cell's log-likelihood term (zero leaves a
    cell out, as in a leave-out refit).
    """

    def __init__(self, data: FertilityDataset, config: ModelConfig | None = None, weights=None):
        self.config = config or ModelConfig()
        if data.grid != self.config.grid():
            raise ValueError("dataset grid does not match the configured age grid")
        if data.n_cohorts and np.any(np.diff(data.cohorts) != 1):
            raise ValueError("cohorts must be consecutive years for the random-walk priors")
        self.data = data
        self.grid = data.grid
        self.layout = ParamLayout(data.n_cohorts, self.config.spline_size)
        ci, ki, births, rows = data.observations()
        self.obs_cohort, self.obs_cell, self.obs_births = ci, ki, births
        self.obs_exposure = rows
        seen = data.age_observed
        self._age_mask = seen.astype(float)
        self._log_exposure = np.log(np.where(seen, data.exposure, 1.0))
        self._obs_flat = ci * self.grid.n_cells + ki
        self._cell_runs = _cell_runs(self.grid)
        self.n_obs = len(births)
        self.weights = np.ones(self.n_obs) if weights is None else np.asarray(weights, dtype=float)
        if self.weights.shape != (self.n_obs,):
            raise ValueError("weights must have one entry per observed cell")
        self.basis = age_basis(self.config)
        self._fns = None

    def __getstate__(self):
        state = dict(self.__dict__)
        state["_fns"] = None
        return state

    @property
    def dim(self) -> int:
        return self.layout.dim

    @property
    def param_names(self) -> list[str]:
        return self.layout.names(self.data.cohorts, self.config.parameterization)

    def with_weights(self, weights) -> FertilityModel:
        return FertilityModel(self.data, self.config, weights)

    # -- jax graph -------------------------------------------------------

    def _terms(self, z, weights):
        cfg, layout = self.config, self.layout
        s, beta, log_sd, log_sigma_phi = unpack_xp(z, layout, cfg.parameterization, jnp)
        log_theta = s[0]
        log_psi, log1m_psi = _log_sigmoid(s[1], jnp), _log_sigmoid(-s[1], jnp)
        mu_sum = MU_SUM_FLOOR + jnp.exp(s[2])
        mu_diff = MU_DIFF_FLOOR + jnp.exp(s[3])
        mu1, mu2 = (mu_sum - mu_diff) / 2.0, (mu_sum + mu_diff) / 2.0
        tau1, tau2 = jnp.exp(s[4]), jnp.exp(s[5])

        valid = jnp.all(mu1 >= 0.0) if cfg.family1 is Family.GAMMA else jnp.all(mu1 > 0.0)
        mu1 = jnp.where(valid, mu1, 1.0)

        ages_mid = jnp.asarray(self.grid.ages + 0.5)
        log_xi = log_age_shape_xp(log_psi, log1m_psi, mu1, mu2, tau1, tau2, ages_mid, cfg.family1, cfg.family2, jnp)

        log_m = self._log_exposure + log_theta[:, None] + log_xi
        log_disp_age = jnp.asarray(self.basis) @ beta
        log_mean, log_disp = self._cell_moments(log_m, log_disp_age)
        log_mean = jnp.reshape(log_mean, (-1,))[self._obs_flat]
        log_disp = jnp.reshape(log_disp, (-1,))[self._obs_flat]
        pointwise = nb_logpmf_xp(jnp.asarray(self.obs_births), log_mean, log_disp, jnp)

        sd = jnp.exp(log_sd)
        if cfg.parameterization == "centered":
            prior_series = rw_logpdf_xp(s, sd, jnp.asarray(cfg.first_means), jnp.asarray(cfg.first_sds), jnp)
        else:
            raw = jnp.reshape(z[layout.series], (6, layout.n_cohorts))
            prior_series = jnp.sum(normal_logpdf_xp(raw[:, 0], jnp.asarray(cfg.first_means), jnp.asarray(cfg.first_sds), jnp))
            prior_series += jnp.sum(normal_logpdf_xp(raw[:, 1:], 0.0, 1.0, jnp))
        sigma_phi = jnp.exp(log_sigma_phi)
        prior_beta = rw_logpdf_xp(beta, sigma_phi, cfg.prior_beta_mean, cfg.prior_beta_sd, jnp)
        prior_sd = jnp.sum(half_normal_logpdf_xp(sd, cfg.innovation_sd_scale, jnp)) + half_normal_logpdf_xp(
            sigma_phi, cfg.dispersion_sd_scale, jnp
        )
        jacobian = jnp.sum(log_sd) + log_sigma_phi
        return {
            "likelihood": jnp.sum(weights * pointwise),
            "prior_series": prior_series,
            "prior_beta": prior_beta,
            "prior_sd": prior_sd,
            "jacobian": jacobian,
            "valid": valid,
            "pointwise": pointwise,
        }

    def _cell_moments(self, log_m, log_disp_age):
        """Per-cohort, per-cell log mean and log dispersion of the cell birth count."""
        n = log_m.shape[0]
        means, disps = [], []
        for kind, sl in self._cell_runs:
            if kind == "single":
                means.append(log_m[:, sl])
                disps.append(jnp.broadcast_to(log_disp_age[sl], (n, sl.stop - sl.start)))
                continue
            lphi, lmean = aggregate_log_dispersion_xp(log_m[:, sl], log_disp_age[None, sl], self._age_mask[:, sl], jnp)
            means.append(lmean[:, None])
            disps.append(lphi[:, None])
        return jnp.concatenate(means, axis=1), jnp.concatenate(disps, axis=1)

    def _logp(self, z, weights):
        t = self._terms(z, weights)
        total = t["likelihood"] + t["prior_series"] + t["prior_beta"] + t["prior_sd"] + t["jacobian"]
        total = jnp.where(jnp.isnan(total), -jnp.inf, total)
        return jnp.where(t["valid"], total, -jnp.inf)

    @property
    def fns(self) -> dict:
        if self._fns is None:
            pointwise = lambda z: self._terms(z, jnp.ones(self.n_obs))["pointwise"]  # noqa: E731
            self._fns = {
                "value": jax.jit(self._logp),
                "value_and_grad": jax.jit(jax.value_and_grad(self._logp)),
                "terms": jax.jit(self._terms),
                "pointwise": jax.jit(jax.vmap(pointwise)),
            }
        return self._fns

    # -- numpy-facing API ------------------------------------------------

    def _check(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        if z.shape != (self.dim,):
            raise ValueError(f"expected a vector of length {self.dim}, got shape {z.shape}")
        return z

    def log_posterior(self, z) -> float:
        return float(self.fns["value"](self._check(z), self.weights))

    def log_posterior_grad(self, z) -> np.ndarray:
        return self.logp_and_grad(z)[1]

    def logp_and_grad(self, z) -> tuple[float, np.ndarray]:
        value, grad = self.fns["value_and_grad"](self._check(z), self.weights)
        return float(value), np.asarray(grad)

    def log_posterior_terms(self, z) -> dict[str, float]:
        t = self.fns["terms"](self._check(z), self.weights)
        return {k: float(v) for k, v in t.items() if k != "pointwise"}

    def pointwise_loglik(self, z) -> np.ndarray:
        """Unweighted log-likelihood per observed cell; ``z`` may be one vector or ``(S, dim)``."""
        z = np.asarray(z, dtype=float)
        if z.ndim == 1:
            return np.asarray(self.fns["pointwise"](z[None]))[0]
        out = [np.asarray(self.fns["pointwise"](chunk)) for chunk in np.array_split(z, max(1, len(z) // 500))]
        return np.concatenate(out, axis=0)

    def constrain(self, z) -> Constrained:
        return constrain(self._check(z), self.config)

    def prior_center(self) -> np.ndarray:
        cfg, layout = self.config, self.layout
        z = np.empty(self.dim)
        block = np.repeat(cfg.first_means[:, None], layout.n_cohorts, axis=1)
        if cfg.parameterization == "noncentered":
            block[:, 1:] = 0.0
        z[layout.series] = block.ravel()
        z[layout.beta] = cfg.prior_beta_mean
        # log of the half-normal medians
        z[layout.log_sd] = math.log(cfg.innovation_sd_scale * 0.6744897501960817)
        z[layout.log_sigma_phi] = math.log(cfg.dispersion_sd_scale * 0.6744897501960817)
        return z

    def initial_point(self, rng: np.random.Generator, jitter: float = 2.0) -> np.ndarray:
        """Random start with every walk flat at a draw from its first-element prior.

        One draw per series is shared by every cohort: independent
        per-cohort starts strand chains in per-cohort local modes, and
        uniform jitter wider than the prior can start a component so far
        off that no step size escapes. ``beta`` and the log sds get
        ``U(-jitter, jitter)`` around the prior center.
        """
        layout, cfg = self.layout, self.config
        z = self.prior_center() + rng.uniform(-jitter, jitter, size=self.dim)
        first = rng.normal(cfg.first_means, cfg.first_sds)
        block = np.repeat(first[:, None], layout.n_cohorts, axis=1)
        if cfg.parameterization == "noncentered":
            block[:, 1:] = 0.0
        z[layout.series] = block.ravel()
        return z


def log_posterior(z, data: FertilityDataset, config: ModelConfig | None = None) -> float:
    return FertilityModel(data, config).log_posterior(z)


def log_posterior_grad(z, data: FertilityDataset, config: ModelConfig | None = None) -> np.ndarray:
    return FertilityModel(data, config).log_posterior_grad(z)
