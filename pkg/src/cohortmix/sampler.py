"""No-U-Turn Hamiltonian Monte Carlo with windowed warmup adaptation.

Multinomial trajectory sampling with biased progressive sampling across
doublings and the generalized U-turn check (including the checks across the
two merged halves), dual-averaging step-size adaptation and a diagonal
metric estimated over doubling warmup windows.

A *target* is any object exposing ``dim`` and ``logp_and_grad(z)``; it may
also provide ``initial_point(rng)`` and ``param_names``.
"""

from __future__ import annotations

import csv
import logging
import math
import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

STAT_FIELDS = ("diverging", "tree_depth", "n_leapfrog", "step_size", "accept_stat", "energy", "energy_error")


class SamplerAbort(RuntimeError):
    """Raised when no chain start with a finite log density can be found."""


@dataclass
class SamplerConfig:
    chains: int = 4
    iterations: int = 10000
    warmup: int | None = None
    target_accept: float = 0.95
    max_depth: int = 12
    thin: int = 4
    seed: int = 0
    max_delta_h: float = 1000.0
    init_jitter: float = 2.0
    n_jobs: int = 1

    def __post_init__(self):
        if self.warmup is None:
            self.warmup = self.iterations // 2
        if not 0 < self.target_accept < 1:
            raise ValueError("target_accept must lie in (0, 1)")
        if not 0 <= self.warmup < self.iterations:
            raise ValueError("warmup must be smaller than iterations")
        if self.thin < 1 or self.chains < 1 or self.max_depth < 1:
            raise ValueError("thin, chains and max_depth must be positive")

    @property
    def n_kept(self) -> int:
        return len(range(0, self.iterations - self.warmup, self.thin))


@dataclass
class Draws:
    """Retained draws ``samples[chain, draw, param]`` plus per-iteration statistics.

    ``stats`` covers every post-warmup iteration (before thinning);
    warmup iterations are kept apart in ``warmup_stats``.
    """

    samples: np.ndarray
    param_names: list[str]
    stats: dict[str, np.ndarray]
    warmup_stats: dict[str, np.ndarray] = field(default_factory=dict)
    step_size: np.ndarray | None = None
    inv_metric: np.ndarray | None = None
    config: SamplerConfig | None = None

    @property
    def n_chains(self) -> int:
        return self.samples.shape[0]

    @property
    def n_draws(self) -> int:
        return self.samples.shape[1]

    @property
    def dim(self) -> int:
        return self.samples.shape[2]

    def param(self, name: str) -> np.ndarray:
        return self.samples[:, :, self.param_names.index(name)]

    def flat(self) -> np.ndarray:
        return self.samples.reshape(-1, self.dim)

    @property
    def n_divergent(self) -> int:
        return int(np.sum(self.stats["diverging"]))

    def divergences_per_chain(self) -> np.ndarray:
        return np.sum(self.stats["diverging"], axis=1).astype(int)

    def select_chains(self, chains) -> Draws:
        chains = list(chains)
        return Draws(
            self.samples[chains],
            list(self.param_names),
            {k: v[chains] for k, v in self.stats.items()},
            {k: v[chains] for k, v in self.warmup_stats.items()},
            None if self.step_size is None else self.step_size[chains],
            None if self.inv_metric is None else self.inv_metric[chains],
            self.config,
        )

    # -- persistence -----------------------------------------------------

    def write_csv(self, draws_path: str | Path, stats_path: str | Path) -> None:
        with open(draws_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["chain", "iter", "param", "value"])
            for c in range(self.n_chains):
                for i in range(self.n_draws):
                    row = self.samples[c, i]
                    for name, value in zip(self.param_names, row):
                        w.writerow([c, i, name, repr(float(value))])
        with open(stats_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["chain", "iter", "phase", *STAT_FIELDS])
            for phase, table in (("warmup", self.warmup_stats), ("sampling", self.stats)):
                if not table:
                    continue
                n_iter = table["diverging"].shape[1]
                for c in range(self.n_chains):
                    for i in range(n_iter):
                        w.writerow([c, i, phase, *(_fmt(table[k][c, i]) for k in STAT_FIELDS)])

    @classmethod
    def read_csv(cls, draws_path: str | Path, stats_path: str | Path | None = None) -> Draws:
        with open(draws_path, newline="") as fh:
            rows = list(csv.reader(fh))[1:]
        names: list[str] = []
        index: dict[str, int] = {}
        n_chain = n_iter = 0
        for c, i, name, _ in rows:
            if name not in index:
                index[name] = len(names)
                names.append(name)
            n_chain, n_iter = max(n_chain, int(c) + 1), max(n_iter, int(i) + 1)
        samples = np.empty((n_chain, n_iter, len(names)))
        for c, i, name, value in rows:
            samples[int(c), int(i), index[name]] = float(value)
        stats: dict[str, np.ndarray] = {}
        warm: dict[str, np.ndarray] = {}
        if stats_path is not None:
            with open(stats_path, newline="") as fh:
                srows = list(csv.DictReader(fh))
            for phase, table in (("sampling", stats), ("warmup", warm)):
                sel = [r for r in srows if r["phase"] == phase]
                if not sel:
                    continue
                n_it = max(int(r["iter"]) for r in sel) + 1
                for k in STAT_FIELDS:
                    table[k] = np.zeros((n_chain, n_it))
                for r in sel:
                    for k in STAT_FIELDS:
                        table[k][int(r["chain"]), int(r["iter"])] = float(r[k])
                table["diverging"] = table["diverging"].astype(bool)
        return cls(samples, names, stats, warm)


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    return repr(float(v))


# ---------------------------------------------------------------------------
# integrator and trajectory


def leapfrog(position, momentum, step, logp_and_grad, inv_metric=None, grad=None):
    """One half-kick / drift / half-kick step.

    Returns ``(position, momentum, logp, grad)`` at the new point. ``grad``
    at the starting point may be passed in to save one evaluation.
    """
    inv_metric = np.ones_like(position) if inv_metric is None else inv_metric
    if grad is None:
        _, grad = logp_and_grad(position)
    p = momentum + 0.5 * step * grad
    q = position + step * inv_metric * p
    logp, grad = logp_and_grad(q)
    p = p + 0.5 * step * grad
    return q, p, logp, grad


@dataclass
class _Point:
    q: np.ndarray
    p: np.ndarray
    logp: float
    grad: np.ndarray


@dataclass
class _Tree:
    valid: bool
    end: _Point | None = None
    propose: _Point | None = None
    p_beg: np.ndarray | None = None
    p_end: np.ndarray | None = None
    ps_beg: np.ndarray | None = None
    ps_end: np.ndarray | None = None
    rho: np.ndarray | None = None
    log_weight: float = -math.inf


def _no_uturn(ps_minus, ps_plus, rho) -> bool:
    return float(ps_plus @ rho) > 0 and float(ps_minus @ rho) > 0


def _merge_ok(a: _Tree, b: _Tree, rho) -> bool:
    """U-turn checks for ``a`` followed by ``b`` along the direction of travel."""
    return (
        _no_uturn(a.ps_beg, b.ps_end, rho)
        and _no_uturn(a.ps_beg, b.ps_beg, a.rho + b.p_beg)
        and _no_uturn(a.ps_end, b.ps_end, b.rho + a.p_end)
    )


class NUTS:
    def __init__(self, logp_and_grad, step_size: float, inv_metric: np.ndarray, rng: np.random.Generator,
                 max_depth: int = 10, max_delta_h: float = 1000.0):
        self.logp_and_grad = logp_and_grad
        self.step_size = step_size
        self.inv_metric = inv_metric
        self.rng = rng
        self.max_depth = max_depth
        self.max_delta_h = max_delta_h

    def _kinetic(self, p) -> float:
        return 0.5 * float(p @ (self.inv_metric * p))

    def _leaf(self, start: _Point, direction: int, h0: float) -> _Tree:
        q, p, logp, grad = leapfrog(start.q, start.p, direction * self.step_size, self.logp_and_grad, self.inv_metric, start.grad)
        self._n_leapfrog += 1
        h = -logp + self._kinetic(p)
        if not math.isfinite(h):
            h = math.inf
        if h - h0 > self.max_delta_h:
            self._divergent = True
            return _Tree(False)
        log_w = h0 - h
        self._sum_metro += 1.0 if log_w > 0 else math.exp(log_w)
        point = _Point(q, p, logp, grad)
        ps = self.inv_metric * p
        return _Tree(True, point, point, p, p, ps, ps, p.copy(), log_w)

    def _build(self, depth: int, start: _Point, direction: int, h0: float) -> _Tree:
        if depth == 0:
            return self._leaf(start, direction, h0)
        first = self._build(depth - 1, start, direction, h0)
        if not first.valid:
            return first
        second = self._build(depth - 1, first.end, direction, h0)
        if not second.valid:
            return second
        log_weight = np.logaddexp(first.log_weight, second.log_weight)
        propose = first.propose
        if self.rng.uniform() < math.exp(second.log_weight - log_weight):
            propose = second.propose
        rho = first.rho + second.rho
        tree = _Tree(True, second.end, propose, first.p_beg, second.p_end, first.ps_beg, second.ps_end, rho, log_weight)
        tree.valid = _merge_ok(first, second, rho)
        return tree

    def transition(self, q, logp, grad):
        """One NUTS update from ``q``; returns ``(q, logp, grad, stats)``."""
        self._n_leapfrog = 0
        self._sum_metro = 0.0
        self._divergent = False
        p0 = self.rng.standard_normal(len(q)) / np.sqrt(self.inv_metric)
        h0 = -logp + self._kinetic(p0)
        ps0 = self.inv_metric * p0
        start = _Point(q, p0, logp, grad)
        # the whole trajectory, stored as ends in the forward and backward directions
        fwd = _Tree(True, start, start, p0, p0, ps0, ps0, p0.copy(), 0.0)
        bck_end = start
        sample = start
        log_weight = 0.0
        depth = 0
        while depth < self.max_depth:
            if self.rng.uniform() > 0.5:
                sub = self._build(depth, fwd.end, +1, h0)
                old = fwd
            else:
                sub = self._build(depth, bck_end, -1, h0)
                old = _Tree(True, bck_end, None, fwd.p_end, fwd.p_beg, fwd.ps_end, fwd.ps_beg, fwd.rho, log_weight)
            if not sub.valid:
                break
            depth += 1
            if sub.log_weight > log_weight or self.rng.uniform() < math.exp(sub.log_weight - log_weight):
                sample = sub.propose
            log_weight = float(np.logaddexp(log_weight, sub.log_weight))
            rho = old.rho + sub.rho
            persist = _merge_ok(old, sub, rho)
            if old is fwd:
                fwd = _Tree(True, sub.end, None, old.p_beg, sub.p_end, old.ps_beg, sub.ps_end, rho, log_weight)
            else:
                bck_end = sub.end
                fwd = _Tree(True, fwd.end, None, sub.p_end, fwd.p_end, sub.ps_end, fwd.ps_end, rho, log_weight)
            if not persist:
                break
        n = max(self._n_leapfrog, 1)
        energy = -sample.logp + self._kinetic(sample.p)
        stats = {
            "diverging": self._divergent,
            "tree_depth": depth,
            "n_leapfrog": self._n_leapfrog,
            "step_size": self.step_size,
            "accept_stat": self._sum_metro / n,
            "energy": energy,
            "energy_error": energy - h0,
        }
        return sample.q, sample.logp, sample.grad, stats


def nuts_transition(q, logp_and_grad, step_size, max_depth, rng, inv_metric=None, max_delta_h=1000.0):
    """Single NUTS update from ``q`` (convenience wrapper around :class:`NUTS`)."""
    q = np.asarray(q, dtype=float)
    inv_metric = np.ones_like(q) if inv_metric is None else inv_metric
    logp, grad = logp_and_grad(q)
    sampler = NUTS(logp_and_grad, step_size, inv_metric, rng, max_depth, max_delta_h)
    q, _, _, stats = sampler.transition(q, logp, grad)
    return q, stats


# ---------------------------------------------------------------------------
# adaptation


class DualAveraging:
    def __init__(self, step_size: float, target: float, gamma: float = 0.05, t0: float = 10.0, kappa: float = 0.75):
        self.target, self.gamma, self.t0, self.kappa = target, gamma, t0, kappa
        self.restart(step_size)

    def restart(self, step_size: float) -> None:
        self.mu = math.log(10.0 * step_size)
        self.counter = 0
        self.s_bar = 0.0
        self.x_bar = 0.0

    def update(self, accept_stat: float) -> float:
        self.counter += 1
        accept_stat = min(1.0, accept_stat)
        eta = 1.0 / (self.counter + self.t0)
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.target - accept_stat)
        x = self.mu - self.s_bar * math.sqrt(self.counter) / self.gamma
        x_eta = self.counter ** (-self.kappa)
        self.x_bar = (1.0 - x_eta) * self.x_bar + x_eta * x
        return math.exp(x)

    @property
    def final_step_size(self) -> float:
        return math.exp(self.x_bar)


def warmup_windows(n_warmup: int, init_buffer: int = 75, term_buffer: int = 50, base_window: int = 25):
    """Metric-estimation windows ``[(start, end), ...]`` within warmup, doubling in length."""
    if n_warmup < 20:
        return []
    if init_buffer + term_buffer + base_window > n_warmup:
        init_buffer = int(0.15 * n_warmup)
        term_buffer = int(0.1 * n_warmup)
        base_window = n_warmup - init_buffer - term_buffer
    end_slow = n_warmup - term_buffer
    windows, start, size = [], init_buffer, base_window
    while start < end_slow:
        end = start + size
        if end + 2 * size > end_slow:
            end = end_slow
        windows.append((start, end))
        start, size = end, 2 * size
    return windows


def regularized_variance(samples: np.ndarray) -> np.ndarray:
    n = len(samples)
    var = np.var(samples, axis=0, ddof=1) if n > 1 else np.zeros(samples.shape[1])
    out = (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))
    return np.where(var > 0, out, 1.0)


def find_reasonable_step_size(sampler: NUTS, q, logp, grad, step_size: float) -> float:
    """Double or halve the step until one leapfrog step crosses 0.8 acceptance."""
    rng = sampler.rng

    def delta_h(eps):
        p = rng.standard_normal(len(q)) / np.sqrt(sampler.inv_metric)
        h0 = -logp + sampler._kinetic(p)
        q1, p1, logp1, _ = leapfrog(q, p, eps, sampler.logp_and_grad, sampler.inv_metric, grad)
        h = -logp1 + sampler._kinetic(p1)
        return h0 - h if math.isfinite(h) else -math.inf

    direction = 1 if delta_h(step_size) > math.log(0.8) else -1
    for _ in range(100):
        dh = delta_h(step_size)
        if direction == 1 and not dh > math.log(0.8):
            break
        if direction == -1 and not dh < math.log(0.8):
            break
        step_size = step_size * 2.0 if direction == 1 else step_size / 2.0
        if step_size > 1e7 or step_size < 1e-12:
            break
    return step_size


def adapt(sampler: NUTS, q, n_warmup: int, target_accept: float, logp=None, grad=None, record=None):
    """Run ``n_warmup`` adaptive transitions in place on ``sampler``.

    Returns the final ``(q, logp, grad)``; ``sampler.step_size`` and
    ``sampler.inv_metric`` hold the adapted values.
    """
    if logp is None:
        logp, grad = sampler.logp_and_grad(q)
    sampler.step_size = find_reasonable_step_size(sampler, q, logp, grad, sampler.step_size)
    averager = DualAveraging(sampler.step_size, target_accept)
    windows = warmup_windows(n_warmup)
    window_ends = {end - 1: start for start, end in windows}
    in_window = np.zeros(n_warmup, bool)
    for start, end in windows:
        in_window[start:end] = True
    buffer = []
    for i in range(n_warmup):
        q, logp, grad, stats = sampler.transition(q, logp, grad)
        if record is not None:
            record(i, stats)
        sampler.step_size = averager.update(stats["accept_stat"])
        if in_window[i]:
            buffer.append(q)
        if i in window_ends:
            sampler.inv_metric = regularized_variance(np.asarray(buffer))
            buffer = []
            sampler.step_size = find_reasonable_step_size(sampler, q, logp, grad, sampler.step_size)
            averager.restart(sampler.step_size)
    if n_warmup > 0:
        sampler.step_size = averager.final_step_size
    return q, logp, grad


# ---------------------------------------------------------------------------
# chains


def _initial_point(target, rng, jitter: float):
    for _ in range(100):
        if hasattr(target, "initial_point"):
            q = np.asarray(target.initial_point(rng), dtype=float)
        else:
            q = rng.uniform(-jitter, jitter, size=target.dim)
        logp, grad = target.logp_and_grad(q)
        if math.isfinite(logp) and np.all(np.isfinite(grad)):
            return q, logp, grad
    raise SamplerAbort("no finite initial log density after 100 draws")


def run_chain(target, config: SamplerConfig, chain: int, seed_seq: np.random.SeedSequence | None = None):
    seed_seq = seed_seq or np.random.SeedSequence(config.seed).spawn(config.chains)[chain]
    rng = np.random.Generator(np.random.PCG64(seed_seq))
    q, logp, grad = _initial_point(target, rng, config.init_jitter)
    sampler = NUTS(target.logp_and_grad, 1.0, np.ones(target.dim), rng, config.max_depth, config.max_delta_h)

    n_post = config.iterations - config.warmup
    warm = {k: np.zeros(config.warmup) for k in STAT_FIELDS}
    post = {k: np.zeros(n_post) for k in STAT_FIELDS}

    def record_into(table):
        def record(i, stats):
            for k in STAT_FIELDS:
                table[k][i] = stats[k]

        return record

    q, logp, grad = adapt(sampler, q, config.warmup, config.target_accept, logp, grad, record_into(warm))
    keep = []
    rec = record_into(post)
    for i in range(n_post):
        q, logp, grad, stats = sampler.transition(q, logp, grad)
        rec(i, stats)
        if i % config.thin == 0:
            keep.append(q)
        if (i + 1) % 500 == 0:
            log.info("chain %d: %d/%d sampling iterations", chain, i + 1, n_post)
    for table in (warm, post):
        table["diverging"] = table["diverging"].astype(bool)
    return np.asarray(keep), post, warm, sampler.step_size, sampler.inv_metric.copy()


def _run_chain_job(args):
    return run_chain(*args)


def run_chains(target, config: SamplerConfig) -> Draws:
    """Run ``config.chains`` independent chains; bit-reproducible for a fixed seed."""
    seqs = np.random.SeedSequence(config.seed).spawn(config.chains)
    jobs = [(target, config, c, seqs[c]) for c in range(config.chains)]
    if config.n_jobs > 1 and config.chains > 1:
        ctx = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(max_workers=config.n_jobs, mp_context=ctx) as pool:
            results = list(pool.map(_run_chain_job, jobs))
    else:
        results = [run_chain(*job) for job in jobs]
    names = list(getattr(target, "param_names", [f"x[{i}]" for i in range(target.dim)]))
    samples = np.stack([r[0] for r in results])
    stats = {k: np.stack([r[1][k] for r in results]) for k in STAT_FIELDS}
    warm = {k: np.stack([r[2][k] for r in results]) for k in STAT_FIELDS}
    return Draws(
        samples,
        names,
        stats,
        warm,
        np.array([r[3] for r in results]),
        np.stack([r[4] for r in results]),
        config,
    )


def config_dict(config: SamplerConfig) -> dict:
    return asdict(config)
