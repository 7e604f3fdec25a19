"""Convergence and model-comparison diagnostics.

Split R-hat, Pareto-smoothed importance-sampling leave-one-out (PSIS-LOO),
the refit plan for points whose Pareto shape estimate is too large, and a
mechanical partition of chains into posterior modes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

import numpy as np
from scipy.special import logsumexp

K_THRESHOLD = 0.7
MODE_GAP_SDS = 4.0


# ---------------------------------------------------------------------------
# split R-hat


class Rhat(NamedTuple):
    value: float
    degenerate: bool


def split_rhat(draws) -> Rhat:
    """Potential scale reduction over half-chains.

    Parameters
    ----------
    draws : array_like, shape (chains, n)
        Draws of one scalar quantity. Each chain is split into its first and
        last halves (the middle draw is dropped for odd ``n``).

    Returns
    -------
    Rhat
        ``value`` is 1.0 with ``degenerate=True`` when all draws are equal.
    """
    x = np.asarray(draws, dtype=float)
    if x.ndim != 2 or x.shape[1] < 4:
        raise ValueError("split_rhat needs a (chains, n >= 4) array")
    half = x.shape[1] // 2
    parts = np.concatenate([x[:, :half], x[:, -half:]], axis=0)
    if np.ptp(parts) == 0:
        return Rhat(1.0, True)
    n = half
    chain_means = parts.mean(axis=1)
    between = n * chain_means.var(ddof=1)
    within = parts.var(axis=1, ddof=1).mean()
    if within == 0:
        return Rhat(math.inf, False)
    var_plus = (n - 1) / n * within + between / n
    return Rhat(float(math.sqrt(var_plus / within)), False)


def rhat_all(samples: np.ndarray) -> np.ndarray:
    """Split R-hat of every parameter of a ``(chains, n, dim)`` array."""
    return np.array([split_rhat(samples[:, :, j]).value for j in range(samples.shape[2])])


def mcse_mean(draws) -> float:
    """Monte Carlo standard error of the mean from batch means over all chains."""
    x = np.asarray(draws, dtype=float)
    chains, n = x.shape
    n_batch = max(2, int(math.sqrt(n)))
    size = n // n_batch
    batches = x[:, : n_batch * size].reshape(chains, n_batch, size).mean(axis=2).ravel()
    return float(batches.std(ddof=1) / math.sqrt(len(batches)))


# ---------------------------------------------------------------------------
# generalized Pareto tail fit


def gpd_fit_tail(exceedances) -> tuple[float, float]:
    """Shape ``k`` and scale ``sigma`` of a generalized Pareto fit to exceedances.

    Uses the Zhang & Stephens (2009) empirical-Bayes profile estimate over a
    grid of ``theta = -k / sigma`` values, followed by the weakly informative
    shrinkage of ``k`` towards 0.5 that PSIS applies.

    Parameters
    ----------
    exceedances : array_like
        Positive amounts by which the tail values exceed the threshold. At
        least five are required.

    Returns
    -------
    (k, sigma)
        ``(-inf, nan)`` when all exceedances are equal: there is no tail to
        fit.
    """
    x = np.sort(np.asarray(exceedances, dtype=float))
    n = len(x)
    if n < 5:
        raise ValueError("need at least 5 exceedances")
    if np.ptp(x) == 0:
        return -math.inf, math.nan
    prior_bs, prior_k = 3.0, 10.0
    m = 30 + int(math.sqrt(n))
    b = 1.0 - np.sqrt(m / (np.arange(1, m + 1) - 0.5))
    b /= prior_bs * x[int(n / 4 + 0.5) - 1]
    b += 1.0 / x[-1]
    k_grid = np.log1p(-b[:, None] * x).mean(axis=1)
    profile = n * (np.log(-(b / k_grid)) - k_grid - 1.0)
    weights = 1.0 / np.exp(profile - profile[:, None]).sum(axis=1)
    keep = weights >= 10 * np.finfo(float).eps
    b, weights = b[keep], weights[keep] / weights[keep].sum()
    b_post = float(np.sum(b * weights))
    k = float(np.log1p(-b_post * x).mean())
    sigma = -k / b_post
    k = (n * k + prior_k * 0.5) / (n + prior_k)
    return k, sigma


def gpd_quantile(p, k: float, sigma: float):
    p = np.asarray(p, dtype=float)
    if abs(k) < 1e-8:
        # second-order series; expm1(k L) / k loses digits as k underflows
        log_tail = -np.log1p(-p)
        return sigma * log_tail * (1.0 + 0.5 * k * log_tail)
    return sigma * np.expm1(-k * np.log1p(-p)) / k


def psis_smooth(log_ratios) -> tuple[np.ndarray, float]:
    """Pareto-smoothed, normalized log importance weights for one data point.

    The largest ``ceil(0.2 S)`` ratios are replaced by expected order
    statistics of the fitted generalized Pareto and then truncated at the
    raw maximum.

    Returns
    -------
    (log_weights, k)
        ``log_weights`` sum (in linear space) to one.
    """
    lw = np.asarray(log_ratios, dtype=float).copy()
    lw -= lw.max()
    n = len(lw)
    tail_len = int(math.ceil(0.2 * n))
    order = np.argsort(lw, kind="stable")
    cutoff = max(lw[order[-tail_len - 1]], math.log(np.finfo(float).tiny))
    tail = np.flatnonzero(lw > cutoff)
    k = -math.inf
    if len(tail) >= 5:
        tail = tail[np.argsort(lw[tail], kind="stable")]
        exp_cut = math.exp(cutoff)
        k, sigma = gpd_fit_tail(np.exp(lw[tail]) - exp_cut)
        if math.isfinite(k):
            probs = (np.arange(len(tail)) + 0.5) / len(tail)
            lw[tail] = np.log(gpd_quantile(probs, k, sigma) + exp_cut)
            lw = np.minimum(lw, 0.0)
    elif len(tail) > 0:
        k = math.inf
    return lw - logsumexp(lw), k


# ---------------------------------------------------------------------------
# PSIS-LOO


@dataclass
class LooResult:
    elpd: float
    pointwise: np.ndarray
    pareto_k: np.ndarray
    p_loo: float
    se: float
    exact: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.exact is None:
            self.exact = np.zeros(len(self.pointwise), bool)

    @property
    def looic(self) -> float:
        return -2.0 * self.elpd

    @property
    def flagged(self) -> np.ndarray:
        """Points whose Pareto ``k`` exceeds the reliability threshold and were not refitted."""
        return (self.pareto_k > K_THRESHOLD) & ~self.exact

    def to_dict(self) -> dict:
        return {
            "elpd": self.elpd,
            "looic": self.looic,
            "p_loo": self.p_loo,
            "se": self.se,
            "n_flagged": int(self.flagged.sum()),
            "pareto_k": [_json_float(k) for k in self.pareto_k],
            "elpd_pointwise": [float(v) for v in self.pointwise],
            "exact": [bool(e) for e in self.exact],
        }


def _json_float(v: float):
    return float(v) if math.isfinite(v) else str(v)


def _loo_from_pointwise(pointwise, lppd, pareto_k, exact=None) -> LooResult:
    pointwise = np.asarray(pointwise, dtype=float)
    n = len(pointwise)
    se = float(math.sqrt(n * pointwise.var(ddof=1))) if n > 1 else 0.0
    return LooResult(float(pointwise.sum()), pointwise, np.asarray(pareto_k, dtype=float), float(lppd - pointwise.sum()), se, exact)


def psis_loo(loglik) -> LooResult:
    """PSIS leave-one-out estimate of the expected log predictive density.

    Parameters
    ----------
    loglik : array_like, shape (S, N)
        Log-likelihood of each of ``N`` observations under each of ``S``
        posterior draws.
    """
    ll = np.asarray(loglik, dtype=float)
    if ll.ndim != 2 or ll.shape[0] < 100:
        raise ValueError("psis_loo needs an (S >= 100, N) matrix")
    if not np.all(np.isfinite(ll)):
        raise ValueError("log-likelihood matrix has non-finite entries")
    n_draw, n_obs = ll.shape
    elpd = np.empty(n_obs)
    ks = np.empty(n_obs)
    for i in range(n_obs):
        lw, ks[i] = psis_smooth(-ll[:, i])
        elpd[i] = logsumexp(lw + ll[:, i])
    lppd = float(np.sum(logsumexp(ll, axis=0) - math.log(n_draw)))
    return _loo_from_pointwise(elpd, lppd, ks)


def exact_elpd(heldout_loglik) -> np.ndarray:
    """``log mean_s p(y_i | theta_s)`` from draws of a fit that left the points out."""
    ll = np.asarray(heldout_loglik, dtype=float)
    return logsumexp(ll, axis=0) - math.log(ll.shape[0])


def replace_with_exact(loo: LooResult, points: Sequence[int], values) -> LooResult:
    """Swap PSIS estimates of ``points`` for exact leave-out values."""
    pointwise = loo.pointwise.copy()
    exact = loo.exact.copy()
    points = np.asarray(points, dtype=int)
    pointwise[points] = np.asarray(values, dtype=float)
    exact[points] = True
    lppd = loo.p_loo + loo.elpd
    return _loo_from_pointwise(pointwise, lppd, loo.pareto_k, exact)


# ---------------------------------------------------------------------------
# refit plan


def refit_plan(points: Sequence[tuple[int, int]], max_refits: int = 3) -> list[list[int]]:
    """Group flagged points into at most ``max_refits`` leave-out batches.

    Each point is a (cohort, age) pair. Points are visited in sorted order
    and placed, greedily, in the batch where their smallest L1 distance to
    current members is largest, subject to batch sizes staying balanced.
    Pairwise swaps between batches then polish the greedy plan.

    Returns
    -------
    list of list of int
        Indices into ``points``, one list per refit.
    """
    points = [tuple(int(v) for v in p) for p in points]
    if not points:
        return []
    if len(points) <= max_refits:
        return [[i] for i in range(len(points))]
    capacity = math.ceil(len(points) / max_refits)
    order = sorted(range(len(points)), key=lambda i: points[i])
    batches: list[list[int]] = [[] for _ in range(max_refits)]

    def gap(i, batch):
        if not batch:
            return math.inf
        return min(abs(points[i][0] - points[j][0]) + abs(points[i][1] - points[j][1]) for j in batch)

    for i in order:
        open_batches = [b for b in range(max_refits) if len(batches[b]) < capacity]
        best = max(open_batches, key=lambda b: (gap(i, batches[b]), -len(batches[b]), -b))
        batches[best].append(i)
    batches = _improve_by_swaps(points, batches)
    return [sorted(b) for b in batches if b]


def _within_profile(points, batches) -> list[int]:
    # ascending within-batch distances; lexicographically larger is better
    return sorted(
        abs(points[a][0] - points[b][0]) + abs(points[a][1] - points[b][1])
        for batch in batches
        for x, a in enumerate(batch)
        for b in batch[x + 1 :]
    )


def _improve_by_swaps(points, batches: list[list[int]]) -> list[list[int]]:
    """Hill-climb the greedy plan by swapping points between batches."""
    current = _within_profile(points, batches)
    improved = True
    while improved:
        improved = False
        for b1 in range(len(batches)):
            for b2 in range(b1 + 1, len(batches)):
                for x in range(len(batches[b1])):
                    for y in range(len(batches[b2])):
                        batches[b1][x], batches[b2][y] = batches[b2][y], batches[b1][x]
                        trial = _within_profile(points, batches)
                        if trial > current:
                            current, improved = trial, True
                        else:
                            batches[b1][x], batches[b2][y] = batches[b2][y], batches[b1][x]
    return batches


def min_within_distance(points, batches) -> float:
    """Smallest within-batch L1 distance (inf when every batch is a singleton)."""
    best = math.inf
    for batch in batches:
        for a in range(len(batch)):
            for b in range(a + 1, len(batch)):
                p, q = points[batch[a]], points[batch[b]]
                best = min(best, abs(p[0] - q[0]) + abs(p[1] - q[1]))
    return best


def apply_refits(loo: LooResult, points, refit: Callable[[list[int]], np.ndarray], max_refits: int = 3) -> LooResult:
    """Run the refit plan for the flagged points of ``loo``.

    ``refit(batch)`` must fit the model without the observations in
    ``batch`` and return their log-likelihood under the new draws,
    shape ``(S, len(batch))``.
    """
    flagged = np.flatnonzero(loo.flagged)
    plan = refit_plan([points[i] for i in flagged], max_refits)
    for batch in plan:
        idx = [int(flagged[j]) for j in batch]
        loo = replace_with_exact(loo, idx, exact_elpd(refit(idx)))
    return loo


# ---------------------------------------------------------------------------
# modes


@dataclass
class ModePartition:
    groups: list[list[int]]
    selected: int
    looic: dict[int, float]
    rhat: np.ndarray | None = None

    @property
    def chains(self) -> list[int]:
        return self.groups[self.selected]

    def to_dict(self) -> dict:
        return {
            "groups": self.groups,
            "selected_group": self.selected,
            "selected_chains": self.chains,
            "group_looic": {str(k): v for k, v in self.looic.items()},
        }


def chains_share_mode(a: np.ndarray, b: np.ndarray, gap_sds: float = MODE_GAP_SDS) -> bool:
    """Whether two chains' ``(n, dim)`` draws sit in the same mode."""
    gap = np.abs(a.mean(axis=0) - b.mean(axis=0))
    pooled = np.sqrt(0.5 * (a.var(axis=0, ddof=1) + b.var(axis=0, ddof=1)))
    return bool(np.all(gap <= gap_sds * pooled))


def mode_partition(samples, looic_fn: Callable[[list[int]], float] | None = None, gap_sds: float = MODE_GAP_SDS) -> ModePartition:
    """Cluster chains by mode and select the group to report.

    Parameters
    ----------
    samples : array, shape (chains, n, dim)
    looic_fn : callable, optional
        Returns the LOOIC of the draws pooled over a group of chains, or
        None when it cannot be computed; used only to break ties between
        equally large groups. Without LOOIC values the first group wins.

    Notes
    -----
    Chains are linked when every parameter's mean gap is within ``gap_sds``
    pooled within-chain sds, and groups are the connected components of
    that relation. The largest group wins.
    """
    samples = np.asarray(samples, dtype=float)
    n_chain = samples.shape[0]
    if n_chain < 2:
        raise ValueError("mode partition needs at least two chains")
    parent = list(range(n_chain))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(n_chain):
        for j in range(i + 1, n_chain):
            if chains_share_mode(samples[i], samples[j], gap_sds):
                parent[find(j)] = find(i)
    roots: dict[int, list[int]] = {}
    for i in range(n_chain):
        roots.setdefault(find(i), []).append(i)
    groups = sorted(roots.values(), key=lambda g: g[0])
    size = max(len(g) for g in groups)
    tied = [i for i, g in enumerate(groups) if len(g) == size]
    looic: dict[int, float] = {}
    selected = tied[0]
    if len(tied) > 1 and looic_fn is not None:
        values = {i: looic_fn(groups[i]) for i in tied}
        if all(v is not None for v in values.values()):
            looic = {i: float(v) for i, v in values.items()}
            selected = min(tied, key=lambda i: (looic[i], i))
    sel = samples[groups[selected]]
    return ModePartition(groups, selected, looic, rhat_all(sel) if sel.shape[1] >= 4 else None)


# ---------------------------------------------------------------------------
# report


def diagnostic_report(draws, loo: LooResult | None = None, partition: ModePartition | None = None, manifest_hash: str | None = None) -> dict:
    """Assemble the JSON-ready diagnostic report for a set of draws."""
    rhat = [split_rhat(draws.samples[:, :, j]) for j in range(draws.dim)]
    report = {
        "manifest_hash": manifest_hash,
        "n_chains": draws.n_chains,
        "n_draws": draws.n_draws,
        "rhat": {name: _json_float(r.value) for name, r in zip(draws.param_names, rhat)},
        "rhat_degenerate": [name for name, r in zip(draws.param_names, rhat) if r.degenerate],
        "max_rhat": _json_float(max(r.value for r in rhat)),
        "divergences": {
            "total": draws.n_divergent,
            "per_chain": [int(v) for v in draws.divergences_per_chain()],
        },
    }
    if "tree_depth" in draws.stats and draws.config is not None:
        report["max_treedepth_hits"] = int(np.sum(draws.stats["tree_depth"] >= draws.config.max_depth))
    if loo is not None:
        report["loo"] = loo.to_dict()
    if partition is not None:
        report["modes"] = partition.to_dict()
        if partition.rhat is not None:
            report["modes"]["rhat_selected"] = {n: _json_float(v) for n, v in zip(draws.param_names, partition.rhat)}
    return report


def write_report(report: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(report, indent=2) + "\n")
