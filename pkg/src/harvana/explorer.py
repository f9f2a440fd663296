"""Exploration strategies over a search space and the budgeted run loop.

Three families: exhaustive (random, grid), heuristic (evolution, anneal,
hyperband), and sequential model-based (bohb, tpe, gp). All strategies
minimize the overall validation loss nu; f1 is recorded but never optimized.
`run` is a pure function of (space, strategy, evaluator, budget, seed): two
runs with the same arguments produce byte-identical trial logs.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
from scipy.special import ndtr
from scipy.linalg import cho_factor, cho_solve

from .hyperspace import (
    Configuration,
    SearchSpace,
    Trial,
    derive_rng,
    from_unit,
    grid,
    sample,
    to_unit,
    trial_to_line,
    validate_space,
)

STRATEGY_KINDS = ("random", "grid", "evolution", "anneal", "hyperband", "bohb", "tpe", "gp")

DEFAULTS: dict[str, dict] = {
    "random": {},
    "grid": {"points_per_dim": None},  # None: smallest m with m^d >= budget
    "evolution": {"population_size": 20},
    "anneal": {"p0": 0.5, "p_min": 0.05, "sigma0": 0.2, "decay": 0.97},
    "hyperband": {"R": 27, "eta": 3},
    "bohb": {"R": 27, "eta": 3, "gamma": 0.25, "n_candidates": 24, "n_min": None},
    "tpe": {"gamma": 0.25, "n_candidates": 24, "n_startup": 10},
    "gp": {"n_pool": 500, "length_scale": 0.2, "jitter": 1e-8, "max_jitter": 1e-4, "n_startup": 2},
}


class StrategyError(ValueError):
    pass


class ConditioningError(RuntimeError):
    """GP kernel matrix not positive definite after max jitter escalation."""


@dataclass(frozen=True)
class Strategy:
    kind: str
    settings: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise StrategyError(f"unknown strategy {self.kind!r}")
        merged = dict(DEFAULTS[self.kind])
        merged.update(self.settings)
        object.__setattr__(self, "settings", merged)
        s = merged
        if self.kind in ("hyperband", "bohb") and (int(s["eta"]) < 2 or s["R"] < s["eta"]):
            raise StrategyError("hyperband requires R >= eta >= 2")
        if self.kind in ("tpe", "bohb") and not (0.0 < s["gamma"] < 1.0):
            raise StrategyError("TPE gamma must lie in (0,1)")
        if self.kind == "anneal" and not (0.0 < s["decay"] <= 1.0):
            raise StrategyError("anneal decay must lie in (0,1]")
        if self.kind == "evolution" and int(s["population_size"]) < 1:
            raise StrategyError("population_size must be >= 1")


class Evaluator(Protocol):
    """Deterministic (config, budget, seed) -> Trial callable."""

    def __call__(self, config: Configuration, budget: float, seed: int) -> Trial: ...


@dataclass(frozen=True)
class Bracket:
    s: int
    rungs: tuple[tuple[int, float], ...]  # (n_configs, resource)


def hyperband_schedule(R: float, eta: int) -> list[Bracket]:
    """Successive-halving brackets s_max..0 for max resource R and factor eta."""
    if eta < 2:
        raise StrategyError("eta must be >= 2")
    if R < eta:
        raise StrategyError("R must be >= eta")
    s_max = int(math.floor(math.log(R) / math.log(eta) + 1e-12))
    brackets = []
    for s in range(s_max, -1, -1):
        n = math.ceil((s_max + 1) / (s + 1) * eta ** s)
        rungs = []
        i = 0
        while True:
            r = (R * eta ** i) / (eta ** s)  # exact for integer R, eta
            rungs.append((max(1, n), r))
            if r >= R:
                break
            n = n // eta
            i += 1
        brackets.append(Bracket(s=s, rungs=tuple(rungs)))
    return brackets


# ---------------------------------------------------------------------------
# proposal rules

def _unit_history(history: Sequence[Trial], space: SearchSpace) -> tuple[np.ndarray, np.ndarray]:
    X = np.stack([to_unit(space, t.config) for t in history])
    y = np.array([t.nu for t in history])
    return X, y


def _incumbent(history: Sequence[Trial]) -> Trial:
    return min(history, key=lambda t: (t.nu, t.trial_id))


def tpe_propose(history: Sequence[Trial], space: SearchSpace, gamma: float,
                n_candidates: int, rng: np.random.Generator,
                n_startup: int = 10) -> Configuration:
    """Density-ratio proposal: split history at the gamma-quantile of nu,
    draw candidates from the good-set KDE, return the best l(x)/g(x)."""
    n = len(history)
    if n < max(2, n_startup):
        return sample(space, rng)
    X, y = _unit_history(history, space)
    order = np.argsort(y, kind="stable")
    n_good = min(tpe_good_count(n, gamma), n - 1)
    good, bad = X[order[:n_good]], X[order[n_good:]]

    d = space.dim
    cat = [p.kind == "categorical" for p in space.params]
    sizes = [p.n_choices for p in space.params]

    def bandwidth(vals: np.ndarray) -> float:
        return max(0.05, 1.06 * float(vals.std()) * len(vals) ** -0.2)

    def cat_probs(vals: np.ndarray, k: int) -> np.ndarray:
        idx = np.rint(vals * (k - 1)).astype(int)
        counts = np.bincount(idx, minlength=k).astype(float)
        return (counts + 1.0) / (len(vals) + k)

    bw_good = [None if cat[j] else bandwidth(good[:, j]) for j in range(d)]
    bw_bad = [None if cat[j] else bandwidth(bad[:, j]) for j in range(d)]
    pg = [cat_probs(good[:, j], sizes[j]) if cat[j] else None for j in range(d)]
    pb = [cat_probs(bad[:, j], sizes[j]) if cat[j] else None for j in range(d)]

    def kde_logpdf(pts: np.ndarray, centers: np.ndarray, bw: float) -> np.ndarray:
        z = (pts[:, None] - centers[None, :]) / bw
        dens = np.exp(-0.5 * z * z).mean(axis=1) / (bw * math.sqrt(2 * math.pi))
        return np.log(np.maximum(dens, 1e-300))

    # draw candidates from the good-set model
    cand = np.empty((n_candidates, d))
    for j in range(d):
        if cat[j]:
            idx = rng.choice(sizes[j], size=n_candidates, p=pg[j])
            cand[:, j] = idx / (sizes[j] - 1)
        else:
            centers = good[rng.integers(0, len(good), n_candidates), j]
            cand[:, j] = np.clip(centers + rng.normal(0.0, bw_good[j], n_candidates), 0.0, 1.0)

    score = np.zeros(n_candidates)
    for j in range(d):
        if cat[j]:
            idx = np.rint(cand[:, j] * (sizes[j] - 1)).astype(int)
            score += np.log(pg[j][idx]) - np.log(pb[j][idx])
        else:
            score += kde_logpdf(cand[:, j], good[:, j], bw_good[j])
            score -= kde_logpdf(cand[:, j], bad[:, j], bw_bad[j])
    return from_unit(space, cand[int(np.argmax(score))])


def expected_improvement(mu: np.ndarray, sigma: np.ndarray, best: float) -> np.ndarray:
    """EI for minimization; zero wherever predicted sigma is zero."""
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    imp = best - mu
    out = np.zeros_like(mu)
    pos = sigma > 0.0
    z = imp[pos] / sigma[pos]
    out[pos] = imp[pos] * ndtr(z) + sigma[pos] * np.exp(-0.5 * z * z) / math.sqrt(2 * math.pi)
    return np.maximum(out, 0.0)


def gp_propose(history: Sequence[Trial], space: SearchSpace, rng: np.random.Generator,
               length_scale: float = 0.2, n_pool: int = 500,
               jitter: float = 1e-8, max_jitter: float = 1e-4,
               n_startup: int = 2) -> Configuration:
    """GP regression on (unit vector -> nu) with an SE kernel; proposes the
    pool candidate maximizing expected improvement over the incumbent."""
    distinct = {t.config.key() for t in history}
    if len(distinct) < max(2, n_startup):
        return sample(space, rng)
    X, y = _unit_history(history, space)
    y_mean, y_std = float(y.mean()), float(y.std())
    ys = (y - y_mean) / y_std if y_std > 0 else y - y_mean

    sq = ((X[:, None, :] - X[None, :, :]) ** 2).sum(axis=2)
    K = np.exp(-0.5 * sq / length_scale ** 2)
    eps = jitter
    while True:
        try:
            chol = cho_factor(K + eps * np.eye(len(X)), lower=True)
            break
        except np.linalg.LinAlgError:
            eps *= 10.0
            if eps > max_jitter:
                raise ConditioningError(
                    f"kernel matrix not positive definite at jitter {max_jitter}")
    alpha = cho_solve(chol, ys)

    pool = rng.uniform(size=(n_pool, space.dim))
    sq_p = ((pool[:, None, :] - X[None, :, :]) ** 2).sum(axis=2)
    Ks = np.exp(-0.5 * sq_p / length_scale ** 2)
    mu = Ks @ alpha
    v = cho_solve(chol, Ks.T)
    var = np.maximum(1.0 - np.einsum("ij,ji->i", Ks, v), 0.0)
    ei = expected_improvement(mu, np.sqrt(var), best=float(ys.min()))
    return from_unit(space, pool[int(np.argmax(ei))])


def anneal_propose(history: Sequence[Trial], space: SearchSpace,
                   rng: np.random.Generator, t: int,
                   p0: float = 0.5, p_min: float = 0.05,
                   sigma0: float = 0.2, decay: float = 0.97) -> Configuration:
    """Prior sample with probability max(p_min, p0*decay^t), otherwise a
    Gaussian perturbation of the incumbent with scale sigma0*decay^t."""
    if not history:
        return sample(space, rng)
    p_prior = max(p_min, p0 * decay ** t)
    if rng.uniform() < p_prior:
        return sample(space, rng)
    u = to_unit(space, _incumbent(history).config)
    sigma = sigma0 * decay ** t
    return from_unit(space, np.clip(u + rng.normal(0.0, sigma, space.dim), 0.0, 1.0))


def evolution_propose(history: Sequence[Trial], space: SearchSpace,
                      rng: np.random.Generator, population_size: int = 20) -> Configuration:
    """Uniform parent from the population of best trials; one uniformly chosen
    dimension resampled from its prior (guaranteed to differ from the parent)."""
    if not history:
        return sample(space, rng)
    pop = sorted(history, key=lambda t: (t.nu, t.trial_id))[:population_size]
    parent = pop[int(rng.integers(0, len(pop)))]
    dim = int(rng.integers(0, space.dim))
    p = space.params[dim]
    values = dict(parent.config.values)
    current = values[p.name]
    for _ in range(1000):
        fresh = sample(space, rng)[p.name]
        if fresh != current:
            values[p.name] = fresh
            break
    else:  # single-choice degenerate dim cannot differ
        values[p.name] = current
    return Configuration(values)


# ---------------------------------------------------------------------------
# run loop

class _TrialLog:
    """Append-only JSONL writer, flushed after every trial."""

    def __init__(self, path: str | Path | None):
        self.fh = open(path, "w") if path is not None else None

    def append(self, trial: Trial) -> None:
        if self.fh is not None:
            self.fh.write(trial_to_line(trial) + "\n")
            self.fh.flush()

    def close(self) -> None:
        if self.fh is not None:
            self.fh.close()


def _renumber(trial: Trial, trial_id: int) -> Trial:
    return Trial(trial_id=trial_id, config=trial.config, budget=trial.budget,
                 nu=trial.nu, per_activity_nu=trial.per_activity_nu,
                 f1=trial.f1, seed=trial.seed)


def run(space: SearchSpace, strategy: Strategy, evaluator: Evaluator,
        budget_B: int, seed: int, out_path: str | Path | None = None,
        full_budget: float = 1.0, workers: int = 1) -> list[Trial]:
    """Execute a strategy for budget_B evaluator calls; returns the trial log.

    Non-multi-fidelity strategies evaluate at `full_budget` and return exactly
    budget_B trials; hyperband/bohb record every rung evaluation with its rung
    resource in Trial.budget. Evaluator exceptions abort with the partial log
    already flushed to out_path. Batch strategies (random, grid) may evaluate
    with `workers` threads; trials are merged in id order, so the log is
    byte-identical regardless of worker timing. Sequential strategies ignore
    workers (their proposals depend on every previous result).
    """
    validate_space(space)
    if budget_B < 1:
        raise StrategyError("budget_B must be >= 1")
    log = _TrialLog(out_path)
    trials: list[Trial] = []

    def evaluate(config: Configuration, budget: float) -> Trial:
        tid = len(trials)
        trial = _renumber(evaluator(config, budget, _trial_seed(seed, tid)), tid)
        trials.append(trial)
        log.append(trial)
        return trial

    try:
        if strategy.kind in ("hyperband", "bohb"):
            _run_multifidelity(space, strategy, evaluate, budget_B, seed)
        elif strategy.kind in ("random", "grid") and workers > 1:
            configs = _batch_configs(space, strategy, budget_B, seed)
            with ThreadPoolExecutor(max_workers=workers) as pool:
                futures = [pool.submit(evaluator, config, full_budget,
                                       _trial_seed(seed, i))
                           for i, config in enumerate(configs)]
                for i, fut in enumerate(futures):
                    trial = _renumber(fut.result(), i)  # ordered prefix on failure
                    trials.append(trial)
                    log.append(trial)
        else:
            _run_sequential(space, strategy, evaluate, budget_B, seed, full_budget)
    finally:
        log.close()
    return trials


def _batch_configs(space, strategy, budget_B, seed) -> list[Configuration]:
    if strategy.kind == "random":
        return [sample(space, proposal_rng(seed, t)) for t in range(budget_B)]
    return _grid_configs(space, strategy, budget_B)


def _trial_seed(seed: int, trial_id: int) -> int:
    return int(derive_rng(seed, 1, trial_id).integers(0, 2 ** 31 - 1))


def proposal_rng(seed: int, t: int) -> np.random.Generator:
    """The per-trial proposal generator run() hands to each strategy."""
    return derive_rng(seed, 0, t)


def tpe_good_count(n: int, gamma: float) -> int:
    """Size of the good set: the gamma-quantile split, ceil(gamma * n)."""
    return math.ceil(gamma * n)


def _grid_configs(space, strategy, budget_B) -> list[Configuration]:
    ppd = strategy.settings["points_per_dim"]
    if ppd is None:
        ppd = 2
        while len(grid(space, ppd)) < budget_B and ppd <= budget_B:
            ppd += 1
    configs = grid(space, int(ppd))
    if len(configs) < budget_B:
        raise StrategyError(
            f"grid of {len(configs)} configs cannot fill budget {budget_B}")
    return configs[:budget_B]


def _run_sequential(space, strategy, evaluate, budget_B, seed, full_budget):
    s = strategy.settings
    if strategy.kind == "grid":
        for config in _grid_configs(space, strategy, budget_B):
            evaluate(config, full_budget)
        return

    history: list[Trial] = []
    for t in range(budget_B):
        rng = proposal_rng(seed, t)
        if strategy.kind == "random":
            config = sample(space, rng)
        elif strategy.kind == "tpe":
            config = tpe_propose(history, space, s["gamma"], s["n_candidates"],
                                 rng, n_startup=s["n_startup"])
        elif strategy.kind == "gp":
            config = gp_propose(history, space, rng, length_scale=s["length_scale"],
                                n_pool=s["n_pool"], jitter=s["jitter"],
                                max_jitter=s["max_jitter"], n_startup=s["n_startup"])
        elif strategy.kind == "anneal":
            config = anneal_propose(history, space, rng, t, p0=s["p0"],
                                    p_min=s["p_min"], sigma0=s["sigma0"], decay=s["decay"])
        elif strategy.kind == "evolution":
            config = evolution_propose(history, space, rng, population_size=s["population_size"])
        else:  # pragma: no cover
            raise StrategyError(strategy.kind)
        history.append(evaluate(config, full_budget))


def _run_multifidelity(space, strategy, evaluate, budget_B, seed):
    s = strategy.settings
    eta = int(s["eta"])
    schedule = hyperband_schedule(s["R"], eta)
    n_min = s.get("n_min")
    if n_min is None:
        n_min = space.dim + 1
    by_resource: dict[float, list[Trial]] = {}
    calls = 0
    sweep = 0
    while calls < budget_B:
        for bracket in schedule:
            if calls >= budget_B:
                return
            survivors: list[tuple[Configuration, float]] | None = None
            for rung_idx, (n_i, r_i) in enumerate(bracket.rungs):
                if rung_idx == 0:
                    configs = [
                        _propose_mf(strategy, space, by_resource, n_min,
                                    derive_rng(seed, 2, sweep, bracket.s, c), s)
                        for c in range(n_i)
                    ]
                else:
                    configs = [c for c, _ in survivors[:n_i]]
                results = []
                for config in configs:
                    if calls >= budget_B:
                        return
                    trial = evaluate(config, r_i)
                    by_resource.setdefault(r_i, []).append(trial)
                    results.append((config, trial.nu))
                    calls += 1
                results.sort(key=lambda cn: cn[1])
                keep = max(1, len(results) // eta)
                survivors = results[:keep]
        sweep += 1


def _propose_mf(strategy, space, by_resource, n_min, rng, settings):
    if strategy.kind == "hyperband":
        return sample(space, rng)
    # BOHB: TPE fitted on the highest-budget rung with enough observations
    for r in sorted(by_resource, reverse=True):
        if len(by_resource[r]) >= n_min:
            return tpe_propose(by_resource[r], space, settings["gamma"],
                               settings["n_candidates"], rng, n_startup=n_min)
    return sample(space, rng)
