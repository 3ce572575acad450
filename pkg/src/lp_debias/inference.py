"""Sampling models, the naive bootstrap and distributional diagnostics."""
from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import stats
from scipy.special import erfc

from .debias import DebiasedEstimate, debiased_estimate
from .errors import DomainError, LpDebiasError, ReplicateFailure
from .lp import StandardFormLP
from .penalized import SolverOptions
from .penalty import PenaltySpec

log = logging.getLogger(__name__)

MULTINOMIAL = "multinomial"
IID_ROWS = "iid_rows"
FAILURE_FRACTION = 0.01


def replicate_rng(seed: int, *keys: int) -> np.random.Generator:
    """Generator that depends only on ``(seed, keys)``, never on execution order."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys)))


@dataclass(frozen=True)
class SamplingModel:
    """Either independent multinomial marginals or i.i.d. rows of a data matrix.

    For ``multinomial`` the statistic is the concatenation of the empirical
    frequency vectors of each marginal in ``probs``.  For ``iid_rows`` it is
    the row mean of ``data``.
    """

    kind: str
    seed: int = 0
    probs: tuple = ()
    n: int = 0
    data: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind == MULTINOMIAL:
            if self.n < 1:
                raise DomainError("multinomial model needs n >= 1")
            if not self.probs:
                raise DomainError("multinomial model needs at least one marginal")
            clean = []
            for t in self.probs:
                t = np.asarray(t, dtype=float)
                if np.any(t < -1e-12) or abs(t.sum() - 1.0) > 1e-9:
                    raise DomainError("multinomial marginals must lie on the simplex")
                clean.append(np.clip(t, 0.0, None) / np.clip(t, 0.0, None).sum())
            object.__setattr__(self, "probs", tuple(clean))
        elif self.kind == IID_ROWS:
            if self.data is None or np.asarray(self.data).size == 0:
                raise DomainError("iid_rows model needs a nonempty data matrix")
            object.__setattr__(self, "data", np.atleast_2d(np.asarray(self.data, dtype=float)))
        else:
            raise DomainError(f"unknown sampling model {self.kind!r}")

    @classmethod
    def multinomial(cls, probs: Sequence, n: int, seed: int = 0) -> "SamplingModel":
        return cls(MULTINOMIAL, seed=seed, probs=tuple(probs), n=int(n))

    @classmethod
    def iid_rows(cls, data, seed: int = 0) -> "SamplingModel":
        return cls(IID_ROWS, seed=seed, data=np.asarray(data, dtype=float))

    @property
    def sample_size(self) -> int:
        return self.n if self.kind == MULTINOMIAL else self.data.shape[0]

    def population(self) -> np.ndarray:
        if self.kind == MULTINOMIAL:
            return np.concatenate(self.probs)
        return self.data.mean(axis=0)

    def draw(self, rng: np.random.Generator) -> "Observation":
        if self.kind == MULTINOMIAL:
            freqs = tuple(rng.multinomial(self.n, t) / self.n for t in self.probs)
            return Observation(self, freqs=freqs)
        rows = self.data
        return Observation(self, data=rows[rng.integers(0, rows.shape[0], rows.shape[0])])


@dataclass(frozen=True)
class Observation:
    """One realized data set: empirical frequencies or resampled rows."""

    model: SamplingModel
    freqs: tuple = ()
    data: Optional[np.ndarray] = None

    @property
    def statistic(self) -> np.ndarray:
        if self.model.kind == MULTINOMIAL:
            return np.concatenate(self.freqs)
        return self.data.mean(axis=0)

    def resample(self, rng: np.random.Generator) -> "Observation":
        """Bootstrap copy: ``Mult(n, t_n)`` per marginal, or rows with replacement."""
        if self.model.kind == MULTINOMIAL:
            n = self.model.n
            return Observation(self.model, freqs=tuple(rng.multinomial(n, f) / n for f in self.freqs))
        rows = self.data
        return Observation(self.model, data=rows[rng.integers(0, rows.shape[0], rows.shape[0])])


def sample_empirical(model: SamplingModel) -> Observation:
    """The observed data set, drawn with the model's own seed."""
    return model.draw(np.random.default_rng(model.seed))


def _identity(stat):
    return stat


@dataclass(frozen=True)
class EstimatorConfig:
    """What a replicate runs: the LP template, penalty and the fixed ``r_n``.

    ``rhs`` maps the sample statistic to the LP right-hand side (for transport
    problems it drops the redundant last marginal entry).
    """

    lp: StandardFormLP
    pen: PenaltySpec
    r_n: float
    rhs: Callable = _identity
    opts: SolverOptions = field(default_factory=SolverOptions)
    method: str = "auto"

    def estimate(self, stat, warm: Optional[DebiasedEstimate] = None) -> DebiasedEstimate:
        b = np.asarray(self.rhs(stat), dtype=float)
        return debiased_estimate(self.lp.with_b(b), self.pen, self.r_n, self.opts,
                                 self.method, warm=warm)


def max_workers() -> int:
    env = os.environ.get("LP_DEBIAS_THREADS")
    cpus = os.cpu_count() or 1
    if env:
        try:
            return max(1, min(int(env), cpus))
        except ValueError:
            log.warning("ignoring non-integer LP_DEBIAS_THREADS=%r", env)
    return 1


def parallel_map(fn, items, workers: Optional[int] = None) -> list:
    """Ordered map; uses a process pool when more than one worker is allowed."""
    items = list(items)
    workers = max_workers() if workers is None else workers
    if workers <= 1 or len(items) < 2:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items, chunksize=max(1, len(items) // (4 * workers))))


@dataclass
class BootstrapEnsemble:
    replicates: np.ndarray  # B_ok x m
    center: np.ndarray
    B: int
    seed: int
    n: int
    failed: list = field(default_factory=list)
    center_estimate: Optional[DebiasedEstimate] = None

    @property
    def flagged(self) -> bool:
        return len(self.failed) > FAILURE_FRACTION * self.B

    def roots(self) -> np.ndarray:
        """``sqrt(n) (x_tilde - x_hat)`` row by row."""
        return math.sqrt(self.n) * (self.replicates - self.center)


def _bootstrap_chunk(args):
    cfg, obs, center_est, seed, indices = args
    rows, failed = [], []
    observed = obs.statistic
    for i in indices:
        rng = replicate_rng(seed, i)
        try:
            stat = obs.resample(rng).statistic
            if np.array_equal(stat, observed):
                # same input, same estimate; skip the warm-started re-solve
                rows.append((i, center_est.x_hat.copy()))
                continue
            est = cfg.estimate(stat, warm=center_est)
            rows.append((i, est.x_hat))
        except LpDebiasError as exc:
            log.debug("bootstrap replicate %d failed: %s", i, exc)
            failed.append(i)
    return rows, failed


def bootstrap_ensemble(obs: Observation, cfg: EstimatorConfig, B: int, seed: int,
                       center: Optional[DebiasedEstimate] = None, strict: bool = False,
                       workers: Optional[int] = None) -> BootstrapEnsemble:
    """Run the debiased estimator on ``B`` bootstrap copies of ``obs``.

    ``r_n`` stays fixed across replicates.  Failed replicates are dropped and
    listed in ``failed``; with ``strict=True`` more than 1% failures raise
    ``ReplicateFailure`` (the ensemble is attached as ``exc.ensemble``).
    """
    if B < 2:
        raise DomainError("bootstrap needs B >= 2")
    if center is None:
        center = cfg.estimate(obs.statistic)
    workers = max_workers() if workers is None else workers
    nchunks = max(1, min(B, 4 * workers))
    chunks = [(cfg, obs, center, seed, list(range(j, B, nchunks))) for j in range(nchunks)]
    results = parallel_map(_bootstrap_chunk, chunks, workers)
    rows, failed = {}, []
    for got, bad in results:
        rows.update(got)
        failed.extend(bad)
    failed.sort()
    order = sorted(rows)
    reps = np.array([rows[i] for i in order]) if order else np.empty((0, cfg.lp.m))
    ens = BootstrapEnsemble(reps, center.x_hat.copy(), B, seed, obs.model.sample_size,
                            failed, center)
    if ens.flagged:
        msg = f"{len(failed)} of {B} bootstrap replicates failed"
        log.warning(msg)
        if strict:
            exc = ReplicateFailure(msg, failed)
            exc.ensemble = ens
            raise exc
    return ens


@dataclass(frozen=True)
class ConfidenceSet:
    lo: np.ndarray
    hi: np.ndarray
    alpha: float
    kind: str
    degenerate: bool = False

    def covers(self, target) -> np.ndarray:
        target = np.asarray(target, dtype=float)
        return (self.lo <= target) & (target <= self.hi)

    def to_dict(self) -> dict:
        return {"lo": self.lo.tolist(), "hi": self.hi.tolist(), "alpha": self.alpha,
                "kind": self.kind, "degenerate": self.degenerate}


def _check_alpha(alpha):
    if not 0 < alpha < 1:
        raise DomainError(f"alpha must lie in (0, 1), got {alpha}")


def ci_entrywise(ens: BootstrapEnsemble, n: Optional[int] = None, alpha: float = 0.05) -> ConfidenceSet:
    """``[x_hat - F^{-1}(1-a/2)/sqrt(n), x_hat - F^{-1}(a/2)/sqrt(n)]`` per entry.

    ``F`` is the empirical law of ``sqrt(n)(x_tilde - x_hat)`` with linear
    (type 7) quantile interpolation.
    """
    _check_alpha(alpha)
    n = ens.n if n is None else n
    if ens.replicates.shape[0] == 0:
        raise ReplicateFailure("no bootstrap replicates survived", ens.failed)
    rt = math.sqrt(n)
    roots = rt * (ens.replicates - ens.center)
    q_lo = np.quantile(roots, alpha / 2, axis=0, method="linear")
    q_hi = np.quantile(roots, 1 - alpha / 2, axis=0, method="linear")
    degenerate = bool(np.all(np.ptp(ens.replicates, axis=0) == 0))
    return ConfidenceSet(ens.center - q_hi / rt, ens.center - q_lo / rt, alpha, "entrywise",
                         degenerate)


def uniform_band(curve_replicates, center_curve, n: int, alpha: float = 0.05) -> ConfidenceSet:
    """``center +/- u/sqrt(n)`` with ``u`` the ``1-alpha`` quantile of the sup deviation."""
    _check_alpha(alpha)
    reps = np.atleast_2d(np.asarray(curve_replicates, dtype=float))
    center = np.asarray(center_curve, dtype=float)
    if center.size == 0:
        raise DomainError("uniform band needs a nonempty grid")
    rt = math.sqrt(n)
    sup_dev = rt * np.max(np.abs(reps - center), axis=1)
    u = float(np.quantile(sup_dev, 1 - alpha, method="linear"))
    return ConfidenceSet(center - u / rt, center + u / rt, alpha, "uniform_band",
                         bool(np.all(sup_dev == 0)))


def normal_cdf(x):
    return 0.5 * erfc(-np.asarray(x, dtype=float) / math.sqrt(2.0))


def ks_normal(samples) -> float:
    """Kolmogorov-Smirnov distance from the standard normal, taken at the jumps."""
    x = np.sort(np.asarray(samples, dtype=float).ravel())
    if x.size == 0:
        raise DomainError("ks_normal needs at least one sample")
    N = x.size
    F = normal_cdf(x)
    i = np.arange(1, N + 1)
    return float(max(np.max(i / N - F), np.max(F - (i - 1) / N)))


def ks_two_sample(a, b) -> float:
    return float(stats.ks_2samp(np.ravel(a), np.ravel(b)).statistic)


def _mc_chunk(args):
    model, cfg, center, seed, keys, indices = args
    out = []
    for i in indices:
        obs = model.draw(replicate_rng(seed, *keys, i))
        try:
            out.append((i, cfg.estimate(obs.statistic, warm=center).x_hat))
        except LpDebiasError as exc:
            log.debug("Monte-Carlo replicate %d failed: %s", i, exc)
            out.append((i, None))
    return out


def monte_carlo(model: SamplingModel, cfg: EstimatorConfig, R: int, seed: int,
                keys: Sequence[int] = (), workers: Optional[int] = None):
    """Debiased estimates on ``R`` fresh data sets.

    Returns ``(X, failed)`` with ``X`` an ``R x m`` array whose failed rows are
    NaN.  Every replicate is warm-started from the estimate at the population
    right-hand side, so results do not depend on execution order.
    """
    center = None
    try:
        center = cfg.estimate(model.population())
    except LpDebiasError as exc:
        log.debug("population estimate unavailable for warm starts: %s", exc)
    workers = max_workers() if workers is None else workers
    nchunks = max(1, min(R, 4 * workers))
    jobs = [(model, cfg, center, seed, tuple(keys), list(range(j, R, nchunks)))
            for j in range(nchunks)]
    X = np.full((R, cfg.lp.m), np.nan)
    failed = []
    for chunk in parallel_map(_mc_chunk, jobs, workers):
        for i, x in chunk:
            if x is None:
                failed.append(i)
            else:
                X[i] = x
    return X, sorted(failed)


@dataclass
class CoverageResult:
    coverage: np.ndarray
    trials: int
    failed_replicates: int
    failed_trials: int

    def to_dict(self) -> dict:
        return {"coverage": self.coverage.tolist(), "trials": self.trials,
                "failed_replicates": self.failed_replicates, "failed_trials": self.failed_trials}


def _coverage_trial(args):
    model, cfg, target, alpha, B, seed, t = args
    data_rng = replicate_rng(seed, 2 * t)
    obs = model.draw(data_rng)
    boot_seed = int(np.random.SeedSequence(int(seed), spawn_key=(2 * t + 1,)).generate_state(1)[0])
    try:
        ens = bootstrap_ensemble(obs, cfg, B, boot_seed, workers=1)
        ci = ci_entrywise(ens, alpha=alpha)
    except LpDebiasError as exc:
        log.debug("coverage trial %d failed: %s", t, exc)
        return None, B
    return ci.covers(target), len(ens.failed)


def coverage_experiment(model: SamplingModel, cfg: EstimatorConfig, target, T: int, B: int,
                        alpha: float = 0.05, seed: int = 0,
                        workers: Optional[int] = None) -> CoverageResult:
    """Fraction of ``T`` independent data sets whose entrywise CI covers ``target``."""
    if T < 50:
        raise DomainError("coverage experiment needs T >= 50 outer trials")
    target = np.asarray(target, dtype=float)
    jobs = [(model, cfg, target, alpha, B, seed, t) for t in range(T)]
    out = parallel_map(_coverage_trial, jobs, workers)
    hits = [h for h, _ in out if h is not None]
    failed_trials = sum(1 for h, _ in out if h is None)
    failed_reps = sum(f for _, f in out)
    if not hits:
        raise ReplicateFailure("every coverage trial failed", list(range(T)))
    cov = np.mean(np.array(hits, dtype=float), axis=0)
    return CoverageResult(cov, len(hits), failed_reps, failed_trials)
