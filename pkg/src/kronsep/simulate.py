"""Monte Carlo test-size studies under the separable Kronecker LEAR model.

Replicate ``r`` draws its whole dataset from ``RngStream(seed, r)``, so results
do not depend on execution order or on the number of worker processes.
"""

import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from .data import Dataset, DistanceScale, SubjectData
from .errors import DomainError, KronsepError, StudyAborted
from .fit_null import FitOptions
from .lear import LearParams, lear_corr
from .lrt import ADJUSTMENTS, run_test
from .numerics import RngStream, cholesky, kron, mvn_sample

SCENARIOS = ("null_mean", "two_group")
IMBALANCE_POLICIES = ("time_dropout", "uniform_prefix", "uniform_subset")
ABORT_MIN_REPS = 50
ABORT_MIN_RATE = 0.10
THREADS_ENV = "KRONSEP_THREADS"


@dataclass(frozen=True)
class SimConfig:
    N: int
    t_max: int = 3
    s_max: int = 4
    rho_t: float = 0.8
    rho_s: float = 0.8
    delta_frac: float = 0.25
    sigma2: float = 1.0
    scenario: str = "null_mean"
    beta: Optional[tuple] = None
    reps: int = 300
    alpha: float = 0.05
    seed: int = 0
    time_spacing: float = 2.0
    space_spacing: float = 2.0
    imbalance: str = "time_dropout"

    def __post_init__(self):
        if self.N < 2:
            raise DomainError("N must be >= 2")
        if self.reps < 1:
            raise DomainError("reps must be >= 1")
        if self.t_max < 1 or self.s_max < 1:
            raise DomainError("t_max and s_max must be >= 1")
        LearParams(self.rho_t, self.delta_frac)
        LearParams(self.rho_s, self.delta_frac)
        if not self.sigma2 > 0:
            raise DomainError("sigma2 must be positive")
        if self.scenario not in SCENARIOS:
            raise DomainError(f"scenario must be one of {SCENARIOS}")
        if self.imbalance not in IMBALANCE_POLICIES:
            raise DomainError(f"imbalance policy must be one of {IMBALANCE_POLICIES}")
        if not 0 < self.alpha < 1:
            raise DomainError("alpha must lie in (0, 1)")
        if self.time_spacing <= 0 or self.space_spacing <= 0:
            raise DomainError("grid spacings must be positive")
        beta = self.beta
        if beta is None:
            beta = (0.0,) if self.scenario == "null_mean" else (3.5, 3.5)
        beta = tuple(float(b) for b in beta)
        if len(beta) != (1 if self.scenario == "null_mean" else 2):
            raise DomainError(f"scenario {self.scenario!r} needs beta of length "
                              f"{1 if self.scenario == 'null_mean' else 2}")
        object.__setattr__(self, "beta", beta)

    @classmethod
    def table1(cls, N, t_max=3, scenario="null_mean", **kw):
        """The reference test-size design: rho = 0.8, delta = range / 4, sigma2 = 1, s_max = 4."""
        kw.setdefault("s_max", 4)
        return cls(N=N, t_max=t_max, scenario=scenario, **kw)

    def scales(self):
        """Population distance scales of the maximal grid (not of a realised sample)."""
        return (_lattice_scale(self.t_max, self.time_spacing),
                _lattice_scale(self.s_max, self.space_spacing))

    def true_params(self):
        st, ss = self.scales()
        return LearParams(self.rho_t, self.delta_frac * st.span), LearParams(self.rho_s, self.delta_frac * ss.span)

    def as_dict(self) -> dict:
        d = asdict(self)
        d["beta"] = list(self.beta)
        return d


def _lattice_scale(k, spacing):
    if k < 2:
        return DistanceScale(spacing, spacing)
    return DistanceScale(spacing, spacing * (k - 1))


@dataclass
class SimResult:
    config: SimConfig
    rejections: dict
    rates: dict
    mc_se: dict
    converged_reps: int
    failed_reps: int
    runtime: float
    log: Optional[list] = None
    failures: dict = field(default_factory=dict)

    def summary(self) -> dict:
        out = {
            "config": self.config.as_dict(),
            "converged_reps": self.converged_reps,
            "failed_reps": self.failed_reps,
            "rejections": dict(self.rejections),
            "rates": dict(self.rates),
            "mc_se": dict(self.mc_se),
            "failures": dict(self.failures),
            "runtime": self.runtime,
        }
        if self.log is not None:
            out["log"] = self.log
        return out


def _subject_factor(config, t_idx, s_idx, cache):
    key = (tuple(t_idx), tuple(s_idx))
    if key not in cache:
        tau_t, tau_s = config.true_params()
        st, ss = config.scales()
        times = config.time_spacing * np.asarray(t_idx, dtype=float)
        locs = config.space_spacing * np.asarray(s_idx, dtype=float)
        gamma = lear_corr(np.abs(times[:, None] - times[None, :]), st, tau_t)
        omega = lear_corr(np.abs(locs[:, None] - locs[None, :]), ss, tau_s)
        cache[key] = cholesky(config.sigma2 * kron(gamma, omega))
    return cache[key]


def _design(config, subject_index, n_obs):
    if config.scenario == "null_mean":
        return np.ones((n_obs, 1))
    group = 0.0 if subject_index < math.ceil(config.N / 2) else 1.0
    return np.column_stack([np.ones(n_obs), np.full(n_obs, group)])


def gen_subject(config: SimConfig, subject_index: int, rng: RngStream, _cache=None) -> SubjectData:
    """Draw one subject under ``config.imbalance``.

    ``time_dropout``: ``t_i`` uniform on ``1..t_max``, all ``s_max`` locations,
    first ``t_i`` times. ``uniform_prefix``: ``t_i`` and ``s_i`` uniform, first
    ``t_i`` times and first ``s_i`` locations. ``uniform_subset``: the same
    counts at randomly chosen grid positions.
    """
    cache = {} if _cache is None else _cache
    t = int(rng.integers(1, config.t_max))
    s = int(rng.integers(1, config.s_max)) if config.imbalance != "time_dropout" else config.s_max
    if config.imbalance == "uniform_subset":
        t_idx = np.sort(rng.choice(config.t_max, t))
        s_idx = np.sort(rng.choice(config.s_max, s))
    else:
        t_idx, s_idx = np.arange(t), np.arange(s)
    x = _design(config, subject_index, t * s)
    y = mvn_sample(x @ np.asarray(config.beta), _subject_factor(config, t_idx, s_idx, cache), rng)
    return SubjectData(
        id=str(subject_index + 1),
        y=y,
        x=x,
        times=config.time_spacing * t_idx.astype(float),
        time_grid_idx=t_idx,
        locs=config.space_spacing * s_idx.astype(float)[:, None],
        loc_grid_idx=s_idx,
    )


def gen_dataset(config: SimConfig, rep: int) -> Dataset:
    """Replicate ``rep``; the maximal grid is the union of cells actually observed."""
    rng = RngStream(config.seed, rep)
    cache = {}
    raw = [gen_subject(config, i, rng, cache) for i in range(config.N)]
    t_used = np.unique(np.concatenate([s.time_grid_idx for s in raw]))
    s_used = np.unique(np.concatenate([s.loc_grid_idx for s in raw]))
    t_rank = {int(k): j for j, k in enumerate(t_used)}
    s_rank = {int(k): j for j, k in enumerate(s_used)}
    subjects = [
        replace(sub,
                time_grid_idx=np.array([t_rank[int(k)] for k in sub.time_grid_idx]),
                loc_grid_idx=np.array([s_rank[int(k)] for k in sub.loc_grid_idx]))
        for sub in raw
    ]
    return Dataset(
        subjects,
        grid_times=config.time_spacing * t_used.astype(float),
        grid_locs=config.space_spacing * s_used.astype(float)[:, None],
        covariate_names=() if config.scenario == "null_mean" else ("group",),
    )


def run_replicate(config: SimConfig, rep: int, options: FitOptions = FitOptions()) -> dict:
    dataset = gen_dataset(config, rep)
    try:
        res = run_test(dataset, config.alpha, ADJUSTMENTS, options)
    except KronsepError as exc:
        return {"rep": rep, "converged": False, "error": type(exc).__name__, "message": str(exc)}
    return {
        "rep": rep,
        "converged": True,
        "stat": res.stat,
        "p": {"none": res.p_unadjusted, "k1": res.p_k1, "k2": res.p_k2},
        "reject": dict(res.decisions),
        "null_loglik": res.null_fit.loglik,
        "alt_loglik": res.alt_fit.loglik,
        "max_ts": dataset.max_ts,
    }


def _replicate_job(args):
    config, rep, options = args
    return run_replicate(config, rep, options)


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def _tally(config, records, runtime, keep_log):
    converged = [r for r in records if r["converged"]]
    n_conv = len(converged)
    rejections = {v: sum(bool(r["reject"].get(v)) for r in converged) for v in ADJUSTMENTS}
    rates, se = {}, {}
    for v in ADJUSTMENTS:
        if n_conv:
            p = rejections[v] / n_conv
            rates[v] = p
            se[v] = math.sqrt(p * (1 - p) / n_conv)
        else:
            rates[v] = None
            se[v] = None
    failures = {}
    for r in records:
        if not r["converged"]:
            failures[r["error"]] = failures.get(r["error"], 0) + 1
    return SimResult(
        config=config,
        rejections=rejections,
        rates=rates,
        mc_se=se,
        converged_reps=n_conv,
        failed_reps=len(records) - n_conv,
        runtime=runtime,
        log=records if keep_log else None,
        failures=failures,
    )


def run_study(config: SimConfig, options: FitOptions = FitOptions(), workers: Optional[int] = None,
              keep_log: bool = False, progress=None) -> SimResult:
    """Run ``config.reps`` replicates and tally rejection rates over converged ones.

    Raises :class:`StudyAborted` once at least ``ABORT_MIN_REPS`` replicates
    have run and fewer than 10% of them converged.
    """
    workers = default_workers() if workers is None else max(1, int(workers))
    start = time.perf_counter()
    jobs = [(config, r, options) for r in range(1, config.reps + 1)]
    records = []
    pool = ProcessPoolExecutor(workers) if workers > 1 else None
    try:
        results = pool.map(_replicate_job, jobs, chunksize=4) if pool else map(_replicate_job, jobs)
        for rec in results:
            records.append(rec)
            if progress is not None:
                progress(rec)
            done = len(records)
            n_conv = sum(r["converged"] for r in records)
            if done >= ABORT_MIN_REPS and n_conv / done < ABORT_MIN_RATE:
                partial = _tally(config, records, time.perf_counter() - start, keep_log)
                raise StudyAborted(
                    f"only {n_conv} of {done} replicates converged (< {ABORT_MIN_RATE:.0%}); "
                    "the unstructured alternative is not estimable at this sample size, "
                    "and a more parsimonious covariance model is indicated",
                    partial,
                )
    finally:
        if pool is not None:
            pool.shutdown(cancel_futures=True)
    return _tally(config, records, time.perf_counter() - start, keep_log)


def with_reps(config: SimConfig, reps: int) -> SimConfig:
    return replace(config, reps=reps)
