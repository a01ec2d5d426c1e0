"""Simulation designs, accuracy metrics and replicate studies.

Designs 1 and 2 are heteroscedastic regressions y = f(x) + g(x) e with
e ~ N(0, 1); designs 3 and 4 are two-bump means with noise sd
0.1 + x/10 + x^2/10, design 4 having a much sharper left bump. In every
design x ~ U(0, 1) and the true conditional quantile is
mean(x) + sd(x) * Phi^{-1}(tau).
"""

import csv
import io
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri
from scipy.stats import norm

from .model import Dataset, ModelConfig, build_geometry
from .sampler import MCMCConfig, fit

DESIGN_IDS = (1, 2, 3, 4)
DEFAULT_LEVELS = (0.5, 0.7, 0.9, 0.95, 0.99)
COVERAGE_NOTE = "coverage averaged over each replicate's own design points x_i"


def _wave(x):
    return 0.5 + 2.0 * x + np.sin(2.0 * np.pi * x - 0.5)


def _bumps(x, s):
    return norm.pdf(x, 0.15, s) / 4.0 + norm.pdf(x, 0.6, 0.2) / 4.0


def _smith_kohn_sd(x):
    return 0.1 + x / 10.0 + x * x / 10.0


_MEANS = {
    1: _wave,
    2: lambda x: 3.0 * x,
    3: lambda x: _bumps(x, 0.1),
    4: lambda x: _bumps(x, 0.05),
}
_SDS = {
    1: lambda x: np.ones_like(x),
    2: _wave,
    3: _smith_kohn_sd,
    4: _smith_kohn_sd,
}


@dataclass(frozen=True)
class DesignSpec:
    """One simulation design; ``re_family`` is the recommended random-effect prior."""

    id: int
    n: int = 100

    def __post_init__(self):
        if self.id not in DESIGN_IDS:
            raise ValueError(f"design must be one of {DESIGN_IDS}, got {self.id}")
        if self.n < 10:
            raise ValueError("designs need n >= 10")

    @property
    def re_family(self):
        return "cauchy" if self.id == 4 else "normal"

    def mean(self, x):
        return _MEANS[self.id](np.asarray(x, dtype=float))

    def sd(self, x):
        return _SDS[self.id](np.asarray(x, dtype=float))

    def truth(self, x, tau):
        """True quantiles; shape (len(x), len(tau)) for array ``tau``."""
        x = np.asarray(x, dtype=float)
        z = ndtri(np.asarray(tau, dtype=float))
        m, s = self.mean(x), self.sd(x)
        if z.ndim == 0:
            return m + s * z
        return m[..., None] + s[..., None] * z


def generate(spec, rng):
    """Draw one data set; returns (Dataset, truth) with truth(x, tau) the true quantiles.

    The covariate range is fixed to the unit interval, so no rescaling happens.
    """
    x = rng.random(spec.n)
    y = spec.mean(x) + spec.sd(x) * rng.standard_normal(spec.n)
    return Dataset(x, y, (0.0, 1.0)), spec.truth


def rmise(est, truth):
    """Root mean squared difference over the design points (axis 0).

    Returns a float for 1-d inputs and one value per column for 2-d inputs.
    """
    est = np.asarray(est, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if est.shape != truth.shape:
        raise ValueError(f"shape mismatch: {est.shape} vs {truth.shape}")
    out = np.sqrt(np.mean((truth - est) ** 2, axis=0))
    return float(out) if out.ndim == 0 else out


def coverage(lower, upper, truth):
    """Fraction of points whose truth lies in [lower, upper] (per column if 2-d)."""
    lower, upper, truth = (np.asarray(a, dtype=float) for a in (lower, upper, truth))
    if not (lower.shape == upper.shape == truth.shape):
        raise ValueError("lower, upper and truth must have the same shape")
    if np.any(lower > upper):
        raise ValueError("intervals must satisfy lower <= upper")
    hit = (lower <= truth) & (truth <= upper)
    return hit.mean(axis=0)


def replicate_seeds(seed, replicates):
    """Independent per-replicate streams spawned from the master seed."""
    return np.random.SeedSequence(seed).spawn(replicates)


@dataclass
class ReplicateOutcome:
    index: int
    rmise: np.ndarray = None
    coverage: np.ndarray = None
    error: str = None
    acceptance1: float = math.nan
    acceptance2: float = math.nan


@dataclass
class StudyReport:
    """Per-level RMISE x 100 and coverage aggregated over successful replicates."""

    design: int
    levels: tuple
    rmise_x100: np.ndarray
    coverage: np.ndarray
    replicates: int
    failures: list = field(default_factory=list)
    outcomes: list = field(default_factory=list, repr=False)
    runtime: float = math.nan

    def rows(self):
        return [(tau, self.rmise_x100[t], self.coverage[t], self.replicates)
                for t, tau in enumerate(self.levels)]

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["tau", "rmise_x100", "coverage", "replicates"])
        for tau, r, c, n in self.rows():
            w.writerow([repr(tau), f"{r:.6f}", f"{c:.6f}", n])
        return buf.getvalue()

    def replicate_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["replicate", "tau", "rmise", "coverage", "failed"])
        for o in self.outcomes:
            for t, tau in enumerate(self.levels):
                if o.error is None:
                    w.writerow([o.index, repr(tau), f"{o.rmise[t]:.8f}", f"{o.coverage[t]:.6f}", 0])
                else:
                    w.writerow([o.index, repr(tau), "", "", 1])
        return buf.getvalue()

    def to_text(self, include_runtime=False):
        lines = [f"Design {self.design}: {self.replicates} replicates ({COVERAGE_NOTE})"]
        if self.failures:
            lines.append(f"failed replicates: {', '.join(str(i) for i, _ in self.failures)}")
        if include_runtime:
            lines.append(f"runtime: {self.runtime:.1f} s")
        lines.append(f"{'tau':>6} {'RMISE x100':>11} {'coverage':>9}")
        for tau, r, c, _ in self.rows():
            lines.append(f"{tau:>6.3g} {r:>11.2f} {c:>9.3f}")
        return "\n".join(lines) + "\n"


def _run_replicate(args):
    index, spec, seed_seq, model_config, mcmc = args
    rng = np.random.default_rng(seed_seq)
    data, truth = generate(spec, rng)
    try:
        geom = build_geometry(model_config)
        result = fit(data, geom, mcmc, rng)
        s = result.summarize(data.x)
        true_q = truth(data.x, np.asarray(model_config.levels))
        return ReplicateOutcome(
            index,
            rmise=rmise(s.mean, true_q),
            coverage=coverage(s.lower, s.upper, true_q),
            acceptance1=float(np.nanmean(result.acceptance["stage1"])),
            acceptance2=float(np.nanmean(result.acceptance["stage2"])),
        )
    except (ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
        return ReplicateOutcome(index, error=f"{type(exc).__name__}: {exc}")


def run_study(spec, replicates, mcmc=None, levels=DEFAULT_LEVELS, seed=0, K=20, R=3,
              re_family=None, workers=1, progress=None):
    """Fit ``replicates`` independent data sets and aggregate the metrics.

    Replicate r uses the r-th stream spawned from ``seed`` for both data
    generation and MCMC, so results do not depend on ``workers``. Failed
    fits are listed in ``failures`` and excluded from the averages.
    """
    if replicates < 1:
        raise ValueError("replicates must be >= 1")
    mcmc = MCMCConfig() if mcmc is None else mcmc
    model_config = ModelConfig(tuple(levels), K=K, R=R, re_family=re_family or spec.re_family)
    jobs = [(i, spec, s, model_config, mcmc) for i, s in enumerate(replicate_seeds(seed, replicates))]
    start = time.perf_counter()
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_run_replicate, jobs))
    else:
        outcomes = []
        for job in jobs:
            outcomes.append(_run_replicate(job))
            if progress is not None:
                o = outcomes[-1]
                status = "failed" if o.error else f"rmise50={o.rmise[0]:.4f}"
                progress(f"replicate={o.index} {status}")
    ok = [o for o in outcomes if o.error is None]
    failures = [(o.index, o.error) for o in outcomes if o.error is not None]
    T = len(model_config.levels)
    if ok:
        r = 100.0 * np.mean([o.rmise for o in ok], axis=0)
        c = np.mean([o.coverage for o in ok], axis=0)
    else:
        r = c = np.full(T, np.nan)
    return StudyReport(spec.id, model_config.levels, r, c, len(ok), failures, outcomes,
                       time.perf_counter() - start)
