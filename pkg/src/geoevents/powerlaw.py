"""Discrete power-law fitting and semi-parametric bootstrap goodness of fit.

The model is ``p(x) = x**-alpha / zeta(alpha, xmin)`` for integers
``x >= xmin``.  ``alpha`` is the maximum-likelihood estimate over a bounded
interval, ``xmin`` the candidate minimising the Kolmogorov-Smirnov distance
between the empirical tail and the fitted model.
"""

from __future__ import annotations

import math
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import minimize_scalar

from .core_types import DetectorConfig, EventCandidate
from .embedding import extract_keywords

ALPHA_BOUNDS = (1.01, 6.0)
ALPHA_XTOL = 1e-4
MIN_TAIL = 10

# B_2j / (2j)!
_EM_COEF = [
    1.0 / 6.0 / 2.0,
    -1.0 / 30.0 / 24.0,
    1.0 / 42.0 / 720.0,
    -1.0 / 30.0 / 40320.0,
    5.0 / 66.0 / 3628800.0,
    -691.0 / 2730.0 / 479001600.0,
    7.0 / 6.0 / 87178291200.0,
    -3617.0 / 510.0 / 20922789888000.0,
]
_EM_DIRECT = 10


class PowerLawFitError(ValueError):
    pass


def hurwitz_zeta(s: float, q):
    """Hurwitz zeta ``sum_{k>=0} (q + k)**-s`` for ``s > 1``, ``q > 0``.

    Ten direct terms, then Euler-Maclaurin with eight Bernoulli corrections;
    absolute error is below 1e-10 for ``s`` in (1, 50] and ``q >= 1``.
    Accepts a scalar or an array of ``q``.
    """
    if not s > 1:
        raise ValueError("hurwitz_zeta needs s > 1")
    if np.ndim(q) == 0:
        return _hurwitz_scalar(float(s), float(q))
    q = np.asarray(q, dtype=np.float64)
    k = np.arange(_EM_DIRECT, dtype=np.float64)
    direct = ((q[..., None] + k) ** -s).sum(axis=-1)
    a = q + _EM_DIRECT
    total = direct + a ** (1.0 - s) / (s - 1.0) + 0.5 * a ** -s
    rising = s
    power = a ** (-s - 1.0)
    inv_a2 = 1.0 / (a * a)
    for j, coef in enumerate(_EM_COEF):
        total = total + coef * rising * power
        rising *= (s + 2 * j + 1) * (s + 2 * j + 2)
        power = power * inv_a2
    return total


def _hurwitz_scalar(s: float, q: float) -> float:
    total = 0.0
    for k in range(_EM_DIRECT):
        total += (q + k) ** -s
    a = q + _EM_DIRECT
    total += a ** (1.0 - s) / (s - 1.0) + 0.5 * a ** -s
    rising = s
    power = a ** (-s - 1.0)
    inv_a2 = 1.0 / (a * a)
    for j, coef in enumerate(_EM_COEF):
        total += coef * rising * power
        rising *= (s + 2 * j + 1) * (s + 2 * j + 2)
        power *= inv_a2
    return total


def _as_counts(counts: Iterable[int]) -> np.ndarray:
    arr = np.asarray(list(counts) if not isinstance(counts, np.ndarray) else counts)
    if arr.size and (np.any(arr < 1) or not np.all(np.equal(np.mod(arr, 1), 0))):
        raise ValueError("counts must be positive integers")
    return arr.astype(np.int64)


def log_likelihood(alpha: float, tail, xmin: int) -> float:
    tail = np.asarray(tail, dtype=np.float64)
    return float(-alpha * np.log(tail).sum() - len(tail) * math.log(hurwitz_zeta(alpha, xmin)))


def _fit_alpha_tail(values: np.ndarray, weights: np.ndarray, xmin: int) -> tuple[float, bool]:
    """MLE on a tail given as unique values and their relative frequencies."""
    mean_log = float(np.dot(weights, np.log(values)))

    def nll(a):
        return a * mean_log + math.log(_hurwitz_scalar(a, float(xmin)))

    res = minimize_scalar(nll, bounds=ALPHA_BOUNDS, method="bounded",
                          options={"xatol": ALPHA_XTOL})
    alpha = float(res.x)
    at_bound = (alpha - ALPHA_BOUNDS[0] < 10 * ALPHA_XTOL
                or ALPHA_BOUNDS[1] - alpha < 10 * ALPHA_XTOL)
    return alpha, at_bound


def _tail_stats(arr: np.ndarray, xmin: int):
    tail = arr[arr >= xmin]
    if tail.size == 0:
        raise PowerLawFitError(f"no observations >= xmin={xmin}")
    values, freq = np.unique(tail, return_counts=True)
    return tail, values.astype(np.float64), freq / tail.size


def fit_alpha(counts, xmin: int) -> float:
    """Maximum-likelihood exponent for the observations ``>= xmin``.

    With a single distinct tail value the likelihood is maximised on the
    upper bound; see :func:`fit_alpha_flagged` to detect that case.
    """
    return fit_alpha_flagged(counts, xmin)[0]


def fit_alpha_flagged(counts, xmin: int) -> tuple[float, bool]:
    """Return ``(alpha, degenerate)``; degenerate means the optimum sits on a bound
    or the tail has fewer than two distinct values."""
    if xmin < 1:
        raise ValueError("xmin must be >= 1")
    arr = _as_counts(counts)
    _, values, weights = _tail_stats(arr, xmin)
    alpha, at_bound = _fit_alpha_tail(values, weights, xmin)
    return alpha, at_bound or len(values) < 2


def model_cdf(x, alpha: float, xmin: int):
    """P(X <= x) for integer ``x >= xmin - 1``."""
    x = np.asarray(x, dtype=np.float64)
    return 1.0 - hurwitz_zeta(alpha, x + 1.0) / hurwitz_zeta(alpha, float(xmin))


def ks_statistic(tail, alpha: float, xmin: int) -> float:
    """Max |empirical CDF - model CDF| over the integers from xmin to max(tail).

    Both CDFs are step functions and the model CDF grows between data
    values, so only the data values and the integers just below them need
    checking.
    """
    tail = np.sort(np.asarray(tail, dtype=np.int64))
    if tail.size == 0:
        raise PowerLawFitError("empty tail")
    u = np.unique(tail)
    pts = np.unique(np.concatenate([u, u - 1]))
    pts = pts[pts >= xmin]
    emp = np.searchsorted(tail, pts, side="right") / tail.size
    return float(np.max(np.abs(emp - model_cdf(pts, alpha, xmin))))


@dataclass(frozen=True)
class PowerLawFit:
    alpha: float
    xmin: int
    ks_stat: float
    p_value: float | None
    n_tail: int
    n: int
    degenerate: bool = False

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "xmin": self.xmin, "ks_stat": self.ks_stat,
                "p_value": self.p_value, "n_tail": self.n_tail, "n": self.n,
                "degenerate": self.degenerate}


def fit(counts, min_tail: int = MIN_TAIL) -> PowerLawFit:
    """Choose xmin by minimum KS distance, refitting alpha for every candidate.

    Candidates are the observed values leaving at least ``min_tail``
    observations and two distinct values in the tail.
    """
    arr = _as_counts(counts)
    if arr.size < min_tail:
        raise PowerLawFitError(f"need at least {min_tail} observations, got {arr.size}")
    arr = np.sort(arr)
    values, freq = np.unique(arr, return_counts=True)
    # tail size / distinct count for xmin = values[i]
    n_tail = np.cumsum(freq[::-1])[::-1]
    best = None
    for i, xmin in enumerate(values):
        if n_tail[i] < min_tail or len(values) - i < 2:
            break
        tail = arr[arr.size - n_tail[i]:]
        tv = values[i:].astype(np.float64)
        tw = freq[i:] / n_tail[i]
        alpha, at_bound = _fit_alpha_tail(tv, tw, int(xmin))
        ks = ks_statistic(tail, alpha, int(xmin))
        if best is None or ks < best[0]:
            best = (ks, int(xmin), alpha, int(n_tail[i]), at_bound)
    if best is None:
        raise PowerLawFitError("no xmin candidate leaves enough variation in the tail")
    ks, xmin, alpha, nt, at_bound = best
    return PowerLawFit(alpha, xmin, ks, None, nt, int(arr.size), at_bound)


class _Sampler:
    """Inverse-CDF sampler for the discrete power law, exact up to a table limit."""

    TABLE = 20000

    def __init__(self, alpha: float, xmin: int):
        self.alpha, self.xmin = alpha, xmin
        xs = np.arange(xmin, xmin + self.TABLE, dtype=np.float64)
        # ccdf[k] = P(X >= xmin + k), decreasing
        self.ccdf = hurwitz_zeta(alpha, xs) / hurwitz_zeta(alpha, float(xmin))
        self._neg = -self.ccdf

    def draw(self, rng: np.random.Generator, size: int) -> np.ndarray:
        u = 1.0 - rng.random(size)  # (0, 1]
        # largest k with ccdf[k] >= u
        k = np.searchsorted(self._neg, -u, side="right") - 1
        out = self.xmin + k
        beyond = u < self.ccdf[-1]
        if np.any(beyond):
            # continuous approximation far out in the tail
            approx = np.floor((self.xmin - 0.5) * u[beyond] ** (-1.0 / (self.alpha - 1.0)) + 0.5)
            out = out.astype(np.float64)
            out[beyond] = np.maximum(approx, self.xmin + self.TABLE)
        return out.astype(np.int64)


def sample_powerlaw(alpha: float, xmin: int, size: int, rng: np.random.Generator) -> np.ndarray:
    return _Sampler(alpha, xmin).draw(rng, size)


def _bootstrap_ks(i: int, seed: int, head: np.ndarray, n: int, n_tail: int,
                  sampler: _Sampler, min_tail: int) -> float:
    rng = np.random.default_rng([seed, i])
    from_tail = int(rng.binomial(n, n_tail / n)) if head.size else n
    synth = np.concatenate([sampler.draw(rng, from_tail),
                            rng.choice(head, n - from_tail) if n - from_tail else
                            np.empty(0, dtype=np.int64)])
    try:
        return fit(synth, min_tail).ks_stat
    except PowerLawFitError:
        return math.inf


def goodness_of_fit(counts, fitted: PowerLawFit, iterations: int = 100, seed: int = 0,
                    min_tail: int = MIN_TAIL, workers: int = 1) -> float:
    """Fraction of synthetic datasets whose refit KS distance is at least the observed one.

    Synthetic data keeps the sample size; each point comes from the fitted
    power law with probability n_tail/n, else uniformly from the observed
    values below xmin.  Iteration ``i`` uses the RNG stream ``(seed, i)``, so
    the result does not depend on ``workers``.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    arr = _as_counts(counts)
    head = arr[arr < fitted.xmin]
    sampler = _Sampler(fitted.alpha, fitted.xmin)
    args = (seed, head, int(arr.size), int(np.sum(arr >= fitted.xmin)), sampler, min_tail)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            ks = list(pool.map(lambda i: _bootstrap_ks(i, *args), range(iterations)))
    else:
        ks = [_bootstrap_ks(i, *args) for i in range(iterations)]
    return sum(k >= fitted.ks_stat for k in ks) / iterations


def fit_with_pvalue(counts, iterations: int = 100, seed: int = 0,
                    min_tail: int = MIN_TAIL, workers: int = 1) -> PowerLawFit:
    f = fit(counts, min_tail)
    p = goodness_of_fit(counts, f, iterations, seed, min_tail, workers)
    return PowerLawFit(f.alpha, f.xmin, f.ks_stat, p, f.n_tail, f.n, f.degenerate)


def keyword_counts(keyword_lists: Iterable[Sequence[str]]) -> list[int]:
    """Occurrence count of every distinct keyword, most frequent first."""
    c = Counter(kw for kws in keyword_lists for kw in kws)
    return sorted(c.values(), reverse=True)


def counts_pass_powerlaw(counts: Sequence[int], pvalue_threshold: float = 0.1,
                    iterations: int = 100, seed: int = 0,
                    min_tail: int = MIN_TAIL) -> tuple[bool, PowerLawFit | None]:
    """Power-law check on a keyword count sample; any fit failure means "no"."""
    if len(counts) < min_tail:
        return False, None
    try:
        f = fit_with_pvalue(counts, iterations, seed, min_tail)
    except PowerLawFitError:
        return False, None
    return (not f.degenerate and f.p_value >= pvalue_threshold), f


def passes_powerlaw(candidate: EventCandidate, config: DetectorConfig) -> tuple[bool, PowerLawFit | None]:
    """Power-law check on the keyword occurrence counts of a candidate's tweets."""
    counts = keyword_counts(extract_keywords(t.text) for t in candidate.tweets)
    return counts_pass_powerlaw(counts, config.powerlaw_pvalue_threshold,
                                config.bootstrap_iterations, config.rng_seed,
                                config.powerlaw_min_tail)
