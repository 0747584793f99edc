"""Conformance scoring: Gaussian log-likelihoods, Mahalanobis distances and
chi-squared survival probabilities.

The chi-squared survival function is computed from a self-contained
regularized incomplete gamma implementation (series expansion below the
``a + 1`` crossover, continued fraction above), so no special-function
library is required.  Internal target accuracy is ~1e-12 absolute.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "StepScore",
    "ConformanceReport",
    "chi2_survival",
    "mahalanobis",
    "log_likelihood",
    "probability_of_conformance",
    "score_sequence",
    "classify",
]

_MAX_ITER = 1000
_EPS = 1e-16
# exp() underflows to subnormals below roughly -745; treat as exact zero
_LOG_UNDERFLOW = -745.0


def _log_prefactor(a: float, x: float) -> float:
    return a * math.log(x) - x - math.lgamma(a)


def _lower_series(a: float, x: float) -> float:
    """Regularized lower incomplete gamma P(a, x) for x < a + 1."""
    term = 1.0 / a
    total = term
    ap = a
    for _ in range(_MAX_ITER):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * _EPS:
            break
    logp = _log_prefactor(a, x) + math.log(total)
    return 0.0 if logp < _LOG_UNDERFLOW else math.exp(logp)


def _upper_continued_fraction(a: float, x: float) -> float:
    """Regularized upper incomplete gamma Q(a, x) for x >= a + 1 (Lentz)."""
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, _MAX_ITER):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < tiny:
            d = tiny
        c = b + an / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            break
    logq = _log_prefactor(a, x) + math.log(h)
    return 0.0 if logq < _LOG_UNDERFLOW else math.exp(logq)


def regularized_upper_gamma(a: float, x: float) -> float:
    """Q(a, x) = Gamma(a, x) / Gamma(a)."""
    if a <= 0:
        raise ValueError(f"regularized_upper_gamma: a must be positive, got {a}")
    if x < 0:
        raise ValueError(f"regularized_upper_gamma: x must be non-negative, got {x}")
    if x == 0.0:
        return 1.0
    if x < a + 1.0:
        return min(1.0, max(0.0, 1.0 - _lower_series(a, x)))
    return min(1.0, max(0.0, _upper_continued_fraction(a, x)))


def chi2_survival(x: float, k: int) -> float:
    """P(chi-squared with k degrees of freedom > x)."""
    if k < 1 or int(k) != k:
        raise ValueError(f"chi2_survival: k must be a positive integer, got {k}")
    if x < 0:
        raise ValueError(f"chi2_survival: x must be non-negative, got {x}")
    return regularized_upper_gamma(k / 2.0, x / 2.0)


def _validate_triple(z, z_hat, sigma):
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    z_hat = np.asarray(z_hat, dtype=np.float64).reshape(-1)
    sigma = np.asarray(sigma, dtype=np.float64).reshape(-1)
    if not (z.shape == z_hat.shape == sigma.shape):
        raise ValueError(
            f"conformance: length mismatch z={z.shape} z_hat={z_hat.shape} sigma={sigma.shape}"
        )
    if np.any(sigma <= 0):
        raise ValueError("conformance: sigma must be strictly positive")
    return z, z_hat, sigma


def mahalanobis(z, z_hat, sigma) -> float:
    """Prediction error normalized per dimension by the forecast stds."""
    z, z_hat, sigma = _validate_triple(z, z_hat, sigma)
    return float(np.sqrt(np.sum(((z - z_hat) / sigma) ** 2)))


def log_likelihood(z, z_hat, sigma) -> float:
    """Log of the diagonal-Gaussian density of z under (z_hat, sigma)."""
    z, z_hat, sigma = _validate_triple(z, z_hat, sigma)
    return float(
        np.sum(-np.log(np.sqrt(2.0 * np.pi) * sigma) - 0.5 * ((z - z_hat) / sigma) ** 2)
    )


def probability_of_conformance(z, z_hat, sigma) -> float:
    """Survival probability of the squared distance under chi-squared(N_e)."""
    z, _, _ = _validate_triple(z, z_hat, sigma)
    d = mahalanobis(z, z_hat, sigma)
    return chi2_survival(d * d, z.size)


def classify(p: float, alpha: float) -> str:
    """Flag as anomalous iff p < alpha (strict)."""
    if not (0.0 <= p <= 1.0) or not (0.0 <= alpha <= 1.0):
        raise ValueError(f"classify: p and alpha must be in [0, 1], got p={p} alpha={alpha}")
    return "anomalous" if p < alpha else "normal"


@dataclass(frozen=True)
class StepScore:
    step_index: int  # 1-based forecast step
    log_likelihood: float
    distance: float
    p_conformance: float


@dataclass(frozen=True)
class ConformanceReport:
    """Per-step and aggregated conformance metrics for one scored sequence.

    The sequence-level probability is the chi-squared survival of the summed
    squared step distances with ``n_steps * latent_size`` degrees of freedom;
    the sequence-level log-likelihood is the mean over steps.
    """

    steps: tuple[StepScore, ...]
    p_sequence: float
    mean_log_likelihood: float


def report_from_triples(triples: list[tuple[np.ndarray, np.ndarray, np.ndarray]]) -> ConformanceReport:
    """Build a report from per-step (z, z_hat, sigma) triples."""
    steps = []
    total_sq = 0.0
    dof = 0
    for i, (z, z_hat, sigma) in enumerate(triples, start=1):
        d = mahalanobis(z, z_hat, sigma)
        steps.append(
            StepScore(
                step_index=i,
                log_likelihood=log_likelihood(z, z_hat, sigma),
                distance=d,
                p_conformance=chi2_survival(d * d, np.asarray(z).size),
            )
        )
        total_sq += d * d
        dof += np.asarray(z).size
    return ConformanceReport(
        steps=tuple(steps),
        p_sequence=chi2_survival(total_sq, dof),
        mean_log_likelihood=float(np.mean([s.log_likelihood for s in steps])),
    )


def score_sequence(model, x_seq) -> ConformanceReport:
    """Score a full sequence of ``n_past + n_forecast`` segments with a model.

    Encodes every segment, forecasts from the first ``n_past`` latents and
    compares forecasts against the true latents of the remaining segments.
    """
    cfg = model.config
    expected = cfg.n_past + cfg.n_forecast
    if len(x_seq) != expected:
        raise ValueError(f"score_sequence: expected {expected} segments, got {len(x_seq)}")
    latents = model.encode(list(x_seq))
    forecasts = model.predict(latents[: cfg.n_past])
    triples = [
        (latents[cfg.n_past + i], f.z_hat, f.sigma)
        for i, f in enumerate(forecasts)
    ]
    return report_from_triples(triples)
