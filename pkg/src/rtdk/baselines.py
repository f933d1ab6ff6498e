"""Classical GP acquisitions and a gradient-free acquisition maximizer.

Baselines run the exact GP with identity embedding and zero pointwise
variance; hyperparameters (kernel coefficients and linear mean) are refit by
marginal-likelihood ascent on a fixed observation-count schedule.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .errors import ConfigError, InvalidDomainError
from .gp import (
    DEFAULT_JITTER,
    ClassicalGpFit,
    GaussianPosterior,
    KernelParameters,
    MeanParameters,
    ObservationSet,
    fit_gp_hyperparameters,
)
from .objectives import Box

ACQUISITION_KINDS = ("ei", "pi", "ucb", "random")


@dataclass(frozen=True)
class AcquisitionConfig:
    kind: str = "ei"
    xi: float = 0.01
    kappa: float = 2.0
    n_starts: int = 512
    refine_steps: int = 20

    def __post_init__(self):
        if self.kind not in ACQUISITION_KINDS:
            raise ConfigError(f"unknown acquisition kind {self.kind!r}")
        if self.xi < 0 or self.kappa <= 0 or self.n_starts < 1 or self.refine_steps < 0:
            raise ConfigError("invalid acquisition configuration")


def _moments(posterior: GaussianPosterior):
    mu = posterior.mean.detach().numpy()
    sigma = np.sqrt(np.clip(posterior.variance.detach().numpy(), 0.0, None))
    return mu, sigma


def expected_improvement(posterior: GaussianPosterior, best_y: float,
                         xi: float = 0.01) -> np.ndarray:
    """Closed-form EI; deterministic points score max(0, mu - best - xi)."""
    mu, sigma = _moments(posterior)
    gap = mu - best_y - xi
    scores = np.maximum(gap, 0.0)
    positive = sigma > 0
    u = np.zeros_like(mu)
    np.divide(gap, sigma, out=u, where=positive)
    phi = np.exp(-0.5 * u ** 2) / np.sqrt(2 * np.pi)
    ei = gap * ndtr(u) + sigma * phi
    scores[positive] = np.maximum(ei[positive], 0.0)
    return scores


def improvement_acquisitions(posterior: GaussianPosterior, best_y: float,
                             config: AcquisitionConfig) -> np.ndarray:
    """Score queries under the configured acquisition (EI, PI or UCB)."""
    mu, sigma = _moments(posterior)
    if config.kind == "ei":
        return expected_improvement(posterior, best_y, config.xi)
    if config.kind == "pi":
        gap = mu - best_y - config.xi
        scores = (gap > 0).astype(np.float64)
        positive = sigma > 0
        scores[positive] = ndtr(gap[positive] / sigma[positive])
        return scores
    if config.kind == "ucb":
        return mu + config.kappa * sigma
    raise ConfigError(f"acquisition kind {config.kind!r} has no scores")


def maximize_acquisition(score_fn, domain, config: AcquisitionConfig,
                         rng: np.random.Generator) -> np.ndarray:
    """Best scoring point: exact argmax over discrete candidates, or random
    multi-start plus coordinate-wise step-halving refinement over a box."""
    if isinstance(domain, np.ndarray):
        if len(domain) == 0:
            raise InvalidDomainError("empty candidate list")
        return domain[int(np.argmax(score_fn(domain)))]
    if not isinstance(domain, Box):
        raise InvalidDomainError("domain must be a Box or a candidate array")

    starts = domain.sample(rng, config.n_starts)
    scores = score_fn(starts)
    best_idx = int(np.argmax(scores))
    incumbent = starts[best_idx].copy()
    best_score = float(scores[best_idx])

    step = 0.25 * (domain.upper - domain.lower)
    for _ in range(config.refine_steps):
        for _ in range(50):
            probes = np.repeat(incumbent[None, :], 2 * domain.dim, axis=0)
            for axis in range(domain.dim):
                probes[2 * axis, axis] += step[axis]
                probes[2 * axis + 1, axis] -= step[axis]
            probes = np.clip(probes, domain.lower, domain.upper)
            probe_scores = score_fn(probes)
            idx = int(np.argmax(probe_scores))
            if probe_scores[idx] <= best_score:
                break
            incumbent = probes[idx].copy()
            best_score = float(probe_scores[idx])
        step *= 0.5
    return incumbent


class ClassicalGpPolicy:
    """Acquisition maximization over the classical GP surrogate."""

    def __init__(self, dim: int, acquisition: AcquisitionConfig,
                 kernel_components: int = 5, refit_every: int = 10,
                 fit_steps: int = 50, fit_lr: float = 0.05,
                 jitter: float = DEFAULT_JITTER):
        self.acquisition = acquisition
        self.kernel = KernelParameters.create(kernel_components)
        self.mean = MeanParameters.zeros(dim)
        self.refit_every = refit_every
        self.fit_steps = fit_steps
        self.fit_lr = fit_lr
        self.jitter = jitter
        self._fitted_at = 0

    def propose(self, obs: ObservationSet, domain,
                rng: np.random.Generator) -> np.ndarray:
        if len(obs) == 0:
            if isinstance(domain, np.ndarray):
                return domain[int(rng.integers(len(domain)))]
            return domain.sample(rng)
        if len(obs) - self._fitted_at >= self.refit_every and len(obs) >= 2:
            self.kernel, self.mean = fit_gp_hyperparameters(
                obs, self.kernel, self.mean, steps=self.fit_steps,
                lr=self.fit_lr, jitter=self.jitter)
            self._fitted_at = len(obs)
        fit = ClassicalGpFit(obs, self.kernel, self.mean, self.jitter)
        best_y = float(obs.y.max())

        def score(X):
            return improvement_acquisitions(fit.posterior(X), best_y,
                                            self.acquisition)

        return maximize_acquisition(score, domain, self.acquisition, rng)


class RandomPolicy:
    """Uniform random search."""

    def propose(self, obs: ObservationSet, domain,
                rng: np.random.Generator) -> np.ndarray:
        if isinstance(domain, np.ndarray):
            return domain[int(rng.integers(len(domain)))]
        return domain.sample(rng)
