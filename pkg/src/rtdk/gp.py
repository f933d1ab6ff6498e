"""Exact Gaussian-process machinery on learned embeddings.

Covariance is a truncated, coefficient-weighted power series of the
dimension-normalized inner product ("combination" kernel), normalized so the
diagonal is carried entirely by a learned pointwise term exp(2u): the
off-diagonal entries are exp(u_i+u_j) K_ij / sqrt(K_ii K_jj). Posteriors are
computed by Cholesky conditioning in float64 with jitter escalation; all
operations are torch-differentiable w.r.t. kernel coefficients, mean weights,
embeddings and pointwise variances.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import (
    DegenerateDensityError,
    DegenerateEmbeddingError,
    NumericalFailureError,
    ShapeError,
)
from .nn import DTYPE

DEFAULT_JITTER = 1e-6
SCALE_FLOOR = 1e-8
MAX_JITTER_ESCALATIONS = 3


def as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(DTYPE)
    return torch.as_tensor(np.asarray(x), dtype=DTYPE)


class KernelParameters:
    """Coefficients of the combination kernel, stored as log(alpha_k)."""

    def __init__(self, log_alpha):
        self.log_alpha = as_tensor(log_alpha)
        if self.log_alpha.dim() != 1 or self.log_alpha.numel() < 1:
            raise ShapeError("log_alpha must be a non-empty vector")

    @classmethod
    def create(cls, num_components: int = 5) -> "KernelParameters":
        return cls(torch.zeros(num_components, dtype=DTYPE))

    @property
    def num_components(self) -> int:
        return self.log_alpha.numel()

    @property
    def alpha(self) -> torch.Tensor:
        return self.log_alpha.exp()


class MeanParameters:
    """Weights of the linear mean function W x."""

    def __init__(self, weight):
        self.weight = as_tensor(weight)
        if self.weight.dim() != 1:
            raise ShapeError("mean weight must be a vector")

    @classmethod
    def zeros(cls, dim: int) -> "MeanParameters":
        return cls(torch.zeros(dim, dtype=DTYPE))


@dataclass
class ObservationSet:
    """Observed inputs/values plus the y-standardization statistics."""

    X: np.ndarray
    y: np.ndarray
    y_mean: float
    y_scale: float

    @classmethod
    def from_data(cls, X, y, scale_floor: float = SCALE_FLOOR) -> "ObservationSet":
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        y = np.asarray(y, dtype=np.float64).reshape(-1)
        if len(y) == 0:
            X = X.reshape(0, X.shape[-1] if X.size else 0)
        if X.shape[0] != y.shape[0]:
            raise ShapeError(f"|X|={X.shape[0]} but |y|={y.shape[0]}")
        if len(y) < 2:
            # the spread of <2 points is not a usable scale estimate
            return cls(X=X, y=y, y_mean=float(y.mean()) if len(y) else 0.0,
                       y_scale=1.0)
        return cls(X=X, y=y, y_mean=float(y.mean()),
                   y_scale=float(max(y.std(), scale_floor)))

    def __post_init__(self):
        if self.y_scale <= 0:
            raise ShapeError("y_scale must be positive")

    def __len__(self) -> int:
        return int(self.y.shape[0])

    @property
    def dim(self) -> int:
        return int(self.X.shape[1])

    def standardized_y(self) -> np.ndarray:
        return (self.y - self.y_mean) / self.y_scale


@dataclass
class GaussianPosterior:
    """Predictive mean/variance per query point; optional full covariance."""

    mean: torch.Tensor
    variance: torch.Tensor
    covariance: torch.Tensor | None = None

    def numpy(self):
        return (self.mean.detach().numpy(), self.variance.detach().numpy())


def standardize_masked(ys: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Row-wise y standardization over masked entries, matching
    ObservationSet.from_data: rows with fewer than 2 real values use scale 1."""
    counts = mask.sum(dim=-1, keepdim=True).clamp_min(1).to(DTYPE)
    mean = (ys * mask).sum(dim=-1, keepdim=True) / counts
    var = (((ys - mean) ** 2) * mask).sum(dim=-1, keepdim=True) / counts
    scale = torch.where(counts >= 2, var.sqrt().clamp_min(SCALE_FLOOR),
                        torch.ones_like(var))
    return ((ys - mean) / scale) * mask


def _power_series(s: torch.Tensor, log_alpha: torch.Tensor) -> torch.Tensor:
    alpha = log_alpha.exp()
    total = torch.zeros_like(s)
    term = torch.ones_like(s)
    for k in range(1, log_alpha.numel() + 1):
        term = term * s
        total = total + (alpha[k - 1] / math.factorial(k)) * term
    return total


def combination_kernel_matrix(Z1, Z2, params: KernelParameters) -> torch.Tensor:
    """Pairwise kernel sum_k alpha_k (<z1,z2>/d)^k / k! over the last axes."""
    Z1, Z2 = as_tensor(Z1), as_tensor(Z2)
    if Z1.shape[-1] != Z2.shape[-1]:
        raise ShapeError("embedding dimensions differ")
    s = Z1 @ Z2.transpose(-2, -1) / Z1.shape[-1]
    return _power_series(s, params.log_alpha)


def combination_kernel_diag(Z, params: KernelParameters) -> torch.Tensor:
    Z = as_tensor(Z)
    s = (Z * Z).sum(dim=-1) / Z.shape[-1]
    return _power_series(s, params.log_alpha)


def combination_kernel(z1, z2, params: KernelParameters) -> torch.Tensor:
    """Scalar kernel value for a single pair of embedded points."""
    z1, z2 = as_tensor(z1), as_tensor(z2)
    if z1.shape != z2.shape or z1.dim() != 1:
        raise ShapeError("expected two vectors of identical dimension")
    s = (z1 * z2).sum() / z1.numel()
    return _power_series(s, params.log_alpha)


def normalized_kernel(z1, z2, u1, u2, params: KernelParameters) -> torch.Tensor:
    """exp(u1)exp(u2) K(z1,z2) / sqrt(K(z1,z1) K(z2,z2)); diagonal is exp(2u)."""
    k12 = combination_kernel(z1, z2, params)
    k11 = combination_kernel(z1, z1, params)
    k22 = combination_kernel(z2, z2, params)
    if k11 <= 0 or k22 <= 0:
        raise DegenerateEmbeddingError("self-kernel must be strictly positive")
    u1, u2 = as_tensor(u1), as_tensor(u2)
    return torch.exp(u1 + u2) * k12 / torch.sqrt(k11 * k22)


def _masked(values, mask, fill):
    if mask is None:
        return values
    return torch.where(mask, values, torch.as_tensor(fill, dtype=DTYPE))


def normalized_cross(Z1, u1, Z2, u2, params, mask2=None) -> torch.Tensor:
    """Cross-covariance block; columns at masked-out Z2 entries are zeroed."""
    base = combination_kernel_matrix(Z1, Z2, params)
    d1 = combination_kernel_diag(Z1, params)
    d2 = _masked(combination_kernel_diag(Z2, params), mask2, 1.0)
    if (d1 <= 0).any() or (d2 <= 0).any():
        raise DegenerateEmbeddingError("self-kernel must be strictly positive")
    u1 = as_tensor(u1)
    u2 = _masked(as_tensor(u2), mask2, 0.0)
    scale = torch.exp(u1).unsqueeze(-1) * torch.exp(u2).unsqueeze(-2)
    out = scale * base / torch.sqrt(d1.unsqueeze(-1) * d2.unsqueeze(-2))
    if mask2 is not None:
        out = out * mask2.unsqueeze(-2)
    return out


def normalized_gram(Z, u, params: KernelParameters, mask=None) -> torch.Tensor:
    """Full normalized Gram matrix, no jitter. Masked entries form an identity
    block so padded batch elements cannot influence the factorization."""
    Z, u = as_tensor(Z), as_tensor(u)
    base = combination_kernel_matrix(Z, Z, params)
    diag = _masked(combination_kernel_diag(Z, params), mask, 1.0)
    if (diag <= 0).any():
        raise DegenerateEmbeddingError("self-kernel must be strictly positive")
    um = _masked(u, mask, 0.0)
    scale = torch.exp(um).unsqueeze(-1) * torch.exp(um).unsqueeze(-2)
    gram = scale * base / torch.sqrt(diag.unsqueeze(-1) * diag.unsqueeze(-2))
    if mask is not None:
        pair = mask.unsqueeze(-1) & mask.unsqueeze(-2)
        gram = torch.where(pair, gram, torch.zeros((), dtype=DTYPE))
        gram = gram + torch.diag_embed((~mask).to(DTYPE))
    return gram


def _cholesky_with_escalation(matrix: torch.Tensor, jitter: float):
    """Cholesky of matrix + jitter*I, escalating jitter x10 up to 3 times."""
    n = matrix.shape[-1]
    eye = torch.eye(n, dtype=DTYPE).expand_as(matrix)
    current = float(jitter)
    for _ in range(MAX_JITTER_ESCALATIONS + 1):
        chol, info = torch.linalg.cholesky_ex(matrix + current * eye)
        if (info == 0).all() and torch.isfinite(chol).all():
            return chol, current
        current = current * 10.0 if current > 0 else 1e-12
    raise NumericalFailureError(
        f"Cholesky failed after {MAX_JITTER_ESCALATIONS} jitter escalations "
        f"(final jitter {current:.2e})")


def gram_matrix(Z, u, params: KernelParameters, jitter: float) -> torch.Tensor:
    """Normalized Gram plus diagonal jitter, escalated until Cholesky succeeds."""
    Z, u = as_tensor(Z), as_tensor(u)
    if Z.dim() != 2 or u.dim() != 1 or Z.shape[0] != u.shape[0] or Z.shape[0] < 1:
        raise ShapeError("need n>=1 points with one u value each")
    if jitter < 0:
        raise ShapeError("jitter must be non-negative")
    gram = normalized_gram(Z, u, params)
    _, used = _cholesky_with_escalation(gram, jitter)
    return gram + used * torch.eye(Z.shape[0], dtype=DTYPE)


def linear_mean(x, params: MeanParameters) -> torch.Tensor:
    x = as_tensor(x)
    if x.shape[-1] != params.weight.shape[0]:
        raise ShapeError("input dimension does not match mean weights")
    return x @ params.weight


def gp_posterior(query_Z, query_u, obs_Z=None, obs_u=None, obs_y=None, *,
                 kernel: KernelParameters, mean: MeanParameters,
                 jitter: float = DEFAULT_JITTER,
                 full_cov: bool = False) -> GaussianPosterior:
    """Exact GP conditioning in embedding space; `obs_y` is standardized.

    Empty observations give the prior: mean W z, variance exp(2u) + jitter.
    """
    query_Z, query_u = as_tensor(query_Z), as_tensor(query_u)
    if query_Z.dim() != 2 or query_u.shape != query_Z.shape[:1]:
        raise ShapeError("query_Z must be (m, d) with one u per query")
    prior_mean = linear_mean(query_Z, mean)
    prior_var = torch.exp(2.0 * query_u) + jitter

    n_obs = 0 if obs_Z is None else as_tensor(obs_Z).shape[0]
    if n_obs == 0:
        cov = None
        if full_cov:
            cov = normalized_gram(query_Z, query_u, kernel) \
                + jitter * torch.eye(query_Z.shape[0], dtype=DTYPE)
        return GaussianPosterior(mean=prior_mean, variance=prior_var, covariance=cov)

    obs_Z, obs_u, obs_y = as_tensor(obs_Z), as_tensor(obs_u), as_tensor(obs_y)
    gram = normalized_gram(obs_Z, obs_u, kernel)
    chol, used = _cholesky_with_escalation(gram, jitter)
    resid = (obs_y - linear_mean(obs_Z, mean)).unsqueeze(-1)
    alpha = torch.cholesky_solve(resid, chol)
    k_cross = normalized_cross(query_Z, query_u, obs_Z, obs_u, kernel)
    post_mean = prior_mean + (k_cross @ alpha).squeeze(-1)
    v = torch.linalg.solve_triangular(chol, k_cross.transpose(-2, -1), upper=False)
    if full_cov:
        prior_cov = normalized_gram(query_Z, query_u, kernel) \
            + jitter * torch.eye(query_Z.shape[0], dtype=DTYPE)
        cov = prior_cov - v.transpose(-2, -1) @ v
        var = torch.diagonal(cov).clamp_min(0.0)
        cov = cov - torch.diag_embed(torch.diagonal(cov)) + torch.diag_embed(var)
        return GaussianPosterior(mean=post_mean, variance=var, covariance=cov)
    var = (prior_var - v.pow(2).sum(dim=-2)).clamp_min(0.0)
    return GaussianPosterior(mean=post_mean, variance=var)


def gp_posterior_batched(query_Z, query_u, obs_Z, obs_u, obs_y, obs_mask, *,
                         kernel: KernelParameters, mean: MeanParameters,
                         jitter: float = DEFAULT_JITTER):
    """Batched conditioning over padded observation sets.

    Shapes: query (B, m, d)/(B, m); obs (B, n, d)/(B, n); obs_mask (B, n)
    with True marking real observations (>=1 per batch element). Returns
    (mean, variance) of shape (B, m).
    """
    query_Z, query_u = as_tensor(query_Z), as_tensor(query_u)
    obs_Z, obs_u, obs_y = as_tensor(obs_Z), as_tensor(obs_u), as_tensor(obs_y)
    gram = normalized_gram(obs_Z, obs_u, kernel, mask=obs_mask)
    chol, _ = _cholesky_with_escalation(gram, jitter)
    resid = (obs_y - linear_mean(obs_Z, mean)) * obs_mask
    alpha = torch.cholesky_solve(resid.unsqueeze(-1), chol)
    k_cross = normalized_cross(query_Z, query_u, obs_Z, obs_u, kernel, mask2=obs_mask)
    post_mean = linear_mean(query_Z, mean) + (k_cross @ alpha).squeeze(-1)
    v = torch.linalg.solve_triangular(chol, k_cross.transpose(-2, -1), upper=False)
    var = (torch.exp(2.0 * query_u) + jitter - v.pow(2).sum(dim=-2)).clamp_min(0.0)
    return post_mean, var


def log_predictive_density(posterior: GaussianPosterior, y_query) -> torch.Tensor:
    """Sum of independent per-point Gaussian log-densities."""
    y = as_tensor(y_query)
    if y.shape != posterior.mean.shape:
        raise ShapeError("y_query length does not match the posterior")
    if (posterior.variance <= 0).any():
        raise DegenerateDensityError("predictive variance must be positive")
    var = posterior.variance
    return (-0.5 * torch.log(2 * math.pi * var)
            - (y - posterior.mean) ** 2 / (2 * var)).sum()


def destandardize(posterior: GaussianPosterior, y_mean: float,
                  y_scale: float) -> GaussianPosterior:
    cov = None
    if posterior.covariance is not None:
        cov = posterior.covariance * y_scale ** 2
    return GaussianPosterior(mean=y_mean + y_scale * posterior.mean,
                             variance=posterior.variance * y_scale ** 2,
                             covariance=cov)


class ClassicalGpFit:
    """One-shot exact GP fit on raw inputs (identity embedding, u = 0).

    Factorizes once so acquisition maximizers can score many query batches
    against the same observation set; predictions are on the raw y scale.
    """

    def __init__(self, obs: ObservationSet, kernel: KernelParameters,
                 mean: MeanParameters, jitter: float = DEFAULT_JITTER):
        self.obs = obs
        self.kernel = kernel
        self.mean = mean
        self.jitter = jitter
        self._chol = None
        self._alpha = None
        if len(obs) > 0:
            Z = as_tensor(obs.X)
            u = torch.zeros(len(obs), dtype=DTYPE)
            gram = normalized_gram(Z, u, kernel)
            self._chol, _ = _cholesky_with_escalation(gram, jitter)
            resid = as_tensor(obs.standardized_y()) - linear_mean(Z, mean)
            self._alpha = torch.cholesky_solve(resid.unsqueeze(-1), self._chol)
            self._Z = Z
            self._u = u

    def posterior(self, query_X, full_cov: bool = False) -> GaussianPosterior:
        query_Z = as_tensor(query_X)
        query_u = torch.zeros(query_Z.shape[0], dtype=DTYPE)
        if self._chol is None:
            post = gp_posterior(query_Z, query_u, kernel=self.kernel,
                                mean=self.mean, jitter=self.jitter,
                                full_cov=full_cov)
            return destandardize(post, self.obs.y_mean, self.obs.y_scale)
        prior_mean = linear_mean(query_Z, self.mean)
        k_cross = normalized_cross(query_Z, query_u, self._Z, self._u, self.kernel)
        post_mean = prior_mean + (k_cross @ self._alpha).squeeze(-1)
        v = torch.linalg.solve_triangular(self._chol, k_cross.transpose(-2, -1),
                                          upper=False)
        if full_cov:
            prior_cov = normalized_gram(query_Z, query_u, self.kernel) \
                + self.jitter * torch.eye(query_Z.shape[0], dtype=DTYPE)
            cov = prior_cov - v.transpose(-2, -1) @ v
            var = torch.diagonal(cov).clamp_min(0.0)
            cov = cov - torch.diag_embed(torch.diagonal(cov)) + torch.diag_embed(var)
            post = GaussianPosterior(mean=post_mean, variance=var, covariance=cov)
        else:
            var = (torch.exp(2.0 * query_u) + self.jitter
                   - v.pow(2).sum(dim=-2)).clamp_min(0.0)
            post = GaussianPosterior(mean=post_mean, variance=var)
        return destandardize(post, self.obs.y_mean, self.obs.y_scale)


def classical_posterior(query_X, obs: ObservationSet, kernel: KernelParameters,
                        mean: MeanParameters, jitter: float = DEFAULT_JITTER,
                        full_cov: bool = False) -> GaussianPosterior:
    """Raw-scale posterior of the classical GP (identity embedding, u = 0)."""
    return ClassicalGpFit(obs, kernel, mean, jitter).posterior(query_X, full_cov)


def log_marginal_likelihood(obs: ObservationSet, kernel: KernelParameters,
                            mean: MeanParameters,
                            jitter: float = DEFAULT_JITTER) -> torch.Tensor:
    """Exact log marginal likelihood of the standardized observations."""
    n = len(obs)
    if n < 1:
        raise ShapeError("log marginal likelihood needs observations")
    Z = as_tensor(obs.X)
    u = torch.zeros(n, dtype=DTYPE)
    gram = normalized_gram(Z, u, kernel)
    chol, _ = _cholesky_with_escalation(gram, jitter)
    resid = (as_tensor(obs.standardized_y()) - linear_mean(Z, mean)).unsqueeze(-1)
    alpha = torch.cholesky_solve(resid, chol)
    return (-0.5 * (resid * alpha).sum()
            - torch.log(torch.diagonal(chol)).sum()
            - 0.5 * n * math.log(2 * math.pi))


def fit_gp_hyperparameters(obs: ObservationSet, init: KernelParameters,
                           mean: MeanParameters, steps: int, lr: float = 0.05,
                           jitter: float = DEFAULT_JITTER):
    """Gradient ascent on the log marginal likelihood with backtracking.

    Steps are only accepted when they do not decrease the likelihood, so the
    final value is >= the initial one.
    """
    if len(obs) < 2:
        raise ShapeError("hyperparameter fitting needs at least 2 observations")
    log_alpha = init.log_alpha.detach().clone().requires_grad_(True)
    weight = mean.weight.detach().clone().requires_grad_(True)

    def objective(la, w):
        return log_marginal_likelihood(obs, KernelParameters(la),
                                       MeanParameters(w), jitter)

    current = objective(log_alpha, weight)
    for _ in range(steps):
        grad_la, grad_w = torch.autograd.grad(current, [log_alpha, weight])
        step_size = lr
        accepted = False
        for _ in range(25):
            cand_la = (log_alpha + step_size * grad_la).detach().requires_grad_(True)
            cand_w = (weight + step_size * grad_w).detach().requires_grad_(True)
            try:
                cand_val = objective(cand_la, cand_w)
            except NumericalFailureError:
                step_size *= 0.5
                continue
            if torch.isfinite(cand_val) and cand_val >= current:
                log_alpha, weight, current = cand_la, cand_w, cand_val
                accepted = True
                break
            step_size *= 0.5
        if not accepted:
            break
    return KernelParameters(log_alpha.detach()), MeanParameters(weight.detach())
