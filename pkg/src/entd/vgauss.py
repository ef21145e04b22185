"""Variational Gaussians in natural parameters.

The canonical storage is (eta1, eta2) = (Sigma^{-1} mu, -1/2 Sigma^{-1});
moments are derived on demand.  Natural-gradient steps are convex
combinations in natural coordinates, which keeps eta2 negative definite.
"""

from dataclasses import dataclass

import torch

from .kernels import PsdFactor, inv_psd, logdet, solve_psd


@dataclass(frozen=True)
class NaturalGaussian:
    """Multivariate Gaussian stored as natural parameters.

    eta2 must be symmetric negative definite; the Cholesky factor of the
    precision -2 eta2 is computed once at construction (this is also the
    validity check).
    """

    eta1: torch.Tensor
    eta2: torch.Tensor

    def __post_init__(self):
        p = self.eta1.shape[0]
        if self.eta1.shape != (p,) or self.eta2.shape != (p, p):
            raise ValueError(
                f"bad shapes: eta1 {tuple(self.eta1.shape)}, eta2 {tuple(self.eta2.shape)}"
            )
        asym = (self.eta2 - self.eta2.T).abs().max()
        scale = torch.clamp(self.eta2.abs().max(), min=1.0)
        if asym > 1e-10 * scale:
            raise ValueError(f"eta2 not symmetric: max asymmetry {float(asym):.3e}")
        prec = -(self.eta2 + self.eta2.T)  # = -2 eta2, exactly symmetric
        chol, info = torch.linalg.cholesky_ex(prec)
        if int(info) != 0:
            raise ValueError("eta2 is not negative definite")
        object.__setattr__(self, "_prec_factor", PsdFactor(chol, 0.0))

    @property
    def dim(self):
        return self.eta1.shape[0]

    @property
    def precision_factor(self) -> PsdFactor:
        """Cholesky factor of -2 eta2."""
        return self._prec_factor


def from_moment(mu, sigma) -> NaturalGaussian:
    """Natural parameters of N(mu, sigma); sigma must be symmetric PD."""
    chol, info = torch.linalg.cholesky_ex(0.5 * (sigma + sigma.T))
    if int(info) != 0:
        raise ValueError("covariance is not positive definite")
    factor = PsdFactor(chol, 0.0)
    eta1 = solve_psd(factor, mu)
    eta2 = -0.5 * inv_psd(factor)
    return NaturalGaussian(eta1, eta2)


def to_moment(ng: NaturalGaussian):
    """Moment parameters (mu, Sigma); cached on the (immutable) instance."""
    cached = getattr(ng, "_moments", None)
    if cached is None:
        sigma = inv_psd(ng.precision_factor)
        mu = solve_psd(ng.precision_factor, ng.eta1)
        cached = (mu, sigma)
        object.__setattr__(ng, "_moments", cached)
    return cached


def from_prior(prior_factor: PsdFactor) -> NaturalGaussian:
    """The zero-mean Gaussian with covariance equal to the (jittered) prior."""
    return NaturalGaussian(
        torch.zeros(prior_factor.dim, dtype=torch.float64),
        -0.5 * inv_psd(prior_factor),
    )


def kl_to_prior(ng: NaturalGaussian, prior_factor: PsdFactor):
    """KL(q || N(0, K)) = 1/2 [log|K| - log|Sigma| - p + tr(K^{-1} Sigma) + mu' K^{-1} mu].

    The full divergence including the -p/2 constant, so the value is zero
    exactly when q matches the prior.
    """
    if ng.dim != prior_factor.dim:
        raise ValueError(f"dimension mismatch: q has {ng.dim}, prior has {prior_factor.dim}")
    mu, sigma = to_moment(ng)
    logdet_sigma = -logdet(ng.precision_factor)
    trace = torch.diagonal(solve_psd(prior_factor, sigma)).sum()
    quad = mu @ solve_psd(prior_factor, mu)
    return 0.5 * (logdet(prior_factor) - logdet_sigma - ng.dim + trace + quad)


def ng_step(ng: NaturalGaussian, target_eta1, target_eta2, rho) -> NaturalGaussian:
    """Move natural parameters a fraction rho toward the target.

    The natural gradient here is (target - current), so the update
    eta + rho * grad is the convex combination (1-rho) eta + rho target,
    which preserves negative definiteness for rho in (0, 1].
    """
    if not 0.0 < rho <= 1.0:
        raise ValueError(f"rho must be in (0, 1], got {rho}")
    if rho == 1.0:
        return NaturalGaussian(target_eta1, target_eta2)
    return NaturalGaussian(
        (1.0 - rho) * ng.eta1 + rho * target_eta1,
        (1.0 - rho) * ng.eta2 + rho * target_eta2,
    )
