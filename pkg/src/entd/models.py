"""Model cores: sparse variational GP factorization with three variants.

- probit: binary likelihood through a Gaussian CDF link, moment-form q(u),
  everything trained by gradient ascent.
- pg: logistic/negative-binomial likelihood through Polya-Gamma sites,
  natural-gradient updates for q(u).
- solve: the orthogonally decoupled variant with a second inducing set
  approximating the residual process, natural gradients for q(u) and q(v).

ELBO values for the PG-augmented variants omit the constant data-dependent
likelihood normalizers (2^{-b} and count combinatorial terms), i.e. they are
exact up to an additive constant that no parameter can move.
"""

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from . import pg as pglib
from .kernels import RbfKernel, chol_psd, gram, inv_psd, logdet, solve_psd
from .vgauss import NaturalGaussian, kl_to_prior, to_moment

BERNOULLI = "bernoulli"
NEGBIN = "negbin"

_LOG2 = math.log(2.0)


@dataclass(frozen=True)
class Likelihood:
    """Observation model: bernoulli, or negbin with ``zeta`` successes."""

    kind: str
    zeta: float = 20.0

    def __post_init__(self):
        if self.kind not in (BERNOULLI, NEGBIN):
            raise ValueError(f"unknown likelihood {self.kind!r}")
        if self.kind == NEGBIN and self.zeta <= 0:
            raise ValueError(f"negbin needs zeta > 0, got {self.zeta}")

    @property
    def data_kind(self):
        return "binary" if self.kind == BERNOULLI else "count"


class FactorSet:
    """The D latent factor matrices, each I_d x R, standard-normal prior."""

    def __init__(self, factors):
        factors = [torch.as_tensor(z, dtype=torch.float64) for z in factors]
        rank = factors[0].shape[1]
        if any(z.ndim != 2 or z.shape[1] != rank for z in factors):
            raise ValueError("all factor matrices must share the same rank")
        self.factors = factors

    @property
    def rank(self):
        return self.factors[0].shape[1]

    @property
    def shape(self):
        return tuple(z.shape[0] for z in self.factors)

    def penalty(self):
        """Negative log-prior up to a constant: 1/2 sum ||Z||_F^2."""
        return 0.5 * sum((z * z).sum() for z in self.factors)


def assemble_inputs(factors, indices):
    """GP inputs for entries: row n concatenates the D selected factor rows."""
    zs = factors.factors if isinstance(factors, FactorSet) else list(factors)
    idx = torch.as_tensor(np.array(indices, dtype=np.int64), dtype=torch.long)
    if idx.ndim != 2 or idx.shape[1] != len(zs):
        raise ValueError(f"indices must be s x {len(zs)}, got {tuple(idx.shape)}")
    cols = []
    for d, z in enumerate(zs):
        i = idx[:, d]
        if i.numel() and (int(i.min()) < 0 or int(i.max()) >= z.shape[0]):
            raise IndexError(f"index out of range in mode {d}")
        cols.append(z[i])
    return torch.cat(cols, dim=1)


@dataclass
class SvgpState:
    """Kernel, inducing inputs, q(u) in natural form, likelihood."""

    kernel: RbfKernel
    inducing: torch.Tensor
    qu: NaturalGaussian
    likelihood: Likelihood

    @property
    def num_inducing(self):
        return self.inducing.shape[0]


@dataclass
class SolveState(SvgpState):
    """SVGP state plus the orthogonal-residual inducing set and q(v).

    inducing_ortho may have zero rows, in which case every operation
    degenerates to plain SVGP semantics.
    """

    inducing_ortho: torch.Tensor = None
    qv: Optional[NaturalGaussian] = None

    @property
    def num_ortho(self):
        return 0 if self.inducing_ortho is None else self.inducing_ortho.shape[0]


@dataclass
class ProbitState:
    """Moment-form state for the probit variant: q(u) = N(mu, L L')."""

    kernel: RbfKernel
    inducing: torch.Tensor
    qu_mean: torch.Tensor
    qu_chol: torch.Tensor
    likelihood: Likelihood

    @property
    def num_inducing(self):
        return self.inducing.shape[0]


@dataclass
class BatchGeometry:
    """Per-batch interpolation geometry.

    kappa_u rows map q(u) onto each entry; ktilde is the residual prior
    variance (clamped at zero).  For the solve variant kappa_v maps q(v)
    through the conditional cross-covariance and f_perp_var is the diagonal
    of the residual posterior covariance (also clamped at zero); without an
    orthogonal set f_perp_var is ktilde itself.
    """

    kappa_u: torch.Tensor
    ktilde: torch.Tensor
    kbb_factor: object
    kappa_v: Optional[torch.Tensor] = None
    f_perp_var: Optional[torch.Tensor] = None
    khh_factor: object = None
    chh_factor: object = None
    cmh: Optional[torch.Tensor] = None
    chh: Optional[torch.Tensor] = None


def _rowquad(rows, mat):
    """Per-row quadratic forms r_n' M r_n."""
    return ((rows @ mat) * rows).sum(dim=1)


def svgp_geometry(state, inputs) -> BatchGeometry:
    """kappa rows and residual variances for plain SVGP states."""
    kbb = gram(state.kernel, state.inducing, state.inducing)
    fac = chol_psd(kbb)
    kmb = gram(state.kernel, inputs, state.inducing)
    kappa = solve_psd(fac, kmb.T).T
    ktilde = (1.0 - (kmb * kappa).sum(dim=1)).clamp_min(0.0)
    return BatchGeometry(kappa, ktilde, fac, f_perp_var=ktilde)


def solve_geometry(state: SolveState, inputs) -> BatchGeometry:
    """Geometry including the orthogonal-residual terms.

    C_MH = K_MH - K_MB K_BB^{-1} K_BH and C_HH likewise; kappa_v rows are
    C_MH C_HH^{-1} and the residual posterior variance diag is
    ktilde + kappa_v' (Sigma_v - C_HH) kappa_v, clamped at zero.
    """
    base = svgp_geometry(state, inputs)
    if state.num_ortho == 0:
        return base
    kmb = gram(state.kernel, inputs, state.inducing)
    khh = gram(state.kernel, state.inducing_ortho, state.inducing_ortho)
    kbh = gram(state.kernel, state.inducing, state.inducing_ortho)
    kmh = gram(state.kernel, inputs, state.inducing_ortho)
    fac_hh = chol_psd(khh)
    bb_inv_bh = solve_psd(base.kbb_factor, kbh)
    cmh = kmh - kmb @ bb_inv_bh
    chh = khh - kbh.T @ bb_inv_bh
    chh = 0.5 * (chh + chh.T)
    fac_chh = chol_psd(chh)
    kappa_v = solve_psd(fac_chh, cmh.T).T
    _, sigma_v = to_moment(state.qv)
    f_perp_var = (base.ktilde + _rowquad(kappa_v, sigma_v - chh)).clamp_min(0.0)
    return BatchGeometry(
        base.kappa_u,
        base.ktilde,
        base.kbb_factor,
        kappa_v=kappa_v,
        f_perp_var=f_perp_var,
        khh_factor=fac_hh,
        chh_factor=fac_chh,
        cmh=cmh,
        chh=chh,
    )


def _logcosh(z):
    z = z.abs()
    return z + torch.log1p(torch.exp(-2.0 * z)) - _LOG2


def _site_tensors(sites: pglib.PGSite):
    t = lambda a: torch.tensor(np.asarray(a), dtype=torch.float64)
    return t(sites.b), t(sites.chi), t(sites.c), t(sites.theta)


def _check_sites(sites, batch):
    if len(sites) != len(batch):
        raise ValueError(f"{len(sites)} sites for a batch of {len(batch)} entries")


# ---------------------------------------------------------------------------
# Probit variant
# ---------------------------------------------------------------------------

def probit_elbo(state: ProbitState, factors: FactorSet, batch):
    """Stochastic bound for the probit model.

    Per entry: x log Phi(kappa'mu / sqrt 2) + (1-x) log(1 - Phi(.))
    - ktilde/2 - kappa' Sigma kappa / 2, summed and scaled by N/s,
    minus KL(q(u) || p(u)) and the factor penalty.  Differentiable in
    Z, B, mu and L.
    """
    if state.likelihood.kind != BERNOULLI:
        raise ValueError("probit model requires binary data")
    x = np.asarray(batch.values)
    if not np.isin(x, (0, 1)).all():
        raise ValueError("probit model requires binary data")
    inputs = assemble_inputs(factors, batch.indices)
    geo = svgp_geometry(state, inputs)
    x_t = torch.tensor(x, dtype=torch.float64)
    mu, low = state.qu_mean, state.qu_chol.tril()
    sigma = low @ low.T
    z = (geo.kappa_u @ mu) / math.sqrt(2.0)
    loglik = x_t * torch.special.log_ndtr(z) + (1.0 - x_t) * torch.special.log_ndtr(-z)
    per_entry = loglik - 0.5 * geo.ktilde - 0.5 * _rowquad(geo.kappa_u, sigma)
    data = batch.scale * per_entry.sum()
    p = state.num_inducing
    logdet_sigma = 2.0 * torch.log(low.diagonal().abs()).sum()
    kl = 0.5 * (
        logdet(geo.kbb_factor)
        - logdet_sigma
        - p
        + torch.diagonal(solve_psd(geo.kbb_factor, sigma)).sum()
        + mu @ solve_psd(geo.kbb_factor, mu)
    )
    return data - kl - factors.penalty()


# ---------------------------------------------------------------------------
# PG-augmented SVGP variant
# ---------------------------------------------------------------------------

def pg_local_update(state: SvgpState, geometry: BatchGeometry):
    """Optimal per-entry tilt c = sqrt(ktilde + kappa'Sigma kappa + (kappa'mu)^2)."""
    mu, sigma = to_moment(state.qu)
    a = geometry.kappa_u @ mu
    quad = geometry.ktilde + _rowquad(geometry.kappa_u, sigma) + a * a
    return quad.clamp_min(0.0).sqrt()


def pg_elbo(state: SvgpState, factors: FactorSet, batch, sites: pglib.PGSite,
            geometry: Optional[BatchGeometry] = None):
    """Collapsed PG bound for a minibatch (up to an additive constant).

    Data part per entry: chi kappa'mu - theta (ktilde + kappa'Sigma kappa
    + (kappa'mu)^2)/2 + c^2 theta / 2 - b log cosh(c/2); variational
    Gaussians and sites are treated as constants, so gradients flow to the
    factors and inducing inputs only.  A geometry already built for this
    batch may be passed to avoid recomputing it.
    """
    _check_sites(sites, batch)
    if geometry is None:
        inputs = assemble_inputs(factors, batch.indices)
        geometry = svgp_geometry(state, inputs)
    geo = geometry
    b, chi, c, theta = _site_tensors(sites)
    mu, sigma = to_moment(state.qu)
    a = geo.kappa_u @ mu
    quad = geo.ktilde + _rowquad(geo.kappa_u, sigma) + a * a
    per_entry = (
        2.0 * chi * a - theta * quad + c * c * theta - 2.0 * b * _logcosh(c / 2.0)
    )
    data = 0.5 * batch.scale * per_entry.sum()
    return data - kl_to_prior(state.qu, geo.kbb_factor) - factors.penalty()


def pg_ng_targets(state: SvgpState, geometry: BatchGeometry, batch, sites):
    """Natural-parameter targets for q(u); the natural gradient is target - current."""
    _check_sites(sites, batch)
    _, chi, _, theta = _site_tensors(sites)
    kappa = geometry.kappa_u
    t1 = batch.scale * (kappa.T @ chi)
    t2 = -0.5 * (
        inv_psd(geometry.kbb_factor)
        + batch.scale * kappa.T @ (kappa * theta.unsqueeze(1))
    )
    return t1, 0.5 * (t2 + t2.T)


# ---------------------------------------------------------------------------
# Orthogonally decoupled (solve) variant
# ---------------------------------------------------------------------------

def solve_local_update(state: SolveState, geometry: BatchGeometry):
    """Tilt update c = sqrt(mu_f^2 + residual var + kappa_u' Sigma_u kappa_u)."""
    mu_u, sigma_u = to_moment(state.qu)
    mean_f = geometry.kappa_u @ mu_u
    if state.num_ortho:
        mu_v, _ = to_moment(state.qv)
        mean_f = mean_f + geometry.kappa_v @ mu_v
    quad = mean_f * mean_f + geometry.f_perp_var + _rowquad(geometry.kappa_u, sigma_u)
    return quad.clamp_min(0.0).sqrt()


def solve_elbo(state: SolveState, factors: FactorSet, batch, sites: pglib.PGSite,
               geometry: Optional[BatchGeometry] = None):
    """Collapsed PG bound with the residual process marginalized under q(v).

    With an empty orthogonal set this equals :func:`pg_elbo` on the same
    SVGP state.  Differentiable in Z, B and H.  A geometry already built
    for this batch may be passed; the residual variance is refreshed from
    the current q(v) so a q(v) step between the two is harmless.
    """
    _check_sites(sites, batch)
    if geometry is None:
        inputs = assemble_inputs(factors, batch.indices)
        geometry = solve_geometry(state, inputs)
    geo = geometry
    b, chi, c, theta = _site_tensors(sites)
    mu_u, sigma_u = to_moment(state.qu)
    a_u = geo.kappa_u @ mu_u
    if state.num_ortho:
        mu_v, sigma_v = to_moment(state.qv)
        m_perp = geo.kappa_v @ mu_v
        f_perp_var = (geo.ktilde + _rowquad(geo.kappa_v, sigma_v - geo.chh)).clamp_min(0.0)
    else:
        m_perp = torch.zeros_like(a_u)
        f_perp_var = geo.f_perp_var
    per_entry = (
        2.0 * chi * (m_perp + a_u)
        - theta * (m_perp * m_perp + f_perp_var)
        - 2.0 * theta * m_perp * a_u
        - theta * (_rowquad(geo.kappa_u, sigma_u) + a_u * a_u)
        + c * c * theta
        - 2.0 * b * _logcosh(c / 2.0)
    )
    elbo = (
        0.5 * batch.scale * per_entry.sum()
        - kl_to_prior(state.qu, geo.kbb_factor)
        - factors.penalty()
    )
    if state.num_ortho:
        elbo = elbo - kl_to_prior(state.qv, geo.khh_factor)
    return elbo


def solve_ng_target_u(state: SolveState, geometry: BatchGeometry, batch, sites):
    """q(u) target; the residual mean enters through the current q(v)."""
    _check_sites(sites, batch)
    _, chi, _, theta = _site_tensors(sites)
    if state.num_ortho:
        mu_v, _ = to_moment(state.qv)
        resid = chi - theta * (geometry.kappa_v @ mu_v)
    else:
        resid = chi
    kappa = geometry.kappa_u
    t1 = batch.scale * (kappa.T @ resid)
    t2 = -0.5 * (
        inv_psd(geometry.kbb_factor)
        + batch.scale * kappa.T @ (kappa * theta.unsqueeze(1))
    )
    return t1, 0.5 * (t2 + t2.T)


def solve_ng_target_v(state: SolveState, geometry: BatchGeometry, batch, sites):
    """q(v) target; the through-u mean enters with the current q(u)."""
    _check_sites(sites, batch)
    if not state.num_ortho:
        raise ValueError("state has no orthogonal inducing set")
    _, chi, _, theta = _site_tensors(sites)
    mu_u, _ = to_moment(state.qu)
    resid = chi - theta * (geometry.kappa_u @ mu_u)
    kappa = geometry.kappa_v
    t1 = batch.scale * (kappa.T @ resid)
    t2 = -0.5 * (
        inv_psd(geometry.khh_factor)
        + batch.scale * kappa.T @ (kappa * theta.unsqueeze(1))
    )
    return t1, 0.5 * (t2 + t2.T)


def solve_ng_targets(state: SolveState, geometry: BatchGeometry, batch, sites):
    """Both targets evaluated at the current state (u first, then v)."""
    u = solve_ng_target_u(state, geometry, batch, sites)
    v = solve_ng_target_v(state, geometry, batch, sites)
    return u, v


# ---------------------------------------------------------------------------
# Prediction
# ---------------------------------------------------------------------------

def posterior_f(state, inputs, chunk=8192):
    """Posterior mean and variance of the latent function at given inputs."""
    with torch.no_grad():
        if isinstance(state, ProbitState):
            mu_u = state.qu_mean
            low = state.qu_chol.tril()
            sigma_u = low @ low.T
            mu_v = None
        else:
            mu_u, sigma_u = to_moment(state.qu)
            mu_v = None
            if isinstance(state, SolveState) and state.num_ortho:
                mu_v, sigma_v = to_moment(state.qv)
        kbb = gram(state.kernel, state.inducing, state.inducing)
        fac_bb = chol_psd(kbb)
        if mu_v is not None:
            khh = gram(state.kernel, state.inducing_ortho, state.inducing_ortho)
            kbh = gram(state.kernel, state.inducing, state.inducing_ortho)
            bb_inv_bh = solve_psd(fac_bb, kbh)
            chh = khh - kbh.T @ bb_inv_bh
            chh = 0.5 * (chh + chh.T)
            fac_chh = chol_psd(chh)
            mid = sigma_v - chh
        means, variances = [], []
        inputs = torch.as_tensor(inputs, dtype=torch.float64)
        for start in range(0, inputs.shape[0], chunk):
            m = inputs[start : start + chunk]
            kmb = gram(state.kernel, m, state.inducing)
            kappa = solve_psd(fac_bb, kmb.T).T
            ktilde = (1.0 - (kmb * kappa).sum(dim=1)).clamp_min(0.0)
            mean = kappa @ mu_u
            var = _rowquad(kappa, sigma_u)
            if mu_v is None:
                var = var + ktilde
            else:
                kmh = gram(state.kernel, m, state.inducing_ortho)
                cmh = kmh - kmb @ bb_inv_bh
                kappa_v = solve_psd(fac_chh, cmh.T).T
                mean = mean + kappa_v @ mu_v
                var = var + (ktilde + _rowquad(kappa_v, mid)).clamp_min(0.0)
            means.append(mean)
            variances.append(var.clamp_min(0.0))
        return torch.cat(means), torch.cat(variances)


def _link_prob(state, f):
    """Per-draw success probability given latent values."""
    if isinstance(state, ProbitState):
        # marginal of the unit-noise auxiliary: Phi(f / sqrt 2)
        from scipy.special import ndtr

        return ndtr(f / math.sqrt(2.0))
    return 1.0 / (1.0 + np.exp(-f))


def prob_draws(state, inputs, rng, n_draws=32):
    """(n_draws, n) success-probability samples from the latent posterior."""
    mean, var = posterior_f(state, inputs)
    mean, std = mean.numpy(), var.sqrt().numpy()
    z = rng.standard_normal((n_draws, mean.shape[0]))
    return _link_prob(state, mean + std * z)


def predict(state, inputs, mode, rng=None, n_draws=32, plugin=False):
    """Per-entry predictions.

    mode "bernoulli": success probability, Monte-Carlo mean of the link over
    n_draws posterior samples (or the plug-in link of the posterior mean).
    mode "negbin": predictive count mean zeta * exp(mean + var/2).
    """
    if mode != state.likelihood.kind:
        raise ValueError(
            f"prediction mode {mode!r} does not match likelihood {state.likelihood.kind!r}"
        )
    if mode == NEGBIN:
        mean, var = posterior_f(state, inputs)
        return state.likelihood.zeta * np.exp((mean + 0.5 * var).numpy())
    if plugin:
        mean, _ = posterior_f(state, inputs)
        return _link_prob(state, mean.numpy())
    if rng is None:
        raise ValueError("Monte-Carlo prediction needs an rng")
    return prob_draws(state, inputs, rng, n_draws).mean(axis=0)
