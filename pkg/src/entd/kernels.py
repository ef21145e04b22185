"""RBF kernel evaluation and numerically safe positive-definite solves.

Everything runs in torch float64 so kernel matrices can sit inside autograd
graphs.  Convention: k(x, y) = exp(-||x - y||^2 / (2 l^2)) with unit
amplitude, so k(x, x) = 1 exactly.
"""

from dataclasses import dataclass

import torch

JITTER_LADDER = (0.0, 1e-8, 1e-6, 1e-4)


class CholeskyError(RuntimeError):
    """Factorization failed even at the maximum jitter rung."""


class RbfKernel:
    """Isotropic squared-exponential kernel with bandwidth l.

    The bandwidth is stored as a log-parameter; pass learnable=True to make
    it a gradient-trained leaf tensor (off by default, bandwidth fixed 1.0).
    """

    def __init__(self, bandwidth=1.0, learnable=False):
        if not torch.is_tensor(bandwidth):
            if bandwidth <= 0:
                raise ValueError(f"bandwidth must be positive, got {bandwidth}")
            bandwidth = torch.tensor(float(bandwidth), dtype=torch.float64)
        self.log_bandwidth = bandwidth.log().detach().clone()
        self.log_bandwidth.requires_grad_(learnable)

    @property
    def bandwidth(self):
        return self.log_bandwidth.exp()

    def __call__(self, x, y):
        return gram(self, x, y)


def gram(kernel: RbfKernel, x, y):
    """n x m matrix of kernel values between the rows of x and y.

    Squared distances come from the expanded product form (clamped at zero);
    for a self-gram the diagonal is masked to exact zeros so k(x, x) = 1
    exactly.
    """
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[1]:
        raise ValueError(f"input columns must agree, got {tuple(x.shape)} vs {tuple(y.shape)}")
    xx = (x * x).sum(dim=1, keepdim=True)
    yy = (y * y).sum(dim=1, keepdim=True)
    sq = (xx + yy.T - 2.0 * (x @ y.T)).clamp_min(0.0)
    if x is y:
        sq = sq * (1.0 - torch.eye(x.shape[0], dtype=x.dtype))
    return torch.exp(-sq / (2.0 * kernel.bandwidth**2))


@dataclass
class PsdFactor:
    """Lower Cholesky factor of K + jitter * I, with the jitter that worked."""

    chol: torch.Tensor
    jitter: float

    @property
    def dim(self):
        return self.chol.shape[0]


def chol_psd(matrix, ladder=JITTER_LADDER) -> PsdFactor:
    """Cholesky with escalating diagonal jitter.

    The jitter rungs are relative to the mean diagonal trace(K)/p (absolute
    when that is not positive, e.g. a numerically zero residual covariance).
    Raises CholeskyError if the final rung still fails.
    """
    p = matrix.shape[0]
    if matrix.shape != (p, p):
        raise ValueError(f"matrix must be square, got {tuple(matrix.shape)}")
    asym = (matrix - matrix.T).abs().max()
    scale = matrix.abs().max()
    if scale > 0 and asym > 1e-8 * scale:
        raise ValueError(f"matrix not symmetric: max asymmetry {asym:.3e}")
    matrix = 0.5 * (matrix + matrix.T)
    diag_scale = float(matrix.diagonal().sum().detach()) / p
    if not diag_scale > 0:
        diag_scale = 1.0
    eye = torch.eye(p, dtype=matrix.dtype)
    for rung in ladder:
        jitter = rung * diag_scale
        chol, info = torch.linalg.cholesky_ex(matrix + jitter * eye)
        if int(info) == 0:
            return PsdFactor(chol, jitter)
    raise CholeskyError(
        f"cholesky failed at maximum jitter {ladder[-1] * diag_scale:.3e} (p={p})"
    )


def solve_psd(factor: PsdFactor, rhs):
    """Solve (K + jitter I) X = rhs using the stored factor."""
    vec = rhs.ndim == 1
    if vec:
        rhs = rhs.unsqueeze(1)
    out = torch.cholesky_solve(rhs, factor.chol)
    return out.squeeze(1) if vec else out


def inv_psd(factor: PsdFactor):
    """(K + jitter I)^{-1} as a dense symmetric matrix."""
    inv = torch.cholesky_solve(torch.eye(factor.dim, dtype=factor.chol.dtype), factor.chol)
    return 0.5 * (inv + inv.T)


def logdet(factor: PsdFactor):
    """log |K + jitter I| from the factor diagonal."""
    return 2.0 * factor.chol.diagonal().log().sum()
