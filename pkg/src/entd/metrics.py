"""Evaluation metrics: AUC, per-entry NLL, relative RMSE, MAPE."""

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln
from scipy.stats import rankdata

PROB_CLAMP = 1e-12


@dataclass(frozen=True)
class EvalResult:
    metric: str
    value: float
    n: int


def auc(scores, labels):
    """Area under the ROC curve, Mann-Whitney form with half credit for ties."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be equal-length vectors")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be 0/1")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes present")
    ranks = rankdata(scores)  # average ranks give ties half credit
    return float((ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def rmse_rel(x, xhat):
    """Relative root mean square error sqrt(sum (x-xhat)^2) / sqrt(sum x^2)."""
    x = np.asarray(x, dtype=np.float64)
    xhat = np.asarray(xhat, dtype=np.float64)
    denom = np.sqrt((x * x).sum())
    if denom == 0.0:
        raise ValueError("relative RMSE undefined for all-zero truth")
    return float(np.sqrt(((x - xhat) ** 2).sum()) / denom)


def mape(x, xhat):
    """Mean absolute percentage error with +1 in the denominator for zeros."""
    x = np.asarray(x, dtype=np.float64)
    xhat = np.asarray(xhat, dtype=np.float64)
    return float((np.abs(x - xhat) / np.abs(x + 1.0)).mean())


def nb_logpmf(x, zeta, p):
    """log NB(x | zeta, p) with success probability p and zeta successes."""
    x = np.asarray(x, dtype=np.float64)
    p = np.clip(np.asarray(p, dtype=np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)
    return (
        gammaln(zeta + x)
        - gammaln(x + 1.0)
        - gammaln(zeta)
        + x * np.log(p)
        + zeta * np.log1p(-p)
    )


def nll(pred, x, likelihood, zeta=None):
    """Mean per-entry negative log-likelihood.

    pred holds success probabilities, either a vector of plug-in parameters
    or an (S, n) matrix of posterior draws; in the latter case the
    likelihood is averaged over draws before the log.
    """
    pred = np.atleast_2d(np.asarray(pred, dtype=np.float64))
    x = np.asarray(x, dtype=np.float64)
    if pred.shape[-1] != x.shape[0]:
        raise ValueError(f"{pred.shape[-1]} predictions for {x.shape[0]} observations")
    pred = np.clip(pred, PROB_CLAMP, 1.0 - PROB_CLAMP)
    if likelihood == "bernoulli":
        if not np.isin(x, (0.0, 1.0)).all():
            raise ValueError("bernoulli NLL needs 0/1 observations")
        lik = np.where(x == 1.0, pred, 1.0 - pred)
    elif likelihood == "negbin":
        if zeta is None or zeta <= 0:
            raise ValueError(f"negbin NLL needs zeta > 0, got {zeta}")
        lik = np.exp(nb_logpmf(x, zeta, pred))
    else:
        raise ValueError(f"unknown likelihood {likelihood!r}")
    avg = np.clip(lik.mean(axis=0), PROB_CLAMP, None)
    return float(-np.log(avg).mean())
