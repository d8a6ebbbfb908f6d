"""Output heads and losses.

Each loss returns ``(value, grad)`` where ``grad`` is the derivative of the
batch-mean loss with respect to the raw network output.
"""
from __future__ import annotations

import logging

import numpy as np

from ..errors import NumericsError

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-30


# --- heads


def head_size(kind: str, d: int = 1, n_bins: int = 101) -> int:
    if kind == "point":
        return d
    if kind == "gaussian":
        return d + d * (d + 1) // 2
    if kind == "categorical":
        return n_bins
    raise ValueError(f"unknown head {kind!r}")


def tril_index(d: int):
    """Row/column indices of the lower triangle, diagonal entries first."""
    diag = [(i, i) for i in range(d)]
    off = [(i, j) for i in range(d) for j in range(i)]
    rows, cols = zip(*(diag + off))
    return np.array(rows), np.array(cols)


def gaussian_unpack(out: np.ndarray, d: int):
    """Split raw outputs into the mean and a Cholesky factor with exp-diagonal."""
    mu = out[:, :d]
    raw = out[:, d:]
    rows, cols = tril_index(d)
    chol = np.zeros((len(out), d, d))
    vals = raw.copy()
    vals[:, :d] = np.exp(raw[:, :d])
    chol[:, rows, cols] = vals
    return mu, chol


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(q: np.ndarray, gq: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. probabilities back to the logits."""
    return q * (gq - np.sum(gq * q, axis=-1, keepdims=True))


# --- losses


def loss_mse(pred: np.ndarray, truth: np.ndarray):
    """Squared Euclidean distance, averaged over the batch."""
    r = np.atleast_2d(pred) - np.atleast_2d(truth)
    n = r.shape[0]
    return float(np.sum(r * r) / n), 2.0 * r / n


def loss_nll(out: np.ndarray, truth: np.ndarray, d: int, standard: bool = False):
    """Gaussian negative log-likelihood with a Cholesky-parametrised covariance.

    ``c * r^T S^-1 r + 0.5 ln|S|`` with ``c = 1`` by default and ``c = 1/2``
    for the standard Gaussian form (``standard=True``).  The quadratic form
    is computed by a triangular solve, never by inverting ``S``.
    """
    out = np.atleast_2d(out)
    truth = np.atleast_2d(truth)
    n = out.shape[0]
    c = 0.5 if standard else 1.0
    mu, chol = gaussian_unpack(out, d)
    r = mu - truth
    z = np.linalg.solve(chol, r[:, :, None])[:, :, 0]  # A z = r
    logdet_half = out[:, d:2 * d].sum(axis=1)  # sum log A_ii = 0.5 ln|S|
    vals = c * np.sum(z * z, axis=1) + logdet_half
    if not np.all(np.isfinite(vals)):
        raise NumericsError("non-finite Gaussian NLL")
    at_z = np.linalg.solve(np.swapaxes(chol, 1, 2), z[:, :, None])[:, :, 0]  # A^-T z
    g_mu = 2.0 * c * at_z
    g_chol = -2.0 * c * at_z[:, :, None] * z[:, None, :]
    rows, cols = tril_index(d)
    g_raw = g_chol[:, rows, cols]
    g_raw[:, :d] = g_raw[:, :d] * chol[:, np.arange(d), np.arange(d)] + 1.0
    grad = np.concatenate([g_mu, g_raw], axis=1) / n
    return float(vals.mean()), grad


def loss_ce(logits: np.ndarray, true_bin: np.ndarray):
    """Cross entropy ``-log q[true_bin]`` of a softmax output."""
    logits = np.atleast_2d(logits)
    true_bin = np.asarray(true_bin, dtype=int).ravel()
    n = logits.shape[0]
    q = softmax(logits)
    picked = q[np.arange(n), true_bin]
    if np.any(picked < PROB_FLOOR):
        log.warning("true-bin probability underflow; clamped at %g", PROB_FLOOR)
    val = -np.mean(np.log(np.maximum(picked, PROB_FLOOR)))
    gq = np.zeros_like(q)
    gq[np.arange(n), true_bin] = -1.0 / np.maximum(picked, PROB_FLOOR)
    return float(val), softmax_backward(q, gq) / n


def kl_divergence(logits: np.ndarray, p: np.ndarray):
    """``KL(p || softmax(logits))`` for arbitrary target distributions ``p``."""
    logits = np.atleast_2d(logits)
    p = np.atleast_2d(p)
    n = logits.shape[0]
    q = softmax(logits)
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(p > 0, p * np.log(p), 0.0)
        plogq = np.where(p > 0, p * np.log(np.maximum(q, PROB_FLOOR)), 0.0)
    val = np.sum(plogp - plogq) / n
    gq = -np.where(p > 0, p / np.maximum(q, PROB_FLOOR), 0.0)
    return float(val), softmax_backward(q, gq) / n


def loss_mse_lambda(pred: np.ndarray, truth: np.ndarray, lam: float = 0.8):
    """``lam * Var + Bias^2`` of the residuals within one same-truth bucket.

    With ``lam = 1`` this is the plain MSE of the bucket.  A singleton bucket
    has no variance, so it reduces to the squared error.
    """
    r = np.atleast_2d(pred) - np.atleast_2d(truth)
    n = r.shape[0]
    if n < 2:
        log.warning("singleton bucket in MSE_lambda; using the squared error")
        return loss_mse(pred, truth)
    bias = r.mean(axis=0)
    dev = r - bias
    val = lam * np.sum(dev * dev) / n + np.sum(bias * bias)
    grad = (2.0 * lam * dev + 2.0 * bias[None, :]) / n
    return float(val), grad
