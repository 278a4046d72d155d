"""Warm starts: spectral (matrix), HOSVD (tensor) and the shrinkage-based
second-moment initialization for tensors."""
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .tensor import TuckerDecomp, check_tucker_ranks, hosvd, matricize, svd_r, tucker_compose

__all__ = ['ShrinkageParams', 'spectral_init_matrix', 'hosvd_init_tensor', 'shrink_responses',
           'second_moment_ustat', 'core_least_squares', 'shrinkage_init_tensor',
           'plugin_tau', 'MAX_CORE_SIZE']

MAX_CORE_SIZE = 4096
_MAD_TO_SD = 1.4826


@dataclass(frozen=True)
class ShrinkageParams:
    """Response cap for the shrinkage initialization; ``tau=None`` means plug-in."""
    tau: Optional[float] = None

    def __post_init__(self):
        if self.tau is not None and not self.tau > 0:
            raise ValueError(f'shrinkage threshold must be positive, got {self.tau}')

    @property
    def mode(self):
        return 'plugin' if self.tau is None else 'explicit'


def _weighted_mean(data, weights=None):
    w = data.responses if weights is None else np.asarray(weights, dtype=float)
    return np.tensordot(w, data.sensing, axes=(0, 0)) / data.n


def spectral_init_matrix(data, r):
    """``SVD_r(n^{-1} sum_i Y_i X_i)``."""
    if len(data.shape) != 2:
        raise ValueError('spectral_init_matrix needs matrix-shaped sensing')
    return svd_r(_weighted_mean(data), r)[0]


def hosvd_init_tensor(data, ranks):
    """``HOSVD_r(n^{-1} sum_i Y_i X_i)``."""
    return hosvd(_weighted_mean(data), ranks)[0]


def shrink_responses(Y, tau):
    """Cap magnitudes at ``tau`` keeping signs: ``sign(Y) * min(|Y|, tau)``."""
    if not tau > 0:
        raise ValueError(f'shrinkage threshold must be positive, got {tau}')
    Y = np.asarray(Y, dtype=float)
    return np.sign(Y) * np.minimum(np.abs(Y), tau)


def second_moment_ustat(data, Ytilde, mode):
    """Off-diagonal second-order U-statistic for mode ``mode``.

    Uses ``sum_{i != i'} y_i y_i' (X_i X_i'^T + X_i' X_i^T) = 2 (S S^T - D)`` with
    ``S = sum_i y_i X_i`` and ``D = sum_i y_i^2 X_i X_i^T`` (mode-``mode`` unfoldings).
    """
    n = data.n
    if n < 2:
        raise ValueError('the U-statistic needs at least two observations')
    y = np.asarray(Ytilde, dtype=float)
    if y.shape != (n,):
        raise ValueError(f'expected {n} shrunk responses, got shape {y.shape}')
    S = matricize(np.tensordot(y, data.sensing, axes=(0, 0)), mode)
    # columns of Z run over (observation, remaining indices); order is irrelevant for Z Z^T
    Z = np.moveaxis(data.sensing * y.reshape((n,) + (1,) * len(data.shape)), mode + 1, 0)
    Z = Z.reshape(data.shape[mode], -1)
    N = 2 * (S @ S.T - Z @ Z.T) / (n * (n - 1))
    return (N + N.T) / 2


def core_least_squares(data, factors, responses=None):
    """Least-squares core for fixed orthonormal factors.

    Solves the normal equations with a pseudo-inverse (eigenvalues below
    ``1e-10 * lambda_max`` dropped), giving the minimum-norm solution when the
    design is rank deficient.
    """
    ranks = tuple(U.shape[1] for U in factors)
    if tuple(U.shape[0] for U in factors) != tuple(data.shape):
        raise ValueError('factor row counts do not match the sensing shape')
    size = int(np.prod(ranks))
    if size > MAX_CORE_SIZE:
        raise ValueError(f'core size {size} exceeds the guard {MAX_CORE_SIZE}')
    Y = data.responses if responses is None else np.asarray(responses, dtype=float)
    A = data.sensing
    for j, U in enumerate(factors):
        A = np.moveaxis(np.tensordot(A, U, axes=(j + 1, 0)), -1, j + 1)
    A = A.reshape(data.n, size)
    gram = A.T @ A
    evals, evecs = np.linalg.eigh(gram)
    lam_max = evals[-1] if evals.size else 0.0
    keep = evals > 1e-10 * lam_max if lam_max > 0 else np.zeros_like(evals, dtype=bool)
    coef = evecs[:, keep] @ ((evecs[:, keep].T @ (A.T @ Y)) / evals[keep])
    return coef.reshape(ranks)


def plugin_tau(data, ranks):
    """Observable stand-in for the theoretical cap
    ``n^{1/2} (d*)^{-1/4} (sqrt(r_max) lambda_max + ||xi||)``.

    ``lambda_max`` is read off the HOSVD initialization and the noise level is
    a MAD-based spread of the responses.
    """
    ranks = check_tucker_ranks(data.shape, ranks)
    M0 = hosvd_init_tensor(data, ranks)
    lam = max(np.linalg.norm(matricize(M0, j), 2) for j in range(M0.ndim))
    Y = data.responses
    spread = _MAD_TO_SD * float(np.median(np.abs(Y - np.median(Y))))
    d_star = int(np.prod(data.shape))
    return math.sqrt(data.n) * d_star ** -0.25 * (math.sqrt(max(ranks)) * lam + spread)


def shrinkage_init_tensor(data, ranks, params=ShrinkageParams()):
    """Cap responses, take the top eigenvectors of each mode's U-statistic,
    then fit the core by least squares on the *uncapped* responses."""
    ranks = check_tucker_ranks(data.shape, ranks)
    tau = params.tau if params.tau is not None else plugin_tau(data, ranks)
    yt = shrink_responses(data.responses, tau)
    factors = []
    for j, r in enumerate(ranks):
        evals, evecs = np.linalg.eigh(second_moment_ustat(data, yt, j))
        factors.append(evecs[:, ::-1][:, :r])
    core = core_least_squares(data, factors)
    return tucker_compose(TuckerDecomp(core, tuple(factors)))
