"""Tangent-space projections and retractions for fixed-rank matrices and
fixed-Tucker-rank tensors."""
from dataclasses import dataclass

import numpy as np

from .exceptions import NumericError
from .tensor import (SvdFactors, TuckerDecomp, _svd, hosvd, matricize,
                     mode_product, multi_mode_product, svd_r)

__all__ = ['MatrixTangentBasis', 'TuckerTangentBasis', 'tangent_project_matrix',
           'tangent_project_tucker', 'retract_matrix', 'retract_tucker']

# iterates whose r-th singular value falls below this fraction of the first are rejected
DEGENERACY_RATIO = 1e-12
PINV_CUTOFF = 1e-10


@dataclass(frozen=True)
class MatrixTangentBasis:
    u: np.ndarray
    v: np.ndarray

    @classmethod
    def from_factors(cls, factors):
        s = factors.s
        if s[0] == 0 or s[-1] < DEGENERACY_RATIO * s[0]:
            raise NumericError(
                f'iterate is numerically rank deficient: sigma_r/sigma_1 = '
                f'{s[-1] / s[0] if s[0] else 0.0:.2e}')
        return cls(factors.u, factors.v)

    @classmethod
    def from_matrix(cls, M, r):
        return cls.from_factors(svd_r(M, r)[1])


def tangent_project_matrix(G, basis):
    """``U U^T G + G V V^T - U U^T G V V^T``."""
    G = np.asarray(G, dtype=float)
    U, V = basis.u, basis.v
    if G.shape != (U.shape[0], V.shape[0]):
        raise ValueError(f'gradient shape {G.shape} does not match basis '
                         f'{(U.shape[0], V.shape[0])}')
    UtG = U.T @ G
    GV = G @ V
    return U @ UtG + GV @ V.T - U @ (UtG @ V) @ V.T


def retract_matrix(Y, r, basis=None):
    """``SVD_r(Y)``, returned as ``(approx, SvdFactors)`` like :func:`svd_r`.

    With ``basis`` (the tangent basis at the previous iterate) the column and
    row spaces of ``Y`` lie in ``[U, (I - UU^T) Y V]`` and ``[V, (I - VV^T) Y^T U]``,
    so only a ``2r x 2r`` core is decomposed. Falls back to the dense SVD if
    ``Y`` is not of that form.
    """
    Y = np.asarray(Y, dtype=float)
    if basis is None:
        return svd_r(Y, r)
    U, V = basis.u, basis.v
    YV = Y @ V
    UtY = U.T @ Y
    Qc, _ = np.linalg.qr(np.hstack([U, YV - U @ (U.T @ YV)]))
    Qr, _ = np.linalg.qr(np.hstack([V, UtY.T - V @ (UtY @ V).T]))
    K = Qc.T @ Y @ Qr
    if np.linalg.norm(Y - Qc @ K @ Qr.T) > 1e-10 * max(np.linalg.norm(Y), 1e-300):
        return svd_r(Y, r)
    k = min(r, *K.shape)
    uk, sk, vk = _svd(K)
    u, s, v = Qc @ uk[:, :k], sk[:k], Qr @ vk[:, :k]
    return (u * s) @ v.T, SvdFactors(u, s, v)


@dataclass(frozen=True)
class TuckerTangentBasis:
    """Tucker decomposition of the current iterate and pseudo-inverses of its
    core matricizations."""
    decomp: TuckerDecomp
    pinv_cores: tuple
    core_conds: tuple

    @classmethod
    def from_decomp(cls, decomp):
        pinvs, conds = [], []
        for j in range(decomp.core.ndim):
            C = matricize(decomp.core, j)
            u, s, v = _svd(C)
            keep = s > PINV_CUTOFF * s[0] if s[0] > 0 else np.zeros_like(s, dtype=bool)
            pinv = (v[:, keep] / s[keep]) @ u[:, keep].T
            resid = np.linalg.norm(C @ pinv - np.eye(C.shape[0]))
            if resid > 1e-6 or s[-1] < DEGENERACY_RATIO * s[0]:
                raise NumericError(
                    f'core matricization along mode {j} is rank deficient '
                    f'(pinv residual {resid:.2e})', mode=j)
            pinvs.append(pinv)
            conds.append(float(s[0] / s[-1]))
        return cls(decomp, tuple(pinvs), tuple(conds))


def tangent_project_tucker(G, basis):
    """Projection of ``G`` onto the tangent space of the fixed-Tucker-rank
    manifold at ``basis.decomp``."""
    G = np.asarray(G, dtype=float)
    C, Us = basis.decomp.core, basis.decomp.factors
    if G.shape != basis.decomp.dims:
        raise ValueError(f'gradient shape {G.shape} does not match {basis.decomp.dims}')
    out = multi_mode_product(G, [U @ U.T for U in Us])
    Uts = [U.T for U in Us]
    for i, U in enumerate(Us):
        W = matricize(multi_mode_product(G, Uts, skip=i), i)
        W = W - U @ (U.T @ W)
        Udot = W @ basis.pinv_cores[i]
        out = out + mode_product(multi_mode_product(C, Us, skip=i), Udot, i)
    return out


def retract_tucker(Y, ranks):
    """``HOSVD_r(Y)``; returns the approximation and its decomposition."""
    return hosvd(Y, ranks)

