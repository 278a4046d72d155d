"""Dense matrix/tensor primitives: truncated SVD, matricization, mode
products, HOSVD and Tucker composition.

Matrices and tensors are plain float64 ``numpy.ndarray`` objects. Modes are
0-based, like numpy axes. The mode-j matricization orders its columns
lexicographically over the remaining indices with the *first* remaining index
varying fastest, so that::

    matricize(C x_1 U_1 ... x_m U_m, j) == U_j @ matricize(C, j) @ kron(U_m, ..., U_1 without U_j).T
"""
import struct
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .exceptions import NumericError

__all__ = [
    'SvdFactors', 'TuckerDecomp', 'svd_r', 'matricize', 'fold',
    'mode_product', 'multi_mode_product', 'hosvd', 'tucker_compose',
    'partial_fro_matrix', 'partial_fro_tensor', 'check_tucker_ranks',
    'save_array', 'load_array',
]


class SvdFactors(NamedTuple):
    u: np.ndarray
    s: np.ndarray
    v: np.ndarray


@dataclass(frozen=True)
class TuckerDecomp:
    """Core tensor plus one orthonormal factor per mode."""
    core: np.ndarray
    factors: tuple

    @property
    def ranks(self):
        return tuple(self.core.shape)

    @property
    def dims(self):
        return tuple(f.shape[0] for f in self.factors)


def _svd(M):
    """Thin SVD ``M = u @ diag(s) @ v.T``; the single dense SVD kernel."""
    M = np.asarray(M, dtype=float)
    if not np.all(np.isfinite(M)):
        raise NumericError(f'SVD input of shape {M.shape} has non-finite entries')
    try:
        u, s, vt = np.linalg.svd(M, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericError(
            f'SVD did not converge for shape {M.shape}, '
            f'fro norm {np.linalg.norm(M):.3e}: {exc}') from exc
    return u, s, vt.T


def svd_r(M, r):
    """Best rank-``r`` approximation of ``M`` and its leading singular triplets."""
    M = np.asarray(M, dtype=float)
    if M.ndim != 2:
        raise ValueError(f'expected a matrix, got shape {M.shape}')
    if not 1 <= r <= min(M.shape):
        raise ValueError(f'rank {r} out of range for shape {M.shape}')
    u, s, v = _svd(M)
    u, s, v = u[:, :r], s[:r], v[:, :r]
    return (u * s) @ v.T, SvdFactors(u, s, v)


def _check_mode(ndim, mode):
    if not 0 <= mode < ndim:
        raise ValueError(f'mode {mode} out of range for a tensor of order {ndim}')


def matricize(T, mode):
    """Mode-``mode`` unfolding: rows indexed by ``mode``, columns by the rest."""
    T = np.asarray(T, dtype=float)
    _check_mode(T.ndim, mode)
    return np.moveaxis(T, mode, 0).reshape(T.shape[mode], -1, order='F')


def fold(M, mode, dims):
    """Inverse of :func:`matricize`."""
    dims = tuple(dims)
    _check_mode(len(dims), mode)
    rest = dims[:mode] + dims[mode + 1:]
    M = np.asarray(M, dtype=float)
    if M.shape != (dims[mode], int(np.prod(rest))):
        raise ValueError(f'matrix of shape {M.shape} cannot fold into {dims} along mode {mode}')
    return np.moveaxis(M.reshape((dims[mode],) + rest, order='F'), 0, mode)


def mode_product(T, A, mode):
    """``T x_mode A``: contracts axis ``mode`` of ``T`` with the columns of ``A``."""
    T = np.asarray(T, dtype=float)
    A = np.asarray(A, dtype=float)
    _check_mode(T.ndim, mode)
    if A.ndim != 2 or A.shape[1] != T.shape[mode]:
        raise ValueError(
            f'cannot multiply mode {mode} (size {T.shape[mode]}) by a matrix of shape {A.shape}')
    return np.moveaxis(np.tensordot(A, T, axes=(1, mode)), 0, mode)


def multi_mode_product(T, mats, skip=None):
    """Apply ``mats[j]`` along every mode ``j`` except ``skip``."""
    for j, A in enumerate(mats):
        if j != skip:
            T = mode_product(T, A, j)
    return T


def check_tucker_ranks(dims, ranks):
    dims, ranks = tuple(dims), tuple(int(r) for r in ranks)
    if len(dims) != len(ranks):
        raise ValueError(f'rank vector {ranks} does not match order of dims {dims}')
    for j, (d, r) in enumerate(zip(dims, ranks)):
        others = int(np.prod(dims[:j] + dims[j + 1:]))
        if not 1 <= r <= min(d, others):
            raise ValueError(f'Tucker rank {ranks} infeasible for dims {dims} (mode {j})')
    return ranks


def _top_left_singular(M, r):
    return _svd(M)[0][:, :r]


def hosvd(T, ranks):
    """One-pass HOSVD truncation at Tucker rank ``ranks``.

    Every factor comes from the matricization of ``T`` itself (not sequentially
    truncated). Returns the approximation and its Tucker decomposition.
    """
    T = np.asarray(T, dtype=float)
    ranks = check_tucker_ranks(T.shape, ranks)
    factors = tuple(_top_left_singular(matricize(T, j), r) for j, r in enumerate(ranks))
    core = multi_mode_product(T, [U.T for U in factors])
    decomp = TuckerDecomp(core, factors)
    return tucker_compose(decomp), decomp


def tucker_compose(decomp):
    return multi_mode_product(decomp.core, decomp.factors)


def partial_fro_matrix(G, r):
    """Frobenius norm of the best rank-``r`` approximation of ``G``."""
    G = np.asarray(G, dtype=float)
    if G.ndim != 2 or not 1 <= r <= min(G.shape):
        raise ValueError(f'rank {r} out of range for shape {G.shape}')
    s = _svd(G)[1]
    return float(np.sqrt(np.sum(s[:r] ** 2)))


def partial_fro_tensor(G, ranks):
    """Norm of the rank-``ranks`` HOSVD of ``G``.

    A computable lower bound on the supremum over orthonormal projections;
    meant for diagnostics only.
    """
    approx, _ = hosvd(G, ranks)
    return float(np.linalg.norm(approx))


_MAGIC = b'RLRK1'


def save_array(path, arr):
    """Write ``arr`` as ``RLRK1`` + u32 order + u32 dims + f64 payload (first index fastest)."""
    arr = np.asarray(arr, dtype=float)
    with open(path, 'wb') as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack('<I', arr.ndim))
        fh.write(struct.pack(f'<{arr.ndim}I', *arr.shape))
        fh.write(arr.astype('<f8').tobytes(order='F'))


def load_array(path):
    with open(path, 'rb') as fh:
        buf = fh.read()
    if buf[:5] != _MAGIC:
        raise ValueError(f'{path}: not an RLRK1 array file')
    (m,) = struct.unpack_from('<I', buf, 5)
    dims = struct.unpack_from(f'<{m}I', buf, 9)
    offset = 9 + 4 * m
    count = int(np.prod(dims))
    data = np.frombuffer(buf, dtype='<f8', count=count, offset=offset)
    if len(buf) != offset + 8 * count:
        raise ValueError(f'{path}: payload length does not match dims {dims}')
    return data.reshape(dims, order='F').astype(float)
