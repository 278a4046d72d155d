"""Synthetic trace-regression data: low-rank truths, Gaussian sensing and noise.

Randomness comes from counter-based Philox streams keyed by
``SeedSequence(seed, spawn_key=...)``. Observation ``i`` draws its sensing
array and its noise from its own stream, so a dataset is reproducible bit for
bit and can be generated in any order.
"""
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import gammaln

from .exceptions import NumericError
from .tensor import (TuckerDecomp, check_tucker_ranks, load_array, matricize,
                     save_array, tucker_compose)

__all__ = ['NoiseSpec', 'GroundTruth', 'Dataset', 'make_rng',
           'gen_low_rank_matrix', 'gen_low_rank_tensor', 'gen_observations',
           'noise_mean_abs', 'snr_db', 'noise_for_snr', 'MAX_SENSING_ENTRIES']

# n * prod(shape) cap on stored sensing entries (float64, about 2 GB)
MAX_SENSING_ENTRIES = 250_000_000

_STREAM_TRUTH = 0
_STREAM_OBS = 1


def make_rng(seed, *key):
    """Philox generator for the sub-stream ``key`` of ``seed``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class NoiseSpec:
    kind: str = 'none'
    sigma: float = 0.0
    nu: float = None
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in ('none', 'gaussian', 'student_t'):
            raise ValueError(f'unknown noise kind {self.kind!r}')
        if self.kind == 'gaussian' and not self.sigma > 0:
            raise ValueError(f'Gaussian sigma must be positive, got {self.sigma}')
        if self.kind == 'student_t':
            if self.nu is None or not self.nu > 1:
                raise ValueError(f'Student t needs nu > 1 for a finite mean |xi|, got {self.nu}')
            if not self.scale > 0:
                raise ValueError(f'Student t scale must be positive, got {self.scale}')

    @classmethod
    def none(cls):
        return cls()

    @classmethod
    def gaussian(cls, sigma):
        return cls('gaussian', sigma=float(sigma))

    @classmethod
    def student_t(cls, nu, scale=1.0):
        return cls('student_t', nu=float(nu), scale=float(scale))

    def sample(self, rng, size=None):
        if self.kind == 'none':
            return np.zeros(size) if size is not None else 0.0
        if self.kind == 'gaussian':
            return self.sigma * rng.standard_normal(size)
        # normal / sqrt(chi2 / nu)
        z = rng.standard_normal(size)
        v = rng.chisquare(self.nu, size)
        return self.scale * z / np.sqrt(v / self.nu)

    def to_dict(self):
        return {'kind': self.kind, 'sigma': self.sigma, 'nu': self.nu, 'scale': self.scale}


@dataclass(frozen=True)
class GroundTruth:
    """Exact low-rank target together with its spectral bookkeeping.

    ``obj`` is a dense matrix or a :class:`TuckerDecomp`; ``sigma_min`` is the
    smallest nonzero singular value (minimum over matricizations for tensors).
    """
    obj: object
    sigma_min: float
    kappa: float
    rank: object = None

    @property
    def dense(self):
        if isinstance(self.obj, TuckerDecomp):
            return tucker_compose(self.obj)
        return self.obj

    @property
    def shape(self):
        return self.dense.shape

    @property
    def fro(self):
        return float(np.linalg.norm(self.dense))


@dataclass(frozen=True, eq=False)
class Dataset:
    """Sensing arrays stacked along axis 0, responses, and provenance."""
    sensing: np.ndarray
    responses: np.ndarray
    seed: int = 0
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    truth: GroundTruth = None

    def __post_init__(self):
        if self.sensing.ndim < 3:
            raise ValueError('sensing must stack at least 2-way arrays along axis 0')
        if self.responses.shape != (self.sensing.shape[0],) or self.sensing.shape[0] < 1:
            raise ValueError(
                f'{self.responses.shape[0]} responses for {self.sensing.shape[0]} sensing arrays')

    @property
    def n(self):
        return self.sensing.shape[0]

    @property
    def shape(self):
        return self.sensing.shape[1:]

    def save(self, path):
        """Write ``<path>.sensing.bin``/``.responses.bin`` plus a JSON sidecar."""
        path = Path(path)
        save_array(path.with_suffix('.sensing.bin'), self.sensing)
        save_array(path.with_suffix('.responses.bin'), self.responses)
        meta = {'seed': self.seed, 'noise': self.noise.to_dict(),
                'n': self.n, 'shape': list(self.shape)}
        if self.truth is not None:
            save_array(path.with_suffix('.truth.bin'), self.truth.dense)
            meta['truth'] = {'sigma_min': self.truth.sigma_min, 'kappa': self.truth.kappa,
                             'rank': self.truth.rank}
        path.with_suffix('.json').write_text(json.dumps(meta, indent=2))

    @classmethod
    def load(cls, path):
        path = Path(path)
        meta = json.loads(path.with_suffix('.json').read_text())
        truth = None
        if 'truth' in meta:
            t = meta['truth']
            truth = GroundTruth(load_array(path.with_suffix('.truth.bin')),
                                t['sigma_min'], t['kappa'], t['rank'])
        return cls(load_array(path.with_suffix('.sensing.bin')),
                   load_array(path.with_suffix('.responses.bin')),
                   meta['seed'], NoiseSpec(**meta['noise']), truth)


def _orthonormal(rng, d, r):
    q, rr = np.linalg.qr(rng.standard_normal((d, r)))
    return q * np.sign(np.diag(rr))


def gen_low_rank_matrix(d1, d2, r, spectrum, seed):
    """``U diag(spectrum) V^T`` with Haar-like random orthonormal ``U``, ``V``."""
    spectrum = np.asarray(spectrum, dtype=float)
    if not 1 <= r <= min(d1, d2):
        raise ValueError(f'rank {r} infeasible for a {d1}x{d2} matrix')
    if spectrum.shape != (r,) or np.any(spectrum <= 0) or np.any(np.diff(spectrum) > 0):
        raise ValueError('spectrum must hold r positive nonincreasing values')
    rng = make_rng(seed, _STREAM_TRUTH)
    U = _orthonormal(rng, d1, r)
    V = _orthonormal(rng, d2, r)
    M = (U * spectrum) @ V.T
    return GroundTruth(M, float(spectrum[-1]), float(spectrum[0] / spectrum[-1]), int(r))


def _mode_spectra(T, ranks):
    return [np.linalg.svd(matricize(T, j), compute_uv=False)[:r] for j, r in enumerate(ranks)]


def gen_low_rank_tensor(dims, ranks, mode_min_sv, seed, max_attempts=16):
    """Random Tucker tensor rescaled so its smallest mode singular value is ``mode_min_sv``."""
    dims = tuple(int(d) for d in dims)
    ranks = check_tucker_ranks(dims, ranks)
    if not mode_min_sv > 0:
        raise ValueError('mode_min_sv must be positive')
    for j, r in enumerate(ranks):
        if r > int(np.prod(ranks)) // r:
            raise ValueError(f'no core of shape {ranks} has full rank along mode {j}')
    rng = make_rng(seed, _STREAM_TRUTH)
    for _ in range(max_attempts):
        core = rng.standard_normal(ranks)
        factors = tuple(_orthonormal(rng, d, r) for d, r in zip(dims, ranks))
        # orthonormal factors leave the mode spectra of the core unchanged
        spectra = _mode_spectra(core, ranks)
        lo = min(s[-1] for s in spectra)
        hi = max(s[0] for s in spectra)
        if lo > 1e-6 * hi:
            break
    else:
        raise NumericError(f'could not draw a core of full mode rank {ranks} '
                           f'in {max_attempts} attempts')
    core = core * (mode_min_sv / lo)
    return GroundTruth(TuckerDecomp(core, factors), float(mode_min_sv), float(hi / lo), ranks)


def gen_observations(truth, n, noise, seed):
    """``Y_i = <X_i, M*> + xi_i`` with i.i.d. N(0, 1) sensing entries."""
    if n < 1:
        raise ValueError('need at least one observation')
    M = np.asarray(truth.dense if isinstance(truth, GroundTruth) else truth, dtype=float)
    if n * M.size > MAX_SENSING_ENTRIES:
        raise ValueError(f'n * prod(shape) = {n * M.size} exceeds the memory guard '
                         f'{MAX_SENSING_ENTRIES}')
    X = np.empty((n,) + M.shape)
    Y = np.empty(n)
    m = M.reshape(-1)
    for i in range(n):
        rng = make_rng(seed, _STREAM_OBS, i)
        X[i] = rng.standard_normal(M.shape)
        # one dot product per row keeps Y_i independent of n bit for bit
        Y[i] = X[i].reshape(-1) @ m + noise.sample(rng)
    return Dataset(X, Y, int(seed), noise, truth if isinstance(truth, GroundTruth) else None)


def noise_mean_abs(noise):
    """``E|xi|`` for a noise spec."""
    if noise.kind == 'none':
        return 0.0
    if noise.kind == 'gaussian':
        return noise.sigma * math.sqrt(2 / math.pi)
    nu = noise.nu
    log_c = (gammaln((nu + 1) / 2) - gammaln(nu / 2)
             + 0.5 * math.log(nu) - 0.5 * math.log(math.pi) - math.log(nu - 1))
    return noise.scale * 2 * math.exp(log_c)


def snr_db(truth, noise):
    """``20 log10(||M*||_F / E|xi|)``."""
    fro = truth.fro if isinstance(truth, GroundTruth) else float(np.linalg.norm(truth))
    gamma = noise_mean_abs(noise)
    if fro <= 0 or gamma <= 0:
        raise ValueError('SNR needs a nonzero truth and a nonzero noise level')
    return 20 * math.log10(fro / gamma)


def noise_for_snr(kind, fro, snr, nu=None):
    """Noise spec of the given family whose ``E|xi|`` puts ``||M*||_F`` at ``snr`` dB."""
    gamma = fro / 10 ** (snr / 20)
    if kind == 'gaussian':
        return NoiseSpec.gaussian(gamma / math.sqrt(2 / math.pi))
    if kind == 'student_t':
        return NoiseSpec.student_t(nu, gamma / noise_mean_abs(NoiseSpec.student_t(nu)))
    raise ValueError(f'cannot set an SNR for noise kind {kind!r}')
