"""Robust scalar losses and the empirical objective built from them.

Residuals follow the convention ``r_i = Y_i - <M, X_i>``; it only matters for
the asymmetric quantile loss.
"""
from dataclasses import dataclass

import numpy as np

__all__ = ['LossSpec', 'parse_loss', 'loss_value', 'loss_deriv', 'residuals',
           'objective', 'full_subgradient', 'snap_roundoff']

KINDS = ('square', 'absolute', 'huber', 'quantile')
# residuals below ROUNDOFF * ||X_i||_F * ||M||_F are rounding noise and treated as exact zeros
ROUNDOFF = 1e-13


@dataclass(frozen=True)
class LossSpec:
    kind: str
    delta: float = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f'unknown loss kind {self.kind!r}')
        if self.kind == 'huber' and not (self.delta is not None and self.delta > 0):
            raise ValueError(f'Huber delta must be positive, got {self.delta}')
        if self.kind == 'quantile' and not (self.delta is not None and 0 < self.delta < 1):
            raise ValueError(f'quantile delta must lie in (0, 1), got {self.delta}')

    @classmethod
    def square(cls):
        return cls('square')

    @classmethod
    def absolute(cls):
        return cls('absolute')

    @classmethod
    def huber(cls, delta):
        return cls('huber', float(delta))

    @classmethod
    def quantile(cls, delta):
        return cls('quantile', float(delta))

    def __str__(self):
        if self.delta is None:
            return self.kind
        return f'{self.kind}:{self.delta:g}'


def parse_loss(text):
    """Parse ``"absolute" | "square" | "huber:<delta>" | "quantile:<delta>"``."""
    kind, _, arg = str(text).strip().lower().partition(':')
    if kind in ('huber', 'quantile'):
        if not arg:
            raise ValueError(f'loss {kind!r} needs a parameter, e.g. "{kind}:0.5"')
        return LossSpec(kind, float(arg))
    if arg:
        raise ValueError(f'loss {kind!r} takes no parameter')
    return LossSpec(kind)


def loss_value(spec, x):
    x = np.asarray(x, dtype=float)
    if spec.kind == 'square':
        return x * x
    if spec.kind == 'absolute':
        return np.abs(x)
    d = spec.delta
    if spec.kind == 'huber':
        ax = np.abs(x)
        return np.where(ax <= d, x * x, 2 * d * ax - d * d)
    return np.where(x >= 0, d * x, (d - 1) * x)


def loss_deriv(spec, x):
    """A subgradient of the loss at ``x``; 0 is chosen at every kink where admissible."""
    x = np.asarray(x, dtype=float)
    if spec.kind == 'square':
        return 2 * x
    if spec.kind == 'absolute':
        return np.sign(x)
    d = spec.delta
    if spec.kind == 'huber':
        return np.where(np.abs(x) <= d, 2 * x, 2 * d * np.sign(x))
    return np.where(x > 0, d, np.where(x < 0, d - 1, 0.0))


def _flat_sensing(data, M):
    M = np.asarray(M, dtype=float)
    if M.shape != data.shape:
        raise ValueError(f'estimate shape {M.shape} does not match sensing shape {data.shape}')
    return data.sensing.reshape(data.n, -1), M.reshape(-1)


def snap_roundoff(res, row_norms, M):
    """Zero the residuals that are within rounding error of an exact fit, so a
    kink's zero subgradient is used there instead of a sign of round-off."""
    tol = ROUNDOFF * row_norms * np.linalg.norm(M)
    return np.where(np.abs(res) <= tol, 0.0, res)


def residuals(data, M):
    """``Y_i - <M, X_i>`` for every observation."""
    X, m = _flat_sensing(data, M)
    return data.responses - X @ m


def objective(spec, data, M):
    return float(np.sum(loss_value(spec, residuals(data, M))))


def full_subgradient(spec, data, M):
    """Vanilla subgradient ``-sum_i rho'(r_i) X_i`` of the objective at ``M``."""
    X, m = _flat_sensing(data, M)
    res = snap_roundoff(data.responses - X @ m, np.linalg.norm(X, axis=1), m)
    w = loss_deriv(spec, res)
    return -(w @ X).reshape(data.shape)
