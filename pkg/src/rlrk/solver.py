"""Riemannian sub-gradient descent (RsGrad) for low-rank matrices and
low-Tucker-rank tensors, with dual-phase stepsize schedules."""
import csv
import io
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence, Union

import numpy as np

from .exceptions import NumericError
from .geometry import (MatrixTangentBasis, TuckerTangentBasis, retract_matrix,
                       retract_tucker, tangent_project_matrix,
                       tangent_project_tucker)
from .losses import LossSpec, loss_deriv, loss_value, snap_roundoff
from .tensor import hosvd, matricize, svd_r

__all__ = [
    'PracticalSchedule', 'TheoreticalSchedule', 'ConstantSchedule', 'ScheduleState',
    'SolverConfig', 'TraceRecord', 'SolveTrace', 'schedule_step', 'estimate_noise_scale',
    'rsgrad_matrix', 'rsgrad_tensor', 'rsgrad', 'gaussian_absolute_constants',
    'dof_tucker', 'eta0_bracket', 'operator_norm',
]

PHASE_ONE = 'One'
PHASE_TWO = 'Two'
STOP_WINDOW = 5


@dataclass(frozen=True)
class PracticalSchedule:
    """Geometric decay ``eta_l = q**l * eta_0`` with ``eta_0 = c1 * ||M_0|| / n``,
    then a constant ``c2 * E|xi| / n`` once the stepsize is small and the
    objective has settled.

    ``switch_threshold`` is absolute; when ``None`` it is ``switch_ratio * eta_0``.
    ``noise_scale`` replaces the residual-based estimate of ``E|xi|``.
    ``eta0_proxy='residual'`` uses the mean absolute residual at ``M_0`` in
    place of ``||M_0||``. ``dual_phase=False`` never switches.
    """
    c1: float = 1.0
    q: float = 0.91
    c2: float = 1.0
    switch_threshold: Optional[float] = None
    switch_ratio: float = 0.02
    switch_patience: int = 3
    switch_rel_change: float = 1e-3
    eta0_proxy: str = 'norm'
    noise_scale: Optional[float] = None
    dual_phase: bool = True

    def __post_init__(self):
        if not 0 < self.q < 1:
            raise ValueError(f'decay q must lie in (0, 1), got {self.q}')
        if self.c1 <= 0 or self.c2 <= 0 or self.switch_ratio <= 0:
            raise ValueError('c1, c2 and switch_ratio must be positive')
        if self.switch_threshold is not None and self.switch_threshold <= 0:
            raise ValueError('switch_threshold must be positive')
        if self.switch_patience < 1:
            raise ValueError('switch_patience must be at least 1')
        if self.eta0_proxy not in ('norm', 'residual'):
            raise ValueError(f'unknown eta0 proxy {self.eta0_proxy!r}')


@dataclass(frozen=True)
class TheoreticalSchedule:
    """Stepsizes from user-supplied regularity constants.

    Phase one decays by ``1 - 0.04 (mu_comp/L_comp)^2`` per step (matrices) or
    ``1 - (mu_comp/L_comp)^2 / (16 (m+1))`` (order-m tensors); phase two uses
    ``stat_factor * mu_stat / L_stat^2`` (divided by ``m+1`` for tensors).
    The phase flips when the true error drops below ``tau_comp``, or, without
    a truth, once the decayed stepsize reaches the phase-two level.
    """
    mu_comp: float
    L_comp: float
    mu_stat: float
    L_stat: float
    tau_comp: float
    tau_stat: float
    eta0: float
    stat_factor: float = 0.5

    def __post_init__(self):
        if min(self.mu_comp, self.L_comp, self.mu_stat, self.L_stat) <= 0:
            raise ValueError('regularity constants must be positive')
        if not self.tau_comp > self.tau_stat > 0:
            raise ValueError('need tau_comp > tau_stat > 0')
        if self.eta0 <= 0:
            raise ValueError('eta0 must be positive')

    def decay(self, m=None):
        ratio = (self.mu_comp / self.L_comp) ** 2
        if m is None:
            return 1 - 0.04 * ratio
        return 1 - ratio / (16 * (m + 1))

    def stat_stepsize(self, m=None):
        lo, hi = (0.125, 0.75) if m is None else (0.25, 0.75)
        if not lo <= self.stat_factor <= hi:
            raise ValueError(f'stat_factor {self.stat_factor} outside [{lo}, {hi}]')
        eta = self.stat_factor * self.mu_stat / self.L_stat ** 2
        return eta if m is None else eta / (m + 1)


@dataclass(frozen=True)
class ConstantSchedule:
    """A fixed stepsize (``eta = 0`` freezes the iterate)."""
    eta: float

    def __post_init__(self):
        if self.eta < 0:
            raise ValueError('stepsize must be nonnegative')


def eta0_bracket(init_error, mu_comp, L_comp, m=None):
    """Admissible initial stepsize interval given ``||M_0 - M*||_F``."""
    base = init_error * mu_comp / L_comp ** 2
    if m is None:
        return 0.2 * base, 0.3 * base
    return 0.25 * base / (m + 1), 0.75 * base / (m + 1)


def dof_tucker(dims, ranks):
    """``2^m prod(r) + 2 sum_j d_j r_j``."""
    return 2 ** len(ranks) * int(np.prod(ranks)) + 2 * sum(d * r for d, r in zip(dims, ranks))


def gaussian_absolute_constants(n, sigma, complexity, C2=1.0, C4=1.0):
    """Regularity constants of the absolute loss under N(0, sigma^2) noise.

    ``complexity`` is ``r * d1`` for matrices or :func:`dof_tucker` for tensors.
    ``C2`` and ``C4`` are the unspecified absolute constants.
    """
    return dict(mu_comp=n / 12, L_comp=2 * n, mu_stat=n / (12 * sigma), L_stat=C4 * n / sigma,
                tau_comp=sigma, tau_stat=C2 * sigma * math.sqrt(complexity / n))


@dataclass
class ScheduleState:
    """What a schedule may look at when choosing the next stepsize."""
    n: int
    init_norm: float = 0.0
    init_residual_mean: float = 0.0
    order: Optional[int] = None
    eta: float = 0.0
    phase: str = PHASE_ONE
    eta0: float = 0.0
    objectives: list = field(default_factory=list)
    residual_mean: float = 0.0
    error: Optional[float] = None


def _initial_eta(schedule, state):
    if isinstance(schedule, PracticalSchedule):
        scale = state.init_norm if schedule.eta0_proxy == 'norm' else state.init_residual_mean
        return schedule.c1 * scale / state.n
    if isinstance(schedule, TheoreticalSchedule):
        return schedule.eta0
    return schedule.eta


def _settled(objectives, patience, tol):
    if len(objectives) < patience + 1:
        return False
    recent = np.asarray(objectives[-(patience + 1):])
    change = np.abs(np.diff(recent)) / np.maximum(np.abs(recent[:-1]), 1e-300)
    return bool(np.all(change < tol))


def schedule_step(schedule, l, state):
    """Stepsize and phase label for iteration ``l``."""
    m = state.order
    if isinstance(schedule, ConstantSchedule):
        return schedule.eta, PHASE_TWO
    if l == 0:
        return _initial_eta(schedule, state), PHASE_ONE
    if state.phase == PHASE_TWO:
        return state.eta, PHASE_TWO

    if isinstance(schedule, PracticalSchedule):
        eta = state.eta0 * schedule.q ** l
        if not schedule.dual_phase:
            return eta, PHASE_ONE
        threshold = schedule.switch_threshold
        if threshold is None:
            threshold = schedule.switch_ratio * state.eta0
        if eta < threshold and _settled(state.objectives, schedule.switch_patience,
                                        schedule.switch_rel_change):
            gamma = schedule.noise_scale
            if gamma is None:
                gamma = state.residual_mean
            return schedule.c2 * gamma / state.n, PHASE_TWO
        return eta, PHASE_ONE

    eta = state.eta0 * schedule.decay(m) ** l
    eta_stat = schedule.stat_stepsize(m)
    if state.error is not None:
        if state.error < schedule.tau_comp:
            return eta_stat, PHASE_TWO
    elif eta <= eta_stat:
        return eta_stat, PHASE_TWO
    return eta, PHASE_ONE


@dataclass(frozen=True)
class SolverConfig:
    rank: Union[int, Sequence[int]]
    loss: LossSpec
    schedule: Union[PracticalSchedule, TheoreticalSchedule, ConstantSchedule]
    max_iter: int = 300
    stop_tol: float = 0.0

    def __post_init__(self):
        if self.max_iter < 1:
            raise ValueError('max_iter must be at least 1')
        if self.stop_tol < 0:
            raise ValueError('stop_tol must be nonnegative')


class TraceRecord(NamedTuple):
    l: int
    eta: float
    phase: str
    objective: float
    rel_error: Optional[float]


CSV_HEADER = ('iter', 'eta', 'phase', 'objective', 'rel_error')


@dataclass
class SolveTrace:
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    @property
    def rel_errors(self):
        return np.array([np.nan if r.rel_error is None else r.rel_error for r in self.records])

    @property
    def objectives(self):
        return np.array([r.objective for r in self.records])

    @property
    def etas(self):
        return np.array([r.eta for r in self.records])

    @property
    def switch_iteration(self):
        """First iteration run in phase two, or ``None``."""
        for r in self.records:
            if r.phase == PHASE_TWO:
                return r.l
        return None

    def to_csv(self, dest=None):
        """Write ``iter,eta,phase,objective,rel_error`` rows; returns the text
        when ``dest`` is ``None``."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator='\n')
        w.writerow(CSV_HEADER)
        for r in self.records:
            w.writerow([r.l, repr(float(r.eta)), r.phase, repr(float(r.objective)),
                        '' if r.rel_error is None else repr(float(r.rel_error))])
        text = buf.getvalue()
        if dest is None:
            return text
        with open(dest, 'w', newline='') as fh:
            fh.write(text)

    @classmethod
    def from_csv(cls, path):
        with open(path, newline='') as fh:
            rows = list(csv.DictReader(fh))
        return cls([TraceRecord(int(r['iter']), float(r['eta']), r['phase'],
                                float(r['objective']),
                                float(r['rel_error']) if r['rel_error'] else None)
                    for r in rows])


def estimate_noise_scale(data, M):
    """Mean absolute residual ``n^{-1} sum_i |Y_i - <M, X_i>|``."""
    M = np.asarray(M, dtype=float)
    if M.shape != data.shape:
        raise ValueError(f'estimate shape {M.shape} does not match sensing shape {data.shape}')
    r = data.responses - data.sensing.reshape(data.n, -1) @ M.reshape(-1)
    return float(np.mean(np.abs(r)))


def operator_norm(M):
    """Spectral norm of a matrix; for tensors, the largest over matricizations."""
    M = np.asarray(M, dtype=float)
    if M.ndim == 2:
        return float(np.linalg.norm(M, 2))
    return max(float(np.linalg.norm(matricize(M, j), 2)) for j in range(M.ndim))


def _stop(objectives, tol):
    if tol <= 0 or len(objectives) < STOP_WINDOW + 1:
        return False
    recent = np.asarray(objectives[-(STOP_WINDOW + 1):])
    change = np.abs(np.diff(recent)) / np.maximum(np.abs(recent[:-1]), 1e-300)
    return float(np.mean(change)) < tol


def _run(data, config, init, truth, project, retract, start_basis, order):
    """Shared RsGrad loop; ``project``/``retract`` carry the geometry."""
    M = np.asarray(init, dtype=float)
    if M.shape != data.shape:
        raise ValueError(f'init shape {M.shape} does not match sensing shape {data.shape}')
    X = data.sensing.reshape(data.n, -1)
    Y = data.responses
    truth = None if truth is None else np.asarray(truth, dtype=float)
    truth_norm = None if truth is None else float(np.linalg.norm(truth))
    schedule = config.schedule
    spec = config.loss

    basis = start_basis(M)
    row_norms = np.linalg.norm(X, axis=1)
    res = Y - X @ M.reshape(-1)
    state = ScheduleState(n=data.n, order=order, init_norm=operator_norm(M),
                          init_residual_mean=float(np.mean(np.abs(res))))
    if isinstance(schedule, TheoreticalSchedule) and truth is not None:
        lo, hi = eta0_bracket(float(np.linalg.norm(M - truth)), schedule.mu_comp,
                              schedule.L_comp, order)
        if not lo <= schedule.eta0 <= hi:
            raise ValueError(f'eta0 = {schedule.eta0:.4g} outside the admissible '
                             f'interval [{lo:.4g}, {hi:.4g}] for this initialization')
    trace = SolveTrace()
    for l in range(config.max_iter + 1):
        obj = float(np.sum(loss_value(spec, res)))
        if not math.isfinite(obj):
            raise NumericError(f'objective is not finite at iteration {l}', iteration=l)
        err = None
        if truth is not None:
            err = float(np.linalg.norm(M - truth))
        state.objectives.append(obj)
        state.residual_mean = float(np.mean(np.abs(res)))
        state.error = err
        eta, phase = schedule_step(schedule, l, state)
        if l == 0:
            state.eta0 = eta
        state.eta, state.phase = eta, phase
        rel = None if err is None else err / truth_norm if truth_norm > 0 else err
        trace.records.append(TraceRecord(l, eta, phase, obj, rel))
        if l == config.max_iter or _stop(state.objectives, config.stop_tol):
            break
        if eta > 0:
            G = -(loss_deriv(spec, snap_roundoff(res, row_norms, M)) @ X).reshape(M.shape)
            try:
                M, basis = retract(M - eta * project(G, basis), basis)
            except NumericError as exc:
                exc.iteration = l
                raise
            res = Y - X @ M.reshape(-1)
    return M, trace


def rsgrad_matrix(data, config, init, truth=None):
    """Algorithm: project a vanilla subgradient onto the tangent space of the
    rank-r manifold, step, and retract with a truncated SVD."""
    r = int(config.rank)
    if len(data.shape) != 2:
        raise ValueError('rsgrad_matrix needs matrix-shaped sensing')

    def start(M):
        return MatrixTangentBasis.from_factors(svd_r(M, r)[1])

    def retract(Y, basis):
        approx, factors = retract_matrix(Y, r, basis)
        return approx, MatrixTangentBasis.from_factors(factors)

    init = svd_r(np.asarray(init, dtype=float), r)[0]
    return _run(data, config, init, truth, tangent_project_matrix, retract, start, None)


def rsgrad_tensor(data, config, init, truth=None):
    """Tensor RsGrad: Tucker tangent projection and HOSVD retraction.

    Order-2 problems are handed to :func:`rsgrad_matrix` (the Tucker geometry
    coincides with the matrix one there) so both give identical traces.
    """
    ranks = tuple(int(r) for r in np.atleast_1d(config.rank))
    if len(data.shape) == 2:
        if ranks[0] != ranks[-1]:
            raise ValueError(f'order-2 Tucker rank {ranks} must be equal in both modes')
        cfg = SolverConfig(ranks[0], config.loss, config.schedule, config.max_iter,
                           config.stop_tol)
        return rsgrad_matrix(data, cfg, init, truth)
    order = len(data.shape)

    def start(M):
        return TuckerTangentBasis.from_decomp(hosvd(M, ranks)[1])

    def retract(Y, basis):
        approx, decomp = retract_tucker(Y, ranks)
        return approx, TuckerTangentBasis.from_decomp(decomp)

    init = hosvd(np.asarray(init, dtype=float), ranks)[0]
    return _run(data, config, init, truth, tangent_project_tucker, retract, start, order)


def rsgrad(data, config, init, truth=None):
    """Dispatch on the order of the sensing arrays."""
    if len(data.shape) == 2 and np.ndim(config.rank) == 0:
        return rsgrad_matrix(data, config, init, truth)
    return rsgrad_tensor(data, config, init, truth)
