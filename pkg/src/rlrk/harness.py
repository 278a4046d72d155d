"""Monte-Carlo experiment runner: convergence traces, accuracy data, rate
checks and initialization comparisons, written out as CSV and JSON."""
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .exceptions import NumericError
from .initialization import (ShrinkageParams, hosvd_init_tensor, shrinkage_init_tensor,
                             spectral_init_matrix)
from .losses import LossSpec, parse_loss
from .model import (MAX_SENSING_ENTRIES, NoiseSpec, gen_low_rank_matrix, gen_low_rank_tensor,
                    gen_observations, noise_for_snr, noise_mean_abs)
from .solver import (ConstantSchedule, PracticalSchedule, SolverConfig, TheoreticalSchedule,
                     dof_tucker, estimate_noise_scale, eta0_bracket,
                     gaussian_absolute_constants, rsgrad)

__all__ = ['SCENARIOS', 'SCHEMA_VERSION', 'ExperimentConfig', 'ExperimentReport',
           'run_experiment', 'fit_rate_slope', 'single_phase_baseline', 'rgrad_baseline',
           'load_config', 'parse_config', 'make_init', 'worker_count']

SCENARIOS = ('ConvergenceMatrix', 'ConvergenceTensor', 'AccuracyMatrix', 'RateCheck',
             'InitCompare')
SCHEMA_VERSION = 1
BASELINES = ('single_phase', 'rgrad')
# constant RGrad stepsize in units of 1/n; 0.5/n already diverges at 80x80, n = 2000
RGRAD_STEP = 0.2


@dataclass(frozen=True)
class ExperimentConfig:
    """One batch of replications.

    ``shape`` is ``(d1, d2)`` or the tensor dims and ``rank`` an int or a rank
    vector. ``n`` may hold several sample sizes (a sweep for ``RateCheck``).
    Noise is set either by ``snr_db`` or by ``sigma`` (Gaussian sd or t scale).
    ``losses`` are run with RsGrad; ``"huber:auto"`` takes delta from the
    absolute-loss fit's mean absolute residual. ``baselines`` adds the
    never-switching schedule and/or square-loss RGrad.
    """
    scenario: str
    shape: tuple
    rank: object
    n: tuple
    noise: str = 'gaussian'
    snr_db: Optional[float] = None
    sigma: Optional[float] = None
    nu: Optional[float] = None
    losses: tuple = ('absolute',)
    baselines: tuple = ()
    init: str = 'spectral'
    inits: tuple = ('shrinkage', 'hosvd')
    schedule: str = 'practical'
    c1: float = 1.0
    q: float = 0.91
    c2: float = 1.0
    switch_ratio: float = 0.02
    switch_patience: int = 3
    phase_two_scale: str = 'estimate'
    rgrad_step: float = RGRAD_STEP
    max_iter: int = 300
    spectrum: Optional[tuple] = None
    mode_min_sv: float = 1.0
    replications: int = 1
    seed: int = 0
    output_dir: str = 'rlrk-out'

    def __post_init__(self):
        fix = object.__setattr__
        fix(self, 'shape', tuple(int(d) for d in np.atleast_1d(self.shape)))
        fix(self, 'n', tuple(int(v) for v in np.atleast_1d(self.n)))
        fix(self, 'losses', tuple(str(s) for s in np.atleast_1d(self.losses)))
        fix(self, 'baselines', tuple(str(s) for s in np.atleast_1d(self.baselines)))
        fix(self, 'inits', tuple(str(s) for s in np.atleast_1d(self.inits)))
        if np.ndim(self.rank) > 0:
            fix(self, 'rank', tuple(int(r) for r in self.rank))
        else:
            fix(self, 'rank', int(self.rank))
        if self.spectrum is not None:
            fix(self, 'spectrum', tuple(float(s) for s in self.spectrum))
        if self.scenario not in SCENARIOS:
            raise ValueError(f'unknown scenario {self.scenario!r}; pick one of {SCENARIOS}')
        if self.replications < 1:
            raise ValueError('replications must be at least 1')
        if not self.n or min(self.n) < 2:
            raise ValueError('need a nonempty list of sample sizes, each at least 2')
        if self.scenario == 'RateCheck' and len(set(self.n)) < 3:
            raise ValueError('RateCheck needs at least three distinct sample sizes')
        if len(self.shape) < 2:
            raise ValueError('shape needs at least two dimensions')
        if self.is_matrix and self.scenario == 'ConvergenceTensor':
            raise ValueError('ConvergenceTensor needs an order-3 or higher shape')
        if not self.is_matrix and self.scenario in ('ConvergenceMatrix', 'AccuracyMatrix',
                                                    'RateCheck'):
            if len(self.shape) != 2:
                raise ValueError(f'{self.scenario} needs a matrix shape')
        if self.noise not in ('none', 'gaussian', 'student_t'):
            raise ValueError(f'unknown noise kind {self.noise!r}')
        if self.noise != 'none' and (self.snr_db is None) == (self.sigma is None):
            raise ValueError('give exactly one of snr_db and sigma for noisy data')
        if self.noise == 'student_t' and self.nu is None:
            raise ValueError('Student t noise needs nu')
        if not self.losses and self.scenario != 'InitCompare':
            raise ValueError('losses must be nonempty')
        for s in self.losses:
            _loss_for(s, 1.0)
        for b in self.baselines:
            if b not in BASELINES:
                raise ValueError(f'unknown baseline {b!r}; pick from {BASELINES}')
        for s in (self.init,) + self.inits:
            _parse_init(s)
        if self.schedule not in ('practical', 'theoretical'):
            raise ValueError(f'unknown schedule {self.schedule!r}')
        if self.phase_two_scale not in ('estimate', 'true'):
            raise ValueError('phase_two_scale must be "estimate" or "true"')
        if self.max_iter < 1:
            raise ValueError('max_iter must be at least 1')

    @property
    def is_matrix(self):
        return len(self.shape) == 2 and np.ndim(self.rank) == 0

    @property
    def ranks(self):
        if np.ndim(self.rank) == 0:
            return (self.rank,) * len(self.shape)
        return self.rank


@dataclass
class ExperimentReport:
    scenario: str
    rows: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    slope: Optional[float] = None
    summary_path: Optional[str] = None

    def finals(self, method, n=None):
        """Final relative errors of ``method`` in replication order (``None`` if failed)."""
        return [r['final_rel_error'] for r in self.rows
                if r['method'] == method and (n is None or r['n'] == n)]

    @property
    def all_failed(self):
        return bool(self.rows) and all(r['failed'] for r in self.rows)


def _parse_init(text):
    kind, _, arg = str(text).partition(':')
    if kind not in ('spectral', 'hosvd', 'shrinkage', 'truth'):
        raise ValueError(f'unknown init {text!r}')
    if arg and kind != 'shrinkage':
        raise ValueError(f'init {kind!r} takes no parameter')
    return kind, (float(arg) if arg else None)


def _loss_for(text, delta_auto):
    if str(text).strip().lower() == 'huber:auto':
        return LossSpec.huber(delta_auto)
    return parse_loss(text)


def make_init(text, data, rank, truth=None):
    """Starting point named by ``spectral | hosvd | shrinkage[:tau] | truth``."""
    kind, tau = _parse_init(text)
    ranks = rank if np.ndim(rank) else (int(rank),) * len(data.shape)
    if kind == 'truth':
        if truth is None:
            raise ValueError('init "truth" needs the ground truth')
        return np.array(truth, dtype=float)
    if kind == 'shrinkage':
        return shrinkage_init_tensor(data, ranks, ShrinkageParams(tau))
    if kind == 'spectral' and len(data.shape) == 2 and np.ndim(rank) == 0:
        return spectral_init_matrix(data, int(rank))
    return hosvd_init_tensor(data, ranks)


def fit_rate_slope(points):
    """OLS slope of ``log(error)`` on ``log(n)``."""
    pts = [(float(n), float(e)) for n, e in points]
    if len(pts) < 3:
        raise ValueError('need at least three (n, error) points')
    if any(e <= 0 or n <= 0 for n, e in pts):
        raise ValueError('sample sizes and errors must be positive')
    x = np.log([n for n, _ in pts])
    y = np.log([e for _, e in pts])
    xc = x - x.mean()
    if not np.any(xc):
        raise ValueError('sample sizes must not all coincide')
    return float(xc @ (y - y.mean()) / (xc @ xc))


def single_phase_baseline(data, config, init, truth=None):
    """RsGrad whose practical schedule keeps decaying geometrically forever."""
    if not isinstance(config.schedule, PracticalSchedule):
        raise ValueError('the single-phase baseline needs a PracticalSchedule')
    cfg = replace(config, schedule=replace(config.schedule, dual_phase=False))
    return rsgrad(data, cfg, init, truth)


def rgrad_baseline(data, rank, init, truth=None, step=RGRAD_STEP, max_iter=300):
    """Square-loss Riemannian gradient descent with stepsize ``step / n``."""
    cfg = SolverConfig(rank, LossSpec.square(), ConstantSchedule(step / data.n), max_iter)
    return rsgrad(data, cfg, init, truth)


def worker_count(tasks):
    """Workers for ``tasks`` jobs, capped by ``RLRK_THREADS`` when set."""
    env = os.environ.get('RLRK_THREADS')
    cap = os.cpu_count() or 1
    if env:
        try:
            cap = int(env)
        except ValueError:
            raise ValueError(f'RLRK_THREADS must be a positive integer, got {env!r}') from None
        if cap < 1:
            raise ValueError(f'RLRK_THREADS must be a positive integer, got {env!r}')
    return max(1, min(cap, tasks))


def _rep_seeds(seed, rep, n_index):
    truth_seed, = np.random.SeedSequence(int(seed), spawn_key=(0, rep)).generate_state(1)
    obs_seed, = np.random.SeedSequence(int(seed), spawn_key=(1, rep, n_index)).generate_state(1)
    return int(truth_seed), int(obs_seed)


def _make_truth(cfg, seed):
    if cfg.is_matrix:
        r = cfg.rank
        spectrum = cfg.spectrum if cfg.spectrum is not None else (1.0,) * r
        return gen_low_rank_matrix(cfg.shape[0], cfg.shape[1], r, spectrum, seed)
    return gen_low_rank_tensor(cfg.shape, cfg.ranks, cfg.mode_min_sv, seed)


def _make_noise(cfg, truth):
    if cfg.noise == 'none':
        return NoiseSpec.none()
    if cfg.snr_db is not None:
        return noise_for_snr(cfg.noise, truth.fro, cfg.snr_db, cfg.nu)
    if cfg.noise == 'gaussian':
        return NoiseSpec.gaussian(cfg.sigma)
    return NoiseSpec.student_t(cfg.nu, cfg.sigma)


def _schedule(cfg, data, init, truth, noise):
    if cfg.schedule == 'theoretical':
        if noise.kind != 'gaussian':
            raise ValueError('the theoretical schedule is wired for Gaussian noise only')
        order = None if cfg.is_matrix else len(cfg.shape)
        complexity = (cfg.rank * cfg.shape[0] if cfg.is_matrix
                      else dof_tucker(cfg.shape, cfg.ranks))
        consts = gaussian_absolute_constants(data.n, noise.sigma, complexity)
        lo, hi = eta0_bracket(float(np.linalg.norm(init - truth)), consts['mu_comp'],
                              consts['L_comp'], order)
        return TheoreticalSchedule(eta0=(lo + hi) / 2, **consts)
    scale = noise_mean_abs(noise) if cfg.phase_two_scale == 'true' else None
    if scale == 0.0:
        scale = None
    return PracticalSchedule(c1=cfg.c1, q=cfg.q, c2=cfg.c2, switch_ratio=cfg.switch_ratio,
                             switch_patience=cfg.switch_patience, noise_scale=scale)


def _run_task(cfg, rep, n_index):
    """One replication at one sample size; returns plain rows with CSV text."""
    n = cfg.n[n_index]
    truth_seed, obs_seed = _rep_seeds(cfg.seed, rep, n_index)
    base = {'rep': rep, 'n': n, 'truth_seed': truth_seed, 'obs_seed': obs_seed}
    try:
        truth = _make_truth(cfg, truth_seed)
        noise = _make_noise(cfg, truth)
        data = gen_observations(truth, n, noise, obs_seed)
    except NumericError as exc:
        return [dict(base, method='setup', failed=True, error=str(exc),
                     final_rel_error=None, switch_iteration=None, trace=None)]
    M_star = truth.dense
    fro = float(np.linalg.norm(M_star))
    rank = cfg.rank
    rows = []

    if cfg.scenario == 'InitCompare':
        for name in cfg.inits:
            try:
                M0 = make_init(name, data, rank, M_star)
                err = float(np.linalg.norm(M0 - M_star)) / fro
                rows.append(dict(base, method=f'init-{name}', failed=False, error=None,
                                 final_rel_error=err, switch_iteration=None, trace=None))
            except NumericError as exc:
                rows.append(dict(base, method=f'init-{name}', failed=True, error=str(exc),
                                 final_rel_error=None, switch_iteration=None, trace=None))
        return rows

    def record(method, fn):
        try:
            M, trace = fn()
            rows.append(dict(base, method=method, failed=False, error=None,
                             final_rel_error=float(trace.rel_errors[-1]),
                             switch_iteration=trace.switch_iteration,
                             trace=trace.to_csv()))
            return M
        except NumericError as exc:
            rows.append(dict(base, method=method, failed=True, error=str(exc),
                             final_rel_error=None, switch_iteration=None, trace=None))
            return None

    try:
        M0 = make_init(cfg.init, data, rank, M_star)
        schedule = _schedule(cfg, data, M0, M_star, noise)
    except NumericError as exc:
        return [dict(base, method='setup', failed=True, error=str(exc),
                     final_rel_error=None, switch_iteration=None, trace=None)]

    fits = {}
    auto_delta = None
    for text in cfg.losses:
        if text.strip().lower() == 'huber:auto':
            if auto_delta is None:
                ref = fits.get('absolute')
                if ref is None:
                    cfg_abs = SolverConfig(rank, LossSpec.absolute(), schedule, cfg.max_iter)
                    try:
                        ref = rsgrad(data, cfg_abs, M0, M_star)[0]
                    except NumericError:
                        ref = M0
                auto_delta = max(estimate_noise_scale(data, ref), 1e-12)
            spec = LossSpec.huber(auto_delta)
        else:
            spec = parse_loss(text)
        sc = SolverConfig(rank, spec, schedule, cfg.max_iter)
        fits[text.strip().lower()] = record(
            f'rsgrad-{text}', lambda sc=sc: rsgrad(data, sc, M0, M_star))

    if 'single_phase' in cfg.baselines:
        if not isinstance(schedule, PracticalSchedule):
            raise ValueError('the single-phase baseline needs the practical schedule')
        sc = SolverConfig(rank, _loss_for(cfg.losses[0], auto_delta or 1.0), schedule,
                          cfg.max_iter)
        record(f'single-{cfg.losses[0]}', lambda: single_phase_baseline(data, sc, M0, M_star))
    if 'rgrad' in cfg.baselines:
        record('rgrad-square', lambda: rgrad_baseline(data, rank, M0, M_star,
                                                      cfg.rgrad_step, cfg.max_iter))
    return rows


def _summarize(values):
    vals = np.array([v for v in values if v is not None], dtype=float)
    out = {'count': int(vals.size), 'failures': int(len(values) - vals.size)}
    if vals.size:
        q1, med, q3 = np.percentile(vals, [25, 50, 75])
        out.update(median=float(med), q1=float(q1), q3=float(q3),
                   min=float(vals.min()), max=float(vals.max()))
    return out


def _trace_name(row):
    return f"rep{row['rep']:03d}_n{row['n']}_{row['method'].replace(':', '-')}.csv"


def run_experiment(config, write=True):
    """Run every replication of ``config``; writes traces and ``summary.json``
    under ``config.output_dir`` unless ``write`` is false."""
    cfg = config
    size = int(np.prod(cfg.shape))
    if max(cfg.n) * size > MAX_SENSING_ENTRIES:
        raise ValueError(f'n * prod(shape) = {max(cfg.n) * size} exceeds the memory guard '
                         f'{MAX_SENSING_ENTRIES}')
    tasks = [(rep, k) for rep in range(cfg.replications) for k in range(len(cfg.n))]
    workers = worker_count(len(tasks))
    if workers == 1:
        results = [_run_task(cfg, rep, k) for rep, k in tasks]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_run_task, cfg, rep, k) for rep, k in tasks]
            results = [f.result() for f in futures]
    rows = [row for batch in results for row in batch]

    out = Path(cfg.output_dir)
    if write:
        (out / 'traces').mkdir(parents=True, exist_ok=True)
    keep_traces = cfg.scenario in ('ConvergenceMatrix', 'ConvergenceTensor', 'RateCheck')
    for row in rows:
        text = row.pop('trace')
        row['trace_path'] = None
        if write and keep_traces and text is not None:
            path = out / 'traces' / _trace_name(row)
            path.write_text(text)
            row['trace_path'] = str(path.relative_to(out))

    methods = list(dict.fromkeys(r['method'] for r in rows))
    summary = {}
    for method in methods:
        per_n = {}
        for n in cfg.n:
            vals = [r['final_rel_error'] for r in rows if r['method'] == method and r['n'] == n]
            per_n[str(n)] = _summarize(vals)
        summary[method] = per_n

    slope = None
    if cfg.scenario == 'RateCheck':
        primary = f'rsgrad-{cfg.losses[0]}'
        pts = [(n, summary[primary][str(n)].get('median')) for n in cfg.n]
        if all(e is not None and e > 0 for _, e in pts):
            slope = fit_rate_slope(pts)
    report = ExperimentReport(cfg.scenario, rows, summary, slope)
    if write:
        doc = {'schema_version': SCHEMA_VERSION, 'config': _config_dict(cfg),
               'summary': summary, 'replications': rows}
        if cfg.scenario == 'RateCheck':
            doc['slope'] = slope
        path = out / 'summary.json'
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + '\n')
        report.summary_path = str(path)
    return report


def _config_dict(cfg):
    d = asdict(cfg)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def parse_config(text):
    """Parse ``key = value`` lines; values are JSON when they parse as JSON and
    bare strings otherwise. ``#`` starts a comment."""
    fields = {f for f in ExperimentConfig.__dataclass_fields__}
    kw = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split('#', 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition('=')
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ValueError(f'line {lineno}: expected "key = value", got {raw!r}')
        if key not in fields:
            raise ValueError(f'line {lineno}: unknown field {key!r}')
        if key in kw:
            raise ValueError(f'line {lineno}: duplicate field {key!r}')
        try:
            kw[key] = json.loads(value)
        except json.JSONDecodeError:
            kw[key] = value
    missing = {'scenario', 'shape', 'rank', 'n'} - kw.keys()
    if missing:
        raise ValueError(f'config is missing required fields: {sorted(missing)}')
    try:
        return ExperimentConfig(**kw)
    except TypeError as exc:
        raise ValueError(str(exc)) from None


def load_config(path):
    return parse_config(Path(path).read_text())
