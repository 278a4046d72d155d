import json
import math

import numpy as np
import pytest

from rlrk import cli, harness
from rlrk.exceptions import NumericError
from rlrk.harness import (ExperimentConfig, fit_rate_slope, parse_config, rgrad_baseline,
                          run_experiment, single_phase_baseline, worker_count)
from rlrk.initialization import spectral_init_matrix
from rlrk.losses import LossSpec
from rlrk.model import NoiseSpec, gen_low_rank_matrix, gen_observations, noise_for_snr
from rlrk.solver import PracticalSchedule, SolveTrace, SolverConfig, rsgrad_matrix


def small(tmp_path, **kw):
    base = dict(scenario='ConvergenceMatrix', shape=(15, 15), rank=2, n=150, noise='gaussian',
                snr_db=40.0, max_iter=120, replications=3, seed=5, output_dir=str(tmp_path))
    base.update(kw)
    return ExperimentConfig(**base)


def ols_slope(xs, ys):
    n = len(xs)
    mx, my = sum(xs) / n, sum(ys) / n
    return sum((x - mx) * (y - my) for x, y in zip(xs, ys)) / sum((x - mx) ** 2 for x in xs)


def test_fit_rate_slope_examples():
    ns = [1000, 2000, 4000, 8000]
    assert abs(fit_rate_slope([(n, 3 * n ** -0.5) for n in ns]) + 0.5) < 1e-12
    assert abs(fit_rate_slope([(n, 0.2) for n in ns])) < 1e-12
    rng = np.random.default_rng(0)
    for _ in range(20):
        pts = [(n, n ** -0.5 * (1 + 0.05 * rng.uniform(-1, 1))) for n in ns]
        s = fit_rate_slope(pts)
        assert abs(s - ols_slope([math.log(n) for n, _ in pts], [math.log(e) for _, e in pts])) < 1e-12
        assert abs(s + 0.5) < 0.05
    with pytest.raises(ValueError):
        fit_rate_slope([(1, 1.0), (2, 0.5)])
    with pytest.raises(ValueError):
        fit_rate_slope([(1, 1.0), (2, 0.0), (4, 0.3)])


def test_config_validation():
    with pytest.raises(ValueError):
        ExperimentConfig(scenario='Nope', shape=(4, 4), rank=1, n=10)
    with pytest.raises(ValueError):
        ExperimentConfig(scenario='RateCheck', shape=(4, 4), rank=1, n=(10, 20), noise='none')
    with pytest.raises(ValueError):
        ExperimentConfig(scenario='ConvergenceMatrix', shape=(4, 4), rank=1, n=10, replications=0,
                         noise='none')
    with pytest.raises(ValueError):
        ExperimentConfig(scenario='ConvergenceMatrix', shape=(4, 4), rank=1, n=10)  # no noise level
    with pytest.raises(ValueError):
        ExperimentConfig(scenario='ConvergenceMatrix', shape=(4, 4), rank=1, n=10, noise='none',
                         losses=['cauchy'])
    with pytest.raises(ValueError):
        ExperimentConfig(scenario='ConvergenceMatrix', shape=(4, 4), rank=1, n=10, noise='none',
                         init='magic')
    with pytest.raises(ValueError):
        ExperimentConfig(scenario='ConvergenceTensor', shape=(4, 4), rank=1, n=10, noise='none')
    with pytest.raises(ValueError):
        ExperimentConfig(scenario='ConvergenceMatrix', shape=(4, 4), rank=1, n=[], noise='none')


def test_parse_config():
    text = """
    # comment
    scenario = RateCheck
    shape = [80, 80]
    rank = 5
    n = [2000, 4000, 8000]
    noise = "gaussian"
    snr_db = 40
    losses = ["absolute", "huber:auto"]
    replications = 10
    """
    cfg = parse_config(text)
    assert cfg.shape == (80, 80) and cfg.n == (2000, 4000, 8000) and cfg.rank == 5
    assert cfg.losses == ('absolute', 'huber:auto') and cfg.noise == 'gaussian'
    for bad in ('scenario RateCheck', 'color = red\nscenario = RateCheck',
                'scenario = RateCheck\nscenario = RateCheck', 'shape = [3, 3]'):
        with pytest.raises(ValueError):
            parse_config(bad)


def test_worker_count(monkeypatch):
    monkeypatch.setenv('RLRK_THREADS', '3')
    assert worker_count(10) == 3 and worker_count(2) == 2
    monkeypatch.setenv('RLRK_THREADS', '0')
    with pytest.raises(ValueError):
        worker_count(4)
    monkeypatch.setenv('RLRK_THREADS', 'x')
    with pytest.raises(ValueError):
        worker_count(4)


def test_convergence_matrix_noiseless_section_scale(tmp_path):
    cfg = ExperimentConfig(scenario='ConvergenceMatrix', shape=(80, 80), rank=5, n=2000,
                           noise='none', max_iter=300, output_dir=str(tmp_path))
    rep = run_experiment(cfg)
    assert rep.finals('rsgrad-absolute')[0] < 1e-6
    assert rep.slope is None
    doc = json.loads((tmp_path / 'summary.json').read_text())
    assert doc['schema_version'] == harness.SCHEMA_VERSION and 'slope' not in doc
    tr = SolveTrace.from_csv(tmp_path / rep.rows[0]['trace_path'])
    assert len(tr) == 301


def test_accuracy_from_truth_noiseless(tmp_path):
    rep = run_experiment(small(tmp_path, scenario='AccuracyMatrix', noise='none', snr_db=None,
                               init='truth', losses=['absolute', 'huber:0.1', 'square']))
    assert all(r['final_rel_error'] < 1e-10 for r in rep.rows)
    assert not (tmp_path / 'traces').exists() or not any((tmp_path / 'traces').iterdir())


def test_rate_check_report_has_slope(tmp_path):
    cfg = small(tmp_path, scenario='RateCheck', n=(100, 200, 400), replications=2)
    rep = run_experiment(cfg)
    assert rep.slope is not None
    doc = json.loads((tmp_path / 'summary.json').read_text())
    assert doc['slope'] == rep.slope
    meds = [doc['summary']['rsgrad-absolute'][str(n)]['median'] for n in cfg.n]
    assert rep.slope == fit_rate_slope(list(zip(cfg.n, meds)))


def test_rerun_reproduces_bytes_and_threads(tmp_path, monkeypatch):
    a, b = tmp_path / 'a', tmp_path / 'b'
    monkeypatch.setenv('RLRK_THREADS', '1')
    run_experiment(small(a, baselines=['single_phase']))
    monkeypatch.setenv('RLRK_THREADS', '2')
    run_experiment(small(b, baselines=['single_phase']))
    files = sorted(p.relative_to(a) for p in a.rglob('*.csv'))
    assert files
    for f in files:
        assert (a / f).read_bytes() == (b / f).read_bytes()
    da = json.loads((a / 'summary.json').read_text())
    db = json.loads((b / 'summary.json').read_text())
    assert da['summary'] == db['summary'] and da['replications'] == db['replications']


def test_medians_permutation_invariant(tmp_path):
    rep = run_experiment(small(tmp_path, replications=4), write=False)
    vals = rep.finals('rsgrad-absolute')
    assert rep.summary['rsgrad-absolute']['150']['median'] == pytest.approx(np.median(vals[::-1]))
    shuffled = harness._summarize(list(np.random.default_rng(0).permutation(vals)))
    assert shuffled == harness._summarize(vals)


def test_memory_guard(tmp_path):
    cfg = ExperimentConfig(scenario='ConvergenceMatrix', shape=(1000, 1000), rank=1, n=300,
                           noise='none', output_dir=str(tmp_path))
    with pytest.raises(ValueError):
        run_experiment(cfg)


def test_failed_replication_is_flagged(tmp_path, monkeypatch):
    monkeypatch.setenv('RLRK_THREADS', '1')
    real = harness.rsgrad
    calls = {'k': 0}

    def flaky(*args, **kw):
        calls['k'] += 1
        if calls['k'] == 2:
            raise NumericError('synthetic failure', iteration=7)
        return real(*args, **kw)

    monkeypatch.setattr(harness, 'rsgrad', flaky)
    rep = run_experiment(small(tmp_path))
    flags = [r['failed'] for r in rep.rows]
    assert flags == [False, True, False]
    assert rep.summary['rsgrad-absolute']['150']['failures'] == 1
    assert not rep.all_failed


def test_init_compare_scenario(tmp_path):
    cfg = ExperimentConfig(scenario='InitCompare', shape=(6, 6, 6), rank=(2, 2, 2), n=150,
                           noise='student_t', nu=2.1, snr_db=14.0, inits=['shrinkage', 'hosvd',
                                                                          'shrinkage:5', 'truth'],
                           replications=2, output_dir=str(tmp_path))
    rep = run_experiment(cfg)
    assert set(rep.summary) == {'init-shrinkage', 'init-hosvd', 'init-shrinkage:5', 'init-truth'}
    assert all(v == 0 for v in rep.finals('init-truth'))


def test_tensor_convergence_scenario(tmp_path):
    cfg = ExperimentConfig(scenario='ConvergenceTensor', shape=(6, 6, 6), rank=(2, 2, 2), n=300,
                           noise='gaussian', snr_db=40.0, init='shrinkage', max_iter=100,
                           output_dir=str(tmp_path))
    rep = run_experiment(cfg)
    assert rep.finals('rsgrad-absolute')[0] < 0.1


def test_theoretical_schedule_scenario(tmp_path):
    rep = run_experiment(small(tmp_path, schedule='theoretical', replications=1, max_iter=20))
    assert not rep.rows[0]['failed']
    with pytest.raises(ValueError):
        run_experiment(small(tmp_path, schedule='theoretical', noise='student_t', nu=2.0,
                             replications=1, max_iter=5))


@pytest.fixture(scope='module')
def section_scale():
    g = gen_low_rank_matrix(80, 80, 5, [1.0] * 5, 0)
    d = gen_observations(g, 2000, noise_for_snr('gaussian', g.fro, 40.0), 1)
    return g, d, spectral_init_matrix(d, 5)


def test_single_phase_baseline_plateaus_and_matches_prefix(section_scale):
    g, d, M0 = section_scale
    cfg = SolverConfig(5, LossSpec.absolute(), PracticalSchedule(), 300)
    _, dual = rsgrad_matrix(d, cfg, M0, g.dense)
    _, single = single_phase_baseline(d, cfg, M0, g.dense)
    s = dual.switch_iteration
    assert single.switch_iteration is None
    assert dual.records[:s] == single.records[:s]
    tail = single.rel_errors[-50:]
    assert (tail.max() - tail.min()) / tail.max() < 0.05
    with pytest.raises(ValueError):
        single_phase_baseline(d, SolverConfig(5, LossSpec.absolute(),
                                              harness.ConstantSchedule(0.1), 3), M0)


def test_single_phase_baseline_noiseless_converges():
    g = gen_low_rank_matrix(20, 20, 2, [1.0, 1.0], 0)
    d = gen_observations(g, 200, NoiseSpec.none(), 1)
    cfg = SolverConfig(2, LossSpec.absolute(), PracticalSchedule(), 300)
    _, tr = single_phase_baseline(d, cfg, spectral_init_matrix(d, 2), g.dense)
    assert tr.rel_errors[-1] < 1e-6


def test_rgrad_baseline_is_square_loss_constant_step():
    g = gen_low_rank_matrix(15, 15, 2, [1.0, 1.0], 2)
    d = gen_observations(g, 300, NoiseSpec.gaussian(0.01), 3)
    M, tr = rgrad_baseline(d, 2, spectral_init_matrix(d, 2), g.dense, max_iter=150)
    assert np.all(tr.etas == 0.2 / 300)
    assert tr.rel_errors[-1] < 0.05


def write_cfg(path, **kw):
    lines = [f'{k} = {json.dumps(v)}' for k, v in kw.items()]
    path.write_text('\n'.join(lines) + '\n')
    return str(path)


def test_cli_run_and_exit_codes(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv('RLRK_THREADS', '1')
    cfg = write_cfg(tmp_path / 'c.cfg', scenario='ConvergenceMatrix', shape=[10, 10], rank=1,
                    n=80, noise='none', replications=1, max_iter=50,
                    output_dir=str(tmp_path / 'out'))
    assert cli.main(['run', cfg]) == 0
    assert (tmp_path / 'out' / 'summary.json').exists()
    assert 'rsgrad-absolute' in capsys.readouterr().out
    assert cli.main(['run', str(tmp_path / 'missing.cfg')]) == 2
    bad = write_cfg(tmp_path / 'bad.cfg', scenario='Nope', shape=[3, 3], rank=1, n=5)
    assert cli.main(['run', bad]) == 2
    assert cli.main(['rate-check', '--n-sweep', 'x']) == 2
    assert cli.main(['rate-check', '--noise', 'cauchy']) == 2
    assert cli.main([]) == 2

    def always_fail(*a, **k):
        raise NumericError('boom')
    monkeypatch.setattr(harness, 'rsgrad', always_fail)
    assert cli.main(['run', cfg]) == 3


def test_cli_rate_check(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv('RLRK_THREADS', '1')
    code = cli.main(['rate-check', '--d', '12', '--r', '1', '--n-sweep', '100,200,400',
                     '--reps', '2', '--noise', 't:2.5', '--snr-db', '30', '--max-iter', '80',
                     '--out', str(tmp_path / 'rc')])
    assert code == 0
    doc = json.loads((tmp_path / 'rc' / 'summary.json').read_text())
    assert doc['config']['noise'] == 'student_t' and doc['config']['nu'] == 2.5
    assert 'slope' in capsys.readouterr().out
