"""Command line entry point: ``rlrk run <config>`` and ``rlrk rate-check``."""
import argparse
import sys

from .harness import ExperimentConfig, load_config, run_experiment

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3


def _int_list(text):
    try:
        vals = [int(v) for v in text.split(',') if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f'expected comma-separated integers, got {text!r}')
    if not vals:
        raise argparse.ArgumentTypeError('empty list')
    return vals


def _noise(text):
    """``none``, ``gaussian`` or ``t:<nu>``."""
    kind, _, arg = text.partition(':')
    if kind == 'none' and not arg:
        return 'none', None
    if kind == 'gaussian' and not arg:
        return 'gaussian', None
    if kind == 't' and arg:
        try:
            return 'student_t', float(arg)
        except ValueError:
            pass
    raise argparse.ArgumentTypeError(f'noise must be none, gaussian or t:<nu>, got {text!r}')


def build_parser():
    p = argparse.ArgumentParser(prog='rlrk', description='Robust low-rank estimation by '
                                'Riemannian sub-gradient descent.')
    sub = p.add_subparsers(dest='command', required=True)

    run = sub.add_parser('run', help='run an experiment described by a config file')
    run.add_argument('config', help='file of "key = value" lines')

    rc = sub.add_parser('rate-check', help='fit the error-vs-n slope on square matrices')
    rc.add_argument('--d', type=int, default=80, help='side length d of the d x d truth')
    rc.add_argument('--r', type=int, default=5, help='rank of the truth')
    rc.add_argument('--n-sweep', type=_int_list, default=[2000, 4000, 8000],
                    help='comma-separated sample sizes, at least three')
    rc.add_argument('--loss', default='absolute',
                    help='square | absolute | huber:<delta> | quantile:<delta>')
    rc.add_argument('--noise', type=_noise, default=('gaussian', None),
                    help='none | gaussian | t:<nu>')
    rc.add_argument('--snr-db', type=float, default=40.0, help='20 log10(||M*||_F / E|xi|)')
    rc.add_argument('--reps', type=int, default=10, help='replications per sample size')
    rc.add_argument('--seed', type=int, default=0, help='root seed')
    rc.add_argument('--max-iter', type=int, default=300, help='iterations per run')
    rc.add_argument('--out', default='rlrk-rate-check', help='output directory')
    return p


def _print_report(report, out=None):
    out = out or sys.stdout
    for method, per_n in report.summary.items():
        for n, s in per_n.items():
            med = s.get('median')
            med = 'nan' if med is None else f'{med:.4e}'
            print(f'{method:24s} n={n:>6s} median={med} '
                  f'ok={s["count"]} failed={s["failures"]}', file=out)
    if report.slope is not None:
        print(f'slope {report.slope:.4f}', file=out)
    if report.summary_path:
        print(f'summary written to {report.summary_path}', file=out)


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        if args.command == 'run':
            cfg = load_config(args.config)
        else:
            kind, nu = args.noise
            cfg = ExperimentConfig(
                scenario='RateCheck', shape=(args.d, args.d), rank=args.r, n=tuple(args.n_sweep),
                noise=kind, nu=nu, snr_db=None if kind == 'none' else args.snr_db,
                losses=(args.loss,), replications=args.reps, seed=args.seed,
                max_iter=args.max_iter, output_dir=args.out)
        report = run_experiment(cfg)
    except (ValueError, OSError) as exc:
        print(f'rlrk: error: {exc}', file=sys.stderr)
        return EXIT_USAGE
    _print_report(report)
    if report.all_failed:
        print('rlrk: every replication failed numerically', file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == '__main__':
    sys.exit(main())
