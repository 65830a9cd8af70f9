'''Command-line front end.

    twincher <command> [--config FILE] [--set KEY=VALUE ...] [--out DIR] [--jobs N] [-v] [command flags]

Every command resolves a RunConfig, writes resolved_config.json, its CSV/JSON
artifacts and manifest.json to the output directory, and exits with 0 on
success, 1 on a protocol failure and 2 on a configuration error.
'''
import argparse, os, platform, sys, time
import numpy, pandas, scipy

import Twincher
from Twincher import bench
from Twincher.config import RunConfig
from Twincher.errors import ConfigError, TwincherError
from Twincher.forward import HarmonicEntangler, entangler_grid
from Twincher.helpers import arg_list_to_dict, write_csv, write_json
from Twincher.seeding import stream

# command-line flag -> configuration key
_flag_keys = {
    'seed': 'master_seed',
    'train_seed': 'train_seed',
    'learner': 'learner',
    'w_amp': 'w_amp',
    'n_calls': 'n_calls',
    'n_test': 'n_test',
    'n_trials': 'n_trials',
    'n_configs': 'n_configs',
    'out': 'out_dir',
    'jobs': 'jobs',
}
# --budget and --resolution mean different keys per command
_budget_keys = {'eta-scan': 'eta_budget', 'spiral-demo': 'train_budget'}
_resolution_keys = {'gen-entangler': 'grid_resolution', 'spiral-demo': 'grid_resolution'}

def _parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', default=None, help='JSON configuration file.')
    common.add_argument('--set', default=[], action='append', metavar='KEY=VALUE',
                        help='Configuration override, flat (lambda=0.01) or qualified (GN.lambda=0.01). Repeatable.')
    common.add_argument('--out', default=None, help='Output directory.')
    common.add_argument('--jobs', default=None, type=int, help='Worker processes for sweeps.')
    common.add_argument('-v', '--verbose', default=0, action='count', help='Print progress. Repeat for more.')

    parser = argparse.ArgumentParser(prog='twincher', description='Bijective representation learning benchmarks.')
    sub = parser.add_subparsers(dest='command')

    p = sub.add_parser('gen-entangler', parents=[common], help='Write an entangler description and its output grid.')
    p.add_argument('--seed', type=int)
    p.add_argument('--w-amp', type=float)
    p.add_argument('--resolution', type=int)

    p = sub.add_parser('complexity', parents=[common], help='Estimate the complexity C of an entangler.')
    p.add_argument('--seed', type=int)
    p.add_argument('--w-amp', type=float)
    p.add_argument('--n-trials', type=int)

    p = sub.add_parser('trial', parents=[common], help='Run one trial.')
    p.add_argument('--seed', type=int, help='Entangler seed.')
    p.add_argument('--train-seed', type=int)
    p.add_argument('--learner', choices=bench.LEARNERS)
    p.add_argument('--w-amp', type=float)
    p.add_argument('--n-calls', type=int)
    p.add_argument('--n-test', type=int)

    p = sub.add_parser('sweep', parents=[common], help='Run the (w_amp, n_calls, seed, learner) grid.')
    p.add_argument('--seed', type=int, help='Master seed of the entangler draws.')

    p = sub.add_parser('eta-scan', parents=[common], help='Inference error versus observation noise.')
    p.add_argument('--seed', type=int, help='Entangler seed.')
    p.add_argument('--train-seed', type=int)
    p.add_argument('--w-amp', type=float)
    p.add_argument('--budget', type=int)

    p = sub.add_parser('spiral-demo', parents=[common], help='Train on the spiral and check monotonicity.')
    p.add_argument('--seed', type=int)
    p.add_argument('--budget', type=int)
    p.add_argument('--resolution', type=int)

    p = sub.add_parser('check-gradients', parents=[common], help='Finite-difference gradient checks.')
    p.add_argument('--seed', type=int)
    p.add_argument('--n-configs', type=int)
    return parser

def LoadOptions(args):
    '''Build the RunConfig from parsed arguments.

    Precedence: defaults, config file, --set overrides, dedicated flags, then
    the TWINCHER_OUT environment variable for the output directory.

    Raises:
        ConfigError: See RunConfig.
    '''
    try:
        overrides = arg_list_to_dict(args.set)
    except ValueError as e:
        raise ConfigError('--set', str(e))
    cfg = RunConfig(args.config, overrides)
    if args.command is not None:
        cfg.Set('command', args.command)
    flags = {}
    for flag, key in _flag_keys.items():
        val = getattr(args, flag, None)
        if val is not None:
            flags[key] = val
    if getattr(args, 'budget', None) is not None:
        flags[_budget_keys[args.command]] = args.budget
    if getattr(args, 'resolution', None) is not None:
        flags[_resolution_keys[args.command]] = args.resolution
    if args.verbose:
        flags['verbosity'] = args.verbose
    cfg.Update(flags)
    if os.environ.get('TWINCHER_OUT'):
        cfg.Set('out_dir', os.environ['TWINCHER_OUT'])
    return cfg.Validate()

def _entangler(cfg):
    return HarmonicEntangler(cfg['master_seed'], cfg['n_p'], cfg['n_s'], cfg['e_n'], cfg['w_amp'])

def _gen_entangler(cfg, out):
    E = _entangler(cfg)
    E.Save(os.path.join(out, 'entangler.json'))
    if E.n_p >= 2:
        write_csv(entangler_grid(E, cfg['grid_resolution']), os.path.join(out, 'entangler_grid.csv'))
    return True

def _complexity(cfg, out):
    E = _entangler(cfg)
    est = bench.estimate_complexity(E, cfg['n_trials'], cfg.GetGnConfig(), cfg['max_descent_steps'], cfg['tol'])
    if cfg['verbosity'] > 0:
        print ('Entangler %s (w_amp %s): C = %.4f (%s/%s successes)'%(E.seed, E.w_amp, est.C, est.successes, est.n_trials))
    df = pandas.DataFrame([{'entangler_seed': est.entangler_seed, 'w_amp': E.w_amp, 'n_trials': est.n_trials,
                            'successes': est.successes, 'C': est.C}])
    write_csv(df, os.path.join(out, 'complexity.csv'))
    return True

def _trial_kwargs(cfg):
    return {'n_test': cfg['n_test'], 'n_refine': cfg['n_refine'], 'n_p': cfg['n_p'], 'n_s': cfg['n_s'],
            'e_n': cfg['e_n'], 'gn_cfg': cfg.GetGnConfig(), 'train_cfg': cfg.GetTrainConfig(),
            'n_complexity': cfg['n_trials'], 'complexity_steps': cfg['max_descent_steps'],
            'complexity_tol': cfg['tol'], 'success_tol': cfg['success_tol'], 'verbosity': cfg['verbosity']}

def _trial(cfg, out):
    record = bench.run_trial(cfg['master_seed'], cfg['learner'], cfg['n_calls'], train_seed=cfg['train_seed'],
                             w_amp=cfg['w_amp'], **_trial_kwargs(cfg))
    bench.write_trials(bench.records_frame([record]), out, cfg['n_refine'])
    if record.status != 'ok':
        sys.stderr.write('Trial aborted: %s\n'%record.status)
    return record.status == 'ok'

def _sweep(cfg, out):
    records, bands = bench.sweep(cfg['w_amps'], cfg['n_calls_grid'], cfg['seeds'], tuple(cfg['learners']),
                                 jobs=cfg['jobs'], master_seed=cfg['master_seed'], **_trial_kwargs(cfg))
    n_refine = cfg['n_refine']
    bench.write_trials(records, out, n_refine)
    write_csv(bands, os.path.join(out, 'bands.csv'))
    write_csv(bench.residual_curves(records, n_refine=n_refine), os.path.join(out, 'residual_curves.csv'))
    write_csv(bench.budget_scaling(records, n_refine=n_refine), os.path.join(out, 'budget_scaling.csv'))
    if cfg['verbosity'] > 0:
        print (bands.to_string(index=False))
    return True

def _eta_scan(cfg, out):
    E = _entangler(cfg)
    learner, _ = bench.explore_and_train(E, cfg['eta_learner'], cfg['eta_budget'], cfg['train_seed'],
                                         cfg.GetGnConfig(), cfg.GetTrainConfig(), cfg['verbosity'])
    records, fit = bench.eta_scan(learner, E, cfg['amplitudes'], cfg['n_samples'], stream(cfg['master_seed'], 'eta'),
                                  cfg['swap_prob'], cfg['pool'], cfg['n_refine'], noise_seed=cfg['master_seed'])
    bench.write_eta(records, out)
    write_csv(pandas.DataFrame([fit]), os.path.join(out, 'eta_fit.csv'))
    if cfg['verbosity'] > 0:
        print ('eta = %.4g (R^2 = %.4f, max ratio %.4g)'%(fit['slope'], fit['r2'], fit['max_ratio']))
    return True

def _spiral_demo(cfg, out):
    grid, path, report, history = bench.spiral_demo(cfg['train_budget'], cfg['grid_resolution'], cfg['master_seed'],
                                                    cfg.GetTrainConfig(), n_hidden=cfg['spiral_hidden'],
                                                    verbosity=cfg['verbosity'])
    bench.write_spiral(grid, path, out)
    write_csv(pandas.DataFrame([report]), os.path.join(out, 'spiral_report.csv'))
    write_csv(history, os.path.join(out, 'spiral_loss.csv'))
    if cfg['verbosity'] > 0:
        print ('Monotone before training: %s, after: %s'%(report['monotone_before'], report['monotone_after']))
    return not report['diverged']

def _check_gradients(cfg, out):
    df = bench.check_gradients(cfg['master_seed'], cfg['n_configs'])
    write_csv(df, os.path.join(out, 'gradients.csv'))
    failed = df[~df.passed]
    for _, row in failed.iterrows():
        sys.stderr.write('Gradient check %s failed on config %s: relative error %.3g > %.1g\n'%(row.check, row.config, row.max_rel_err, row.tol))
    return len(failed) == 0

_commands = {
    'gen-entangler': _gen_entangler,
    'complexity': _complexity,
    'trial': _trial,
    'sweep': _sweep,
    'eta-scan': _eta_scan,
    'spiral-demo': _spiral_demo,
    'check-gradients': _check_gradients,
}

def versions():
    return {'python': platform.python_version(), 'numpy': numpy.__version__, 'scipy': scipy.__version__,
            'pandas': pandas.__version__, 'Twincher': Twincher.__version__}

def run(argv=None):
    '''Run one command.

    Args:
        argv (list(str), optional): Arguments without the program name. Defaults to sys.argv[1:].

    Returns:
        int: 0 on success, 1 on a protocol failure, 2 on a configuration error.
    '''
    start = time.time()
    try:
        args = _parser().parse_args(argv)
    except SystemExit as e:
        return 2 if e.code else 0
    if args.command is None:
        sys.stderr.write('No command given. Must be one of %s.\n'%(tuple(_commands),))
        return 2
    try:
        cfg = LoadOptions(args)
    except ConfigError as e:
        sys.stderr.write('Configuration error (%s): %s\n'%(e.key, e))
        return 2

    out = cfg['out_dir']
    os.makedirs(out, exist_ok=True)
    cfg.SaveOut(out)
    try:
        ok = _commands[cfg.command](cfg, out)
    except (TwincherError, ValueError, FloatingPointError) as e:
        sys.stderr.write('%s failed: %s: %s\n'%(cfg.command, type(e).__name__, e))
        ok = False
    code = 0 if ok else 1
    write_json({'command': cfg.command, 'config': cfg.ToDict(), 'wall_time_s': time.time() - start,
                'versions': versions(), 'exit_code': code}, os.path.join(out, 'manifest.json'))
    return code

def main(): # pragma: no cover
    sys.exit(run())
