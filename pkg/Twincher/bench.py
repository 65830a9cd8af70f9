'''Benchmark protocols: complexity estimation, trials and sweeps, residual and
budget summaries, the eta scan, the spiral demo and the gradient checks.

Every protocol is seeded through `Twincher.seeding.stream` and returns pandas
tables; `write_*` helpers persist them as CSV.
'''
import os, warnings
from collections import namedtuple
from multiprocessing import Pool
import numpy, pandas

from Twincher.errors import TwincherError
from Twincher.flow import TwincherModel
from Twincher.forward import HarmonicEntangler, NoiseChannel, QueryLedger, SpiralProcess
from Twincher.helpers import central_difference, relative_error, write_csv
from Twincher.learners import (Dataset, TrainConfig, explore_static, latent_orientation, loss_bijection,
                               loss_local_invertibility, loss_orientation, loss_robustness, mine_pairs,
                               train_baseline, train_twincher)
from Twincher.nets import Mlp
from Twincher.seeding import derive_key, stream
from Twincher.solve import GnConfig, refine

LEARNERS = ('baseline', 'twincher')
SUCCESS_TOL = 1e-2

ComplexityEstimate = namedtuple('ComplexityEstimate', ['C', 'n_trials', 'successes', 'entangler_seed'])

def estimate_complexity(E, n_trials=4000, gn_cfg=None, max_descent_steps=50, tol=1e-2, rng=None):
    '''Monte-Carlo estimate of C = -log P(random start converges to random target).

    Each trial draws a target p* and a start p_in uniformly, refines in
    observation space for `max_descent_steps` steps and succeeds when the final
    residual |E(p*) - E(p)| is below `tol`. All trials run as one batch.

    Args:
        E: Forward process.
        n_trials (int, optional): Number of trials. Defaults to 4000.
        gn_cfg (GnConfig, optional): Refinement settings. Defaults to GnConfig().
        max_descent_steps (int, optional): Steps per trial. Defaults to 50.
        tol (float, optional): Success threshold. Defaults to 1e-2.
        rng (numpy.random.Generator, optional): Defaults to stream (E.seed, 'complexity').

    Returns:
        ComplexityEstimate
    '''
    if n_trials < 1:
        raise ValueError('Complexity estimation needs n_trials >= 1. Got %s.'%n_trials)
    gn_cfg = GnConfig() if gn_cfg is None else gn_cfg
    seed = getattr(E, 'seed', 0)
    rng = stream(seed, 'complexity') if rng is None else rng
    P_star = rng.uniform(-1, 1, (n_trials, E.n_p))
    P_in = rng.uniform(-1, 1, (n_trials, E.n_p))
    targets = E.Forward(P_star)
    trace = refine(E.Forward, targets, P_in, gn_cfg, max_descent_steps)
    final = numpy.linalg.norm(targets - E.Forward(trace.final), axis=1)
    successes = int(numpy.sum(final < tol))
    C = -numpy.log(max(successes, 1)/n_trials) + 0.0
    return ComplexityEstimate(float(C), int(n_trials), successes, seed)

class TrialRecord():
    '''Outcome of one trial.

    Attributes:
        residuals (list(float)): Worst-case observation residual over the test
            tasks after each refinement step (steps 0..n_refine). NaN when aborted.
        success (bool): Final residual below the success threshold.
        status (str): 'ok' or the diagnostic of an aborted trial.
    '''
    def __init__(self, entangler_seed, learner, n_calls, train_seed, w_amp, C, residuals, status='ok', success_tol=SUCCESS_TOL):
        self.entangler_seed = int(entangler_seed)
        self.learner = learner
        self.n_calls = int(n_calls)
        self.train_seed = int(train_seed)
        self.w_amp = float(w_amp)
        self.C = float(C)
        self.residuals = [float(r) for r in residuals]
        self.status = status
        self.success = bool(self.residuals[-1] < success_tol) if self.residuals else False

    def ToRow(self):
        row = {'entangler_seed': self.entangler_seed, 'learner': self.learner, 'n_calls': self.n_calls,
               'train_seed': self.train_seed, 'C': self.C}
        for i, r in enumerate(self.residuals):
            row['r%s'%i] = r
        row['success'] = self.success
        row['w_amp'] = self.w_amp
        row['status'] = self.status
        return row

def trial_columns(n_refine=5):
    '''Columns of trials.csv.'''
    return ['entangler_seed','learner','n_calls','train_seed','C'] + ['r%s'%i for i in range(n_refine+1)] + ['success']

def records_frame(records):
    '''Trial records as a DataFrame with stable row order.'''
    if len(records) == 0:
        return pandas.DataFrame(columns=trial_columns() + ['w_amp','status'])
    df = pandas.DataFrame([r.ToRow() for r in records])
    return df.sort_values(['learner','n_calls','w_amp','entangler_seed','train_seed'], kind='mergesort').reset_index(drop=True)

def worst_residuals(E, y_star, trace):
    '''Worst-case observation residual over tasks at every visited point of a batched trace.'''
    points = trace.Points()
    return [float(numpy.max(numpy.linalg.norm(y_star - E.Forward(P), axis=1))) for P in points]

def explore_and_train(E, learner_kind, n_calls, train_seed, gn_cfg=None, train_cfg=None, verbosity=0):
    '''Static exploration under a ledger of `n_calls`, closed before training.

    Returns:
        tuple: Trained learner and the exploration Dataset.
    '''
    if learner_kind not in LEARNERS:
        raise ValueError('Learner "%s" not accepted. Must be one of %s.'%(learner_kind, LEARNERS))
    gn_cfg = GnConfig() if gn_cfg is None else gn_cfg
    ledger = QueryLedger(n_calls)
    data = explore_static(E, n_calls, stream(train_seed, 'explore'), learner_kind == 'twincher', ledger, gn_cfg.fd_step)
    ledger.Close()
    if verbosity > 0:
        print ('Explored %s points with %s of %s queries.'%(len(data), ledger.used, ledger.budget))
    train_rng = stream(train_seed, 'train')
    if learner_kind == 'baseline':
        learner = train_baseline(data, train_rng, gn_cfg=gn_cfg, verbosity=verbosity)
    else:
        learner = train_twincher(data, train_cfg, train_rng, gn_cfg=gn_cfg, verbosity=verbosity)
    return learner, data

def run_trial(entangler_seed, learner_kind, n_calls, n_test=1000, n_refine=5, train_seed=0, w_amp=1.0,
              n_p=2, n_s=4, e_n=3, gn_cfg=None, train_cfg=None, n_complexity=4000, complexity_steps=50,
              complexity_tol=1e-2, success_tol=SUCCESS_TOL, C=None, verbosity=0):
    '''Explore, train and evaluate one learner on one entangler.

    The learner explores under a ledger of `n_calls` queries, which is closed
    before training. Test tasks come from stream (entangler_seed, 'test') so
    every learner sees the same targets. Learner-side failures are caught and
    returned as a record with status set and NaN residuals.

    Args:
        C (float, optional): Complexity of the entangler when already known.
            Estimated with `estimate_complexity` otherwise.

    Returns:
        TrialRecord
    '''
    if n_test < 1:
        raise ValueError('run_trial needs n_test >= 1. Got %s.'%n_test)
    if learner_kind not in LEARNERS:
        raise ValueError('Learner "%s" not accepted. Must be one of %s.'%(learner_kind, LEARNERS))
    gn_cfg = GnConfig() if gn_cfg is None else gn_cfg
    E = HarmonicEntangler(entangler_seed, n_p, n_s, e_n, w_amp)
    if C is None:
        C = estimate_complexity(E, n_complexity, gn_cfg, complexity_steps, complexity_tol).C
    if verbosity > 0:
        print ('Trial: entangler %s (w_amp %s, C = %.3f), %s learner, %s calls, train seed %s'%(entangler_seed, w_amp, C, learner_kind, n_calls, train_seed))

    try:
        learner, _ = explore_and_train(E, learner_kind, n_calls, train_seed, gn_cfg, train_cfg, verbosity)
        P_star = stream(entangler_seed, 'test').uniform(-1, 1, (n_test, n_p))
        Y_star = E.Forward(P_star)
        trace = learner.SolveInverse(E, Y_star, n_refine)
        residuals = worst_residuals(E, Y_star, trace)
        status = 'ok'
    except TwincherError as e:
        warnings.warn('Trial aborted: %s'%e, RuntimeWarning)
        residuals = [numpy.nan]*(n_refine+1)
        status = '%s: %s'%(type(e).__name__, e)
    return TrialRecord(entangler_seed, learner_kind, n_calls, train_seed, w_amp, C, residuals, status, success_tol)

def _run_task(task):
    return run_trial(**task)

_COMPLEXITY_KEYS = ('n_p', 'n_s', 'e_n', 'gn_cfg', 'n_complexity', 'complexity_steps', 'complexity_tol')

def _cell_complexity(cell):
    entangler_seed, w_amp, kwargs = cell
    defaults = {'n_p': 2, 'n_s': 4, 'e_n': 3, 'gn_cfg': None, 'n_complexity': 4000, 'complexity_steps': 50, 'complexity_tol': 1e-2}
    defaults.update({k: kwargs[k] for k in _COMPLEXITY_KEYS if k in kwargs})
    E = HarmonicEntangler(entangler_seed, defaults['n_p'], defaults['n_s'], defaults['e_n'], w_amp)
    return estimate_complexity(E, defaults['n_complexity'], defaults['gn_cfg'], defaults['complexity_steps'], defaults['complexity_tol']).C

def attach_complexity(tasks, pool=None):
    '''Estimate C once per (entangler_seed, w_amp) cell and store it in every task of the cell.

    Tasks that already carry C keep it.

    Args:
        tasks (list(dict)): Output of sweep_tasks.
        pool (multiprocessing.Pool, optional): Workers for the estimates.

    Returns:
        list(dict): The same tasks, updated in place.
    '''
    first = {}
    for task in tasks:
        key = (task['entangler_seed'], task['w_amp'])
        if task.get('C') is None and key not in first:
            first[key] = task
    args = [key + (task,) for key, task in first.items()]
    values = pool.map(_cell_complexity, args) if pool is not None else [_cell_complexity(a) for a in args]
    known = dict(zip(first, values))
    for task in tasks:
        if task.get('C') is None:
            task['C'] = known[(task['entangler_seed'], task['w_amp'])]
    return tasks

def sweep_tasks(w_amps, n_calls_grid, seeds, learners=LEARNERS, master_seed=0, **trial_kwargs):
    '''Expand the sweep grid into run_trial keyword dictionaries.

    Entangler seeds are derived from (master_seed, w_amp index, seed) so that
    every learner and budget of a cell sees the same entangler.
    '''
    tasks = []
    for i, w_amp in enumerate(w_amps):
        for seed in seeds:
            entangler_seed = derive_key(master_seed, 'sweep.entangler', i*1000003 + int(seed)) & ((1 << 63) - 1)
            for n_calls in n_calls_grid:
                for learner in learners:
                    task = dict(trial_kwargs)
                    task.update({'entangler_seed': entangler_seed, 'learner_kind': learner, 'n_calls': n_calls,
                                 'train_seed': int(seed), 'w_amp': w_amp})
                    tasks.append(task)
    return tasks

def transition_bands(records):
    '''Per (learner, n_calls): smallest C among failures and largest C among successes.

    Args:
        records (pandas.DataFrame): Output of records_frame (or trials.csv).

    Returns:
        pandas.DataFrame: Columns learner, n_calls, band_left, band_right. Undefined edges are NaN.
    '''
    rows = []
    for (learner, n_calls), group in records.groupby(['learner','n_calls'], sort=True):
        success = group.success.astype(bool)
        fails = group.C[~success]
        wins = group.C[success]
        rows.append((learner, n_calls, fails.min() if len(fails) else numpy.nan, wins.max() if len(wins) else numpy.nan))
    return pandas.DataFrame(rows, columns=['learner','n_calls','band_left','band_right'])

def sweep(w_amps, n_calls_grid, seeds, learners=LEARNERS, jobs=1, master_seed=0, **trial_kwargs):
    '''Run every trial of the grid and summarize the transition bands.

    The complexity of each entangler is estimated once and shared by all the
    trials of its cell.

    Args:
        jobs (int, optional): Worker processes. Defaults to 1; results are
            identical for any value since rows are sorted on their keys.

    Returns:
        tuple(pandas.DataFrame, pandas.DataFrame): Trial records and bands.
    '''
    tasks = sweep_tasks(w_amps, n_calls_grid, seeds, learners, master_seed, **trial_kwargs)
    if len(tasks) == 0:
        raise ValueError('Sweep grid is empty.')
    if jobs > 1:
        with Pool(jobs) as pool:
            attach_complexity(tasks, pool)
            records = pool.map(_run_task, tasks)
    else:
        attach_complexity(tasks)
        records = [_run_task(t) for t in tasks]
    df = records_frame(records)
    return df, transition_bands(df)

def residual_curves(records, c_max=1.0, n_min=8192, n_refine=5):
    '''Step-indexed worst-case residuals of the trials in the stratum C < c_max, n_calls >= n_min.

    Returns:
        pandas.DataFrame: Columns trial, learner, n_calls, C, step, residual.
    '''
    sub = records[(records.C < c_max) & (records.n_calls >= n_min)]
    rows = []
    for trial, row in sub.iterrows():
        for step in range(n_refine+1):
            rows.append((trial, row.learner, row.n_calls, row.C, step, row['r%s'%step]))
    return pandas.DataFrame(rows, columns=['trial','learner','n_calls','C','step','residual'])

def budget_scaling(records, c_max=1.0, floor=1e-10, n_refine=5):
    '''Final-step residual statistics per learner and budget over trials with C < c_max.

    Returns:
        pandas.DataFrame: Columns learner, n_calls, n_trials, mean_residual,
        median_residual, best_residual, frac_below_floor.
    '''
    col = 'r%s'%n_refine
    sub = records[records.C < c_max]
    rows = []
    for (learner, n_calls), group in sub.groupby(['learner','n_calls'], sort=True):
        r = group[col].astype(float)
        rows.append((learner, n_calls, len(r), r.mean(), r.median(), r.min(), float((r < floor).mean())))
    return pandas.DataFrame(rows, columns=['learner','n_calls','n_trials','mean_residual','median_residual','best_residual','frac_below_floor'])

def crossover(records, n_calls=8192, c_max=1.0, n_refine=5):
    '''Best-of-seeds mean final residual per learner at one budget.

    Returns:
        pandas.DataFrame: Columns learner, best_mean_residual.
    '''
    col = 'r%s'%n_refine
    sub = records[(records.C < c_max) & (records.n_calls == n_calls)]
    per_seed = sub.groupby(['learner','train_seed'])[col].mean()
    best = per_seed.groupby(level='learner').min()
    return pandas.DataFrame({'learner': best.index, 'best_mean_residual': best.values})

def eta_scan(learner, E, amplitudes, n_samples=200, rng=None, swap_prob=0.0, pool=1, n_steps=5, noise_seed=0):
    '''Inference error versus observation perturbation.

    For each amplitude, noisy observations of random p_true are inverted with
    `learner.SolveInverse` and the RMS perturbation of y and of the inferred p
    are recorded. The slope eta of dp_rms ~ eta*dy_rms is fitted through the
    origin; records with dy_rms = 0 are left out of the fit.

    Returns:
        tuple(pandas.DataFrame, dict): Records (amplitude, dy_rms, dp_rms, ratio)
        sorted by amplitude and the fit {slope, r2, max_ratio, n_used}.
    '''
    rng = stream(noise_seed, 'eta') if rng is None else rng
    rows = []
    for i, amplitude in enumerate(sorted(amplitudes)):
        if amplitude < 0:
            raise ValueError('Noise amplitudes must be non-negative. Got %s.'%amplitude)
        P_true = rng.uniform(-1, 1, (n_samples, E.n_p))
        y_clean = E.Forward(P_true)
        channel = NoiseChannel(amplitude, swap_prob, derive_key(noise_seed, 'eta.channel', i) & ((1 << 63) - 1), pool)
        y_noisy = channel.Apply(y_clean)
        p_hat = learner.SolveInverse(E, y_noisy, n_steps).final
        dy = float(numpy.sqrt(numpy.mean((y_noisy - y_clean)**2)))
        dp = float(numpy.sqrt(numpy.mean((p_hat - P_true)**2)))
        rows.append((float(amplitude), dy, dp, dp/dy if dy > 0 else numpy.nan))
    df = pandas.DataFrame(rows, columns=['amplitude','dy_rms','dp_rms','ratio'])
    return df, fit_eta(df)

def fit_eta(df):
    '''Least-squares slope through the origin with uncentered R^2.'''
    used = df[df.dy_rms > 0]
    if len(used) < len(df):
        warnings.warn('%s eta records with dy_rms = 0 left out of the fit.'%(len(df) - len(used)), RuntimeWarning)
    dy, dp = used.dy_rms.to_numpy(), used.dp_rms.to_numpy()
    if len(used) == 0:
        return {'slope': numpy.nan, 'r2': numpy.nan, 'max_ratio': numpy.nan, 'n_used': 0}
    slope = float(numpy.sum(dy*dp)/numpy.sum(dy*dy))
    ss_tot = float(numpy.sum(dp*dp))
    r2 = 1.0 - float(numpy.sum((dp - slope*dy)**2))/ss_tot if ss_tot > 0 else numpy.nan
    return {'slope': slope, 'r2': r2, 'max_ratio': float(used.ratio.max()), 'n_used': int(len(used))}

def is_strictly_monotone(x):
    d = numpy.diff(numpy.asarray(x, dtype=float))
    return bool(numpy.all(d > 0) or numpy.all(d < 0))

def spiral_demo(train_budget=512, grid_resolution=64, seed=0, train_cfg=None, n_path=512, n_hidden=8, verbosity=0):
    '''Train a one-parameter Twincher on the spiral and check that u1 orders the spiral.

    Args:
        n_hidden (int, optional): Conditioner width used when `train_cfg.n_hidden`
            is None. Defaults to 8.

    Returns:
        tuple: grid DataFrame (y1, y2, u1), path DataFrame (p, u1_initial, u1),
        report dict (monotone_before, monotone_after, diverged, final_loss) and
        the loss history.
    '''
    if grid_resolution < 16:
        raise ValueError('Spiral grid resolution must be at least 16. Got %s.'%grid_resolution)
    S = SpiralProcess()
    data = explore_static(S, train_budget, stream(seed, 'spiral.explore'), with_jacobians=True)
    cfg = TrainConfig() if train_cfg is None else train_cfg
    if cfg.n_hidden is None:
        cfg = TrainConfig(**dict(cfg.ToDict(), n_hidden=n_hidden))
    arch_seed = derive_key(seed, 'spiral.arch') & ((1 << 63) - 1)
    initial = TwincherModel(arch_seed, 2, 1, cfg.n_layers, cfg.s_max, cfg.init_scale, cfg.n_hidden)
    learner = train_twincher(data, cfg, stream(seed, 'spiral.train'), arch_seed=arch_seed, verbosity=verbosity)

    p = numpy.linspace(-1, 1, n_path)
    Y_path = S.Forward(p[:,None])
    u_before = initial.Transform(Y_path).u[:,0]
    u_after = learner.model.Transform(Y_path).u[:,0]

    axis = numpy.linspace(-0.95, 0.95, grid_resolution)
    g1, g2 = numpy.meshgrid(axis, axis, indexing='ij')
    Y_grid = numpy.stack([g1.ravel(), g2.ravel()], axis=1)
    grid = pandas.DataFrame({'y1': Y_grid[:,0], 'y2': Y_grid[:,1], 'u1': learner.model.Transform(Y_grid).u[:,0]})
    path = pandas.DataFrame({'p': p, 'u1_initial': u_before, 'u1': u_after})

    history = learner.loss_history
    report = {'monotone_before': is_strictly_monotone(u_before),
              'monotone_after': (not learner.diverged) and is_strictly_monotone(u_after),
              'diverged': learner.diverged,
              'final_loss': float(history.total.iloc[-1]) if len(history) else numpy.nan}
    return grid, path, report, history

def _theta_derivative(model, fun, step=1e-6):
    theta0 = model.theta.copy()
    def _at(theta):
        model.theta = theta
        return fun()
    try:
        return central_difference(_at, theta0, step)
    finally:
        model.theta = theta0

def check_gradients(seed=0, n_configs=20, tol=1e-4, svd_tol=1e-3):
    '''Compare every analytic gradient with central finite differences.

    Covers flow backprop (parameters and input), MLP backprop and the four
    Twincher losses on `n_configs` seeded random configurations. The local
    invertibility loss uses `svd_tol` since singular values are only piecewise
    smooth.

    Returns:
        pandas.DataFrame: Columns check, config, max_rel_err, tol, passed.
    '''
    rows = []
    for i in range(n_configs):
        rng = stream(seed, 'gradcheck', i)
        n_y = int(rng.integers(3, 6))
        n_p = int(rng.integers(1, n_y))
        model = TwincherModel(int(rng.integers(0, 2**31)), n_y, n_p, n_layers=3, s_max=1.0, init_scale=0.5)
        Y = rng.uniform(-1, 1, (4, n_y))
        G = rng.normal(size=(4, n_y))

        grad, gy = model.Backprop(Y, G)
        fd = _theta_derivative(model, lambda: numpy.sum(G*model.Forward(Y)))
        rows.append(('flow_theta', i, relative_error(grad, fd), tol))
        J = model.Jacobian(Y)
        rows.append(('flow_input', i, relative_error(gy, numpy.einsum('nij,ni->nj', J, G)), tol))

        net = Mlp(int(rng.integers(0, 2**31)), (n_y, 5, 5, n_p), 1.5)
        X = rng.uniform(-1, 1, (4, n_y))
        Gn = rng.normal(size=(4, n_p))
        ngrad, _ = net.Backprop(X, Gn)
        nfd = _theta_derivative(net, lambda: numpy.sum(Gn*net.Forward(X)))
        rows.append(('mlp_theta', i, relative_error(ngrad, nfd), tol))

        P = rng.uniform(-1, 1, (6, n_p))
        Ys = rng.uniform(-1, 1, (6, n_y))
        Js = rng.normal(size=(6, n_y, n_p))
        data = Dataset(P, Ys, Js)
        mined = mine_pairs(model, data, 8, M=4.0)
        loss, lgrad = loss_bijection(model, mined, 4.0)
        lfd = _theta_derivative(model, lambda: loss_bijection(model, mined, 4.0)[0])
        rows.append(('loss_bijection', i, relative_error(lgrad, lfd), tol))

        loss, lgrad = loss_local_invertibility(model, Ys, Js, 10.0)
        lfd = _theta_derivative(model, lambda: loss_local_invertibility(model, Ys, Js, 10.0)[0])
        rows.append(('loss_local_invertibility', i, relative_error(lgrad, lfd), svd_tol))

        sign = latent_orientation(model, Ys, Js)
        loss, lgrad = loss_orientation(model, Ys, Js, 100.0, sign)
        lfd = _theta_derivative(model, lambda: loss_orientation(model, Ys, Js, 100.0, sign)[0])
        rows.append(('loss_orientation', i, relative_error(lgrad, lfd), tol))

        loss, lgrad = loss_robustness(model, Ys, Js)
        lfd = _theta_derivative(model, lambda: loss_robustness(model, Ys, Js)[0])
        rows.append(('loss_robustness', i, relative_error(lgrad, lfd), tol))

    df = pandas.DataFrame(rows, columns=['check','config','max_rel_err','tol'])
    df['passed'] = df.max_rel_err < df.tol
    return df

def write_trials(records, out_dir, n_refine=5):
    write_csv(records[trial_columns(n_refine)], os.path.join(out_dir, 'trials.csv'))

def write_eta(df, out_dir):
    write_csv(df[['amplitude','dy_rms','dp_rms','ratio']], os.path.join(out_dir, 'eta.csv'))

def write_spiral(grid, path, out_dir):
    write_csv(grid[['y1','y2','u1']], os.path.join(out_dir, 'spiral_grid.csv'))
    write_csv(path[['p','u1']], os.path.join(out_dir, 'spiral_path.csv'))
