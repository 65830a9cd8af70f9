import numpy, pandas, pytest

from Twincher import bench
from Twincher.forward import HarmonicEntangler, LinearProcess
from Twincher.learners import TrainConfig
from Twincher.seeding import stream
from Twincher.solve import GnConfig, refine

class ObservationLearner():
    '''Starts every refinement at the (clipped) observation itself.'''
    def __init__(self):
        self.gn_cfg = GnConfig()
    def SolveInverse(self, E, y_star, n_steps=None, ledger=None):
        return refine(E.Forward, y_star, numpy.clip(y_star, -1, 1), self.gn_cfg, n_steps)

def _records():
    rows = []
    for learner, n_calls, C, success, r in [
            ('baseline', 512, 0.1, True, 1e-3), ('baseline', 512, 0.5, False, 0.2), ('baseline', 512, 0.3, False, 0.1),
            ('baseline', 512, 0.2, True, 5e-3), ('twincher', 512, 0.5, True, 1e-4), ('twincher', 8192, 0.2, True, 1e-12),
            ('twincher', 8192, 1.5, False, 0.5), ('baseline', 8192, 0.4, True, 1e-6)]:
        row = {'entangler_seed': 0, 'learner': learner, 'n_calls': n_calls, 'train_seed': len(rows) % 2, 'C': C, 'success': success}
        for i in range(6):
            row['r%s'%i] = r*(6 - i)
        row['r5'] = r
        rows.append(row)
    return pandas.DataFrame(rows)

class TestComplexity():
    def test__identity(self):
        est = bench.estimate_complexity(LinearProcess(), 200, rng=stream(0, 'c'))
        assert est.C == 0.0
        assert est.successes == 200

    def test__no_success(self):
        est = bench.estimate_complexity(LinearProcess(), 50, tol=0.0, rng=stream(0, 'c'))
        assert est.successes == 0
        assert est.C == pytest.approx(numpy.log(50))

    def test__determinism(self):
        E = HarmonicEntangler(2)
        a = bench.estimate_complexity(E, 100, max_descent_steps=10)
        b = bench.estimate_complexity(E, 100, max_descent_steps=10)
        assert a == b
        assert 0 <= a.C <= numpy.log(100)

def test__trial_record():
    rec = bench.TrialRecord(1, 'baseline', 512, 0, 1.0, 0.3, [0.5]*5 + [5e-3])
    assert rec.success
    assert not bench.TrialRecord(1, 'baseline', 512, 0, 1.0, 0.3, [0.5]*5 + [2e-2]).success
    assert not bench.TrialRecord(1, 'baseline', 512, 0, 1.0, 0.3, [numpy.nan]*6).success
    assert list(rec.ToRow())[:len(bench.trial_columns())] == bench.trial_columns()

def test__transition_bands():
    records = _records()
    bands = bench.transition_bands(records)
    assert list(bands.columns) == ['learner', 'n_calls', 'band_left', 'band_right']
    for _, row in bands.iterrows():
        group = records[(records.learner == row.learner) & (records.n_calls == row.n_calls)]
        fails, wins = group.C[~group.success], group.C[group.success]
        assert row.band_left == fails.min() or (len(fails) == 0 and numpy.isnan(row.band_left))
        assert row.band_right == wins.max() or (len(wins) == 0 and numpy.isnan(row.band_right))
    b512 = bands[(bands.learner == 'baseline') & (bands.n_calls == 512)].iloc[0]
    assert (b512.band_left, b512.band_right) == (0.3, 0.2)
    t512 = bands[(bands.learner == 'twincher') & (bands.n_calls == 512)].iloc[0]
    assert numpy.isnan(t512.band_left) and t512.band_right == 0.5

def test__csv_round_trip(tmp_path):
    records = _records()
    bench.write_trials(records, str(tmp_path))
    loaded = pandas.read_csv(tmp_path/'trials.csv', float_precision='round_trip')
    assert list(loaded.columns) == bench.trial_columns()
    assert bench.transition_bands(loaded).equals(bench.transition_bands(records))

def test__residual_curves():
    curves = bench.residual_curves(_records())
    assert list(curves.columns) == ['trial', 'learner', 'n_calls', 'C', 'step', 'residual']
    assert len(curves) == 2*6
    assert set(curves.learner) == {'twincher', 'baseline'}
    assert curves[curves.step == 5].residual.tolist() == [1e-12, 1e-6]

def test__budget_scaling():
    scaling = bench.budget_scaling(_records())
    row = scaling[(scaling.learner == 'baseline') & (scaling.n_calls == 512)].iloc[0]
    assert row.n_trials == 4
    assert row.best_residual == 1e-3
    assert row.median_residual == pytest.approx((5e-3 + 0.1)/2)
    row = scaling[(scaling.learner == 'twincher') & (scaling.n_calls == 8192)].iloc[0]
    assert row.n_trials == 1 and row.frac_below_floor == 1.0

def test__crossover():
    out = bench.crossover(_records())
    assert dict(zip(out.learner, out.best_mean_residual)) == {'baseline': 1e-6, 'twincher': 1e-12}

class TestEta():
    def test__fit(self):
        df = pandas.DataFrame({'amplitude': [1, 2, 3], 'dy_rms': [0.1, 0.2, 0.3], 'dp_rms': [0.21, 0.39, 0.62]})
        df['ratio'] = df.dp_rms/df.dy_rms
        fit = bench.fit_eta(df)
        slope = numpy.linalg.lstsq(df.dy_rms.to_numpy()[:,None], df.dp_rms.to_numpy(), rcond=None)[0][0]
        assert fit['slope'] == pytest.approx(slope, abs=1e-10)
        assert 0.99 < fit['r2'] <= 1
        assert fit['n_used'] == 3

    def test__zero_excluded(self):
        df = pandas.DataFrame({'amplitude': [0, 1], 'dy_rms': [0.0, 0.1], 'dp_rms': [0.0, 0.2], 'ratio': [numpy.nan, 2.0]})
        with pytest.warns(RuntimeWarning):
            fit = bench.fit_eta(df)
        assert fit['n_used'] == 1 and fit['slope'] == pytest.approx(2.0)

    def test__scan(self):
        df, fit = bench.eta_scan(ObservationLearner(), LinearProcess(), [0.01, 0.0, 0.005], n_samples=50, rng=stream(1, 'eta'))
        assert df.amplitude.tolist() == [0.0, 0.005, 0.01]
        assert df.dp_rms.iloc[0] < 1e-4
        assert numpy.isnan(df.ratio.iloc[0])
        assert df.dy_rms.iloc[2] > df.dy_rms.iloc[1] > 0
        assert fit['n_used'] == 2

def test__is_strictly_monotone():
    assert bench.is_strictly_monotone([1, 2, 3])
    assert bench.is_strictly_monotone([3, 2, 1])
    assert not bench.is_strictly_monotone([1, 2, 2])
    assert not bench.is_strictly_monotone([1, 3, 2])

def test__check_gradients():
    df = bench.check_gradients(seed=1, n_configs=2)
    assert list(df.columns) == ['check', 'config', 'max_rel_err', 'tol', 'passed']
    assert len(df) == 14
    assert set(df.check) == {'flow_theta', 'flow_input', 'mlp_theta', 'loss_bijection', 'loss_local_invertibility',
                             'loss_orientation', 'loss_robustness'}
    assert df.passed.all()

def _tiny_cfg():
    return TrainConfig(epochs=3, n_layers=4, pairs_per_epoch=16, batch=8, proposal_epochs=5)

class TestTrials():
    def test__baseline(self):
        kwargs = dict(n_test=20, w_amp=0.5, n_complexity=50, complexity_steps=10)
        rec = bench.run_trial(1, 'baseline', 64, **kwargs)
        assert rec.status == 'ok'
        assert len(rec.residuals) == 6
        assert numpy.all(numpy.isfinite(rec.residuals))
        assert rec.success == (rec.residuals[-1] < 1e-2)
        assert bench.run_trial(1, 'baseline', 64, **kwargs).residuals == rec.residuals

    def test__twincher(self):
        rec = bench.run_trial(1, 'twincher', 30, n_test=10, w_amp=0.5, n_complexity=50, complexity_steps=10, train_cfg=_tiny_cfg())
        assert rec.status == 'ok'
        assert len(rec.residuals) == 6

    def test__invalid(self):
        with pytest.raises(ValueError):
            bench.run_trial(1, 'oracle', 64)
        with pytest.raises(ValueError):
            bench.run_trial(1, 'baseline', 64, n_test=0)

    def test__sweep(self):
        records, bands = bench.sweep([0.5], [32], [0], ('baseline',), n_test=10, n_complexity=50, complexity_steps=10)
        assert len(records) == 1
        assert len(bands) == 1
        tasks = bench.sweep_tasks([0.5, 1.0], [32, 64], [0, 1], master_seed=3)
        assert len(tasks) == 16
        seeds = {(t['w_amp'], t['train_seed']): t['entangler_seed'] for t in tasks}
        assert len(set(seeds.values())) == 4

def test__spiral_demo():
    grid, path, report, history = bench.spiral_demo(train_budget=64, grid_resolution=16, train_cfg=_tiny_cfg())
    assert len(grid) == 256
    assert list(path.columns) == ['p', 'u1_initial', 'u1']
    assert len(path) == 512
    assert report['monotone_before'] is False
    assert len(history) == 3
    with pytest.raises(ValueError):
        bench.spiral_demo(grid_resolution=8)

class TestSweepComplexity():
    def _count(self, monkeypatch):
        calls = []
        original = bench.estimate_complexity
        def counting(E, *args, **kwargs):
            calls.append((E.seed, E.w_amp))
            return original(E, *args, **kwargs)
        monkeypatch.setattr(bench, 'estimate_complexity', counting)
        return calls

    def test__once_per_cell(self, monkeypatch):
        calls = self._count(monkeypatch)
        kwargs = dict(n_test=5, n_complexity=50, complexity_steps=10)
        records, _ = bench.sweep([0.5], [32, 48], [0], ('baseline',), **kwargs)
        assert len(records) == 2
        assert len(calls) == 1
        assert records.C.nunique() == 1
        seed = int(records.entangler_seed.iloc[0])
        alone = bench.run_trial(seed, 'baseline', 32, w_amp=0.5, **kwargs)
        assert records.C.iloc[0] == alone.C

    def test__known_complexity(self, monkeypatch):
        calls = self._count(monkeypatch)
        rec = bench.run_trial(1, 'baseline', 32, n_test=5, w_amp=0.5, C=0.25)
        assert rec.C == 0.25
        assert calls == []
        tasks = bench.sweep_tasks([0.5], [32], [0, 1], ('baseline',), n_complexity=50, complexity_steps=10)
        tasks[0]['C'] = 0.75
        bench.attach_complexity(tasks)
        assert tasks[0]['C'] == 0.75
        assert len(calls) == 1 and tasks[1]['C'] is not None

def test__complexity_grows_with_amplitude():
    medians = []
    for w_amp in (0.5, 1.0, 1.5):
        Cs = [bench.estimate_complexity(HarmonicEntangler(seed, w_amp=w_amp), 1000).C for seed in range(5)]
        medians.append(numpy.median(Cs))
    assert medians[0] <= medians[1] <= medians[2], medians

@pytest.mark.slow
def test__spiral_ordered_after_training():
    reports = []
    for seed in range(3):
        _, _, report, _ = bench.spiral_demo(512, 16, seed)
        reports.append(report)
        if report['monotone_after']:
            break
    assert reports[-1]['monotone_after'], reports

@pytest.mark.slow
def test__twincher_low_complexity_trial():
    records = []
    for seed in range(3):
        rec = bench.run_trial(11, 'twincher', 8192, n_test=200, w_amp=0.5, train_seed=seed, n_complexity=500)
        records.append(rec)
        if rec.success:
            break
    assert records[-1].status == 'ok'
    assert records[-1].residuals[-1] < 1e-2, [(r.C, r.residuals[-1]) for r in records]
