'''Walk through the Twincher API on a single entangler.

Each step below is also available from the `twincher` command; this script
shows how to drive the pieces directly and inspect intermediate objects.
'''
import os
import numpy
from Twincher import bench
from Twincher.forward import HarmonicEntangler, QueryLedger
from Twincher.helpers import write_csv
from Twincher.learners import TrainConfig, acquire_candidates, explore_static, train_baseline, train_twincher, worst_nuisance_direction
from Twincher.seeding import stream
from Twincher.solve import GnConfig

OUT = 'example_out'

def make_entangler(seed=1, w_amp=0.75):
    '''Draw an entangler and estimate how hard it is to invert.

    Args:
        seed (int): Entangler seed.
        w_amp (float): Frequency amplitude. Larger values give larger C.

    Returns:
        HarmonicEntangler
    '''
    E = HarmonicEntangler(seed, w_amp=w_amp)
    est = bench.estimate_complexity(E, n_trials=1000)
    print ('Entangler %s (w_amp %s): C = %.3f'%(seed, w_amp, est.C))
    E.Save(os.path.join(OUT, 'entangler.json'))
    return E

def explore(E, budget=2048):
    '''Spend the whole budget on one static pass, with Jacobians.'''
    ledger = QueryLedger(budget)
    data = explore_static(E, budget, stream(0, 'explore'), with_jacobians=True, ledger=ledger)
    ledger.Close()
    print ('%s points for %s queries'%(len(data), ledger.used))
    return data

def compare(E, data, n_test=200):
    '''Train both learners on the same data and compare refinement curves.'''
    gn = GnConfig()
    baseline = train_baseline(data, stream(0, 'train'), gn_cfg=gn)
    twincher = train_twincher(data, TrainConfig(epochs=500), stream(0, 'train'), gn_cfg=gn, verbosity=1)
    write_csv(twincher.loss_history, os.path.join(OUT, 'twincher_loss.csv'))

    P_star = stream(E.seed, 'test').uniform(-1, 1, (n_test, E.n_p))
    Y_star = E.Forward(P_star)
    for learner in (baseline, twincher):
        residuals = bench.worst_residuals(E, Y_star, learner.SolveInverse(E, Y_star))
        print ('%-9s '%learner.kind + ' '.join('%.2e'%r for r in residuals))
    return twincher

def inspect(learner, data):
    '''Where is the learned latent least invertible, and which nuisance direction hurts most?'''
    candidates, scores = acquire_candidates(learner, data, 5, return_scores=True)
    for p, s in zip(candidates, scores):
        print ('p = (%+.2f, %+.2f)  sigma_min = %.3g'%(p[0], p[1], s))
    direction, gain = worst_nuisance_direction(learner.model, data.y[0], data.J[0])
    print ('Worst nuisance direction at the first sample: %s (gain %.3g)'%(numpy.round(direction, 3), gain))

if __name__ == '__main__':
    os.makedirs(OUT, exist_ok=True)
    E = make_entangler()
    data = explore(E)
    twincher = compare(E, data)
    inspect(twincher, data)

    # Noise robustness of the trained learner
    df, fit = bench.eta_scan(twincher, E, [0.001, 0.002, 0.005, 0.01])
    print ('eta = %.3g'%fit['slope'])
