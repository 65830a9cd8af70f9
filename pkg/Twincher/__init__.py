__version__ = '1.0'

from Twincher.forward import HarmonicEntangler, LinearProcess, NoiseChannel, QueryLedger, SpiralProcess, squash, unsquash
from Twincher.flow import LatentPair, LoadCheckpoint, TwincherModel
from Twincher.nets import AdamState, Mlp, train_supervised
from Twincher.solve import GnConfig, RefinementTrace, refine
from Twincher.learners import (BaselineLearner, Dataset, LoadLearner, TrainConfig, TwincherLearner,
                               acquire_candidates, explore_static, train_baseline, train_twincher,
                               twincher_objective)
