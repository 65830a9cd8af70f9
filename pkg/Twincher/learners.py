'''Exploration, the baseline and Twincher learners, their losses and acquisition scoring.

Both learners follow the same protocol: spend the query budget on a static
exploration pass, train, then answer inverse queries by proposing a start
point and refining it with Gauss-Newton. The baseline refines in observation
space. The Twincher learner refines in its latent space u.
'''
import json, warnings
from collections import namedtuple
import numpy, pandas
from scipy.spatial import cKDTree

from Twincher.errors import BudgetError, ContractError, DegeneracyError, MalformedDocumentError, VersionMismatchError
from Twincher.flow import ModelFromDict, TwincherModel
from Twincher.forward import QueryLedger
from Twincher.nets import AdamState, Mlp, train_supervised
from Twincher.seeding import stream
from Twincher.solve import GnConfig, numerical_jacobian, refine

LEARNER_FORMAT_VERSION = 1
HIDDEN_WIDTHS = (16, 16, 16, 16)
OUT_SCALE = 1.5

PairBatch = namedtuple('PairBatch', ['pa', 'ya', 'pb', 'yb'])
MinedPairs = namedtuple('MinedPairs', ['pairs', 'ia', 'ib', 'score'])

class Dataset():
    '''Exploration samples.

    Args:
        p (numpy.ndarray): Parameters, shape (N, n_p).
        y (numpy.ndarray): Observations, shape (N, n_y).
        J (numpy.ndarray, optional): Forward-difference Jacobians dy/dp, shape (N, n_y, n_p).
        source_budget (int, optional): Queries consumed to build the set.
    '''
    def __init__(self, p, y, J=None, source_budget=0):
        self.p = numpy.atleast_2d(numpy.asarray(p, dtype=float))
        self.y = numpy.atleast_2d(numpy.asarray(y, dtype=float))
        self.J = None if J is None else numpy.asarray(J, dtype=float)
        self.source_budget = int(source_budget)
        if self.p.shape[0] != self.y.shape[0]:
            raise ContractError('Dataset has %s parameter rows but %s observation rows.'%(self.p.shape[0], self.y.shape[0]))
        if self.J is not None and self.J.shape != (len(self), self.n_y, self.n_p):
            raise ContractError('Dataset Jacobians have shape %s, expected %s.'%(self.J.shape, (len(self), self.n_y, self.n_p)))

    def __len__(self):
        return self.p.shape[0]

    @property
    def n_p(self):
        return self.p.shape[1]

    @property
    def n_y(self):
        return self.y.shape[1]

    @property
    def has_jacobians(self):
        return self.J is not None

class TrainConfig():
    '''Twincher training settings.

    Loss weights, margins and optimizer settings, plus the architecture of the
    flow and the batch size used per epoch. The flow's Adam step size decays
    geometrically from `flow_lr` at the first epoch to `lr` at the last; the
    proposal net trains at `lr`. The bijection weight ramps up linearly over
    the first `warmup` share of the epochs.
    '''
    _defaults = {
        'M': 0.25,
        'sigma_margin': 0.1,
        'bij_weight': 1.0,
        'jac_weight': 1.0,
        'orient_weight': 1.0,
        'rob_weight': 0.1,
        'epochs': 2000,
        'lr': 1e-3,
        'flow_lr': 5e-3,
        'warmup': 0.25,
        'pairs_per_epoch': 256,
        'batch': 128,
        'adversarial_refine_steps': 0,
        'n_layers': 64,
        's_max': 1.0,
        'init_scale': 0.01,
        'n_hidden': None,
        'proposal_epochs': 1000,
        'patience': 10,
    }

    def __init__(self, **kwargs):
        for k in kwargs:
            if k not in self._defaults:
                raise ContractError('Unknown training setting "%s".'%k)
        for k, v in self._defaults.items():
            setattr(self, k, kwargs.get(k, v))
        if not self.M > 0:
            raise ContractError('Co-Lipschitz margin M must be positive. Got %s.'%self.M)
        for k in ('bij_weight', 'jac_weight', 'orient_weight', 'rob_weight'):
            if getattr(self, k) < 0:
                raise ContractError('Loss weight %s must be non-negative. Got %s.'%(k, getattr(self, k)))
        if not (self.lr > 0 and self.flow_lr > 0):
            raise ContractError('Learning rates must be positive. Got lr = %s, flow_lr = %s.'%(self.lr, self.flow_lr))
        if not 0 <= self.warmup <= 1:
            raise ContractError('Warm-up share must lie in [0,1]. Got %s.'%self.warmup)
        if self.batch < 2:
            raise ContractError('Training batch needs at least two samples. Got %s.'%self.batch)

    def FlowRate(self, epoch):
        '''Adam step size of the flow at `epoch`.'''
        if self.epochs < 2:
            return self.flow_lr
        return self.flow_lr*(self.lr/self.flow_lr)**(epoch/(self.epochs - 1))

    def BijectionScale(self, epoch):
        '''Warm-up factor in (0,1] applied to bij_weight at `epoch`.'''
        ramp = self.warmup*self.epochs
        return 1.0 if ramp <= 0 else min(1.0, (epoch + 1)/ramp)

    def ToDict(self):
        return {k: getattr(self, k) for k in self._defaults}

def _ledger_forward(E, ledger):
    if ledger is None:
        return E.Forward
    return lambda Q: ledger.Query(E, Q)

def explore_static(E, budget, rng, with_jacobians=False, ledger=None, fd_step=1e-7):
    '''Single passive pass of uniform random queries.

    Without Jacobians every point costs one query. With Jacobians every point
    costs n_p + 1 queries (value plus forward differences) and the pass yields
    floor(budget/(n_p+1)) points.

    Args:
        E: Forward process.
        budget (int): Query budget; ignored when `ledger` is given.
        rng (numpy.random.Generator): Sampling generator.
        with_jacobians (bool, optional): Estimate dy/dp at every point. Defaults to False.
        ledger (QueryLedger, optional): Ledger to charge. Defaults to a fresh one holding `budget`.
        fd_step (float, optional): Forward-difference step. Defaults to 1e-7.

    Raises:
        ContractError: If the budget cannot pay for a single point.

    Returns:
        Dataset
    '''
    ledger = QueryLedger(budget) if ledger is None else ledger
    cost = E.n_p + 1 if with_jacobians else 1
    n = ledger.remaining // cost
    if n < 1:
        raise ContractError('A budget of %s queries cannot pay for one point at %s queries each.'%(ledger.remaining, cost))
    start = ledger.used
    P = rng.uniform(-1, 1, (n, E.n_p))
    f = _ledger_forward(E, ledger)
    if with_jacobians:
        Y, J = numerical_jacobian(f, P, fd_step, return_value=True)
    else:
        Y, J = numpy.atleast_2d(f(P)), None
    return Dataset(P, Y, J, source_budget=ledger.used - start)

def _proposal_seed(rng):
    return int(rng.integers(0, 2**63 - 1))

def train_baseline(dataset, rng, max_epochs=1000, patience=10, lr=1e-3, gn_cfg=None, verbosity=0):
    '''Fit the inverse MLP y -> p on the exploration data.

    Raises:
        ContractError: If the dataset is empty.

    Returns:
        BaselineLearner
    '''
    if len(dataset) == 0:
        raise ContractError('Cannot train the baseline on an empty dataset.')
    net = Mlp(_proposal_seed(rng), (dataset.n_y,) + HIDDEN_WIDTHS + (dataset.n_p,), OUT_SCALE)
    net, history = train_supervised(net, dataset.y, dataset.p, max_epochs=max_epochs, patience=patience,
                                     rng=rng, lr=lr, verbosity=verbosity)
    learner = BaselineLearner(net, gn_cfg)
    learner.loss_history = history
    return learner

def _as_pairs(pairs):
    if isinstance(pairs, PairBatch):
        return pairs
    if isinstance(pairs, MinedPairs):
        return pairs.pairs
    pairs = list(pairs)
    if len(pairs) == 0:
        raise ContractError('Pair list is empty.')
    pa = numpy.array([numpy.atleast_1d(a[0]) for a, _ in pairs], dtype=float)
    ya = numpy.array([a[1] for a, _ in pairs], dtype=float)
    pb = numpy.array([numpy.atleast_1d(b[0]) for _, b in pairs], dtype=float)
    yb = numpy.array([b[1] for _, b in pairs], dtype=float)
    return PairBatch(pa, ya, pb, yb)

def loss_bijection(model, pairs, M):
    '''Squared co-Lipschitz hinge.

    mean over pairs of max(0, M|p_a - p_b| - |u(y_a) - u(y_b)|)^2. Pairs with
    u(y_a) = u(y_b) get a zero subgradient.

    Args:
        model (TwincherModel): Flow.
        pairs (PairBatch or list): ((p_a, y_a), (p_b, y_b)) pairs.
        M (float): Margin.

    Returns:
        tuple(float, numpy.ndarray): Loss and grad_theta.
    '''
    pairs = _as_pairs(pairs)
    K = pairs.pa.shape[0]
    if K == 0:
        raise ContractError('Pair list is empty.')
    Y = numpy.concatenate([pairs.ya, pairs.yb], axis=0)
    Z = model.Forward(Y)
    loss, gu = _bijection_terms(pairs.pa - pairs.pb, Z[:K,:model.n_p] - Z[K:,:model.n_p], M)
    upstream = numpy.zeros_like(Z)
    upstream[:K,:model.n_p] = gu
    upstream[K:,:model.n_p] = -gu
    grad, _ = model.Backprop(Y, upstream)
    return loss, grad

def _bijection_terms(dp_vec, du_vec, M):
    '''Hinge value and its gradient with respect to the latent differences.'''
    K = du_vec.shape[0]
    du = numpy.linalg.norm(du_vec, axis=1)
    viol = numpy.maximum(0.0, M*numpy.linalg.norm(dp_vec, axis=1) - du)
    coef = numpy.where(du > 0, -2*viol/(K*numpy.where(du > 0, du, 1.0)), 0.0)
    return float(numpy.mean(viol*viol)), coef[:,None]*du_vec

def _promote(y, J, n_y):
    Y = numpy.asarray(y, dtype=float)
    J = numpy.asarray(J, dtype=float)
    if Y.ndim == 1:
        Y, J = Y[None], J[None]
    if J.ndim != 3 or J.shape[:2] != (Y.shape[0], n_y) or Y.shape[1] != n_y:
        raise ContractError('Sample shapes y %s and J %s do not fit n_y = %s.'%(numpy.shape(y), numpy.shape(J), n_y))
    return Y, J

def _first_min_index(S):
    # lowest index among tied smallest singular values
    return numpy.argmax(S == S.min(axis=1, keepdims=True), axis=1)

def loss_local_invertibility(model, y, J, sigma_margin):
    '''Penalty on small singular values of the latent Jacobian du/dp = (du/dy) J.

    mean over samples of max(0, sigma_margin - sigma_min)^2. At tied smallest
    singular values the subgradient uses the lowest-index singular pair.

    Args:
        model (TwincherModel): Flow.
        y (numpy.ndarray): Observations, shape (n_y,) or (N, n_y).
        J (numpy.ndarray): dy/dp, shape (n_y, n_p) or (N, n_y, n_p).
        sigma_margin (float): Singular-value floor.

    Returns:
        tuple(float, numpy.ndarray): Loss and grad_theta.
    '''
    Y, Jb = _promote(y, J, model.n_y)
    _, D = model.JVP(Y, Jb)
    loss, G = _invertibility_terms(D[:,:model.n_p,:], sigma_margin)
    if not numpy.any(G != 0):
        return loss, numpy.zeros(model.n_params)
    upstream = numpy.zeros_like(D)
    upstream[:,:model.n_p,:] = G
    grad, _, _ = model.BackpropJVP(Y, Jb, None, upstream)
    return loss, grad

def _invertibility_terms(Ju, sigma_margin):
    N = Ju.shape[0]
    U, S, Vt = numpy.linalg.svd(Ju)
    idx = _first_min_index(S)
    rows = numpy.arange(N)
    gap = numpy.maximum(0.0, sigma_margin - S[rows, idx])
    G = (-2*gap/N)[:,None,None]*U[rows,:,idx][:,:,None]*Vt[rows,idx,:][:,None,:]
    return float(numpy.mean(gap*gap)), G

def _cofactors(A):
    '''Cofactor matrices of a stack of square matrices, so that d det(A)/dA = cofactors(A).'''
    n = A.shape[-1]
    if n == 1:
        return numpy.ones_like(A)
    C = numpy.empty_like(A)
    for i in range(n):
        for j in range(n):
            minor = numpy.delete(numpy.delete(A, i, axis=-2), j, axis=-1)
            C[...,i,j] = (-1)**(i + j)*numpy.linalg.det(minor)
    return C

def _orientation_terms(Ju, margin, sign):
    N = Ju.shape[0]
    gap = numpy.maximum(0.0, margin - sign*numpy.linalg.det(Ju))
    G = (-2*sign*gap/N)[:,None,None]*_cofactors(Ju)
    return float(numpy.mean(gap*gap)), G

def latent_orientation(model, y, J):
    '''Sign of the summed det((du/dy) J) over the samples; +1 on a zero sum.

    Returns:
        float: +1.0 or -1.0.
    '''
    Y, Jb = _promote(y, J, model.n_y)
    _, D = model.JVP(Y, Jb)
    return 1.0 if numpy.sum(numpy.linalg.det(D[:,:model.n_p,:])) >= 0 else -1.0

def loss_orientation(model, y, J, margin, sign=1.0):
    '''Hinge on the signed determinant of the latent Jacobian.

    mean over samples of max(0, margin - sign*det((du/dy) J))^2. The gradient
    goes through the cofactor matrix of (du/dy) J. With n_p = 1 the term asks
    u to increase (sign +1) or decrease (sign -1) along the parameter.

    Args:
        model (TwincherModel): Flow.
        y (numpy.ndarray): Observations, shape (n_y,) or (N, n_y).
        J (numpy.ndarray): dy/dp, shape (n_y, n_p) or (N, n_y, n_p).
        margin (float): Determinant floor.
        sign (float, optional): Target orientation, +1 or -1. Defaults to +1.

    Returns:
        tuple(float, numpy.ndarray): Loss and grad_theta.
    '''
    if sign not in (1, -1):
        raise ContractError('Orientation sign must be +1 or -1. Got %s.'%sign)
    Y, Jb = _promote(y, J, model.n_y)
    _, D = model.JVP(Y, Jb)
    loss, G = _orientation_terms(D[:,:model.n_p,:], margin, sign)
    if not numpy.any(G != 0):
        return loss, numpy.zeros(model.n_params)
    upstream = numpy.zeros_like(D)
    upstream[:,:model.n_p,:] = G
    grad, _, _ = model.BackpropJVP(Y, Jb, None, upstream)
    return loss, grad

def nuisance_basis(J):
    '''Orthonormal basis of the complement of span(J).

    Args:
        J (numpy.ndarray): Shape (n_y, k) or (N, n_y, k).

    Raises:
        DegeneracyError: If J has rank below k.

    Returns:
        numpy.ndarray: Shape (n_y, n_y - k) or (N, n_y, n_y - k).
    '''
    J = numpy.asarray(J, dtype=float)
    single = J.ndim == 2
    if single: J = J[None]
    U, S, _ = numpy.linalg.svd(J, full_matrices=True)
    smin = S[:,-1] if S.shape[1] else numpy.zeros(J.shape[0])
    tol = numpy.max(S, axis=1)*max(J.shape[1:])*numpy.finfo(float).eps
    bad = numpy.flatnonzero(~(smin > tol))
    if bad.size:
        raise DegeneracyError(float(smin[bad[0]]))
    N = U[:,:,J.shape[2]:]
    return N[0] if single else N

def loss_robustness(model, y, J):
    '''Latent sensitivity to nuisance directions.

    mean over samples of |(du/dy) P_perp|_F^2 where P_perp projects onto the
    orthogonal complement of span(J).

    Raises:
        DegeneracyError: If some J is rank deficient.

    Returns:
        tuple(float, numpy.ndarray): Loss and grad_theta.
    '''
    Y, Jb = _promote(y, J, model.n_y)
    Nb = nuisance_basis(Jb)
    if Nb.shape[2] == 0:
        return 0.0, numpy.zeros(model.n_params)
    _, D = model.JVP(Y, Nb)
    loss, G = _robustness_terms(D[:,:model.n_p,:])
    upstream = numpy.zeros_like(D)
    upstream[:,:model.n_p,:] = G
    grad, _, _ = model.BackpropJVP(Y, Nb, None, upstream)
    return loss, grad

def _robustness_terms(Du):
    B = Du.shape[0]
    return float(numpy.sum(Du*Du)/B), 2*Du/B

def worst_nuisance_direction(model, y, J, n_iter=20, tol=1e-8):
    '''Unit nuisance direction that moves u the most.

    Top right-singular vector of (du/dy) P_perp by power iteration, returned
    in observation coordinates.

    Returns:
        tuple(numpy.ndarray, float): Direction (n_y,) and its gain |(du/dy) d|.
    '''
    Nb = nuisance_basis(J)
    if Nb.shape[1] == 0:
        return numpy.zeros(model.n_y), 0.0
    _, D = model.JVP(y, Nb)
    A = D[:model.n_p,:]
    v = numpy.ones(A.shape[1])/numpy.sqrt(A.shape[1])
    AtA = A.T @ A
    for _ in range(n_iter):
        w = AtA @ v
        norm = numpy.linalg.norm(w)
        if norm == 0:
            break
        w = w/norm
        done = numpy.linalg.norm(w - v) < tol
        v = w
        if done:
            break
    return Nb @ v, float(numpy.linalg.norm(A @ v))

def mine_pairs(model, dataset, k, adversarial_refine_steps=0, M=0.25, batch=None, rng=None, ledger=None):
    '''Rank dataset pairs by co-Lipschitz violation.

    The score of pair (a, b) is M|p_a - p_b| - |u_a - u_b|; the k highest
    scores are returned (stable order on ties). No forward queries are issued.

    Args:
        model (TwincherModel): Flow.
        dataset (Dataset): Samples, at least two.
        k (int): Number of pairs to return.
        adversarial_refine_steps (int, optional): Must be 0; query-issuing refinement is not available in the static regime.
        M (float, optional): Margin. Defaults to 0.25.
        batch (int, optional): Rank only pairs within a random batch of this many points.
        rng (numpy.random.Generator, optional): Batch generator.
        ledger (QueryLedger, optional): Exploration ledger.

    Raises:
        ContractError: Fewer than two samples.
        BudgetError: adversarial_refine_steps > 0 without an open ledger.

    Returns:
        MinedPairs: PairBatch plus dataset indices and scores.
    '''
    N = len(dataset)
    if N < 2:
        raise ContractError('Pair mining needs at least two samples. Got %s.'%N)
    _refuse_adversarial(adversarial_refine_steps, ledger)

    if batch is not None and batch < N:
        rng = stream(0, 'pairs') if rng is None else rng
        idx = numpy.sort(rng.choice(N, batch, replace=False))
    else:
        idx = numpy.arange(N)
    u = model.Transform(dataset.y[idx]).u
    ia, ib, score = _rank_pairs(dataset.p[idx], u, M, k)
    ia, ib = idx[ia], idx[ib]
    pairs = PairBatch(dataset.p[ia], dataset.y[ia], dataset.p[ib], dataset.y[ib])
    return MinedPairs(pairs, ia, ib, score)

def _refuse_adversarial(steps, ledger=None):
    if steps <= 0:
        return
    if ledger is None or ledger.remaining <= 0:
        used = 0 if ledger is None else ledger.used
        budget = 0 if ledger is None else ledger.budget
        raise BudgetError(used, budget, steps,
                          'Adversarial pair refinement needs forward queries but the exploration ledger is closed.')
    raise ContractError('Adversarial pair refinement is only defined for the dynamic regime.')

def _rank_pairs(P, U, M, k):
    '''Row indices and scores of the k pairs with the largest M|dp| - |du|.'''
    ia, ib = numpy.triu_indices(P.shape[0], 1)
    score = M*numpy.linalg.norm(P[ia] - P[ib], axis=1) - numpy.linalg.norm(U[ia] - U[ib], axis=1)
    order = numpy.argsort(-score, kind='stable')[:k]
    return ia[order], ib[order], score[order]

LOSS_TERMS = ('bijection', 'local_invertibility', 'orientation', 'robustness')

def twincher_objective(model, p, y, J, cfg, sign=1.0, bij_scale=1.0):
    '''Weighted training loss on one batch and its gradient in theta.

    Pairs are mined within the batch as in `mine_pairs`, and the Jacobian
    terms are averaged over the same rows. A single forward pass carries the
    tangents [J | nuisance basis] and a single reverse pass returns the
    gradient of

        bij_scale*bij_weight*bijection + jac_weight*local_invertibility
        + orient_weight*orientation + rob_weight*robustness.

    Terms with zero weight are skipped and reported as NaN. The orientation
    margin is sigma_margin**n_p.

    Args:
        model (TwincherModel): Flow.
        p (numpy.ndarray): Parameters, shape (B, n_p).
        y (numpy.ndarray): Observations, shape (B, n_y).
        J (numpy.ndarray): dy/dp, shape (B, n_y, n_p).
        cfg (TrainConfig): Weights and margins.
        sign (float, optional): Target orientation of the latent Jacobian. Defaults to +1.
        bij_scale (float, optional): Extra factor on bij_weight. Defaults to 1.

    Raises:
        ContractError: Fewer than two rows or mismatched shapes.
        DegeneracyError: If some J is rank deficient and the robustness term is on.

    Returns:
        tuple(dict, float, numpy.ndarray): Loss per term, weighted total and grad_theta.
    '''
    Y, Jb = _promote(y, J, model.n_y)
    P = numpy.atleast_2d(numpy.asarray(p, dtype=float))
    n_p, B = model.n_p, Y.shape[0]
    if B < 2 or P.shape != (B, n_p):
        raise ContractError('Objective batch needs at least two rows of p with shape (B, %s). Got %s.'%(n_p, P.shape))
    weights = {'bijection': cfg.bij_weight*bij_scale, 'local_invertibility': cfg.jac_weight,
               'orientation': cfg.orient_weight, 'robustness': cfg.rob_weight if model.n_h > 0 else 0.0}
    parts = dict.fromkeys(LOSS_TERMS, numpy.nan)

    T = None
    if weights['local_invertibility'] > 0 or weights['orientation'] > 0:
        T = Jb
    if weights['robustness'] > 0:
        T = numpy.concatenate([Jb, nuisance_basis(Jb)], axis=2)
    Z, D, pullback = model.Linearize(Y, T)
    GZ = numpy.zeros_like(Z)
    GD = None if D is None else numpy.zeros_like(D)

    if weights['bijection'] > 0:
        ia, ib, _ = _rank_pairs(P, Z[:,:n_p], cfg.M, cfg.pairs_per_epoch)
        parts['bijection'], gu = _bijection_terms(P[ia] - P[ib], Z[ia,:n_p] - Z[ib,:n_p], cfg.M)
        Gu = numpy.zeros((B, n_p))
        numpy.add.at(Gu, ia, gu)
        numpy.add.at(Gu, ib, -gu)
        GZ[:,:n_p] = weights['bijection']*Gu
    if weights['local_invertibility'] > 0:
        parts['local_invertibility'], G = _invertibility_terms(D[:,:n_p,:n_p], cfg.sigma_margin)
        GD[:,:n_p,:n_p] += weights['local_invertibility']*G
    if weights['orientation'] > 0:
        parts['orientation'], G = _orientation_terms(D[:,:n_p,:n_p], cfg.sigma_margin**n_p, sign)
        GD[:,:n_p,:n_p] += weights['orientation']*G
    if weights['robustness'] > 0:
        parts['robustness'], G = _robustness_terms(D[:,:n_p,n_p:])
        GD[:,:n_p,n_p:] += weights['robustness']*G

    total = float(sum(weights[k]*parts[k] for k in LOSS_TERMS if weights[k] > 0))
    grad, _, _ = pullback(GZ, GD)
    return parts, total, grad

def train_twincher(dataset, cfg=None, rng=None, arch_seed=None, gn_cfg=None, verbosity=0):
    '''Train the flow on the weighted loss sum, then the u -> p proposal net.

    The target orientation of the latent Jacobian is the sign the fresh flow
    already has on the whole dataset. Each epoch draws a seeded batch of
    `batch` points and takes one Adam step on `twincher_objective` over it,
    with the step size from `TrainConfig.FlowRate` and the bijection weight
    scaled by `TrainConfig.BijectionScale`. Terms with zero weight are
    skipped and recorded as NaN.

    Args:
        dataset (Dataset): Exploration data with Jacobians.
        cfg (TrainConfig, optional): Settings. Defaults to TrainConfig().
        rng (numpy.random.Generator, optional): Training generator.
        arch_seed (int, optional): Flow seed. Defaults to a draw from rng.

    Raises:
        ContractError: Missing Jacobians, n_p >= n_y, or adversarial pair refinement requested.
        BudgetError: Adversarial pair refinement requested without an exploration ledger.

    Returns:
        TwincherLearner: `loss_history` has columns epoch, the four loss terms,
        total and lr; `orientation_sign` holds the target sign.
    '''
    cfg = TrainConfig() if cfg is None else cfg
    rng = stream(0, 'train') if rng is None else rng
    if not dataset.has_jacobians:
        raise ContractError('Twincher training needs a dataset with Jacobians.')
    if not dataset.n_p < dataset.n_y:
        raise ContractError('Twincher training needs n_p < n_y. Got n_p = %s, n_y = %s.'%(dataset.n_p, dataset.n_y))
    if len(dataset) < 2:
        raise ContractError('Twincher training needs at least two samples.')
    _refuse_adversarial(cfg.adversarial_refine_steps)
    arch_seed = int(rng.integers(0, 2**63 - 1)) if arch_seed is None else arch_seed
    model = TwincherModel(arch_seed, dataset.n_y, dataset.n_p, cfg.n_layers, cfg.s_max, cfg.init_scale, cfg.n_hidden)
    sign = latent_orientation(model, dataset.y, dataset.J)
    adam = AdamState(model.n_params, lr=cfg.flow_lr)
    N = len(dataset)
    rows = []
    diverged = False
    for epoch in range(cfg.epochs):
        idx = numpy.sort(rng.choice(N, min(cfg.batch, N), replace=False))
        parts, total, grad = twincher_objective(model, dataset.p[idx], dataset.y[idx], dataset.J[idx], cfg,
                                                sign, cfg.BijectionScale(epoch))
        adam.lr = cfg.FlowRate(epoch)
        rows.append((epoch,) + tuple(parts[k] for k in LOSS_TERMS) + (total, adam.lr))
        if not (numpy.isfinite(total) and numpy.all(numpy.isfinite(grad))):
            warnings.warn('Twincher training diverged at epoch %s; keeping the last finite parameters.'%epoch, RuntimeWarning)
            diverged = True
            break
        model.theta = adam.Step(model.theta, grad)
        if verbosity > 1 and epoch % 100 == 0:
            print ('epoch %s: total loss %.4e (lr %.2e)'%(epoch, total, adam.lr))

    history = pandas.DataFrame(rows, columns=['epoch'] + list(LOSS_TERMS) + ['total', 'lr'])
    U = model.Transform(dataset.y).u
    proposal = Mlp(_proposal_seed(rng), (dataset.n_p,) + HIDDEN_WIDTHS + (dataset.n_p,), OUT_SCALE)
    proposal, _ = train_supervised(proposal, U, dataset.p, max_epochs=cfg.proposal_epochs, patience=cfg.patience,
                                   rng=rng, lr=cfg.lr, verbosity=verbosity)
    learner = TwincherLearner(model, proposal, cfg, history, gn_cfg)
    learner.diverged = diverged
    learner.orientation_sign = sign
    return learner

class BaselineLearner():
    '''MLP inverse model y -> p with Gauss-Newton refinement in observation space.'''
    kind = 'baseline'

    def __init__(self, inverse_net, gn_cfg=None):
        if inverse_net.out_scale != OUT_SCALE:
            raise ContractError('Baseline inverse net must use output scale %s.'%OUT_SCALE)
        self.inverse_net = inverse_net
        self.gn_cfg = GnConfig() if gn_cfg is None else gn_cfg
        self.loss_history = None

    @property
    def n_y(self):
        return self.inverse_net.n_in

    @property
    def n_p(self):
        return self.inverse_net.n_out

    def Observe(self, y):
        '''Coordinates the refinement residual is formed in.'''
        return numpy.asarray(y, dtype=float)

    def Propose(self, y_star):
        '''Start point inverse_net(y*) clipped to the box. Issues no queries.'''
        return numpy.clip(self.inverse_net.Forward(y_star), -1, 1)

    def SolveInverse(self, E, y_star, n_steps=None, ledger=None):
        '''Refine the proposal against target y* in observation space.

        Returns:
            RefinementTrace
        '''
        return refine(_ledger_forward(E, ledger), y_star, self.Propose(y_star), self.gn_cfg, n_steps)

    def ToDict(self):
        return {'format_version': LEARNER_FORMAT_VERSION, 'kind': self.kind,
                'gn_config': _gn_to_dict(self.gn_cfg), 'inverse_net': _net_to_dict(self.inverse_net)}

    def Save(self, path):
        with open(path, 'w') as f:
            json.dump(self.ToDict(), f, indent=1)
            f.write('\n')

class TwincherLearner():
    '''Trained flow plus u -> p proposal net, refining in latent space.'''
    kind = 'twincher'

    def __init__(self, model, proposal_net, train_cfg=None, loss_history=None, gn_cfg=None):
        if proposal_net.n_in != model.n_p or proposal_net.n_out != model.n_p:
            raise ContractError('Proposal net widths (%s -> %s) do not match the latent dimension %s.'%(proposal_net.n_in, proposal_net.n_out, model.n_p))
        self.model = model
        self.proposal_net = proposal_net
        self.train_cfg = TrainConfig() if train_cfg is None else train_cfg
        self.loss_history = loss_history
        self.gn_cfg = GnConfig() if gn_cfg is None else gn_cfg
        self.diverged = False
        self.orientation_sign = None

    @property
    def n_y(self):
        return self.model.n_y

    @property
    def n_p(self):
        return self.model.n_p

    def Observe(self, y):
        return self.model.Transform(y).u

    def Propose(self, y_star):
        '''Start point proposal_net(u(y*)) clipped to the box. Issues no queries.'''
        return numpy.clip(self.proposal_net.Forward(self.Observe(y_star)), -1, 1)

    def SolveInverse(self, E, y_star, n_steps=None, ledger=None):
        '''Refine toward u* = u(y*) with residual u* - u(E(p)).

        Returns:
            RefinementTrace: Residual norms are latent-space norms.
        '''
        u_star = self.Observe(y_star)
        return refine(_ledger_forward(E, ledger), u_star, self.Propose(y_star), self.gn_cfg, n_steps, observe=self.Observe)

    def ToDict(self):
        return {'format_version': LEARNER_FORMAT_VERSION, 'kind': self.kind,
                'gn_config': _gn_to_dict(self.gn_cfg), 'train_config': self.train_cfg.ToDict(),
                'flow': self.model.ToDict(), 'proposal_net': _net_to_dict(self.proposal_net)}

    def Save(self, path):
        with open(path, 'w') as f:
            json.dump(self.ToDict(), f, indent=1)
            f.write('\n')

def _net_to_dict(net):
    return {'seed': net.seed, 'widths': list(net.widths), 'out_scale': net.out_scale, 'theta': [float(v) for v in net.theta]}

def _net_from_dict(d):
    return Mlp(d['seed'], d['widths'], d['out_scale'], theta=d['theta'])

def _gn_to_dict(cfg):
    return {'lambda': cfg.lam, 'delta_max': cfg.delta_max, 'fd_step': cfg.fd_step, 'bounds': list(cfg.bounds), 'max_steps': cfg.max_steps}

def _gn_from_dict(d):
    return GnConfig(d['lambda'], d['delta_max'], d['fd_step'], tuple(d['bounds']), d['max_steps'])

def LoadLearner(path):
    '''Load a learner container written by `Save`.

    Raises:
        MalformedDocumentError, VersionMismatchError, DimensionMismatchError
    '''
    try:
        with open(path) as f:
            d = json.load(f)
    except ValueError as e:
        raise MalformedDocumentError('Could not parse learner document %s: %s'%(path, e))
    if not isinstance(d, dict) or 'format_version' not in d:
        raise MalformedDocumentError('Learner document has no format_version.')
    if d['format_version'] != LEARNER_FORMAT_VERSION:
        raise VersionMismatchError(d['format_version'], LEARNER_FORMAT_VERSION)
    try:
        gn_cfg = _gn_from_dict(d['gn_config'])
        if d['kind'] == 'baseline':
            return BaselineLearner(_net_from_dict(d['inverse_net']), gn_cfg)
        elif d['kind'] == 'twincher':
            return TwincherLearner(ModelFromDict(d['flow']), _net_from_dict(d['proposal_net']),
                                   TrainConfig(**d['train_config']), None, gn_cfg)
    except (KeyError, TypeError) as e:
        raise MalformedDocumentError('Learner document is missing or mistypes a field (%s).'%e)
    raise MalformedDocumentError('Unknown learner kind "%s".'%d['kind'])

def latent_sensitivity(learner, dataset):
    '''Smallest singular value of the stored latent Jacobian at each dataset point.

    For the Twincher learner this is sigma_min((du/dy) J_i); for the baseline,
    whose inference space is y itself, sigma_min(J_i).
    '''
    if not dataset.has_jacobians:
        raise ContractError('Sensitivity scoring needs a dataset with Jacobians.')
    if isinstance(learner, TwincherLearner):
        _, D = learner.model.JVP(dataset.y, dataset.J)
        Ju = D[:,:learner.n_p,:]
    else:
        Ju = dataset.J
    return numpy.linalg.svd(Ju, compute_uv=False)[:,-1]

def acquire_candidates(learner, dataset, n, rng=None, return_scores=False):
    '''Pick the n least invertible points of a uniform candidate pool.

    A pool of 64*n uniform points is scored by the sensitivity of its nearest
    dataset point and sorted ascending (stable, so ties keep pool order).
    Issues no forward queries.

    Raises:
        ContractError: Empty dataset or n < 1.

    Returns:
        numpy.ndarray: Candidates, shape (n, n_p); with their scores if requested.
    '''
    if len(dataset) == 0:
        raise ContractError('Acquisition needs a non-empty dataset.')
    if n < 1:
        raise ContractError('Acquisition needs n >= 1. Got %s.'%n)
    rng = stream(0, 'acquire') if rng is None else rng
    pool = rng.uniform(-1, 1, (64*n, dataset.n_p))
    sigma = latent_sensitivity(learner, dataset)
    _, nearest = cKDTree(dataset.p).query(pool)
    scores = sigma[nearest]
    order = numpy.argsort(scores, kind='stable')[:n]
    if return_scores:
        return pool[order], scores[order]
    return pool[order]
