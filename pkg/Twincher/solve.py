'''Clipped, regularized Gauss-Newton refinement with forward-difference Jacobians.'''
import numpy

from Twincher.errors import BudgetError, ContractError, NonFiniteError
from Twincher.helpers import as_batch, require_finite

class GnConfig():
    '''Gauss-Newton settings.

    Args:
        lam (float, optional): Tikhonov regularizer of the normal equations. Defaults to 1e-3.
        delta_max (float, optional): Maximum step norm. Defaults to 0.1.
        fd_step (float, optional): Forward-difference step. Defaults to 1e-7.
        bounds (tuple(float), optional): Box applied to every component. Defaults to (-1, 1).
        max_steps (int, optional): Default number of steps for `refine`. Defaults to 5.

    Raises:
        ContractError: If lam, delta_max or fd_step is not positive.
    '''
    def __init__(self, lam=1e-3, delta_max=0.1, fd_step=1e-7, bounds=(-1.0, 1.0), max_steps=5):
        for name, val in (('lambda', lam), ('delta_max', delta_max), ('fd_step', fd_step)):
            if not val > 0:
                raise ContractError('Gauss-Newton %s must be positive. Got %s.'%(name, val))
        if not bounds[0] < bounds[1]:
            raise ContractError('Gauss-Newton bounds %s are empty.'%(bounds,))
        self.lam = float(lam)
        self.delta_max = float(delta_max)
        self.fd_step = float(fd_step)
        self.bounds = (float(bounds[0]), float(bounds[1]))
        self.max_steps = int(max_steps)

class RefinementTrace():
    '''History of one refinement (or one batch of refinements).

    Attributes:
        iterates (numpy.ndarray): p^(0)..p^(n-1), shape (n, n_p) or (n, N, n_p).
        residual_norms (numpy.ndarray): Euclidean residual norm at each iterate, shape (n,) or (n, N).
        final (numpy.ndarray): p^(n).
        forward_evals (int): Forward evaluations per instance, n*(n_p+1).
    '''
    def __init__(self, iterates, residual_norms, forward_evals, final):
        self.iterates = iterates
        self.residual_norms = residual_norms
        self.forward_evals = forward_evals
        self.final = final

    @property
    def n_steps(self):
        return len(self.residual_norms)

    def Points(self):
        '''All visited points p^(0)..p^(n), stacked along the first axis.'''
        return numpy.concatenate([numpy.asarray(self.iterates).reshape((-1,) + numpy.shape(self.final)), numpy.asarray(self.final)[None]], axis=0)

def numerical_jacobian(f, p, fd_step=1e-7, return_value=False):
    '''Forward-difference Jacobian using exactly n_p + 1 calls of f.

    Args:
        f (callable): Maps (N, n_p) to (N, m). Single vectors are promoted.
        p (array_like): Point(s), shape (n_p,) or (N, n_p).
        fd_step (float, optional): Step. Defaults to 1e-7.
        return_value (bool, optional): Also return f(p). Defaults to False.

    Raises:
        NonFiniteError: If f returns a non-finite value.

    Returns:
        numpy.ndarray: J of shape (m, n_p) or (N, m, n_p); preceded by f(p) if requested.
    '''
    P = numpy.asarray(p, dtype=float)
    single = P.ndim == 1
    if single: P = P[None,:]
    n_p = P.shape[1]

    def _eval(Q):
        out = numpy.asarray(f(Q), dtype=float)
        if out.ndim == 1: out = out[None,:]
        if not numpy.all(numpy.isfinite(out)):
            raise NonFiniteError('Forward process returned non-finite values during finite differencing.')
        return out

    base = _eval(P)
    J = numpy.empty(base.shape + (n_p,))
    for j in range(n_p):
        Q = P.copy()
        Q[:,j] += fd_step
        J[:,:,j] = (_eval(Q) - base)/fd_step
    if single:
        base, J = base[0], J[0]
    return (base, J) if return_value else J

def gn_step(p, J, residual_vec, cfg):
    '''One clipped Gauss-Newton step.

    Solves (J^T J + lam I) dp = J^T r, rescales dp to norm <= delta_max and
    clips p + dp to the box.

    Raises:
        ContractError: On non-finite inputs or mismatched shapes.
    '''
    P = numpy.asarray(p, dtype=float)
    J = numpy.asarray(J, dtype=float)
    R = numpy.asarray(residual_vec, dtype=float)
    single = P.ndim == 1
    if single: P, J, R = P[None], J[None], R[None]
    if J.shape != R.shape + (P.shape[1],):
        raise ContractError('Gauss-Newton shapes disagree: J %s, residual %s, p %s.'%(J.shape, R.shape, P.shape))
    for name, arr in (('p', P), ('J', J), ('residual', R)):
        require_finite(arr, name)
    n_p = P.shape[1]
    JT = J.transpose(0,2,1)
    A = JT @ J + cfg.lam*numpy.eye(n_p)
    dp = numpy.linalg.solve(A, (JT @ R[...,None]))[...,0]
    norm = numpy.linalg.norm(dp, axis=1, keepdims=True)
    dp = numpy.where(norm > cfg.delta_max, dp*(cfg.delta_max/numpy.maximum(norm, 1e-300)), dp)
    out = numpy.clip(P + dp, cfg.bounds[0], cfg.bounds[1])
    return out[0] if single else out

def refine(f, target, p0, cfg, n_steps=None, observe=None):
    '''Gauss-Newton refinement of p toward `target`.

    The residual is target - g(f(p)) where g is `observe` (identity when None).
    Each step spends n_p + 1 evaluations of f per instance.

    Args:
        f (callable): Forward process evaluation, (N, n_p) -> (N, n_y).
        target (array_like): Shape (m,) or (N, m).
        p0 (array_like): Start, shape (n_p,) or (N, n_p), inside cfg.bounds.
        cfg (GnConfig): Settings.
        n_steps (int, optional): Number of steps. Defaults to cfg.max_steps.
        observe (callable, optional): Observation-to-latent map applied to f's output.

    Raises:
        ContractError: If p0 lies outside the bounds.
        BudgetError: Propagated from f with the partial trace attached as `trace`.

    Returns:
        RefinementTrace
    '''
    n_steps = cfg.max_steps if n_steps is None else int(n_steps)
    P = numpy.array(p0, dtype=float)
    single = P.ndim == 1
    if single: P = P[None,:]
    T = numpy.asarray(target, dtype=float)
    if T.ndim == 1: T = numpy.broadcast_to(T, (P.shape[0], T.size))
    require_finite(P, 'p0')
    if numpy.any(P < cfg.bounds[0]) or numpy.any(P > cfg.bounds[1]):
        raise ContractError('Refinement start lies outside the bounds %s.'%(cfg.bounds,))
    n_p = P.shape[1]
    g = f if observe is None else (lambda Q: observe(f(Q)))

    iterates, norms = [], []
    def _trace(evals):
        its = numpy.array(iterates).reshape((len(iterates),) + P.shape)
        nrm = numpy.array(norms).reshape((len(norms), P.shape[0]))
        if single:
            return RefinementTrace(its[:,0], nrm[:,0], evals, P[0].copy())
        return RefinementTrace(its, nrm, evals, P.copy())

    for step in range(n_steps):
        try:
            value, J = numerical_jacobian(g, P, cfg.fd_step, return_value=True)
        except BudgetError as e:
            e.trace = _trace(step*(n_p+1))
            raise
        R = T - value
        iterates.append(P.copy())
        norms.append(numpy.linalg.norm(R, axis=1))
        P = gn_step(P, J, R, cfg)
    return _trace(n_steps*(n_p+1))
