'''Synthetic forward processes, observation noise and query accounting.

The harmonic entangler is the benchmark forward process: a seeded, exactly
invertible map from parameters p in [-1,1]^n_p to observations y in
(-1,1)^n_s whose difficulty grows with the frequency amplitude `w_amp`.
'''
import json
import numpy, pandas

from Twincher.errors import BudgetError, ContractError, DomainError, ImageMembershipError, MalformedDocumentError, VersionMismatchError
from Twincher.helpers import as_batch, require_finite
from Twincher.seeding import stream

ENTANGLER_FORMAT_VERSION = 1
# Finite-difference steps may go this far outside the box.
BOX_TOL = 1e-6
# Order of the four harmonic operators inside one entangler layer.
_OPERATORS = ('sigma_y', 'tau_y', 'sigma_z', 'tau_z')

def squash(z):
    '''Smoothly map reals into (-1,1): z/sqrt(1+z^2).'''
    z = numpy.asarray(z, dtype=float)
    return z / numpy.sqrt(1.0 + z*z)

def unsquash(t):
    '''Inverse of squash.

    Raises:
        DomainError: If any |t| >= 1.
    '''
    t = numpy.asarray(t, dtype=float)
    if numpy.any(~(numpy.abs(t) < 1.0)):
        raise DomainError('unsquash is only defined on (-1,1). Got max |t| = %s.'%numpy.max(numpy.abs(t)))
    return t / numpy.sqrt(1.0 - t*t)

def harmonic_operator(W, B, x):
    '''Fixed random harmonic feature map.

    out_j = (2/n_s) sum_k sin(W_jk x_k + B_jk) with n_s = 2*len(x), so every
    output component lies in [-1,1].

    Args:
        W (numpy.ndarray): Frequencies, shape (n_s/2, n_s/2).
        B (numpy.ndarray): Phases, same shape as W.
        x (numpy.ndarray): Input of shape (n_s/2,) or (N, n_s/2).

    Raises:
        ContractError: On a shape mismatch.

    Returns:
        numpy.ndarray: Same shape as x.
    '''
    W = numpy.asarray(W, dtype=float)
    B = numpy.asarray(B, dtype=float)
    x = numpy.asarray(x, dtype=float)
    if W.ndim != 2 or W.shape[0] != W.shape[1] or B.shape != W.shape:
        raise ContractError('Harmonic operator needs square W and B of equal shape. Got %s and %s.'%(W.shape, B.shape))
    if x.ndim not in (1,2) or x.shape[-1] != W.shape[1]:
        raise ContractError('Harmonic operator input has shape %s, expected trailing dimension %s.'%(x.shape, W.shape[1]))
    n_s = 2*W.shape[0]
    return (2.0/n_s) * numpy.sin(W * x[...,None,:] + B).sum(axis=-1)

def _check_box(p, name='p'):
    require_finite(p, name)
    worst = numpy.max(numpy.abs(p)) if p.size else 0.0
    if worst > 1.0 + BOX_TOL:
        raise ContractError('%s lies outside the box [-1,1] (max |component| = %s).'%(name, worst))

class HarmonicEntangler():
    '''Seeded harmonic entangler.

    Coefficients are regenerated from the seed: layer l draws, from stream
    (seed, 'entangler', l), a uniform array of shape (4, n_s/2, n_s/2) for the
    frequencies, another for the phases (order sigma_y, tau_y, sigma_z, tau_z),
    then its permutation. Frequencies are pi*w_amp*(2u-1) and phases pi*(2u-1).
    The padding comes from stream (seed, 'entangler.pad') as 2u-1.

    Args:
        seed (int): Master seed.
        n_p (int, optional): Parameter dimension. Defaults to 2.
        n_s (int, optional): State/observation dimension, even. Defaults to 4.
        e_n (int, optional): Number of layers. Defaults to 3.
        w_amp (float, optional): Frequency amplitude. Defaults to 1.0.
        w, b, s_pad, perms (numpy.ndarray, optional): Explicit coefficients that
            replace the seeded draws. Used to build hand-checkable instances.

    Raises:
        ContractError: If n_s is odd, n_p > n_s or other dimensions are invalid.
    '''
    def __init__(self, seed, n_p=2, n_s=4, e_n=3, w_amp=1.0, w=None, b=None, s_pad=None, perms=None):
        if n_s < 2 or n_s % 2:
            raise ContractError('Entangler state dimension n_s must be even and positive. Got %s.'%n_s)
        if n_p < 1 or n_p > n_s:
            raise ContractError('Entangler needs 1 <= n_p <= n_s. Got n_p = %s, n_s = %s.'%(n_p, n_s))
        if e_n < 1:
            raise ContractError('Entangler needs at least one layer. Got e_n = %s.'%e_n)
        if not w_amp > 0:
            raise ContractError('Entangler frequency amplitude must be positive. Got %s.'%w_amp)
        self.seed = int(seed)
        self.n_p = int(n_p)
        self.n_s = int(n_s)
        self.n_y = self.n_s
        self.e_n = int(e_n)
        self.w_amp = float(w_amp)

        half = self.n_s // 2
        draws_w, draws_b, draws_perm = [], [], []
        for l in range(self.e_n):
            rng = stream(self.seed, 'entangler', l)
            draws_w.append(numpy.pi*self.w_amp*(2*rng.random((4,half,half)) - 1))
            draws_b.append(numpy.pi*(2*rng.random((4,half,half)) - 1))
            draws_perm.append(rng.permutation(self.n_s))
        self.w = numpy.array(draws_w) if w is None else numpy.asarray(w, dtype=float)
        self.b = numpy.array(draws_b) if b is None else numpy.asarray(b, dtype=float)
        self.perms = numpy.array(draws_perm) if perms is None else numpy.asarray(perms, dtype=int)
        if s_pad is None:
            s_pad = 2*stream(self.seed, 'entangler.pad').random(self.n_s - self.n_p) - 1
        self.s_pad = numpy.asarray(s_pad, dtype=float)

        if self.w.shape != (self.e_n,4,half,half) or self.b.shape != self.w.shape:
            raise ContractError('Entangler coefficient arrays must have shape %s.'%((self.e_n,4,half,half),))
        if self.perms.shape != (self.e_n, self.n_s):
            raise ContractError('Entangler permutations must have shape %s.'%((self.e_n,self.n_s),))
        for l, perm in enumerate(self.perms):
            if not numpy.array_equal(numpy.sort(perm), numpy.arange(self.n_s)):
                raise ContractError('Entangler layer %s permutation %s is not a permutation of 0..%s.'%(l, perm.tolist(), self.n_s-1))
        if self.s_pad.shape != (self.n_s - self.n_p,) or numpy.any(numpy.abs(self.s_pad) >= 1):
            raise ContractError('Entangler padding must have %s components inside (-1,1).'%(self.n_s - self.n_p))

    def _op(self, l, name, x):
        k = _OPERATORS.index(name)
        return harmonic_operator(self.w[l,k], self.b[l,k], x)

    def Forward(self, p):
        '''Evaluate y = E(p).

        Args:
            p (array_like): Shape (n_p,) or (N, n_p), inside [-1,1] up to BOX_TOL.

        Raises:
            ContractError: On a dimension mismatch or a point outside the box.

        Returns:
            numpy.ndarray: Observations, shape (n_s,) or (N, n_s).
        '''
        P, single = as_batch(p, self.n_p, 'p')
        _check_box(P)
        half = self.n_s // 2
        s = numpy.concatenate([P, numpy.broadcast_to(self.s_pad, (P.shape[0], self.s_pad.size))], axis=1)
        for l in range(self.e_n):
            x1, x2 = s[:,:half], s[:,half:]
            y2 = x2*numpy.exp(self._op(l,'sigma_y',x1)) + self._op(l,'tau_y',x1)
            z1 = x1*numpy.exp(self._op(l,'sigma_z',y2)) + self._op(l,'tau_z',y2)
            s = squash(numpy.concatenate([z1, y2], axis=1))[:, self.perms[l]]
        return s[0] if single else s

    def Inverse(self, y):
        '''Recover p from y = E(p). Test oracle only; learners never call it.

        Raises:
            DomainError: If any |y component| >= 1.
            ImageMembershipError: If an intermediate layer state leaves (-1,1) or the
                recovered padding differs from s_pad by more than 1e-6.

        Returns:
            numpy.ndarray: Parameters, shape (n_p,) or (N, n_p).
        '''
        Y, single = as_batch(y, self.n_s, 'y')
        if numpy.any(~(numpy.abs(Y) < 1.0)):
            raise DomainError('Entangler inverse needs all |y| < 1.')
        half = self.n_s // 2
        s = Y
        for l in reversed(range(self.e_n)):
            unperm = numpy.empty_like(s)
            unperm[:, self.perms[l]] = s
            try:
                z = unsquash(unperm)
            except DomainError:
                raise ImageMembershipError('Observation is not in the entangler image: layer %s state leaves (-1,1).'%l)
            z1, y2 = z[:,:half], z[:,half:]
            x1 = (z1 - self._op(l,'tau_z',y2))*numpy.exp(-self._op(l,'sigma_z',y2))
            x2 = (y2 - self._op(l,'tau_y',x1))*numpy.exp(-self._op(l,'sigma_y',x1))
            s = numpy.concatenate([x1, x2], axis=1)
        deviation = numpy.max(numpy.abs(s[:,self.n_p:] - self.s_pad)) if self.s_pad.size else 0.0
        if deviation > 1e-6:
            raise ImageMembershipError('Observation is not in the entangler image: padding deviates by %s.'%deviation)
        P = s[:,:self.n_p]
        return P[0] if single else P

    def ToDict(self):
        return {'format_version': ENTANGLER_FORMAT_VERSION, 'seed': self.seed, 'n_p': self.n_p,
                'n_s': self.n_s, 'e_n': self.e_n, 'w_amp': self.w_amp}

    def Save(self, path):
        '''Write the versioned JSON description. Coefficients are not stored.'''
        with open(path, 'w') as f:
            json.dump(self.ToDict(), f, indent=2, sort_keys=True)
            f.write('\n')

def EntanglerFromDict(d):
    try:
        version = d['format_version']
        if version != ENTANGLER_FORMAT_VERSION:
            raise VersionMismatchError(version, ENTANGLER_FORMAT_VERSION)
        return HarmonicEntangler(d['seed'], d['n_p'], d['n_s'], d['e_n'], d['w_amp'])
    except ContractError as e:
        raise MalformedDocumentError('Entangler document describes an invalid entangler: %s'%e)
    except (KeyError, TypeError, ValueError) as e:
        raise MalformedDocumentError('Entangler document is missing or mistypes a field (%s).'%e)

def LoadEntangler(path):
    '''Rebuild an entangler from its JSON description.

    Raises:
        MalformedDocumentError: Unparsable or incomplete document, or one describing
            an entangler with invalid dimensions.
        VersionMismatchError: Unsupported format_version.
    '''
    try:
        with open(path) as f:
            d = json.load(f)
    except ValueError as e:
        raise MalformedDocumentError('Could not parse entangler document %s: %s'%(path, e))
    return EntanglerFromDict(d)

def entangler_grid(E, resolution=64):
    '''Entangler outputs over a grid of the first two parameters (others at 0).

    Args:
        E (HarmonicEntangler): Entangler with n_p >= 2.
        resolution (int, optional): Points per axis. Defaults to 64.

    Returns:
        pandas.DataFrame: Columns p1, p2, y1..y_{n_s}; resolution^2 rows.
    '''
    if E.n_p < 2:
        raise ContractError('entangler_grid needs n_p >= 2.')
    axis = numpy.linspace(-1, 1, resolution)
    p1, p2 = numpy.meshgrid(axis, axis, indexing='ij')
    P = numpy.zeros((resolution*resolution, E.n_p))
    P[:,0], P[:,1] = p1.ravel(), p2.ravel()
    Y = E.Forward(P)
    df = pandas.DataFrame({'p1': P[:,0], 'p2': P[:,1]})
    for i in range(E.n_s):
        df['y%s'%(i+1)] = Y[:,i]
    return df

class SpiralProcess():
    '''One parameter traced along a planar spiral.

    y = (r cos(theta), r sin(theta)) with theta = turns*p and r = r0 + r1*p.

    Args:
        turns (float, optional): Angular rate in radians per unit p. Defaults to 1.75*pi.
        r0 (float, optional): Radius at p = 0. Defaults to 0.4.
        r1 (float, optional): Radial slope. Defaults to 0.35.
    '''
    n_p = 1
    n_y = 2

    def __init__(self, turns=1.75*numpy.pi, r0=0.4, r1=0.35):
        if not r0 - r1 > 0:
            raise ContractError('Spiral radius must stay positive: need r0 > r1. Got r0 = %s, r1 = %s.'%(r0, r1))
        if not r0 + abs(r1) < 1:
            raise ContractError('Spiral must stay inside the unit box: need r0 + |r1| < 1.')
        self.turns = float(turns)
        self.r0 = float(r0)
        self.r1 = float(r1)

    def Forward(self, p):
        '''Evaluate the spiral.

        Args:
            p (float or array_like): Scalar, shape (1,) or (N, 1).

        Raises:
            ContractError: If |p| > 1 (beyond the finite-difference tolerance).
        '''
        scalar = numpy.ndim(p) == 0
        P, single = as_batch(numpy.atleast_1d(p), 1, 'p')
        _check_box(P)
        theta = self.turns*P[:,0]
        r = self.r0 + self.r1*P[:,0]
        Y = numpy.stack([r*numpy.cos(theta), r*numpy.sin(theta)], axis=1)
        return Y[0] if (single or scalar) else Y

class LinearProcess():
    '''Linear forward process y = A p on the box.

    Args:
        A (array_like, optional): Matrix of shape (n_y, n_p). Defaults to the 2x2 identity.
    '''
    def __init__(self, A=None):
        self.A = numpy.eye(2) if A is None else numpy.atleast_2d(numpy.asarray(A, dtype=float))
        self.n_y, self.n_p = self.A.shape

    def Forward(self, p):
        P, single = as_batch(p, self.n_p, 'p')
        _check_box(P)
        Y = P @ self.A.T
        return Y[0] if single else Y

def average_pool(x, pool):
    '''Average non-overlapping blocks of `pool` trailing components.'''
    x = numpy.asarray(x, dtype=float)
    if x.shape[-1] % pool:
        raise ContractError('Cannot pool %s components in blocks of %s.'%(x.shape[-1], pool))
    return x.reshape(x.shape[:-1] + (x.shape[-1]//pool, pool)).mean(axis=-1)

class NoiseChannel():
    '''Observation perturbation: neighbor displacement followed by additive uniform noise.

    Each component is, with probability `swap_prob`, replaced by the value at
    index i-1 or i+1 (equal odds, clamped at the ends), then receives
    U(-amplitude, amplitude) noise. With `pool` > 1 both steps act on a copy
    of the observation upsampled by repetition and the result is average-pooled
    back.

    Args:
        amplitude (float, optional): Uniform noise half-width. Defaults to 0.5.
        swap_prob (float, optional): Displacement probability. Defaults to 0.
        rng_seed (int, optional): Seed of the channel's stream. Defaults to 0.
        pool (int, optional): Upsampling/pooling factor. Defaults to 1.
    '''
    def __init__(self, amplitude=0.5, swap_prob=0.0, rng_seed=0, pool=1):
        if not amplitude >= 0:
            raise ContractError('Noise amplitude must be non-negative. Got %s.'%amplitude)
        if not 0 <= swap_prob <= 1:
            raise ContractError('Swap probability must lie in [0,1]. Got %s.'%swap_prob)
        if int(pool) != pool or pool < 1:
            raise ContractError('Pool factor must be a positive integer. Got %s.'%pool)
        self.amplitude = float(amplitude)
        self.swap_prob = float(swap_prob)
        self.rng_seed = int(rng_seed)
        self.pool = int(pool)
        self.rng = stream(self.rng_seed, 'noise')

    def Displace(self, y, rng=None):
        '''Apply the neighbor displacement only.

        Returns:
            tuple(numpy.ndarray, numpy.ndarray): Displaced values and the boolean
            mask of components that drew a displacement.
        '''
        rng = self.rng if rng is None else rng
        y = numpy.asarray(y, dtype=float)
        n = y.shape[-1]
        mask = rng.random(y.shape) < self.swap_prob
        step = numpy.where(rng.random(y.shape) < 0.5, -1, 1)
        src = numpy.clip(numpy.arange(n) + step, 0, n-1)
        shifted = numpy.take_along_axis(y, src, axis=-1)
        return numpy.where(mask, shifted, y), mask

    def Apply(self, y, rng=None):
        '''Perturb observations.

        Args:
            y (array_like): Shape (n,) or (N, n).
            rng (numpy.random.Generator, optional): Generator to draw from.
                Defaults to the channel's own stream.

        Returns:
            numpy.ndarray: Noisy observations with the shape of y.
        '''
        rng = self.rng if rng is None else rng
        fine = numpy.repeat(numpy.asarray(y, dtype=float), self.pool, axis=-1)
        fine, _ = self.Displace(fine, rng)
        fine = fine + rng.uniform(-self.amplitude, self.amplitude, fine.shape)
        return average_pool(fine, self.pool) if self.pool > 1 else fine

class QueryLedger():
    '''Counts forward-process evaluations against a budget.

    Args:
        budget (int): Maximum number of evaluations.
    '''
    def __init__(self, budget):
        if budget < 0:
            raise ContractError('Query budget must be non-negative. Got %s.'%budget)
        self.budget = int(budget)
        self.used = 0
        self.closed = False

    @property
    def remaining(self):
        return 0 if self.closed else self.budget - self.used

    def Close(self):
        '''Refuse every further query.'''
        self.closed = True

    def Query(self, process, p):
        '''Evaluate `process` at p, one charge per row.

        The charge is checked before evaluating, so a refused call consumes nothing.

        Raises:
            BudgetError: If the ledger is closed or the call would exceed the budget.
        '''
        n = 1 if numpy.ndim(p) <= 1 else numpy.shape(p)[0]
        if self.closed:
            raise BudgetError(self.used, self.budget, n, 'Query ledger is closed (%s of %s used).'%(self.used, self.budget))
        if self.used + n > self.budget:
            raise BudgetError(self.used, self.budget, n)
        y = process.Forward(p)
        self.used += n
        return y
