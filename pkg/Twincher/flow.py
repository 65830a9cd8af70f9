'''Twincher transform: an invertible map y -> (u, h).

The transform is a stack of `n_layers` layers. Layer l first applies a fixed
rotation Q_l (drawn once from the arch seed) and then an affine coupling on an
alternating split of the rotated vector x into an active part a and a passive
part b:

    g  = tanh(V a + e)
    s  = beta * tanh(W_s g)          beta = s_max / n_layers
    t  = W_t g + c
    b' = b * exp(s) + t

Every log-scale lies in (-beta, beta), so log|det dz/dy| > -s_max * n_y for
any parameters. The conditioner input weights V, e start at fan-in scale and
the output weights W_s, W_t, c start within `init_scale` of zero, so a fresh
coupling is close to the identity while g already responds to a. With zero
output weights the whole transform is the rotation Q_L ... Q_1.

Besides forward/inverse and the Jacobian, the model propagates tangents
(`JVP`) and runs reverse mode through both the primal and the tangent
computation (`BackpropJVP`). `Linearize` keeps the forward cache so that one
forward and one reverse pass serve every training term.
'''
import json, copy
from collections import namedtuple
import numpy
from scipy.stats import special_ortho_group

from Twincher.errors import ContractError, DimensionMismatchError, MalformedDocumentError, VersionMismatchError
from Twincher.helpers import as_batch, require_finite
from Twincher.seeding import stream

CHECKPOINT_FORMAT_VERSION = 1
# Conditioner width target: parameters per layer when n_hidden is not given.
PARAMS_PER_LAYER = 16

LatentPair = namedtuple('LatentPair', ['u', 'h'])

def default_hidden(n_y):
    '''Conditioner width giving about PARAMS_PER_LAYER parameters per layer, at least 2.

    Widths are counted on the even-layer split (n_y//2 active components).
    '''
    nA = n_y // 2
    nP = n_y - nA
    return max(2, int(round((PARAMS_PER_LAYER - nP)/(nA + 1 + 2*nP))))

class TwincherModel():
    '''Bounded-scale coupling flow with fixed orthogonal mixing.

    Args:
        arch_seed (int): Seed of the fixed rotations and of the parameter initialization.
        n_y (int): Observation dimension.
        n_p (int): Dimension of the distilled latent u; h has n_y - n_p components.
        n_layers (int, optional): Number of layers. Defaults to 64.
        s_max (float, optional): Total log-scale budget of the stack. Defaults to 1.0.
        init_scale (float, optional): Half-width of the uniform initialization of the
            conditioner output weights W_s, W_t, c. V and e are drawn from
            U(-1/sqrt(n_active), 1/sqrt(n_active)). Defaults to 0.01.
        n_hidden (int, optional): Conditioner width. Defaults to `default_hidden(n_y)`.
        theta (numpy.ndarray, optional): Parameters to use instead of the seeded initialization.

    Raises:
        ContractError: On invalid dimensions.
    '''
    def __init__(self, arch_seed, n_y, n_p, n_layers=64, s_max=1.0, init_scale=0.01, n_hidden=None, theta=None):
        if n_y < 2 or not 1 <= n_p < n_y:
            raise ContractError('Twincher needs 1 <= n_p < n_y. Got n_p = %s, n_y = %s.'%(n_p, n_y))
        if n_layers < 1:
            raise ContractError('Twincher needs at least one layer. Got %s.'%n_layers)
        if not s_max > 0:
            raise ContractError('Twincher log-scale bound s_max must be positive. Got %s.'%s_max)
        self.arch_seed = int(arch_seed)
        self.n_y = int(n_y)
        self.n_p = int(n_p)
        self.n_h = self.n_y - self.n_p
        self.n_layers = int(n_layers)
        self.s_max = float(s_max)
        self.beta = self.s_max / self.n_layers
        self.n_hidden = default_hidden(self.n_y) if n_hidden is None else int(n_hidden)
        if self.n_hidden < 1:
            raise ContractError('Twincher conditioner width must be positive. Got %s.'%self.n_hidden)

        self.mixing = [special_ortho_group.rvs(self.n_y, random_state=stream(self.arch_seed, 'twincher.mixing', l))
                       for l in range(self.n_layers)]
        k = self.n_y // 2
        self.masks = []
        for l in range(self.n_layers):
            if l % 2 == 0:
                self.masks.append((numpy.arange(0, k), numpy.arange(k, self.n_y)))
            else:
                self.masks.append((numpy.arange(self.n_y - k, self.n_y), numpy.arange(0, self.n_y - k)))

        self._layout = []
        offset = 0
        H = self.n_hidden
        half_widths = []
        for active, passive in self.masks:
            nA, nP = active.size, passive.size
            shapes = [('V',(H,nA)), ('e',(H,)), ('Ws',(nP,H)), ('Wt',(nP,H)), ('c',(nP,))]
            entry = {}
            for name, shape in shapes:
                size = int(numpy.prod(shape))
                entry[name] = (offset, offset+size, shape)
                offset += size
                half_widths.append(numpy.full(size, 1/numpy.sqrt(nA) if name in ('V','e') else init_scale))
            self._layout.append(entry)
        self.n_params = offset

        if theta is None:
            theta = numpy.concatenate(half_widths)*stream(self.arch_seed, 'twincher.init').uniform(-1, 1, self.n_params)
        theta = numpy.array(theta, dtype=float)
        if theta.shape != (self.n_params,):
            raise ContractError('Twincher parameter vector has length %s, expected %s.'%(theta.size, self.n_params))
        self.theta = theta

    def _unpack(self, vec):
        '''Per-layer views of a flat vector laid out like theta.'''
        return [{name: vec[lo:hi].reshape(shape) for name,(lo,hi,shape) in entry.items()} for entry in self._layout]

    def Copy(self):
        out = copy.copy(self)
        out.theta = self.theta.copy()
        return out

    def _run(self, Y, T=None):
        '''Forward pass over a batch, optionally carrying tangents.

        Args:
            Y (numpy.ndarray): Shape (N, n_y).
            T (numpy.ndarray, optional): Tangent rows, shape (N, m, n_y).

        Returns:
            tuple: Output (N, n_y), output tangents (N, m, n_y) or None, per-layer cache.
        '''
        layers = self._unpack(self.theta)
        cache = []
        v, dv = Y, T
        for l in range(self.n_layers):
            Q = self.mixing[l]
            active, passive = self.masks[l]
            prm = layers[l]
            x = v @ Q.T
            a, b = x[:,active], x[:,passive]
            g = numpy.tanh(a @ prm['V'].T + prm['e'])
            tq = numpy.tanh(g @ prm['Ws'].T)
            s = self.beta*tq
            E = numpy.exp(s)
            t = g @ prm['Wt'].T + prm['c']
            out = x.copy()
            out[:,passive] = b*E + t
            entry = {'a':a, 'b':b, 'g':g, 'tq':tq, 'E':E}
            if dv is not None:
                dx = dv @ Q.T
                da, db = dx[...,active], dx[...,passive]
                dpre = da @ prm['V'].T
                dg = dpre*(1 - g*g)[:,None,:]
                dq = dg @ prm['Ws'].T
                ds = self.beta*(1 - tq*tq)[:,None,:]*dq
                dt = dg @ prm['Wt'].T
                dout = dx.copy()
                dout[...,passive] = db*E[:,None,:] + (b*E)[:,None,:]*ds + dt
                entry.update({'da':da, 'db':db, 'dpre':dpre, 'dg':dg, 'dq':dq, 'ds':ds})
                dv = dout
            cache.append(entry)
            v = out
        return v, dv, cache

    def _reverse(self, cache, gz, gdz=None):
        '''Reverse mode through `_run`.

        Args:
            cache (list): Cache returned by `_run`.
            gz (numpy.ndarray): Upstream on the output, shape (N, n_y).
            gdz (numpy.ndarray, optional): Upstream on the output tangents, shape (N, m, n_y).

        Returns:
            tuple: grad_theta (summed over the batch), grad on the input (N, n_y),
            grad on the input tangents (N, m, n_y) or None.
        '''
        grad = numpy.zeros(self.n_params)
        grads = self._unpack(grad)
        layers = self._unpack(self.theta)
        beta = self.beta
        gv, gdv = gz, gdz
        for l in reversed(range(self.n_layers)):
            Q = self.mixing[l]
            active, passive = self.masks[l]
            prm, gp, c = layers[l], grads[l], cache[l]
            a, b, g, tq, E = c['a'], c['b'], c['g'], c['tq'], c['E']
            sech = 1 - tq*tq

            g_bp = gv[:,passive]
            G_E = g_bp*b
            G_b = g_bp*E
            G_t = g_bp
            G_g = numpy.zeros_like(g)
            G_q = numpy.zeros_like(tq)
            if gdv is not None:
                Gd_bp = gdv[...,passive]
                G_db = Gd_bp*E[:,None,:]
                G_E = G_E + (Gd_bp*c['db']).sum(axis=1)
                G_bE = (Gd_bp*c['ds']).sum(axis=1)
                G_b = G_b + G_bE*E
                G_E = G_E + G_bE*b
                G_ds = Gd_bp*(b*E)[:,None,:]
                G_dq = beta*sech[:,None,:]*G_ds
                G_q += beta*(G_ds*c['dq']).sum(axis=1)*(-2*tq*sech)
                gp['Wt'] += numpy.einsum('nmi,nmj->ij', Gd_bp, c['dg'])
                gp['Ws'] += numpy.einsum('nmi,nmj->ij', G_dq, c['dg'])
                G_dg = Gd_bp @ prm['Wt'] + G_dq @ prm['Ws']
                G_dpre = G_dg*(1 - g*g)[:,None,:]
                G_g += (G_dg*c['dpre']).sum(axis=1)*(-2*g)
                gp['V'] += numpy.einsum('nmi,nmj->ij', G_dpre, c['da'])
                G_dx = numpy.empty_like(gdv)
                G_dx[...,active] = gdv[...,active] + G_dpre @ prm['V']
                G_dx[...,passive] = G_db
                gdv = G_dx @ Q

            G_q += beta*sech*(G_E*E)
            gp['Ws'] += G_q.T @ g
            gp['Wt'] += G_t.T @ g
            gp['c'] += G_t.sum(axis=0)
            G_g += G_q @ prm['Ws'] + G_t @ prm['Wt']
            G_pre = G_g*(1 - g*g)
            gp['V'] += G_pre.T @ a
            gp['e'] += G_pre.sum(axis=0)
            gx = numpy.empty_like(gv)
            gx[:,active] = gv[:,active] + G_pre @ prm['V']
            gx[:,passive] = G_b
            gv = gx @ Q
        return grad, gv, gdv

    def Forward(self, y):
        '''Full output z = T(y), shape (n_y,) or (N, n_y).'''
        Y, single = as_batch(y, self.n_y, 'y')
        require_finite(Y, 'y')
        Z, _, _ = self._run(Y)
        return Z[0] if single else Z

    def Transform(self, y):
        '''Split T(y) into the distilled latent and the residual.

        Raises:
            ContractError: On non-finite input or a dimension mismatch.

        Returns:
            LatentPair: u (first n_p components) and h (the rest).
        '''
        Z = self.Forward(y)
        return LatentPair(Z[...,:self.n_p], Z[...,self.n_p:])

    def InverseTransform(self, u, h):
        '''Exact inverse of Transform.

        Raises:
            ContractError: On non-finite input or a dimension mismatch.
        '''
        Z, single = as_batch(numpy.concatenate([numpy.asarray(u, dtype=float), numpy.asarray(h, dtype=float)], axis=-1), self.n_y, '(u, h)')
        require_finite(Z, '(u, h)')
        layers = self._unpack(self.theta)
        z = Z
        for l in reversed(range(self.n_layers)):
            active, passive = self.masks[l]
            prm = layers[l]
            a = z[:,active]
            g = numpy.tanh(a @ prm['V'].T + prm['e'])
            s = self.beta*numpy.tanh(g @ prm['Ws'].T)
            t = g @ prm['Wt'].T + prm['c']
            x = z.copy()
            x[:,passive] = (z[:,passive] - t)*numpy.exp(-s)
            z = x @ self.mixing[l]
        return z[0] if single else z

    def _tangent_rows(self, Y, M):
        M = numpy.asarray(M, dtype=float)
        if M.ndim == 2:
            M = numpy.broadcast_to(M, (Y.shape[0],) + M.shape)
        if M.ndim != 3 or M.shape[0] != Y.shape[0] or M.shape[1] != self.n_y:
            raise ContractError('Tangents have shape %s, expected (%s, m) or (N, %s, m).'%(M.shape, self.n_y, self.n_y))
        return numpy.ascontiguousarray(M.transpose(0,2,1))

    def JVP(self, y, M):
        '''Output and directional derivatives D = (dz/dy) M.

        Args:
            y (array_like): Shape (n_y,) or (N, n_y).
            M (array_like): Directions as columns, shape (n_y, m) or (N, n_y, m).

        Returns:
            tuple(numpy.ndarray, numpy.ndarray): z and D, shapes (.., n_y) and (.., n_y, m).
        '''
        Y, single = as_batch(y, self.n_y, 'y')
        require_finite(Y, 'y')
        Z, dZ, _ = self._run(Y, self._tangent_rows(Y, M))
        D = dZ.transpose(0,2,1)
        return (Z[0], D[0]) if single else (Z, D)

    def Jacobian(self, y):
        '''Exact dz/dy, shape (n_y, n_y) or (N, n_y, n_y).'''
        return self.JVP(y, numpy.eye(self.n_y))[1]

    def LogDet(self, y):
        '''log|det dz/dy| accumulated from the coupling log-scales.'''
        Y, single = as_batch(y, self.n_y, 'y')
        require_finite(Y, 'y')
        _, _, cache = self._run(Y)
        out = sum(numpy.log(c['E']).sum(axis=1) for c in cache)
        return out[0] if single else out

    def Backprop(self, y, upstream):
        '''Gradients of <upstream, T(y)>.

        Args:
            y (array_like): Shape (n_y,) or (N, n_y).
            upstream (array_like): Same shape as y.

        Returns:
            tuple(numpy.ndarray, numpy.ndarray): grad_theta (summed over the batch)
            and grad_y (shape of y).
        '''
        Y, single = as_batch(y, self.n_y, 'y')
        G, _ = as_batch(upstream, self.n_y, 'upstream')
        require_finite(Y, 'y')
        require_finite(G, 'upstream')
        _, _, cache = self._run(Y)
        grad, gy, _ = self._reverse(cache, G)
        return grad, (gy[0] if single else gy)

    def BackpropJVP(self, y, M, upstream_z, upstream_D):
        '''Gradients of <upstream_z, z> + <upstream_D, (dz/dy) M>.

        Args:
            y (array_like): Shape (n_y,) or (N, n_y).
            M (array_like): Directions, shape (n_y, m) or (N, n_y, m).
            upstream_z (array_like or None): Upstream on z; None means zero.
            upstream_D (array_like): Upstream on D, shape (.., n_y, m).

        Returns:
            tuple: grad_theta, grad_y, grad_M (each batched like the inputs).
        '''
        Y, single = as_batch(y, self.n_y, 'y')
        require_finite(Y, 'y')
        T = self._tangent_rows(Y, M)
        GD = numpy.asarray(upstream_D, dtype=float)
        if GD.ndim == 2: GD = GD[None]
        GZ = numpy.zeros_like(Y) if upstream_z is None else as_batch(upstream_z, self.n_y, 'upstream_z')[0]
        _, _, cache = self._run(Y, T)
        grad, gy, gT = self._reverse(cache, GZ, numpy.ascontiguousarray(GD.transpose(0,2,1)))
        gM = gT.transpose(0,2,1)
        return (grad, gy[0], gM[0]) if single else (grad, gy, gM)

    def Linearize(self, y, M=None):
        '''Forward pass over a batch that keeps its cache for one reverse pass.

        Args:
            y (array_like): Shape (N, n_y).
            M (array_like, optional): Directions, shape (n_y, m) or (N, n_y, m).

        Raises:
            ContractError: On non-finite input or a dimension mismatch, or when
                the pullback receives a tangent upstream but M was not given.

        Returns:
            tuple: z (N, n_y), D (N, n_y, m) or None, and
            `pullback(upstream_z, upstream_D=None)` returning grad_theta, grad_y
            and grad_M (None without M) of <upstream_z, z> + <upstream_D, D>.
        '''
        Y, _ = as_batch(y, self.n_y, 'y')
        require_finite(Y, 'y')
        T = None if M is None else self._tangent_rows(Y, M)
        Z, dZ, cache = self._run(Y, T)
        D = None if dZ is None else dZ.transpose(0,2,1)

        def pullback(upstream_z, upstream_D=None):
            GZ = numpy.zeros_like(Z) if upstream_z is None else as_batch(upstream_z, self.n_y, 'upstream_z')[0]
            GT = None
            if upstream_D is not None:
                if T is None:
                    raise ContractError('Tangent upstream given to a linearization without directions.')
                GT = numpy.ascontiguousarray(numpy.asarray(upstream_D, dtype=float).transpose(0,2,1))
            grad, gy, gT = self._reverse(cache, GZ, GT)
            return grad, gy, (None if gT is None else gT.transpose(0,2,1))

        return Z, D, pullback

    def ToDict(self):
        return {'format_version': CHECKPOINT_FORMAT_VERSION, 'arch_seed': self.arch_seed,
                'n_y': self.n_y, 'n_p': self.n_p, 'n_layers': self.n_layers, 's_max': self.s_max,
                'n_hidden': self.n_hidden, 'theta': [float(v) for v in self.theta]}

    def Save(self, path):
        '''Write the checkpoint JSON. Floats use the shortest repr that
        round-trips exactly (at most 17 significant digits).'''
        with open(path, 'w') as f:
            json.dump(self.ToDict(), f, indent=1)
            f.write('\n')

def ModelFromDict(d):
    '''Rebuild a TwincherModel from a checkpoint dictionary.

    Raises:
        VersionMismatchError, MalformedDocumentError, DimensionMismatchError
    '''
    if not isinstance(d, dict):
        raise MalformedDocumentError('Checkpoint document must be a JSON object.')
    if 'format_version' not in d:
        raise MalformedDocumentError('Checkpoint document has no format_version.')
    if d['format_version'] != CHECKPOINT_FORMAT_VERSION:
        raise VersionMismatchError(d['format_version'], CHECKPOINT_FORMAT_VERSION)
    try:
        arch_seed, n_y, n_p, n_layers = int(d['arch_seed']), int(d['n_y']), int(d['n_p']), int(d['n_layers'])
        s_max = float(d['s_max'])
        n_hidden = d.get('n_hidden', None)
        theta = numpy.array(d['theta'], dtype=float)
    except (KeyError, TypeError, ValueError) as e:
        raise MalformedDocumentError('Checkpoint document is missing or mistypes a field (%s).'%e)
    if theta.ndim != 1:
        raise MalformedDocumentError('Checkpoint theta must be a flat array.')
    try:
        model = TwincherModel(arch_seed, n_y, n_p, n_layers, s_max, init_scale=0.0, n_hidden=n_hidden)
    except ContractError as e:
        raise DimensionMismatchError('Checkpoint dimensions are invalid: %s'%e)
    if theta.size != model.n_params:
        raise DimensionMismatchError('Checkpoint theta has %s entries but the architecture needs %s.'%(theta.size, model.n_params))
    model.theta = theta
    return model

def LoadCheckpoint(path):
    '''Load a TwincherModel saved with `TwincherModel.Save`.

    Raises:
        MalformedDocumentError: Unreadable, truncated or incomplete document.
        VersionMismatchError: format_version differs from the supported one.
        DimensionMismatchError: theta length does not match the architecture.
    '''
    try:
        with open(path) as f:
            d = json.load(f)
    except ValueError as e:
        raise MalformedDocumentError('Could not parse checkpoint %s: %s'%(path, e))
    return ModelFromDict(d)
