'''Small dense tanh networks, Adam and early-stopped full-batch training.'''
import copy
import numpy, pandas

from Twincher.errors import ContractError
from Twincher.helpers import as_batch
from Twincher.seeding import stream

class Mlp():
    '''Fully connected network with tanh hidden layers and a scaled tanh output.

    Weights and biases of a layer with fan-in n are drawn from
    U(-sqrt(1/n), sqrt(1/n)) using stream (seed, 'mlp').

    Args:
        seed (int): Initialization seed.
        widths (list(int)): Layer widths, input first and output last.
        out_scale (float, optional): Output scale; outputs lie in (-out_scale, out_scale). Defaults to 1.5.
        theta (numpy.ndarray, optional): Parameters to use instead of the seeded initialization.

    Raises:
        ContractError: If fewer than two widths are given.
    '''
    def __init__(self, seed, widths, out_scale=1.5, theta=None):
        widths = [int(w) for w in widths]
        if len(widths) < 2 or min(widths) < 1:
            raise ContractError('Mlp needs at least an input and an output width. Got %s.'%widths)
        self.seed = int(seed)
        self.widths = widths
        self.out_scale = float(out_scale)
        self._layout = []
        offset = 0
        for n_in, n_out in zip(widths[:-1], widths[1:]):
            self._layout.append((offset, offset + n_out*n_in, offset + n_out*n_in + n_out, n_in, n_out))
            offset += n_out*n_in + n_out
        self.n_params = offset

        if theta is None:
            rng = stream(self.seed, 'mlp')
            parts = []
            for _, _, _, n_in, n_out in self._layout:
                bound = numpy.sqrt(1.0/n_in)
                parts.append(rng.uniform(-bound, bound, n_out*n_in + n_out))
            theta = numpy.concatenate(parts)
        theta = numpy.array(theta, dtype=float)
        if theta.shape != (self.n_params,):
            raise ContractError('Mlp parameter vector has length %s, expected %s.'%(theta.size, self.n_params))
        self.theta = theta

    @property
    def n_in(self):
        return self.widths[0]

    @property
    def n_out(self):
        return self.widths[-1]

    def _layers(self, vec):
        return [(vec[lo:mid].reshape(n_out, n_in), vec[mid:hi]) for lo, mid, hi, n_in, n_out in self._layout]

    def Copy(self):
        out = copy.copy(self)
        out.theta = self.theta.copy()
        return out

    def _run(self, X):
        acts = [X]
        layers = self._layers(self.theta)
        for i, (W, b) in enumerate(layers):
            a = numpy.tanh(acts[-1] @ W.T + b)
            acts.append(a)
        return acts

    def Forward(self, x):
        '''Evaluate the network on shape (n_in,) or (N, n_in).'''
        X, single = as_batch(x, self.n_in, 'x')
        out = self.out_scale*self._run(X)[-1]
        return out[0] if single else out

    def Backprop(self, x, upstream):
        '''Gradients of <upstream, net(x)>.

        Returns:
            tuple(numpy.ndarray, numpy.ndarray): grad_theta (summed over the batch) and grad_x.
        '''
        X, single = as_batch(x, self.n_in, 'x')
        G, _ = as_batch(upstream, self.n_out, 'upstream')
        acts = self._run(X)
        grad = numpy.zeros(self.n_params)
        glayers = self._layers(grad)
        layers = self._layers(self.theta)
        g = G*self.out_scale
        for i in reversed(range(len(layers))):
            a = acts[i+1]
            g = g*(1 - a*a)
            gW, gb = glayers[i]
            gW += g.T @ acts[i]
            gb += g.sum(axis=0)
            g = g @ layers[i][0]
        return grad, (g[0] if single else g)

class AdamState():
    '''Bias-corrected Adam moments for a parameter vector of length n.'''
    def __init__(self, n, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = numpy.zeros(n)
        self.v = numpy.zeros(n)
        self.t = 0

    def Step(self, theta, grad):
        '''Return the updated parameters and advance the moments.

        Raises:
            ContractError: If shapes disagree.
        '''
        if numpy.shape(theta) != self.m.shape or numpy.shape(grad) != self.m.shape:
            raise ContractError('Adam state has length %s but got theta %s and grad %s.'%(self.m.size, numpy.shape(theta), numpy.shape(grad)))
        self.t += 1
        self.m = self.beta1*self.m + (1 - self.beta1)*grad
        self.v = self.beta2*self.v + (1 - self.beta2)*grad*grad
        m_hat = self.m/(1 - self.beta1**self.t)
        v_hat = self.v/(1 - self.beta2**self.t)
        return theta - self.lr*m_hat/(numpy.sqrt(v_hat) + self.eps)

def mse(net, X, Y):
    '''Mean squared error and its gradient in theta.'''
    R = net.Forward(X) - Y
    loss = float(numpy.mean(R*R))
    grad, _ = net.Backprop(X, 2*R/R.size)
    return loss, grad

def train_supervised(net, inputs, targets, max_epochs=1000, patience=10, val_fraction=0.1, rng=None, lr=1e-3, verbosity=0):
    '''Full-batch MSE training with Adam.

    With at least 20 samples a seeded `val_fraction` share is held out and
    training stops once the validation loss has not improved for `patience`
    epochs; the parameters with the lowest validation loss are restored.
    Smaller sets train on everything for `max_epochs` epochs.

    Args:
        net (Mlp): Network, trained in place.
        inputs (numpy.ndarray): Shape (N, n_in).
        targets (numpy.ndarray): Shape (N, n_out).
        rng (numpy.random.Generator, optional): Shuffle generator. Defaults to stream (net.seed, 'split').

    Raises:
        ContractError: If there are no samples or the counts differ.

    Returns:
        tuple(Mlp, pandas.DataFrame): The net and its history (epoch, train_loss, val_loss).
    '''
    X, _ = as_batch(inputs, net.n_in, 'inputs')
    Y, _ = as_batch(targets, net.n_out, 'targets')
    N = X.shape[0]
    if N == 0 or Y.shape[0] != N:
        raise ContractError('Training needs matching, non-empty inputs and targets. Got %s and %s samples.'%(N, Y.shape[0]))
    rng = stream(net.seed, 'split') if rng is None else rng

    if N >= 20:
        order = rng.permutation(N)
        n_val = max(1, int(round(val_fraction*N)))
        val_idx, train_idx = order[:n_val], order[n_val:]
    else:
        val_idx, train_idx = None, numpy.arange(N)

    adam = AdamState(net.n_params, lr=lr)
    rows = []
    best_val, best_theta, stale = numpy.inf, net.theta.copy(), 0
    for epoch in range(max_epochs):
        loss, grad = mse(net, X[train_idx], Y[train_idx])
        net.theta = adam.Step(net.theta, grad)
        val_loss = numpy.nan
        if val_idx is not None:
            R = net.Forward(X[val_idx]) - Y[val_idx]
            val_loss = float(numpy.mean(R*R))
        rows.append((epoch, loss, val_loss))
        if verbosity > 1 and epoch % 100 == 0:
            print ('epoch %s: train %.3e val %.3e'%(epoch, loss, val_loss))
        if val_idx is None:
            continue
        if val_loss < best_val:
            best_val, best_theta, stale = val_loss, net.theta.copy(), 0
        else:
            stale += 1
            if stale >= patience:
                break

    if val_idx is not None:
        net.theta = best_theta
    return net, pandas.DataFrame(rows, columns=['epoch','train_loss','val_loss'])
