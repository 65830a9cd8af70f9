import numpy, pytest

from Twincher.errors import ContractError
from Twincher.helpers import central_difference, relative_error
from Twincher.nets import Mlp, AdamState, mse, train_supervised
from Twincher.seeding import stream

def test__parameter_count():
    net = Mlp(0, (4, 16, 16, 16, 16, 2))
    assert net.n_params == 930
    assert (net.n_in, net.n_out) == (4, 2)
    assert (Mlp(0, (4, 16, 2)).theta == Mlp(0, (4, 16, 2)).theta).all()
    with pytest.raises(ContractError):
        Mlp(0, (4,))

def test__forward():
    net = Mlp(1, (4, 16, 16, 2))
    X = numpy.random.default_rng(0).uniform(-3, 3, (100, 4))
    out = net.Forward(X)
    assert out.shape == (100, 2)
    assert numpy.all(numpy.abs(out) < 1.5)
    assert net.Forward(X[0]).shape == (2,)
    zero = Mlp(1, (4, 16, 2), theta=numpy.zeros(Mlp(1, (4, 16, 2)).n_params))
    assert (zero.Forward(X) == 0).all()

def test__backprop():
    net = Mlp(2, (3, 8, 8, 2))
    rng = numpy.random.default_rng(1)
    X, G = rng.normal(size=(5, 3)), rng.normal(size=(5, 2))
    grad, gx = net.Backprop(X, G)

    def objective(theta):
        return numpy.sum(G*Mlp(2, (3, 8, 8, 2), theta=theta).Forward(X))
    assert relative_error(grad, central_difference(objective, net.theta)) < 1e-4
    assert relative_error(gx[0], central_difference(lambda x: numpy.sum(G[0]*net.Forward(x)), X[0])) < 1e-4

    grad, gx = net.Backprop(X, numpy.zeros((5, 2)))
    assert (grad == 0).all() and (gx == 0).all()

def test__mse():
    net = Mlp(3, (2, 4, 1))
    X, Y = numpy.zeros((4, 2)), numpy.zeros((4, 1))
    loss, grad = mse(net, X, Y)
    assert loss == pytest.approx(numpy.mean(net.Forward(X)**2))
    assert grad.shape == (net.n_params,)

def test__adam():
    theta = numpy.array([0.5, -0.5])
    adam = AdamState(2)
    assert (adam.Step(theta, numpy.zeros(2)) == theta).all()
    adam = AdamState(2, lr=1e-3)
    out = adam.Step(theta, numpy.array([1.0, -2.0]))
    assert numpy.allclose(out - theta, [-1e-3, 1e-3], atol=1e-9)
    with pytest.raises(ContractError):
        adam.Step(theta, numpy.zeros(3))

class TestTraining():
    def test__small_set(self):
        net = Mlp(4, (1, 8, 1))
        X = numpy.linspace(-0.5, 0.5, 10)[:,None]
        _, history = train_supervised(net, X, X, max_epochs=50)
        assert len(history) == 50
        assert history.val_loss.isna().all()

    def test__linear_target(self):
        net = Mlp(5, (1, 8, 1))
        X = numpy.linspace(-0.5, 0.5, 100)[:,None]
        net, history = train_supervised(net, X, X, max_epochs=3000, patience=50, lr=1e-2)
        assert mse(net, X, X)[0] < 1e-3
        assert list(history.columns) == ['epoch', 'train_loss', 'val_loss']

    def test__restores_best(self):
        net = Mlp(6, (2, 8, 1))
        rng = numpy.random.default_rng(7)
        X = rng.uniform(-1, 1, (40, 2))
        Y = numpy.sin(3*X[:,:1])*X[:,1:]
        net, history = train_supervised(net, X, Y, max_epochs=200, patience=5, rng=stream(5, 'split'))
        val_idx = stream(5, 'split').permutation(40)[:4]
        R = net.Forward(X[val_idx]) - Y[val_idx]
        assert numpy.mean(R*R) == pytest.approx(history.val_loss.min(), rel=1e-12)

    def test__empty(self):
        with pytest.raises(ContractError):
            train_supervised(Mlp(0, (2, 4, 1)), numpy.zeros((0, 2)), numpy.zeros((0, 1)))

    def test__determinism(self):
        X = numpy.random.default_rng(8).uniform(-1, 1, (30, 2))
        a, _ = train_supervised(Mlp(9, (2, 4, 1)), X, X[:,:1], max_epochs=20)
        b, _ = train_supervised(Mlp(9, (2, 4, 1)), X, X[:,:1], max_epochs=20)
        assert (a.theta == b.theta).all()
