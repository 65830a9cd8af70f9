import numpy, pytest

from Twincher.errors import BudgetError, ContractError, NonFiniteError
from Twincher.forward import HarmonicEntangler, LinearProcess, QueryLedger
from Twincher.helpers import central_difference
from Twincher.solve import GnConfig, numerical_jacobian, gn_step, refine

class Counter():
    def __init__(self, f):
        self.f = f
        self.calls = 0
    def __call__(self, p):
        self.calls += 1
        return self.f(p)

def test__gn_config():
    cfg = GnConfig()
    assert (cfg.lam, cfg.delta_max, cfg.fd_step, cfg.bounds, cfg.max_steps) == (1e-3, 0.1, 1e-7, (-1.0, 1.0), 5)
    with pytest.raises(ContractError):
        GnConfig(lam=0)
    with pytest.raises(ContractError):
        GnConfig(bounds=(1, -1))

class TestNumericalJacobian():
    def test__identity(self):
        J = numerical_jacobian(lambda p: p, numpy.array([0.5, -0.3]))
        assert numpy.allclose(J, numpy.eye(2), atol=1e-7)

    def test__linear(self):
        A = numpy.array([[1, 0.2], [-0.2, 1], [0.1, 0.3]])
        L = LinearProcess(A)
        J = numerical_jacobian(L.Forward, [0.1, 0.2])
        assert J.shape == (3, 2)
        assert numpy.allclose(J, A, atol=1e-6)
        value, J = numerical_jacobian(L.Forward, numpy.zeros((4, 2)), return_value=True)
        assert value.shape == (4, 3) and J.shape == (4, 3, 2)

    def test__entangler(self):
        E = HarmonicEntangler(3, w_amp=0.5)
        p = numpy.array([0.2, -0.4])
        assert numpy.allclose(numerical_jacobian(E.Forward, p), central_difference(E.Forward, p, 1e-5), atol=1e-3)

    def test__calls(self):
        f = Counter(lambda p: p**2)
        numerical_jacobian(f, numpy.zeros((7, 3)))
        assert f.calls == 4

    def test__non_finite(self):
        with pytest.raises(NonFiniteError):
            numerical_jacobian(lambda p: p/0.0, numpy.zeros(2))

class TestStep():
    def setup_class(self):
        self.cfg = GnConfig()

    def test__zero_residual(self):
        p = numpy.array([0.2, 0.3])
        assert (gn_step(p, numpy.eye(2), numpy.zeros(2), self.cfg) == p).all()

    def test__small_step(self):
        out = gn_step(numpy.zeros(2), numpy.eye(2), numpy.array([0.05, 0]), self.cfg)
        assert numpy.allclose(out, [0.05/1.001, 0], atol=1e-15)

    def test__clipped_norm(self):
        out = gn_step(numpy.zeros(2), numpy.eye(2), numpy.array([0.3, 0.4]), self.cfg)
        assert numpy.linalg.norm(out) == pytest.approx(0.1)
        assert numpy.allclose(out, [0.06, 0.08])

    def test__box(self):
        out = gn_step(numpy.array([0.95, 0]), numpy.eye(2), numpy.array([0.5, 0]), self.cfg)
        assert (out == [1.0, 0]).all()

    def test__shapes(self):
        with pytest.raises(ContractError):
            gn_step(numpy.zeros(2), numpy.eye(3), numpy.zeros(2), self.cfg)
        with pytest.raises(ContractError):
            gn_step(numpy.zeros(2), numpy.eye(2), numpy.array([numpy.nan, 0]), self.cfg)

class TestRefine():
    def setup_class(self):
        self.cfg = GnConfig()

    def test__at_target(self):
        p0 = numpy.array([0.3, -0.1])
        trace = refine(lambda p: p, p0, p0, self.cfg)
        assert (trace.residual_norms == 0).all()
        assert trace.n_steps == 5

    def test__identity(self):
        p0 = numpy.array([0.3, -0.1])
        target = p0 + numpy.array([0.03, 0.04])
        trace = refine(lambda p: p, target, p0, self.cfg, n_steps=3)
        assert trace.residual_norms[0] == pytest.approx(0.05)
        assert trace.residual_norms[1] < 1e-4
        assert trace.iterates.shape == (3, 2)
        assert trace.Points().shape == (4, 2)

    def test__evaluations(self):
        f = Counter(LinearProcess().Forward)
        trace = refine(f, [0.5, 0.5], [0, 0], self.cfg)
        assert f.calls == 15
        assert trace.forward_evals == 15

    def test__linear_oracle(self):
        A = numpy.array([[1, 0.2], [-0.2, 1], [0.1, 0.3]])
        L = LinearProcess(A)
        p_star = numpy.array([0.1, -0.2])
        p0 = p_star + 0.35*numpy.array([0.6, 0.8])
        trace = refine(L.Forward, L.Forward(p_star), p0, self.cfg)
        assert numpy.all(numpy.diff(trace.residual_norms) <= 0)
        assert numpy.linalg.norm(L.Forward(trace.final) - L.Forward(p_star)) < 1e-6

    def test__batch(self):
        L = LinearProcess()
        P0 = numpy.zeros((3, 2))
        targets = numpy.array([[0.05, 0], [0, 0.05], [-0.05, 0]])
        trace = refine(L.Forward, targets, P0, self.cfg)
        assert trace.iterates.shape == (5, 3, 2)
        assert trace.residual_norms.shape == (5, 3)
        assert numpy.allclose(trace.final, targets, atol=1e-6)

    def test__budget(self):
        L = LinearProcess()
        ledger = QueryLedger(7)
        with pytest.raises(BudgetError) as e:
            refine(lambda p: ledger.Query(L, p), [0.5, 0.5], [0, 0], self.cfg)
        assert e.value.trace.n_steps == 2
        assert e.value.trace.forward_evals == 6

    def test__outside(self):
        with pytest.raises(ContractError):
            refine(lambda p: p, [0, 0], [1.5, 0], self.cfg)
