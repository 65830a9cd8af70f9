import json
import numpy, pytest
from scipy.spatial.distance import pdist

from Twincher.errors import BudgetError, ContractError, DomainError, ImageMembershipError, MalformedDocumentError, VersionMismatchError
from Twincher.forward import (squash, unsquash, harmonic_operator, HarmonicEntangler, LoadEntangler, entangler_grid,
                              SpiralProcess, LinearProcess, NoiseChannel, average_pool, QueryLedger)

def test__squash():
    assert squash(0.0) == 0.0
    assert squash(1.0) == pytest.approx(1/numpy.sqrt(2), abs=1e-15)
    assert unsquash(squash(3.7)) == pytest.approx(3.7, rel=1e-12)
    with pytest.raises(DomainError):
        unsquash(1.0)
    with pytest.raises(ValueError):
        unsquash([0.5, -1.2])

def test__harmonic_operator():
    assert numpy.all(harmonic_operator(numpy.zeros((2,2)), numpy.zeros((2,2)), [0.3, -0.4]) == 0)
    out = harmonic_operator(numpy.zeros((2,2)), numpy.full((2,2), numpy.pi/2), [0.3, -0.4])
    assert numpy.allclose(out, [1, 1], atol=1e-15)

    rng = numpy.random.default_rng(4)
    W, B, x = rng.normal(size=(3,3)), rng.normal(size=(3,3)), rng.normal(size=3)
    direct = [sum(numpy.sin(W[j,k]*x[k] + B[j,k]) for k in range(3))*2/6 for j in range(3)]
    assert numpy.allclose(harmonic_operator(W, B, x), direct, atol=1e-12)
    with pytest.raises(ContractError):
        harmonic_operator(W, B, [1, 2])

class TestEntangler():
    def setup_class(self):
        self.E = HarmonicEntangler(11, w_amp=1.25)

    def test__determinism(self):
        other = HarmonicEntangler(11, w_amp=1.25)
        assert (other.w == self.E.w).all() and (other.b == self.E.b).all()
        assert (other.perms == self.E.perms).all() and (other.s_pad == self.E.s_pad).all()
        assert not (HarmonicEntangler(12, w_amp=1.25).w == self.E.w).all()

    def test__coefficient_ranges(self):
        assert self.E.w.shape == (3,4,2,2)
        assert numpy.all(numpy.abs(self.E.w) <= numpy.pi*1.25)
        assert numpy.all(numpy.abs(self.E.b) <= numpy.pi)
        for perm in self.E.perms:
            assert sorted(perm) == [0,1,2,3]

    def test__invalid(self):
        with pytest.raises(ContractError):
            HarmonicEntangler(0, n_s=5)
        with pytest.raises(ContractError):
            HarmonicEntangler(0, n_p=6, n_s=4)
        with pytest.raises(ContractError):
            HarmonicEntangler(0, w_amp=0)

    def test__zero_coefficients(self):
        E = HarmonicEntangler(0, w=numpy.zeros((3,4,2,2)), b=numpy.zeros((3,4,2,2)))
        p = numpy.array([0.3, -0.6])
        s = numpy.concatenate([p, E.s_pad])
        for perm in E.perms:
            s = squash(s)[perm]
        assert numpy.allclose(E.Forward(p), s, atol=1e-15)

    def test__forward_range(self):
        P = numpy.random.default_rng(0).uniform(-1, 1, (500, 2))
        Y = self.E.Forward(P)
        assert Y.shape == (500, 4)
        assert numpy.all(numpy.abs(Y) < 1)
        assert self.E.Forward(P[0]).shape == (4,)

    def test__round_trip(self):
        rng = numpy.random.default_rng(1)
        for seed in range(10):
            E = HarmonicEntangler(seed, w_amp=1.5)
            P = rng.uniform(-1, 1, (100, 2))
            assert numpy.max(numpy.abs(E.Inverse(E.Forward(P)) - P)) < 1e-9
        assert numpy.allclose(self.E.Inverse(self.E.Forward([0.0, 0.0])), [0, 0], atol=1e-9)

    def test__inverse_domain(self):
        y = self.E.Forward([0.2, 0.1])
        y[2] = 1.0
        with pytest.raises(DomainError):
            self.E.Inverse(y)

    def test__image_membership(self):
        y = self.E.Forward([0.0, 0.0])
        y[0] += 0.05 if y[0] < 0.9 else -0.05
        with pytest.raises(ImageMembershipError):
            self.E.Inverse(y)

    def test__box(self):
        self.E.Forward([1 + 1e-7, -1])
        with pytest.raises(ContractError):
            self.E.Forward([1.01, 0])
        with pytest.raises(ContractError):
            self.E.Forward([0.1, 0.2, 0.3])

    def test__save_load(self, tmp_path):
        path = str(tmp_path/'entangler.json')
        self.E.Save(path)
        E2 = LoadEntangler(path)
        P = numpy.random.default_rng(2).uniform(-1, 1, (20, 2))
        assert (E2.Forward(P) == self.E.Forward(P)).all()

        d = self.E.ToDict()
        d['format_version'] = 2
        with open(path, 'w') as f:
            json.dump(d, f)
        with pytest.raises(VersionMismatchError):
            LoadEntangler(path)

    def test__load_invalid_dimensions(self, tmp_path):
        path = str(tmp_path/'entangler.json')
        for field, value in [('n_s', 5), ('n_p', 6), ('e_n', 0), ('w_amp', -1.0), ('seed', 'abc')]:
            d = self.E.ToDict()
            d[field] = value
            with open(path, 'w') as f:
                json.dump(d, f)
            with pytest.raises(MalformedDocumentError):
                LoadEntangler(path)

    def test__perms_validated(self):
        perms = numpy.array([[0,1,2,3], [0,0,1,2], [3,2,1,0]])
        with pytest.raises(ContractError):
            HarmonicEntangler(0, perms=perms)
        with pytest.raises(ContractError):
            HarmonicEntangler(0, perms=numpy.array([[0,1,2,3], [0,1,2,4], [3,2,1,0]]))
        E = HarmonicEntangler(0, perms=numpy.array([[0,1,2,3], [1,0,3,2], [3,2,1,0]]))
        P = numpy.random.default_rng(3).uniform(-1, 1, (10, 2))
        assert numpy.max(numpy.abs(E.Inverse(E.Forward(P)) - P)) < 1e-9

    def test__off_image_inverse(self):
        rng = numpy.random.default_rng(5)
        for p in rng.uniform(-0.9, 0.9, (20, 2)):
            y = self.E.Forward(p)
            y[0] += 0.05 if y[0] < 0.9 else -0.05
            for col in range(1, 4):
                y2 = y.copy()
                y2[col] = numpy.clip(y2[col] + 0.3, -0.999, 0.999)
                with pytest.raises(ImageMembershipError):
                    self.E.Inverse(y2)
            with pytest.raises(ImageMembershipError):
                self.E.Inverse(y)

    def test__grid(self):
        df = entangler_grid(self.E, 8)
        assert len(df) == 64
        assert list(df.columns) == ['p1', 'p2', 'y1', 'y2', 'y3', 'y4']
        assert numpy.allclose(df[['y1','y2','y3','y4']].values[5], self.E.Forward(df[['p1','p2']].values[5]))

def test__spiral():
    S = SpiralProcess()
    assert numpy.allclose(S.Forward(0.0), [0.4, 0.0], atol=1e-15)
    assert S.Forward(0.0).shape == (2,)
    assert numpy.linalg.norm(S.Forward(1.0)) == pytest.approx(0.75)
    assert numpy.linalg.norm(S.Forward(-1.0)) == pytest.approx(0.05)
    Y = S.Forward(numpy.linspace(-1, 1, 512)[:,None])
    assert Y.shape == (512, 2)
    assert pdist(Y).min() > 0
    with pytest.raises(ContractError):
        S.Forward(1.5)
    with pytest.raises(ContractError):
        SpiralProcess(r0=0.3, r1=0.35)

def test__linear():
    A = numpy.array([[1, 0.2], [-0.2, 1], [0.1, 0.3]])
    L = LinearProcess(A)
    assert (L.n_y, L.n_p) == (3, 2)
    assert numpy.allclose(L.Forward([0.5, -0.5]), A @ [0.5, -0.5])

class TestNoise():
    def test__identity(self):
        y = numpy.random.default_rng(3).uniform(-1, 1, (50, 4))
        assert (NoiseChannel(0.0).Apply(y) == y).all()
        assert numpy.allclose(NoiseChannel(0.0, pool=2).Apply(y), y, atol=1e-15)

    def test__amplitude(self):
        y = numpy.zeros((1000, 4))
        out = NoiseChannel(0.01, rng_seed=5).Apply(y)
        assert numpy.all(numpy.abs(out) <= 0.01)
        assert out.std() > 0

    def test__swap_frequency(self):
        _, mask = NoiseChannel(0.0, swap_prob=0.2).Displace(numpy.zeros((1000, 100)))
        assert abs(mask.mean() - 0.2) < 0.01

    def test__swap_neighbors(self):
        y = numpy.arange(6, dtype=float)
        out, mask = NoiseChannel(0.0, swap_prob=1.0).Displace(y)
        assert mask.all()
        assert numpy.all(numpy.abs(out - y) <= 1)

    def test__determinism(self):
        y = numpy.zeros((10, 4))
        assert (NoiseChannel(0.1, 0.1, rng_seed=9).Apply(y) == NoiseChannel(0.1, 0.1, rng_seed=9).Apply(y)).all()

    def test__invalid(self):
        with pytest.raises(ContractError):
            NoiseChannel(-1)
        with pytest.raises(ContractError):
            NoiseChannel(0.1, swap_prob=1.5)
        with pytest.raises(ContractError):
            NoiseChannel(0.1, pool=0)

def test__average_pool():
    assert numpy.allclose(average_pool([1, 3, 5, 7], 2), [2, 6])
    with pytest.raises(ContractError):
        average_pool([1, 2, 3], 2)

def test__ledger():
    L = LinearProcess()
    ledger = QueryLedger(3)
    for _ in range(3):
        ledger.Query(L, [0.1, 0.2])
    assert ledger.used == 3 and ledger.remaining == 0
    with pytest.raises(BudgetError) as e:
        ledger.Query(L, [0.1, 0.2])
    assert e.value.used == 3 and e.value.budget == 3

    ledger = QueryLedger(5)
    ledger.Query(L, numpy.zeros((4, 2)))
    with pytest.raises(BudgetError):
        ledger.Query(L, numpy.zeros((2, 2)))
    assert ledger.used == 4
    ledger.Close()
    assert ledger.remaining == 0
    with pytest.raises(BudgetError):
        ledger.Query(L, [0, 0])
