import numpy, pandas, pytest
from Twincher.errors import ContractError
from Twincher.helpers import (open_json, arg_list_to_dict,
                              write_csv, as_batch, relative_error, central_difference)

def test__open_json():
    d = open_json('test/testconfig.json')
    assert d['OPTIONS']['command'] == 'sweep'
    assert d['SWEEP']['w_amps'] == [0.5, 1]

def test__arg_list_to_dict():
    d = arg_list_to_dict(['lambda=0.01', 'command=sweep', 'seeds=[1,2]', 'GN.max_steps=3'])
    assert d == {'lambda': 0.01, 'command': 'sweep', 'seeds': [1,2], 'GN.max_steps': 3}
    with pytest.raises(ValueError):
        arg_list_to_dict(['lambda'])

def test__write_csv(tmp_path):
    df = pandas.DataFrame({'x': [0.1, numpy.nan], 'name': ['a', 'b']})
    f = tmp_path/'out.csv'
    write_csv(df, str(f))
    raw = f.read_bytes()
    assert raw == b'x,name\n0.10000000000000001,a\n,b\n'

def test__as_batch():
    X, single = as_batch([1, 2], 2)
    assert X.shape == (1,2) and single
    X, single = as_batch(numpy.zeros((3,2)), 2)
    assert X.shape == (3,2) and not single
    with pytest.raises(ContractError):
        as_batch([1, 2, 3], 2)

def test__relative_error():
    assert relative_error([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert relative_error([1.0, 2.1], [1.0, 2.0]) == pytest.approx(0.05)

def test__central_difference():
    x = numpy.array([0.3, -0.7])
    d = central_difference(lambda v: numpy.sum(v**2), x)
    assert numpy.allclose(d, 2*x, atol=1e-8)
    jac = central_difference(lambda v: numpy.array([v[0]*v[1], v[0]]), x)
    assert jac.shape == (2, 2)
    assert numpy.allclose(jac, [[x[1], x[0]], [1, 0]], atol=1e-8)
