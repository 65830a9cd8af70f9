import json
import numpy

from Twincher.errors import ContractError

def open_json(f):
    '''Open a JSON file.

    Args:
        f (str): File name and path.

    Returns:
        dict: JSON opened as a python dictionary.
    '''
    with open(f) as fInput_config:
        input_config = json.load(fInput_config)

    return input_config

def write_json(d, f):
    '''Write a dictionary as indented JSON with sorted keys.

    Args:
        d (dict): Object to write.
        f (str): File name and path.
    '''
    with open(f, 'w') as fOut:
        json.dump(d, fOut, indent=2, sort_keys=True)
        fOut.write('\n')

def arg_list_to_dict(inlist):
    '''Turn `<key>=<value>` strings into a dictionary. Values are parsed as JSON when possible
    and kept as strings otherwise, so `lambda=0.01` gives a float and
    `command=sweep` gives a string.

    Args:
        inlist (list(str)): List of `<key>=<value>` strings.

    Raises:
        ValueError: If an entry has no `=`.

    Returns:
        dict
    '''
    out = {}
    for s in inlist:
        if '=' not in s:
            raise ValueError('Override "%s" is not of the form <key>=<value>.'%s)
        k, v = s.split('=', 1)
        try:
            out[k.strip()] = json.loads(v)
        except json.JSONDecodeError:
            out[k.strip()] = v
    return out

def write_csv(df, f):
    '''Write a DataFrame the way every Twincher artifact is written:
    header row, no index, floats at 17 significant digits, LF line endings,
    UTF-8, missing values as empty fields.

    Args:
        df (pandas.DataFrame): Table to write.
        f (str): File name and path.
    '''
    df.to_csv(f, index=False, float_format='%.17g', lineterminator='\n', encoding='utf-8', na_rep='')

def as_batch(x, width, name='input'):
    '''View `x` as a 2D float array with `width` columns.

    Args:
        x (array_like): Vector of length `width` or array of shape (N, width).
        width (int): Expected trailing dimension.
        name (str, optional): Name used in the error message.

    Raises:
        ContractError: On a shape mismatch.

    Returns:
        tuple(numpy.ndarray, bool): The 2D array and whether `x` was a single vector.
    '''
    arr = numpy.asarray(x, dtype=float)
    single = arr.ndim == 1
    if single: arr = arr[None,:]
    if arr.ndim != 2 or arr.shape[1] != width:
        raise ContractError('%s has shape %s, expected (%s,) or (N, %s).'%(name, numpy.shape(x), width, width))
    return arr, single

def require_finite(x, name='input'):
    if not numpy.all(numpy.isfinite(x)):
        raise ContractError('%s contains non-finite values.'%name)

def relative_error(a, b, floor=1e-12):
    '''Maximum absolute deviation of `a` from `b` relative to the size of `b`.

    Returns:
        float: max|a-b| / max(max|b|, floor)
    '''
    a = numpy.asarray(a, dtype=float)
    b = numpy.asarray(b, dtype=float)
    scale = max(float(numpy.max(numpy.abs(b))) if b.size else 0.0, floor)
    return float(numpy.max(numpy.abs(a - b))) / scale if a.size else 0.0

def central_difference(f, x, step=1e-6):
    '''Central finite-difference derivative of `f` at `x`.

    Args:
        f (callable): Maps a 1D array to a scalar or array.
        x (numpy.ndarray): 1D point.
        step (float, optional): Stencil half-width. Defaults to 1e-6.

    Returns:
        numpy.ndarray: Array of shape `f(x).shape + (len(x),)`.
    '''
    x = numpy.asarray(x, dtype=float)
    cols = []
    for i in range(x.size):
        e = numpy.zeros_like(x)
        e[i] = step
        cols.append((numpy.asarray(f(x + e), dtype=float) - numpy.asarray(f(x - e), dtype=float)) / (2*step))
    return numpy.stack(cols, axis=-1)
