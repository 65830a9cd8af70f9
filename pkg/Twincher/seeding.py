'''Deterministic random streams.

Every random draw in Twincher comes from a stream identified by
(master seed, tag, index). The key derivation is:

    s  = splitmix64(master_seed)
    for each byte c of tag (UTF-8):  s = splitmix64(s ^ c)
    k0 = splitmix64(s ^ index)
    k1 = splitmix64(k0)

and the stream is `numpy.random.Generator(numpy.random.Philox(key=k0 + 2**64*k1))`.
splitmix64 is the standard finalizer (increment 0x9E3779B97F4A7C15, then
xor-shift-multiply with 0xBF58476D1CE4E5B9 and 0x94D049BB133111EB). Philox4x64-10
is counter based, so any language with Philox and splitmix64 reproduces the
same numbers.
'''
import numpy

_MASK = (1 << 64) - 1

def splitmix64(x):
    '''One splitmix64 step on a 64-bit integer.

    Args:
        x (int): Input state (reduced modulo 2**64).

    Returns:
        int: Mixed 64-bit value.
    '''
    z = (x + 0x9E3779B97F4A7C15) & _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)

def derive_key(seed, tag, index=0):
    '''Derive the 128-bit Philox key of stream (seed, tag, index).

    Returns:
        int: Key in [0, 2**128).
    '''
    s = splitmix64(int(seed) & _MASK)
    for c in tag.encode('utf-8'):
        s = splitmix64(s ^ c)
    k0 = splitmix64(s ^ (int(index) & _MASK))
    k1 = splitmix64(k0)
    return k0 | (k1 << 64)

def stream(seed, tag, index=0):
    '''Random generator for stream (seed, tag, index).

    Args:
        seed (int): Master seed (64-bit).
        tag (str): Stream name, e.g. 'entangler'.
        index (int, optional): Sub-stream index. Defaults to 0.

    Returns:
        numpy.random.Generator
    '''
    return numpy.random.Generator(numpy.random.Philox(key=derive_key(seed, tag, index)))
