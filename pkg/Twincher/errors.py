'''Exception types raised by Twincher.

Every class also derives from the closest builtin exception so that code
catching `ValueError`, `RuntimeError` etc. keeps working.
'''

class TwincherError(Exception):
    '''Base class for all Twincher errors.'''
    pass

class ContractError(TwincherError, ValueError):
    '''Arguments violate a precondition (shape, range or finiteness).'''
    pass

class DomainError(TwincherError, ValueError):
    '''Argument lies outside the domain of a mathematical map.'''
    pass

class ImageMembershipError(DomainError):
    '''Observation is not in the image of the forward process.'''
    pass

class BudgetError(TwincherError, RuntimeError):
    '''Query budget exhausted.

    Args:
        used (int): Queries consumed when the error was raised.
        budget (int): Ledger budget.
        requested (int, optional): Queries the refused call asked for. Defaults to 1.

    Attributes:
        trace (RefinementTrace): Partial refinement trace, attached by `solve.refine`
            when the error interrupts a refinement. None otherwise.
    '''
    def __init__(self, used, budget, requested=1, msg=None):
        self.used = used
        self.budget = budget
        self.requested = requested
        self.trace = None
        if msg is None:
            msg = 'Query budget exhausted: %s used of %s, %s more requested.'%(used, budget, requested)
        super().__init__(msg)

class NonFiniteError(TwincherError, FloatingPointError):
    '''Forward process returned a non-finite value.'''
    pass

class DegeneracyError(TwincherError, ArithmeticError):
    '''Observation Jacobian is rank deficient.

    Args:
        sigma_min (float): Smallest singular value of the offending Jacobian.
    '''
    def __init__(self, sigma_min, msg=None):
        self.sigma_min = sigma_min
        if msg is None:
            msg = 'Jacobian is rank deficient (sigma_min = %.3g).'%sigma_min
        super().__init__(msg)

class CheckpointError(TwincherError, IOError):
    '''Base class for checkpoint loading errors.'''
    pass

class VersionMismatchError(CheckpointError):
    def __init__(self, found, expected):
        self.found = found
        self.expected = expected
        super().__init__('Checkpoint format_version %s does not match supported version %s.'%(found, expected))

class MalformedDocumentError(CheckpointError):
    pass

class DimensionMismatchError(CheckpointError):
    pass

class ConfigError(TwincherError, ValueError):
    '''Invalid run configuration.

    Args:
        key (str): Offending configuration key.
        msg (str): Description.
    '''
    def __init__(self, key, msg):
        self.key = key
        super().__init__(msg)
