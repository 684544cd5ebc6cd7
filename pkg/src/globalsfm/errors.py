"""Exception hierarchy.

Every error carries an ``exit_code`` so the command line front end can map
failures onto its documented process exit codes without a lookup table.
"""


class SfMError(Exception):
    exit_code = 1


class InputError(SfMError):
    """Malformed input files or configuration."""

    exit_code = 2


class NumericalError(SfMError):
    exit_code = 3


class DegenerateInput(SfMError):
    """The data does not constrain the requested quantity."""

    exit_code = 4


class ParseError(InputError):
    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}" + (f":{line}" if line is not None else "") + ": "
        super().__init__(where + message)


class IntegrityError(InputError):
    pass


class ConfigError(InputError):
    pass


class AlreadyCalibrated(InputError):
    pass


class DegenerateParameterization(DegenerateInput):
    pass


class DegenerateTranslation(DegenerateInput):
    pass


class CheiralityFailure(DegenerateInput):
    pass


class HomographyDecompositionFailure(DegenerateInput):
    pass


class InsufficientMatches(DegenerateInput):
    pass


class DegenerateConfiguration(DegenerateInput):
    pass


class DistortionSingularity(DegenerateInput):
    pass


class OutsideInvertibleRange(DegenerateInput):
    pass


class NoReadyPairs(DegenerateInput):
    pass


class HomographyDominated(DegenerateInput):
    pass


class DisconnectedGraph(DegenerateInput):
    pass


class AlignmentDegenerate(DegenerateInput):
    pass


class RetryExhausted(DegenerateInput):
    pass


class SolverFailure(NumericalError):
    pass


class NumericalFailure(NumericalError):
    def __init__(self, message, iteration=None, last_finite=None):
        super().__init__(message if iteration is None else f"{message} (iteration {iteration})")
        self.iteration = iteration
        self.last_finite = last_finite


class OverFiltering(NumericalError):
    pass


class StageError(SfMError):
    """Wraps an error raised inside a pipeline stage."""

    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 1)
