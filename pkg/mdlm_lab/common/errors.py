class LabError(Exception):
    """Base error for mdlm-lab."""


class DomainError(LabError):
    """A mathematical precondition does not hold (e.g. ``t`` outside ``[0, 1]``)."""


class EnumerationError(DomainError):
    """An oracle gap is longer than the brute-force enumeration bound."""


class ConfigError(LabError):
    """Invalid decoding policy, run configuration or component combination."""


class ParseError(LabError):
    """Malformed corpus, parameter, prior or trace file."""


class VersionError(ParseError):
    """File version header does not match the version this package writes."""


class DivergenceError(LabError):
    """Training loss ran away from its initial value."""
