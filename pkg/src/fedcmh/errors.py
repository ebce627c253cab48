"""Exception hierarchy. CLI exit codes map onto these classes."""


class FedCMHError(Exception):
    exit_code = 4


class ShapeError(FedCMHError, ValueError):
    exit_code = 4


class ConfigError(FedCMHError, ValueError):
    exit_code = 2


class DataError(FedCMHError, ValueError):
    exit_code = 3


class MalformedHeaderError(DataError):
    pass


class LengthMismatchError(DataError):
    pass


class LabelRangeError(DataError):
    pass
