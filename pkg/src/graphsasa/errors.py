"""Exception hierarchy shared by the library and the command line."""


class GraphSASAError(Exception):
    """Base class; ``exit_code`` is what the CLI returns for it."""

    exit_code = 3


class ConfigError(GraphSASAError, ValueError):
    exit_code = 1


class ParseError(GraphSASAError, ValueError):
    exit_code = 2

    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"{line}: "
        elif where:
            where += " "
        super().__init__(where + message)


class ValidationError(GraphSASAError, ValueError):
    exit_code = 2


class CheckpointError(GraphSASAError):
    exit_code = 2


class FrozenBaseError(GraphSASAError):
    """The frozen pre-trained matrix changed under an adapter."""

    exit_code = 3


class ContractError(GraphSASAError, ValueError):
    """Shape or trace mismatch between cooperating calls."""

    exit_code = 3
