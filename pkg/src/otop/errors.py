"""Exception hierarchy shared by every otop module."""


class OtopError(Exception):
    pass


class ArgumentError(OtopError, ValueError):
    """Invalid argument values or shapes."""


class FormatError(OtopError, ValueError):
    """Malformed on-disk container (BSQF, MSNW, graph or forest document)."""


class TruncationError(FormatError):
    """Container payload shorter than its header declares."""


class GraphError(FormatError):
    """Op-graph validation failure; ``node_id`` names the offending node."""

    def __init__(self, message, node_id=None):
        super().__init__(message)
        self.node_id = node_id


class GenerationError(OtopError, RuntimeError):
    """Synthetic scene could not satisfy its spec within the retry budget."""
