"""Exception hierarchy. The CLI maps these onto its exit-code contract."""


class GateVitError(Exception):
    pass


class ShapeError(GateVitError):
    """Operand shapes incompatible with the requested operation."""


class DomainError(GateVitError):
    """Input outside an operation's mathematical domain (e.g. log of <= 0)."""


class ConfigError(GateVitError):
    """Invalid or inconsistent configuration."""


class ContractError(GateVitError):
    """Caller violated an API contract (e.g. relaxed gates where hard required)."""


class CheckpointError(GateVitError):
    """Checkpoint file corrupt: header/payload mismatch or truncation."""


class NonFiniteError(GateVitError):
    """Training produced a non-finite value; message names the first bad tensor."""


class DataError(GateVitError):
    """Dataset could not be loaded or is malformed."""
