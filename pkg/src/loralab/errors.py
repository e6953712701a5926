"""Exception types shared across the lab."""


class ContractViolation(ValueError):
    """An operation was called outside its documented preconditions."""


class BudgetExhausted(RuntimeError):
    """The oracle refused a batch because the remaining budget is too small."""

    def __init__(self, remaining: int, requested: int | None = None):
        self.remaining = int(remaining)
        self.requested = requested
        msg = f"query budget exhausted: {self.remaining} remaining"
        if requested is not None:
            msg += f", {requested} requested"
        super().__init__(msg)


class TransportError(ConnectionError):
    """The remote oracle could not be reached or dropped the connection."""


class ProtocolError(RuntimeError):
    """The remote oracle answered with something the wire format does not allow."""


class StartupError(OSError):
    """The query service could not bind its address."""
