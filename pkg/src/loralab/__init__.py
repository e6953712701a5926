"""Desk-scale laboratory for LoRA extraction attacks and the dual-adapter defense."""

from .errors import BudgetExhausted, ContractViolation, ProtocolError, TransportError

__version__ = "0.1.0"

__all__ = ["BudgetExhausted", "ContractViolation", "ProtocolError", "TransportError", "__version__"]
