"""Fair data trading over a toy proof-of-work ledger with a simulated enclave exchange."""

__version__ = "0.1.0"
