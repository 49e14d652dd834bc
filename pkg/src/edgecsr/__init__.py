"""Out-of-core edge list to distributed CSR conversion."""

__version__ = "0.1.0"
