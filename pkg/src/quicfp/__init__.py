"""Active fingerprinting of QUIC server libraries."""

__version__ = "0.1.0"
